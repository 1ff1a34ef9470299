import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmam.gradcheck import run_suite
from lmam.pipeline import (
    ExperimentConfig,
    GeneratorSpec,
    ValidationError,
    assemble_model,
    compute_metrics,
    confusion_matrix,
    context_encode,
    evaluate,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    metrics_from_confusion,
    save_checkpoint,
    save_dataset,
    train,
)
from lmam.pipeline.data import markov_labels, split_heldout
from lmam.pipeline.train import DivergenceError, predict_all
from lmam.tensor import ConfigurationError, make_rng


def small_dataset(n_train=10, seed=0, **kw):
    spec = GeneratorSpec(dims=(4, 3, 2), n_train=n_train, n_val=4, n_test=6,
                         min_utterances=3, max_utterances=5, interaction_dim=2, seed=seed, **kw)
    return generate_synthetic(spec)


def small_config(**kw):
    base = dict(dims=(4, 3, 2), rank=3, epochs=3, batch_size=4, lr=0.01)
    base.update(kw)
    return ExperimentConfig(**base)


def f1_oracle(cm):
    """Per-class F1 and support-weighted mean with explicit loops."""
    c = len(cm)
    total = sum(sum(row) for row in cm)
    f1s, weighted = [], 0.0
    for k in range(c):
        tp = cm[k][k]
        fn = sum(cm[k]) - tp
        fp = sum(cm[r][k] for r in range(c)) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        f1s.append(f1)
        weighted += sum(cm[k]) / total * f1
    return f1s, weighted


class TestMetrics:
    def test_perfect(self):
        m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert m.accuracy == 1.0 and m.weighted_f1 == 1.0

    def test_hand_two_class(self):
        m = metrics_from_confusion(np.array([[2, 1], [1, 2]]))
        assert m.accuracy == 4 / 6
        assert m.f1 == [2 / 3, 2 / 3]
        assert m.weighted_f1 == 2 / 3

    def test_all_one_class_predictor(self):
        # supports 5 / 1; always predicting class 0 gives F1 = 10/11 and 0
        m = compute_metrics([0, 0, 0, 0, 0, 1], [0] * 6, 2)
        assert m.accuracy == 5 / 6
        assert m.f1[1] == 0.0
        assert m.weighted_f1 == pytest.approx(5 / 6 * 10 / 11, abs=1e-15)
        assert m.weighted_f1 < m.accuracy

    def test_confusion_rows_are_supports(self):
        cm = confusion_matrix([0, 0, 1, 2, 2, 2], [1, 0, 1, 0, 2, 2], 3)
        assert cm.sum(axis=1).tolist() == [2, 1, 3]
        assert cm[0, 1] == 1 and cm[2, 0] == 1

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            compute_metrics([], [], 3)

    def test_thousand_random_confusions(self):
        rng = make_rng(2024)
        for _ in range(1000):
            c = int(rng.integers(2, 7))
            cm = rng.integers(0, 20, size=(c, c))
            cm[int(rng.integers(c))] += 1  # never empty
            m = metrics_from_confusion(cm)
            f1s, weighted = f1_oracle(cm.tolist())
            np.testing.assert_allclose(m.f1, f1s, rtol=0, atol=1e-15)
            support = cm.sum(axis=1)
            assert m.weighted_f1 == pytest.approx(float(np.dot(support, m.f1) / support.sum()), abs=1e-15)
            assert m.weighted_f1 == pytest.approx(weighted, abs=1e-14)

    def test_dict_round_trip(self):
        m = compute_metrics([0, 1, 1], [0, 1, 0], 2)
        assert type(m).from_dict(json.loads(json.dumps(m.to_dict()))) == m


class TestGenerator:
    def test_deterministic(self):
        a, b = small_dataset(seed=3), small_dataset(seed=3)
        for x, y in zip(a.train, b.train):
            np.testing.assert_array_equal(x.text, y.text)
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_split_sizes_and_ids(self):
        ds = small_dataset()
        assert (len(ds.train), len(ds.val), len(ds.test)) == (10, 4, 6)
        assert ds.train[0].id == "train-0000"
        assert ds.train[0].dims == (4, 3, 2)

    def test_noiseless_text_is_linearly_separable(self):
        ds = small_dataset(n_train=20, sigma=0.0, beta=0.0, gamma=(1.0, 0.0, 0.0))
        x = np.concatenate([d.text for d in ds.train])
        y = np.concatenate([d.labels for d in ds.train])
        design = np.hstack([x, np.ones((len(x), 1))])
        w = np.linalg.lstsq(design, np.eye(3)[y], rcond=None)[0]
        assert np.mean((design @ w).argmax(axis=1) == y) == 1.0

    def test_iid_labels_when_rho_zero(self):
        labels = markov_labels(make_rng(0), 10_000, 0.0, np.ones(3) / 3)
        counts = np.zeros((3, 3))
        np.add.at(counts, (labels[:-1], labels[1:]), 1)
        trans = counts / counts.sum(axis=1, keepdims=True)
        # about 3300 draws per row: binomial std ~ 0.008
        assert np.abs(trans - 1 / 3).max() < 0.04

    def test_inertia(self):
        labels = markov_labels(make_rng(1), 10_000, 0.8, np.ones(3) / 3)
        stay = np.mean(labels[1:] == labels[:-1])
        assert stay == pytest.approx(0.8 + 0.2 / 3, abs=0.02)

    def test_interaction_invisible_to_single_modality(self):
        # with no prototype signal, per-class means of each modality coincide
        spec = GeneratorSpec(dims=(4, 4, 4), n_train=400, n_val=0, n_test=1, gamma=(0, 0, 0),
                             sigma=0.1, interaction_dim=2, seed=5)
        ds = generate_synthetic(spec)
        for mod in ("text", "audio", "video"):
            x = np.concatenate([getattr(d, mod) for d in ds.train])
            y = np.concatenate([d.labels for d in ds.train])
            means = np.array([x[y == c].mean(axis=0) for c in range(3)])
            assert np.abs(means).max() < 0.2

    def test_validation_lists_every_violation(self):
        with pytest.raises(ValidationError) as exc:
            GeneratorSpec(rho=1.0, sigma=-1.0, num_classes=1).validate()
        assert len(exc.value.errors) == 3
        assert any("rho" in e for e in exc.value.errors)

    def test_files_byte_identical(self, tmp_path):
        save_dataset(small_dataset(seed=4), tmp_path / "a")
        save_dataset(small_dataset(seed=4), tmp_path / "b")
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_round_trip_exact(self, tmp_path):
        ds = small_dataset(seed=6)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        for x, y in zip(ds.test, back.test):
            np.testing.assert_array_equal(x.video, y.video)
            np.testing.assert_array_equal(x.labels, y.labels)
        assert back.num_classes == ds.num_classes

    def test_missing_val_carved_from_test(self, tmp_path):
        ds = small_dataset(seed=7)
        del ds.splits["val"]
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        test, val = split_heldout(ds.test)
        assert [d.id for d in back.test] == [d.id for d in test]
        assert [d.id for d in back.val] == [d.id for d in val]
        assert len(back.test) + len(back.val) == 6


class TestContextEncode:
    def test_window_one_identity(self):
        x = make_rng(0).normal(size=(3, 2))
        np.testing.assert_allclose(context_encode(x, 1, np.eye(2)), np.tanh(x), atol=1e-15)

    def test_boundary_zero_padding(self):
        x = np.array([[1.0], [2.0]])
        w = np.array([[0.5], [1.0], [2.0]])  # weights for previous, self, next
        expected = [[math.tanh(0.5 * 0 + 1.0 * 1 + 2.0 * 2)], [math.tanh(0.5 * 1 + 1.0 * 2 + 2.0 * 0)]]
        np.testing.assert_allclose(context_encode(x, 3, w), expected, atol=1e-15)

    def test_rows_preserved(self):
        assert context_encode(np.zeros((7, 3)), 5, np.ones((15, 4))).shape == (7, 4)

    def test_even_window(self):
        with pytest.raises(ConfigurationError):
            context_encode(np.zeros((2, 2)), 2, np.ones((4, 2)))


class TestAssemble:
    def test_early_concat_is_plain_composition(self):
        model = assemble_model(small_config(fusion="concat"))
        d = small_dataset().train[0]
        feats = model.select(d)
        h = model.encoders[0].forward(np.concatenate(feats, axis=1), cache=False)
        np.testing.assert_array_equal(model.forward(feats, cache=False), model.classifier.forward(h, cache=False))

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=3, max_size=3))
    def test_early_residual_width_law(self, dims):
        model = assemble_model(ExperimentConfig(dims=tuple(dims), rank=1, embed_way="early_residual"))
        assert model.encoders[0].d_in == sum(dims) + 3

    def test_early_residual_rejects_concat(self):
        with pytest.raises(ConfigurationError):
            assemble_model(small_config(fusion="concat", embed_way="early_residual"))

    def test_late_single_modality(self):
        model = assemble_model(small_config(embed_way="late", modalities=("text",), rank=2))
        assert len(model.encoders) == 1 and model.fusion.out_dim == 5
        out = model.forward([np.zeros((3, 4))], cache=False)
        assert out.shape == (3, 3)

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            assemble_model(small_config(batch_size=0))


class TestTrain:
    def test_zero_lr_keeps_parameters(self):
        cfg = small_config(lr=0.0, epochs=2)
        model = assemble_model(cfg)
        before = [p.value.copy() for p in model.parameters()]
        train(model, small_dataset().train, cfg)
        for b, p in zip(before, model.parameters()):
            np.testing.assert_array_equal(b, p.value)

    def test_loss_decreases_early(self):
        cfg = ExperimentConfig(dims=(4, 3, 2), rank=3, epochs=5, batch_size=4)
        _, log = train(assemble_model(cfg), small_dataset().train, cfg)
        losses = log.losses
        assert losses[-1] < losses[0]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        cfg = small_config()
        ds = small_dataset()
        logs = [train(assemble_model(cfg), ds.train, cfg, val=ds.val)[1].to_dict(include_time=False)
                for _ in range(2)]
        assert logs[0] == logs[1]

    def test_sgd_runs(self):
        cfg = small_config(optimizer="sgd", lr=0.1)
        _, log = train(assemble_model(cfg), small_dataset().train, cfg)
        assert all(math.isfinite(x) for x in log.losses)

    def test_divergence_names_epoch_and_lr(self):
        cfg = small_config(lr=0.5)
        model = assemble_model(cfg)
        model.classifier.linear.bias.value[0, 0] = np.nan
        with pytest.raises(DivergenceError, match="epoch 1.*learning rate 0.5"):
            train(model, small_dataset().train, cfg)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(assemble_model(small_config()), [], small_config())


class TestEvaluate:
    def test_empty_split(self):
        with pytest.raises(ValueError):
            evaluate(assemble_model(small_config()), [])

    def test_workers_do_not_change_order(self):
        model = assemble_model(small_config())
        split = small_dataset().test
        serial = predict_all(model, split, 1)
        threaded = predict_all(model, split, 3)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a, b)

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = small_config()
        ds = small_dataset()
        model, _ = train(assemble_model(cfg), ds.train, cfg)
        m1 = evaluate(model, ds.test)
        path = save_checkpoint(model, tmp_path / "ckpt.json", cfg.epochs, m1.to_dict())
        loaded, ckpt = load_checkpoint(path)
        assert evaluate(loaded, ds.test) == m1
        assert ckpt["metrics"] == m1.to_dict()
        assert set(ckpt["lowrank"]) == {"fusion.layers.0.query"}

    def test_checkpoint_dense_variant(self, tmp_path):
        cfg = small_config(rank=None, embed_way="late")
        model = assemble_model(cfg)
        loaded, ckpt = load_checkpoint(save_checkpoint(model, tmp_path / "c.json", 0))
        assert ckpt["lowrank"] == {}
        for p, q in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(p.value, q.value)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = small_config(modalities=("text", "video"), rank=None)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_file(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.from_dict({"learning_rate": 1.0})


@pytest.mark.parametrize("suite", ["encoder", "classifier", "model"])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_gradients(suite, seed):
    for result in run_suite(suite, seed):
        assert result.passed, result
