import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lmam.baselines import (
    FUSION_METHODS,
    AddFusion,
    ConcatFusion,
    LfmFusion,
    TfnFusion,
    add_fusion,
    concat_fusion,
    fusion_parameter_count,
    lfm_fusion,
    make_fusion,
    tfn_fusion,
    tfn_parameter_count,
    tfn_tensor,
)
from lmam.gradcheck import run_suite
from lmam.tensor import ConfigurationError, ShapeError, make_rng


def cp_als(tensor, rank, rng, iters=2000):
    """Plain CP-ALS for a 3-way tensor; returns factors (A, B, C) with
    tensor[i, j, k] ~ sum_r A[i, r] B[j, r] C[k, r]."""
    A, B, C = (rng.normal(size=(n, rank)) for n in tensor.shape)
    for _ in range(iters):
        A = np.linalg.lstsq(np.einsum("jr,kr->jkr", B, C).reshape(-1, rank),
                            tensor.reshape(tensor.shape[0], -1).T, rcond=None)[0].T
        B = np.linalg.lstsq(np.einsum("ir,kr->ikr", A, C).reshape(-1, rank),
                            tensor.transpose(1, 0, 2).reshape(tensor.shape[1], -1).T, rcond=None)[0].T
        C = np.linalg.lstsq(np.einsum("ir,jr->ijr", A, B).reshape(-1, rank),
                            tensor.transpose(2, 0, 1).reshape(tensor.shape[2], -1).T, rcond=None)[0].T
    return A, B, C


class TestAdd:
    def test_identity_projection(self):
        t = make_rng(0).normal(size=(3, 2))
        np.testing.assert_array_equal(add_fusion(t, np.zeros((3, 2)), np.zeros((3, 2))), t)

    def test_equal_inputs(self):
        x = make_rng(1).normal(size=(2, 4))
        np.testing.assert_allclose(add_fusion(x, x, x), 3 * x, rtol=1e-15)

    def test_layer_matches_scalar(self):
        rng = make_rng(2)
        layer = AddFusion((2, 3, 4), width=3, rng=rng)
        for p in layer.parameters():
            p.value[...] = rng.uniform(-1, 1, p.shape)
        feats = [rng.normal(size=(2, d)) for d in (2, 3, 4)]
        expected = np.zeros((2, 3))
        for proj, x in zip(layer.projections, feats):
            expected += oracles.affine(x.tolist(), proj.weight.value.tolist(), proj.bias.value[0].tolist())
        np.testing.assert_allclose(layer.forward(feats), expected, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add_fusion(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))

    def test_width_defaults_to_text(self):
        layer = AddFusion((5, 3, 2))
        assert layer.out_dim == 5
        assert fusion_parameter_count(layer) == (5 * 5 + 5) + (3 * 5 + 5) + (2 * 5 + 5)


class TestConcat:
    def test_content(self):
        rng = make_rng(3)
        t, a, v = rng.normal(size=(2, 1)), rng.normal(size=(2, 2)), rng.normal(size=(2, 3))
        out = concat_fusion(t, a, v)
        assert out.shape == (2, 6)
        np.testing.assert_array_equal(out[:, 1:3], a)

    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            concat_fusion(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((2, 1)))

    def test_zero_parameters(self):
        assert fusion_parameter_count(ConcatFusion((4, 5, 6))) == 0


class TestTfn:
    def test_count_from_shape_matches_layer(self):
        layer = make_fusion("tfn", (3, 2, 4))
        assert tfn_parameter_count((3, 2, 4), 9) == layer.fusion_parameter_count() == 60 * 9 + 9

    def test_oversized_map_refused(self):
        assert tfn_parameter_count((100, 100, 100), 300) == 101 ** 3 * 300 + 300
        with pytest.raises(ConfigurationError, match="parameters"):
            make_fusion("tfn", (100, 100, 100))

    def test_zero_inputs_single_corner(self):
        z = tfn_fusion(np.zeros(2), np.zeros(3), np.zeros(1))
        assert z.shape == (3 * 4 * 2,)
        assert np.count_nonzero(z) == 1 and z[-1] == 1.0

    def test_hand_enumeration(self):
        # t-major order, pad slot last: (i, j, k) -> i*4 + j*2 + k
        assert tfn_fusion([2.0], [3.0], [4.0]).tolist() == [24, 6, 8, 2, 12, 3, 4, 1]

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
    def test_length_law(self, dt, da, dv):
        z = tfn_tensor([np.ones((2, dt)), np.ones((2, da)), np.ones((2, dv))])
        assert z.shape == (2, (dt + 1) * (da + 1) * (dv + 1))

    def test_contains_raw_slices(self):
        rng = make_rng(4)
        t, a, v = rng.normal(size=3), rng.normal(size=2), rng.normal(size=4)
        z = tfn_fusion(t, a, v).reshape(4, 3, 5)
        np.testing.assert_array_equal(z[:3, -1, -1], t)
        np.testing.assert_array_equal(z[-1, :2, -1], a)
        np.testing.assert_array_equal(z[-1, -1, :4], v)

    def test_parameter_count(self):
        assert fusion_parameter_count(TfnFusion((3, 3, 3), 8)) == 520


class TestLfm:
    def test_zero_factor_contributes_nothing(self):
        rng = make_rng(5)
        layer = LfmFusion((2, 2, 2), 3, rank=2, rng=rng)
        feats = [rng.normal(size=(4, 2)) for _ in range(3)]
        full = layer.forward(feats, cache=False)
        layer.factor(1)[1] = 0.0
        only_first = layer.forward(feats, cache=False)
        padded = [np.hstack([x, np.ones((4, 1))]) for x in feats]
        expected = np.prod([x @ layer.factor(m)[0] for m, x in enumerate(padded)], axis=0)
        np.testing.assert_allclose(only_first, expected, atol=1e-12)
        assert not np.allclose(full, only_first)

    def test_row_function_matches_layer(self):
        rng = make_rng(6)
        layer = LfmFusion((1, 2, 3), 2, rank=3, rng=rng)
        t, a, v = rng.normal(size=1), rng.normal(size=2), rng.normal(size=3)
        row = lfm_fusion(layer, t, a, v)
        manual = np.zeros(2)
        for r in range(3):
            prod = np.ones(2)
            for m, x in enumerate((t, a, v)):
                prod = prod * (np.append(x, 1.0) @ layer.factor(m)[r])
            manual += prod
        np.testing.assert_allclose(row, manual, atol=1e-12)

    def test_parameter_count(self):
        layer = LfmFusion((3, 4, 5), 6, rank=4)
        assert fusion_parameter_count(layer) == 4 * 6 * (4 + 5 + 6) == layer.num_parameters()

    def test_fit_reproduces_tfn_on_toy(self):
        rng = make_rng(7)
        out_dim = 2
        tfn = TfnFusion((1, 1, 1), out_dim, rng)
        tfn.linear.bias.value[...] = rng.uniform(-1, 1, (1, out_dim))
        lfm = LfmFusion((1, 1, 1), out_dim, rank=4, rng=rng)
        for o in range(out_dim):
            target = tfn.linear.weight.value[:, o].reshape(2, 2, 2).copy()
            target[1, 1, 1] += tfn.linear.bias.value[0, o]  # bias rides on the all-pad corner
            factors = cp_als(target, 4, make_rng(100 + o))
            for m, f in enumerate(factors):
                lfm.factor(m)[:, :, o] = f.T
        feats = [rng.uniform(-2, 2, (10, 1)) for _ in range(3)]
        np.testing.assert_allclose(lfm.forward(feats, cache=False), tfn.forward(feats, cache=False),
                                   rtol=0, atol=1e-6)

    def test_bad_rank(self):
        with pytest.raises(ConfigurationError):
            LfmFusion((1, 1, 1), 2, rank=0)


class TestFactory:
    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(FUSION_METHODS), st.lists(st.integers(1, 6), min_size=3, max_size=3),
           st.integers(1, 4))
    def test_shape_contract(self, method, dims, rows):
        layer = make_fusion(method, dims, rank=1, lfm_rank=2)
        out = layer.forward([np.ones((rows, d)) for d in dims], cache=False)
        assert out.shape == (rows, layer.out_dim)

    def test_lmam_count(self):
        assert fusion_parameter_count(make_fusion("lmam", (100, 100, 100), rank=45)) == 27573

    def test_selfattn_count(self):
        assert fusion_parameter_count(make_fusion("selfattn", (100, 100, 100))) == 3 * (303 * 303 + 303)

    def test_lmam_below_third_of_selfattn(self):
        lmam = fusion_parameter_count(make_fusion("lmam", (16, 16, 16), rank=20))
        sa = fusion_parameter_count(make_fusion("selfattn", (16, 16, 16)))
        assert 3 * lmam < sa

    def test_unknown(self):
        with pytest.raises(ConfigurationError, match="unknown fusion"):
            make_fusion("sum", (1, 1, 1))


@pytest.mark.parametrize("suite", ["tfn", "lfm", "add", "concat", "selfattn-fusion"])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_gradients(suite, seed):
    for result in run_suite(suite, seed):
        assert result.passed, result
