"""Context encoder, classifier head, and the three ways of embedding fusion."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..attention import pad_ones
from ..baselines import make_fusion
from ..lowrank import DenseWeight
from ..tensor import (
    ConfigurationError,
    Layer,
    Matrix,
    ShapeError,
    concat_cols,
    make_rng,
    softmax_rows,
    split_cols,
    tanh_backward,
)
from .config import ExperimentConfig


def _window_stack(x: Matrix, window: int) -> Matrix:
    """Row ``i`` becomes ``[x[i-k], ..., x[i], ..., x[i+k]]`` with zero rows past the ends."""
    k = window // 2
    rows, d = x.shape
    padded = np.zeros((rows + 2 * k, d))
    padded[k:k + rows] = x
    return np.concatenate([padded[o:o + rows] for o in range(window)], axis=1)


def _window_unstack(g: Matrix, window: int, d: int) -> Matrix:
    k = window // 2
    rows = g.shape[0]
    acc = np.zeros((rows + 2 * k, d))
    for o, part in enumerate(split_cols(g, [d] * window)):
        acc[o:o + rows] += part
    return acc[k:k + rows]


class ContextEncoder(Layer):
    """``tanh(window_stack(x) W + b)``: each utterance sees its neighbours."""

    def __init__(self, d_in: int, d_out: int, window: int = 3,
                 rng: np.random.Generator | None = None):
        if window < 1 or window % 2 == 0:
            raise ConfigurationError(f"window must be odd and >= 1, got {window}")
        self.d_in = d_in
        self.d_out = d_out
        self.window = window
        self.linear = DenseWeight(window * d_in, d_out, rng)
        self._cache = None

    def forward(self, x: Matrix, cache: bool = True) -> Matrix:
        if x.shape[1] != self.d_in:
            raise ShapeError(f"context encoder expects {self.d_in} columns, got {x.shape}")
        y = np.tanh(self.linear.forward(_window_stack(x, self.window), cache=cache))
        if cache:
            self._cache = y
        return y

    def backward(self, dy: Matrix) -> Matrix:
        y = self._require_cache()
        dstack = self.linear.backward(tanh_backward(y, dy))
        return _window_unstack(dstack, self.window, self.d_in)


def context_encode(feats: Matrix, window: int, weight: Matrix, bias: Matrix | None = None) -> Matrix:
    """Functional form of :class:`ContextEncoder` with explicit weights."""
    d_out = weight.shape[1]
    enc = ContextEncoder(feats.shape[1], d_out, window)
    enc.linear.weight.value[...] = weight
    enc.linear.bias.value[...] = 0.0 if bias is None else bias
    return enc.forward(feats, cache=False)


class Classifier(Layer):
    def __init__(self, d_in: int, num_classes: int, rng: np.random.Generator | None = None):
        self.linear = DenseWeight(d_in, num_classes, rng)

    def forward(self, x: Matrix, cache: bool = True) -> Matrix:
        return self.linear.forward(x, cache=cache)

    def backward(self, dlogits: Matrix) -> Matrix:
        return self.linear.backward(dlogits)


def softmax_cross_entropy(logits: Matrix, labels: np.ndarray):
    """Return ``(summed loss, dloss/dlogits, probabilities)`` for integer labels."""
    probs = softmax_rows(logits)
    rows = np.arange(len(labels))
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - shifted[rows, labels]).sum())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad, probs


class EmotionModel(Layer):
    """Utterance classifier: fusion, context encoder and linear head.

    ``early``: fuse raw modalities, encode, classify.
    ``early_residual``: as early, but add the 1-padded concatenation of the raw
    modalities to the fused features before encoding.
    ``late``: encode each modality separately, fuse, classify.
    """

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        rng = make_rng(config.seed)
        dims = config.active_dims
        way = config.embed_way
        fusion_kwargs = dict(
            rank=config.rank, lfm_rank=config.lfm_rank, out_dim=config.fusion_out_dim,
            mode=config.mode, value_source=config.value_source,
            pad_with_one=config.pad_with_one, rng=rng,
        )
        if way == "late":
            self.encoders = [ContextEncoder(d, d, config.window, rng) for d in dims]
            self.fusion = make_fusion(config.fusion, dims, **fusion_kwargs)
            head_in = self.fusion.out_dim
        else:
            self.fusion = make_fusion(config.fusion, dims, **fusion_kwargs)
            width = self.fusion.out_dim
            if way == "early_residual":
                residual_width = sum(d + 1 for d in dims)
                if width != residual_width:
                    raise ConfigurationError(
                        f"early_residual needs fused width {width} to equal the 1-padded "
                        f"concatenation width {residual_width}; use lmam (fused/intra) or selfattn "
                        f"with padding, or pick another embed way"
                    )
            hidden = width if config.hidden is None else config.hidden
            self.encoders = [ContextEncoder(width, hidden, config.window, rng)]
            head_in = hidden
        self.classifier = Classifier(head_in, config.num_classes, rng)
        self._cache = None

    @property
    def embed_way(self):
        return self.config.embed_way

    def select(self, dialogue) -> list[Matrix]:
        return dialogue.features(self.config.modalities)

    def forward(self, feats: Sequence[Matrix], cache: bool = True) -> Matrix:
        feats = list(feats)
        if self.embed_way == "late":
            encoded = [enc.forward(x, cache=cache) for enc, x in zip(self.encoders, feats)]
            h = self.fusion.forward(encoded, cache=cache)
        else:
            h = self.fusion.forward(feats, cache=cache)
            if self.embed_way == "early_residual":
                h = h + concat_cols([pad_ones(x) for x in feats])
            h = self.encoders[0].forward(h, cache=cache)
        if cache:
            self._cache = [x.shape[1] for x in feats]
        return self.classifier.forward(h, cache=cache)

    def backward(self, dlogits: Matrix) -> list[Matrix]:
        widths = self._require_cache()
        dh = self.classifier.backward(dlogits)
        if self.embed_way == "late":
            dencoded = self.fusion.backward(dh)
            return [enc.backward(g) for enc, g in zip(self.encoders, dencoded)]
        dfused = self.encoders[0].backward(dh)
        grads = self.fusion.backward(dfused)
        if self.embed_way == "early_residual":
            parts = split_cols(dfused, [w + 1 for w in widths])
            grads = [g + p[:, :-1] for g, p in zip(grads, parts)]
        return grads

    def predict(self, dialogue) -> np.ndarray:
        return self.forward(self.select(dialogue), cache=False).argmax(axis=1)

    def fusion_parameter_count(self) -> int:
        return self.fusion.fusion_parameter_count()


def assemble_model(config: ExperimentConfig) -> EmotionModel:
    return EmotionModel(config)


def gradcheck_case(suite: str, rng: np.random.Generator, rows: int):
    """Gradient-check cases for the pipeline layers (see ``lmam.gradcheck``)."""
    from ..gradcheck import LOSS_SCALE, _Case, _inputs, _randomize

    def ce_case(layer, inputs, labels):
        return _Case(
            layer, lambda xs: layer.forward(xs[0] if len(xs) == 1 else xs),
            lambda d: (lambda g: [g] if isinstance(g, np.ndarray) else g)(layer.backward(d)),
            inputs,
            lambda lg: LOSS_SCALE * softmax_cross_entropy(lg, labels)[0],
            lambda lg: LOSS_SCALE * softmax_cross_entropy(lg, labels)[1],
        )

    if suite == "encoder":
        layer = ContextEncoder(4, 3, window=3, rng=rng)
        _randomize(layer, rng)
        return _Case(layer, lambda xs: layer.forward(xs[0]), lambda d: [layer.backward(d)],
                     _inputs(rng, rows, [4]))
    if suite == "classifier":
        layer = Classifier(5, 3, rng)
        _randomize(layer, rng)
        return ce_case(layer, _inputs(rng, rows, [5]), rng.integers(0, 3, size=rows))
    if suite == "model":
        cfg = ExperimentConfig(dims=(3, 2, 2), num_classes=3, rank=2,
                               embed_way="early_residual", seed=int(rng.integers(1 << 30)))
        # default initialization: fully random weights saturate the tanh encoder
        layer = EmotionModel(cfg)
        return ce_case(layer, _inputs(rng, rows, [3, 2, 2]), rng.integers(0, 3, size=rows))
    raise KeyError(suite)
