"""Central finite-difference checks for every layer's backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import LmamModule, MatchingAttentionLayer, SelfAttentionLayer
from .baselines import AddFusion, ConcatFusion, LfmFusion, SelfAttnFusion, TfnFusion
from .lowrank import DenseWeight, LowRankWeight
from .tensor import (
    gelu_backward,
    gelu_ew,
    layer_norm_rows_backward,
    layer_norm_rows_forward,
    make_rng,
    relu_backward,
    softmax_rows,
    softmax_rows_backward,
    tanh_backward,
)

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
# Scale of the random output projection. Relative errors of non-zero
# gradients do not depend on it; it keeps central-difference roundoff under
# the 1e-8 relative-error floor so identically-zero gradients (e.g. the key
# bias of self-attention) are checked as well.
LOSS_SCALE = 1e-4


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numerical_gradient(loss: Callable[[], float], x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        old = flat[idx]
        flat[idx] = old + eps
        plus = loss()
        flat[idx] = old - eps
        minus = loss()
        flat[idx] = old
        gflat[idx] = (plus - minus) / (2.0 * eps)
    return grad


@dataclass
class GroupResult:
    suite: str
    group: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


class _Case:
    """A layer plus how to call it. ``forward(inputs) -> out`` and
    ``backward(dout) -> list of input grads``; ``scalar`` maps the output to
    the loss and ``dscalar`` gives its gradient (default: random projection)."""

    def __init__(self, layer, forward, backward, inputs, scalar=None, dscalar=None):
        self.layer = layer
        self.forward = forward
        self.backward = backward
        self.inputs = inputs
        self.scalar = scalar
        self.dscalar = dscalar


def check_case(name: str, case: _Case, rng: np.random.Generator,
               eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL) -> list[GroupResult]:
    out = case.forward(case.inputs)
    if case.scalar is None:
        proj = LOSS_SCALE * rng.uniform(-1.0, 1.0, size=out.shape)

        def scalar(o):
            return float((o * proj).sum())

        def dscalar(o):
            return proj
    else:
        scalar, dscalar = case.scalar, case.dscalar

    def loss():
        return scalar(case.forward(case.inputs))

    layer = case.layer
    params = layer.named_parameters() if layer is not None else {}
    if layer is not None:
        layer.zero_grad()
    out = case.forward(case.inputs)
    input_grads = case.backward(dscalar(out))

    results = []
    for pname, p in params.items():
        num = numerical_gradient(loss, p.value, eps)
        err = float(relative_error(p.grad, num).max()) if num.size else 0.0
        results.append(GroupResult(name, pname, err, tol))
    for i, (x, g) in enumerate(zip(case.inputs, input_grads)):
        num = numerical_gradient(loss, x, eps)
        results.append(GroupResult(name, f"input{i}", float(relative_error(g, num).max()), tol))
    return results


def _randomize(layer, rng):
    for p in layer.parameters():
        p.value[...] = rng.uniform(-1.0, 1.0, size=p.shape)


def _inputs(rng, rows, dims):
    return [rng.uniform(-2.0, 2.0, size=(rows, d)) for d in dims]


def _fusion_case(layer, inputs):
    return _Case(layer, lambda xs: layer.forward(xs), layer.backward, inputs)


class _Functional:
    """Stand-in 'layer' for parameter-free kernels."""

    def named_parameters(self):
        return {}

    def zero_grad(self):
        pass


def _kernel_case(rng):
    # tanh -> softmax -> gelu -> layer_norm chain on one input
    gain = rng.uniform(0.5, 1.5, size=(1, 5))
    bias = rng.uniform(-1, 1, size=(1, 5))
    state = {}

    def forward(xs):
        t = np.tanh(xs[0])
        s = softmax_rows(t * 3.0)
        g = gelu_ew(s * 4.0 - 1.0 + xs[0])
        y, cache = layer_norm_rows_forward(g, gain, bias)
        state.update(t=t, s=s, gin=s * 4.0 - 1.0 + xs[0], cache=cache, y=y)
        return np.maximum(y, 0.0) + 0.5 * y

    def backward(dy):
        dy = relu_backward(state["y"], dy) + 0.5 * dy
        dg, _, _ = layer_norm_rows_backward(state["cache"], dy)
        dgin = gelu_backward(state["gin"], dg)
        ds = softmax_rows_backward(state["s"], dgin * 4.0)
        dx = tanh_backward(state["t"], ds * 3.0) + dgin
        return [dx]

    return _Case(_Functional(), forward, backward, _inputs(rng, 4, [5]))


def _build(suite: str, rng: np.random.Generator) -> _Case:
    rows = int(rng.integers(2, 6))
    if suite == "kernel":
        return _kernel_case(rng)
    if suite == "dense":
        layer = DenseWeight(5, 4, rng)
        _randomize(layer, rng)
        return _Case(layer, lambda xs: layer.forward(xs[0]), lambda d: [layer.backward(d)],
                     _inputs(rng, rows, [5]))
    if suite == "lowrank":
        layer = LowRankWeight(6, 5, 3, rng)
        _randomize(layer, rng)
        return _Case(layer, lambda xs: layer.forward(xs[0]), lambda d: [layer.backward(d)],
                     _inputs(rng, rows, [6]))
    if suite.startswith("matching-"):
        value_source = suite.split("-", 1)[1].replace("-", "_")
        layer = MatchingAttentionLayer(5, 6, rank=3, value_source=value_source, rng=rng)
        _randomize(layer, rng)
        return _Case(layer, lambda xs: layer.forward(xs[0], xs[1]),
                     lambda d: list(layer.backward(d)), _inputs(rng, rows, [5, 6]))
    if suite.startswith("lmam-"):
        mode = suite.split("-")[1]
        value_source = "matched_features" if "matched-features" in suite else "query_rows"
        dims = [3, 2, 4]
        rank = None if suite.endswith("-dense") else 2
        layer = LmamModule(dims, rank=rank, mode=mode, value_source=value_source, rng=rng)
        _randomize(layer, rng)
        return _fusion_case(layer, _inputs(rng, rows, dims))
    if suite == "selfattn":
        layer = SelfAttentionLayer(5, 4, rng)
        _randomize(layer, rng)
        return _Case(layer, lambda xs: layer.forward(xs[0]), lambda d: [layer.backward(d)],
                     _inputs(rng, rows, [5]))
    if suite == "selfattn-fusion":
        layer = SelfAttnFusion([3, 2, 2], rng)
        _randomize(layer, rng)
        return _fusion_case(layer, _inputs(rng, rows, [3, 2, 2]))
    if suite == "tfn":
        layer = TfnFusion([3, 2, 2], 4, rng)
        _randomize(layer, rng)
        return _fusion_case(layer, _inputs(rng, rows, [3, 2, 2]))
    if suite == "lfm":
        layer = LfmFusion([3, 2, 4], 5, 3, rng)
        _randomize(layer, rng)
        return _fusion_case(layer, _inputs(rng, rows, [3, 2, 4]))
    if suite == "add":
        layer = AddFusion([3, 2, 4], 5, rng)
        _randomize(layer, rng)
        return _fusion_case(layer, _inputs(rng, rows, [3, 2, 4]))
    if suite == "concat":
        layer = ConcatFusion([3, 2, 4])
        return _fusion_case(layer, _inputs(rng, rows, [3, 2, 4]))
    if suite in ("encoder", "classifier", "model"):
        from .pipeline import model as pm
        return pm.gradcheck_case(suite, rng, rows)
    raise KeyError(suite)


GRAD_SUITES = (
    "kernel",
    "dense",
    "lowrank",
    "matching-query-rows",
    "matching-matched-features",
    "lmam-intra",
    "lmam-cross",
    "lmam-fused",
    "lmam-intra-matched-features",
    "lmam-cross-matched-features",
    "lmam-fused-matched-features",
    "lmam-fused-dense",
    "selfattn",
    "selfattn-fusion",
    "tfn",
    "lfm",
    "add",
    "concat",
    "encoder",
    "classifier",
    "model",
)


def run_suite(suite: str, seed: int = 0, tol: float = DEFAULT_TOL,
              eps: float = DEFAULT_EPS) -> list[GroupResult]:
    if suite not in GRAD_SUITES:
        raise KeyError(f"unknown gradient-check module {suite!r}; choose from {', '.join(GRAD_SUITES)}")
    rng = make_rng(seed)
    case = _build(suite, rng)
    return check_case(suite, case, rng, eps=eps, tol=tol)
