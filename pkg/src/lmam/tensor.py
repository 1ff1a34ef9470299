"""Dense 2-D float64 kernel with hand-written backward rules.

A ``Matrix`` is a 2-D ``numpy.ndarray`` of dtype float64. Every kernel
function validates shapes and raises :class:`ShapeError` naming the
offending shapes. Backward rules take the cached forward values and the
upstream gradient and return the input gradient(s).
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf

Matrix = np.ndarray

LAYER_NORM_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer or model was configured with incompatible dimensions."""


class StateError(RuntimeError):
    """A layer was used out of order (e.g. backward before forward)."""


def as_matrix(x) -> Matrix:
    """Coerce ``x`` into a 2-D float64 array (1-D input becomes one row)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array with shape {a.shape}")
    return a


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(x: Matrix) -> Matrix:
    return np.ascontiguousarray(x.T)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return a + b


def scale(x: Matrix, c: float) -> Matrix:
    return x * float(c)


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    if not parts:
        raise ShapeError("concat_cols: need at least one matrix")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(
            "concat_cols: row counts differ, shapes "
            + ", ".join(str(p.shape) for p in parts)
        )
    return np.concatenate(parts, axis=1)


def split_cols(x: Matrix, widths: Sequence[int]) -> list[Matrix]:
    """Inverse of :func:`concat_cols`; used to route gradients back."""
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"split_cols: widths {list(widths)} do not sum to {x.shape[1]}")
    out, start = [], 0
    for w in widths:
        out.append(x[:, start:start + w])
        start += w
    return out


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def tanh_ew(x: Matrix) -> Matrix:
    return np.tanh(x)


def tanh_backward(y: Matrix, dy: Matrix) -> Matrix:
    """``y`` is the forward output ``tanh(x)``."""
    return dy * (1.0 - y * y)


def relu_ew(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def relu_backward(x: Matrix, dy: Matrix) -> Matrix:
    return dy * (x > 0.0)


def gelu_ew(x: Matrix) -> Matrix:
    # exact form x * Phi(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x: Matrix, dy: Matrix) -> Matrix:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# row-wise ops
# ---------------------------------------------------------------------------

def softmax_rows(x: Matrix) -> Matrix:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y: Matrix, dy: Matrix) -> Matrix:
    """``y`` is the forward output of :func:`softmax_rows`."""
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def layer_norm_rows(x: Matrix, gain: Matrix, bias: Matrix, eps: float = LAYER_NORM_EPS) -> Matrix:
    return layer_norm_rows_forward(x, gain, bias, eps)[0]


def layer_norm_rows_forward(x, gain, bias, eps=LAYER_NORM_EPS):
    """Return ``(y, cache)``; the cache feeds :func:`layer_norm_rows_backward`."""
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise ShapeError(
            f"layer_norm_rows: gain {gain.shape} / bias {bias.shape} must be (1, {x.shape[1]})"
        )
    if eps <= 0:
        raise ValueError("layer_norm_rows: eps must be positive")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_rows_backward(cache, dy: Matrix):
    """Return ``(dx, dgain, dbias)``."""
    xhat, inv_std, gain = cache
    dgain = (dy * xhat).sum(axis=0, keepdims=True)
    dbias = dy.sum(axis=0, keepdims=True)
    dxhat = dy * gain
    n = xhat.shape[1]
    dx = inv_std / n * (
        n * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def init_matrix(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> Matrix:
    """Uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(rows, cols))


# ---------------------------------------------------------------------------
# parameters and layers
# ---------------------------------------------------------------------------

class Parameter:
    """A trainable matrix with an accumulating gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = as_matrix(value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def accumulate(self, g: Matrix) -> None:
        self.grad += g

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"


class Layer:
    """Base for differentiable units with paired forward/backward.

    Parameters and sub-layers are discovered from instance attributes in
    definition order, so naming is deterministic. Sub-layers may also sit
    in lists.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Layer)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Layer)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                out[full] = child
            else:
                out.update(child.named_parameters(full + "."))
        return out

    def named_layers(self, prefix: str = "") -> dict[str, "Layer"]:
        out: dict[str, Layer] = {}
        for name, child in self._children():
            if isinstance(child, Layer):
                full = f"{prefix}{name}"
                out[full] = child
                out.update(child.named_layers(full + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad.fill(0.0)

    def _require_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StateError(
                f"{type(self).__name__}.backward called before a caching forward pass"
            )
        return cache
