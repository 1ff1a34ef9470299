"""Comparison fusion methods sharing the LMAM module's fusion contract.

Every fusion layer takes a list of ``L x d_m`` modality matrices and returns an
``L x out_dim`` matrix, exposes ``backward(dout) -> list of input grads``,
``fusion_parameter_count()`` and ``forward_macs(rows)``.

Parameter counts per method (``d_m`` raw modality widths, ``W = sum(d_m + 1)``):

=========  ==============================================================
add        ``sum(d_m * w + w)``  (per-modality projection to width ``w``)
concat     ``0``
tfn        ``out * prod(d_m + 1) + out``
lfm        ``rank * sum(out * (d_m + 1))``
lmam       query projection(s) only, e.g. fused ``r * 2W + W``
selfattn   ``3 * (W * W + W)``
=========  ==============================================================
"""

from __future__ import annotations

import string
from functools import reduce
from typing import Sequence

import numpy as np

from .attention import LmamModule, Mode, SelfAttentionLayer, ValueSource, pad_ones
from .lowrank import DenseWeight, parameter_count_dense
from .tensor import (
    ConfigurationError,
    Layer,
    Matrix,
    Parameter,
    ShapeError,
    concat_cols,
    gelu_backward,
    gelu_ew,
    init_matrix,
    make_rng,
    split_cols,
)

FUSION_METHODS = ("add", "concat", "tfn", "lfm", "lmam", "selfattn")
# largest TFN map we are willing to allocate (about 400 MB of float64)
TFN_MAX_PARAMS = 50_000_000


def _check_rows(feats, dims):
    if len(feats) != len(dims):
        raise ShapeError(f"expected {len(dims)} modalities, got {len(feats)}")
    rows = {f.shape[0] for f in feats}
    if len(rows) != 1:
        raise ShapeError("modalities disagree on row count: " + ", ".join(str(f.shape) for f in feats))
    for f, d in zip(feats, dims):
        if f.shape[1] != d:
            raise ShapeError(f"modality width {f.shape[1]} does not match configured {d}")


class AddFusion(Layer):
    """Project each modality to a shared width, then sum."""

    method = "add"

    def __init__(self, dims: Sequence[int], width: int | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else make_rng(0)
        self.in_dims = tuple(dims)
        self.out_dim = self.in_dims[0] if width is None else width
        self.projections = [DenseWeight(d, self.out_dim, rng) for d in self.in_dims]
        self._cache = None

    def forward(self, feats, cache=True):
        _check_rows(feats, self.in_dims)
        out = sum(p.forward(f, cache=cache) for p, f in zip(self.projections, feats))
        if cache:
            self._cache = True
        return out

    def backward(self, dout):
        self._require_cache()
        return [p.backward(dout) for p in self.projections]

    def fusion_parameter_count(self) -> int:
        return sum(parameter_count_dense(d, self.out_dim) for d in self.in_dims)

    def forward_macs(self, rows):
        return sum(p.forward_macs(rows) for p in self.projections)


def add_fusion(t: Matrix, a: Matrix, v: Matrix) -> Matrix:
    """Elementwise sum of already-projected, equally shaped modalities."""
    if not (t.shape == a.shape == v.shape):
        raise ShapeError(f"add_fusion: shapes differ, {t.shape}, {a.shape}, {v.shape}")
    return t + a + v


class ConcatFusion(Layer):
    method = "concat"

    def __init__(self, dims: Sequence[int], rng=None):
        self.in_dims = tuple(dims)
        self.out_dim = sum(self.in_dims)
        self._cache = None

    def forward(self, feats, cache=True):
        _check_rows(feats, self.in_dims)
        if cache:
            self._cache = True
        return concat_cols(list(feats))

    def backward(self, dout):
        self._require_cache()
        return [g.copy() for g in split_cols(dout, self.in_dims)]

    def fusion_parameter_count(self) -> int:
        return 0

    def forward_macs(self, rows):
        return 0


def concat_fusion(t: Matrix, a: Matrix, v: Matrix) -> Matrix:
    return concat_cols([t, a, v])


# ---------------------------------------------------------------------------
# tensor fusion
# ---------------------------------------------------------------------------

def tfn_tensor(feats: Sequence[Matrix]) -> Matrix:
    """Row-wise flattened outer product of 1-padded modality vectors.

    Flat index order is first-modality-major: for three modalities entry
    ``(i, j, k)`` lands at ``i * (D_a * D_v) + j * D_v + k`` where each padded
    vector carries its constant 1 in the last slot.
    """
    padded = [pad_ones(f) for f in feats]
    rows = padded[0].shape[0]
    return reduce(lambda z, x: (z[:, :, None] * x[:, None, :]).reshape(rows, -1), padded)


def tfn_fusion(t_row, a_row, v_row) -> np.ndarray:
    """Flattened ``(t+1) x (a+1) x (v+1)`` outer product for one utterance."""
    rows = [np.asarray(x, dtype=np.float64).reshape(1, -1) for x in (t_row, a_row, v_row)]
    return tfn_tensor(rows)[0]


def tfn_parameter_count(dims: Sequence[int], out_dim: int) -> int:
    return parameter_count_dense(int(np.prod([d + 1 for d in dims])), out_dim)


class TfnFusion(Layer):
    """3-way (k-way) outer product of 1-padded vectors followed by a dense map."""

    method = "tfn"

    def __init__(self, dims: Sequence[int], out_dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else make_rng(0)
        self.in_dims = tuple(dims)
        self.out_dim = out_dim
        self.tensor_dim = int(np.prod([d + 1 for d in self.in_dims]))
        count = tfn_parameter_count(self.in_dims, out_dim)
        if count > TFN_MAX_PARAMS:
            raise ConfigurationError(
                f"TFN map for dims {self.in_dims} needs {count} parameters (limit {TFN_MAX_PARAMS})")
        self.linear = DenseWeight(self.tensor_dim, out_dim, rng)
        self._cache = None

    def forward(self, feats, cache=True):
        _check_rows(feats, self.in_dims)
        z = tfn_tensor(feats)
        if cache:
            self._cache = [pad_ones(f) for f in feats]
        return self.linear.forward(z, cache=cache)

    def backward(self, dout):
        padded = self._require_cache()
        dz = self.linear.backward(dout)
        k = len(padded)
        rows = dz.shape[0]
        dz = dz.reshape((rows,) + tuple(p.shape[1] for p in padded))
        letters = string.ascii_lowercase[1:k + 1]
        grads = []
        for j in range(k):
            operands = [dz] + [padded[o] for o in range(k) if o != j]
            subs = ["a" + letters] + ["a" + letters[o] for o in range(k) if o != j]
            g = np.einsum(",".join(subs) + "->a" + letters[j], *operands)
            grads.append(g[:, :-1])
        return grads

    def fusion_parameter_count(self) -> int:
        return tfn_parameter_count(self.in_dims, self.out_dim)

    def forward_macs(self, rows):
        return rows * self.tensor_dim * (1 + self.out_dim)


# ---------------------------------------------------------------------------
# low-rank multimodal fusion
# ---------------------------------------------------------------------------

class LfmFusion(Layer):
    """``h = sum_j prod_m (x_m + 1) W_m^(j)``: the rank-factorized TFN map.

    ``factors[m]`` has shape ``rank x (d_m + 1) x out``; stored flattened as a
    ``rank * (d_m + 1) x out`` matrix so it fits the 2-D parameter carrier.
    """

    method = "lfm"

    def __init__(self, dims: Sequence[int], out_dim: int, rank: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else make_rng(0)
        if rank < 1:
            raise ConfigurationError(f"LFM rank must be positive, got {rank}")
        self.in_dims = tuple(dims)
        self.out_dim = out_dim
        self.rank = rank
        self.factors = [
            Parameter(init_matrix(rng, rank * (d + 1), out_dim, d + 1)) for d in self.in_dims
        ]
        self._cache = None

    def factor(self, m: int) -> np.ndarray:
        d = self.in_dims[m] + 1
        return self.factors[m].value.reshape(self.rank, d, self.out_dim)

    def forward(self, feats, cache=True):
        _check_rows(feats, self.in_dims)
        padded = [pad_ones(f) for f in feats]
        # per modality: rank x L x out
        proj = [np.einsum("ld,rdo->rlo", x, self.factor(m)) for m, x in enumerate(padded)]
        prod = reduce(np.multiply, proj)
        if cache:
            self._cache = (padded, proj)
        return prod.sum(axis=0)

    def backward(self, dout):
        padded, proj = self._require_cache()
        grads = []
        for m, x in enumerate(padded):
            others = [p for o, p in enumerate(proj) if o != m]
            dproj = dout[None, :, :] * (reduce(np.multiply, others) if others else 1.0)
            dfac = np.einsum("ld,rlo->rdo", x, dproj)
            self.factors[m].accumulate(dfac.reshape(self.factors[m].shape))
            dx = np.einsum("rlo,rdo->ld", dproj, self.factor(m))
            grads.append(dx[:, :-1])
        return grads

    def fusion_parameter_count(self) -> int:
        return self.rank * sum(self.out_dim * (d + 1) for d in self.in_dims)

    def forward_macs(self, rows):
        return rows * self.rank * self.out_dim * (sum(d + 1 for d in self.in_dims) + len(self.in_dims))


def lfm_fusion(layer: LfmFusion, t_row, a_row, v_row) -> np.ndarray:
    rows = [np.asarray(x, dtype=np.float64).reshape(1, -1) for x in (t_row, a_row, v_row)]
    return layer.forward(rows, cache=False)[0]


# ---------------------------------------------------------------------------
# self-attention fusion
# ---------------------------------------------------------------------------

class SelfAttnFusion(Layer):
    """Self-attention over the 1-padded concatenation, with the same GELU
    residual the LMAM fused mode uses."""

    method = "selfattn"

    def __init__(self, dims: Sequence[int], rng: np.random.Generator | None = None,
                 pad_with_one: bool = True):
        self.in_dims = tuple(dims)
        self.pad_with_one = pad_with_one
        self._widths = tuple(d + (1 if pad_with_one else 0) for d in self.in_dims)
        self.out_dim = sum(self._widths)
        self.attention = SelfAttentionLayer(self.out_dim, self.out_dim, rng)
        self._cache = None

    def forward(self, feats, cache=True):
        _check_rows(feats, self.in_dims)
        f = concat_cols([pad_ones(x) if self.pad_with_one else x for x in feats])
        if cache:
            self._cache = f
        return self.attention.forward(f, cache=cache) + gelu_ew(f)

    def backward(self, dout):
        f = self._require_cache()
        df = self.attention.backward(dout) + gelu_backward(f, dout)
        return [g[:, :d] for g, d in zip(split_cols(df, self._widths), self.in_dims)]

    def fusion_parameter_count(self) -> int:
        return self.attention.parameter_count()

    def forward_macs(self, rows):
        return self.attention.forward_macs(rows)


def make_fusion(method: str, dims: Sequence[int], *, rank: int | None = 45,
                lfm_rank: int = 4, out_dim: int | None = None, mode: Mode | str = Mode.FUSED,
                value_source: ValueSource | str = ValueSource.QUERY_ROWS,
                add_width: int | None = None, pad_with_one: bool = True,
                rng: np.random.Generator | None = None):
    """Build a fusion layer by name.

    ``rank`` is the LMAM query rank (``None`` gives a dense query weight);
    ``lfm_rank`` is the LFM factor count. ``out_dim`` applies to TFN and LFM
    and defaults to ``sum(dims)``.
    """
    dims = tuple(int(d) for d in dims)
    out_dim = sum(dims) if out_dim is None else out_dim
    if method == "add":
        return AddFusion(dims, add_width, rng)
    if method == "concat":
        return ConcatFusion(dims)
    if method == "tfn":
        return TfnFusion(dims, out_dim, rng)
    if method == "lfm":
        return LfmFusion(dims, out_dim, lfm_rank, rng)
    if method == "lmam":
        return LmamModule(dims, rank, mode, value_source, pad_with_one, rng)
    if method == "selfattn":
        return SelfAttnFusion(dims, rng, pad_with_one)
    raise ConfigurationError(f"unknown fusion method {method!r}; choose from {', '.join(FUSION_METHODS)}")


def fusion_parameter_count(layer) -> int:
    return layer.fusion_parameter_count()
