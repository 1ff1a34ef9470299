"""Matching attention, the multi-modality LMAM module, and standard self-attention.

Matching attention projects only the query side. Given query-source rows ``m``
and matched features ``I`` (width ``d_k``)::

    Q     = m W_Q + b_Q                       (low-rank or dense W_Q)
    alpha = softmax_rows(tanh(Q I^T / sqrt(d_k)))
    A     = alpha Q   or   alpha I            (see ValueSource)
    N     = layer_norm_rows(A + I)
    O     = relu(N W_out + b_out)

The LMAM module wires one matching attention layer per stream and adds a GELU
residual over the matched features.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Sequence

import numpy as np

from .lowrank import (
    DenseWeight,
    LowRankWeight,
    parameter_count_dense,
    parameter_count_lowrank,
    parameter_count_self_attention,
)
from .tensor import (
    LAYER_NORM_EPS,
    ConfigurationError,
    Layer,
    Matrix,
    Parameter,
    ShapeError,
    concat_cols,
    gelu_backward,
    gelu_ew,
    layer_norm_rows_backward,
    layer_norm_rows_forward,
    make_rng,
    relu_backward,
    softmax_rows,
    softmax_rows_backward,
    split_cols,
    tanh_backward,
)


class ValueSource(str, Enum):
    QUERY_ROWS = "query_rows"
    MATCHED_FEATURES = "matched_features"


class Mode(str, Enum):
    INTRA = "intra"
    CROSS = "cross"
    FUSED = "fused"


def pad_ones(x: Matrix) -> Matrix:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def matching_scores(q: Matrix, i_feat: Matrix, d_k: int | None = None) -> Matrix:
    """``softmax_rows(tanh(q i_feat^T / sqrt(d_k)))``, shape ``L_Q x L_I``."""
    if q.shape[1] != i_feat.shape[1]:
        raise ShapeError(
            f"matching_scores: query width {q.shape} does not match features {i_feat.shape}"
        )
    d_k = i_feat.shape[1] if d_k is None else d_k
    return softmax_rows(np.tanh(q @ i_feat.T / math.sqrt(d_k)))


def _make_projection(d_in, d_out, rank, rng):
    if rank is None:
        # drawn as full-rank factors so a dense layer and its full-rank
        # factorized twin built from the same seed start identical
        full = LowRankWeight(d_in, d_out, min(d_in, d_out), rng)
        return DenseWeight(d_in, d_out, weight=full.dense(), bias=full.bias.value)
    return LowRankWeight(d_in, d_out, rank, rng)


class MatchingAttentionLayer(Layer):
    """Single-head matching attention with residual norm and ReLU output layer.

    ``rank=None`` selects a dense query projection.
    """

    def __init__(self, d_in: int, d_k: int, rank: int | None = None,
                 value_source: ValueSource | str = ValueSource.QUERY_ROWS,
                 rng: np.random.Generator | None = None, d_q: int | None = None,
                 eps: float = LAYER_NORM_EPS):
        d_q = d_k if d_q is None else d_q
        if d_q != d_k:
            raise ConfigurationError(
                f"query width d_Q={d_q} must equal matched feature width d_k={d_k}: "
                "scores need Q I^T and the residual adds the attention output to I; "
                "set d_Q = d_k"
            )
        if rank is not None and rank > min(d_in, d_k):
            raise ConfigurationError(f"rank {rank} exceeds min(d_in={d_in}, d_Q={d_k})")
        rng = rng if rng is not None else make_rng(0)
        self.d_in = d_in
        self.d_k = d_k
        self.rank = rank
        self.value_source = ValueSource(value_source)
        self.eps = eps
        self.query = _make_projection(d_in, d_k, rank, rng)
        self.norm_gain = Parameter(np.ones((1, d_k)))
        self.norm_bias = Parameter(np.zeros((1, d_k)))
        self.out = DenseWeight(d_k, d_k, rng)
        self._cache = None

    def query_parameter_count(self) -> int:
        if self.rank is None:
            return parameter_count_dense(self.d_in, self.d_k)
        return parameter_count_lowrank(self.d_in, self.d_k, self.rank)

    def project_query(self, m: Matrix, cache: bool = False) -> Matrix:
        if m.shape[1] != self.d_in:
            raise ShapeError(f"project_query: expected {self.d_in} columns, got {m.shape}")
        return self.query.forward(m, cache=cache)

    def forward(self, m: Matrix, i_feat: Matrix, cache: bool = True) -> Matrix:
        if i_feat.shape[1] != self.d_k:
            raise ShapeError(
                f"matching attention expects matched features of width {self.d_k}, got {i_feat.shape}"
            )
        if self.value_source is ValueSource.QUERY_ROWS and m.shape[0] != i_feat.shape[0]:
            raise ShapeError(
                f"query-row values need equal row counts, got {m.shape} and {i_feat.shape}"
            )
        q = self.project_query(m, cache=cache)
        scaled = 1.0 / math.sqrt(self.d_k)
        t = np.tanh(q @ i_feat.T * scaled)
        alpha = softmax_rows(t)
        values = q if self.value_source is ValueSource.QUERY_ROWS else i_feat
        a = alpha @ values
        if a.shape != i_feat.shape:
            raise ConfigurationError(
                f"attention output {a.shape} cannot be added to matched features {i_feat.shape}"
            )
        n, ln_cache = layer_norm_rows_forward(
            a + i_feat, self.norm_gain.value, self.norm_bias.value, self.eps)
        z = self.out.forward(n, cache=cache)
        o = np.maximum(z, 0.0)
        if cache:
            self._cache = (q, i_feat, t, alpha, values, ln_cache, z)
        return o

    def backward(self, do: Matrix):
        """Return ``(d_m, d_i_feat)``; parameter gradients accumulate."""
        q, i_feat, t, alpha, values, ln_cache, z = self._require_cache()
        dz = relu_backward(z, do)
        dn = self.out.backward(dz)
        dr, dgain, dbias = layer_norm_rows_backward(ln_cache, dn)
        self.norm_gain.accumulate(dgain)
        self.norm_bias.accumulate(dbias)
        di = dr.copy()
        dalpha = dr @ values.T
        dvalues = alpha.T @ dr
        dt = softmax_rows_backward(alpha, dalpha)
        ds = tanh_backward(t, dt) / math.sqrt(self.d_k)
        dq = ds @ i_feat
        di += ds.T @ q
        if self.value_source is ValueSource.QUERY_ROWS:
            dq += dvalues
        else:
            di += dvalues
        dm = self.query.backward(dq)
        return dm, di

    def scores(self, m: Matrix, i_feat: Matrix) -> Matrix:
        return matching_scores(self.project_query(m), i_feat, self.d_k)

    def forward_macs(self, rows_q: int, rows_i: int) -> int:
        macs = self.query.forward_macs(rows_q)
        macs += rows_q * rows_i * self.d_k * 2  # scores and alpha @ values
        macs += self.out.forward_macs(rows_q)
        return macs


def matching_attention_forward(layer: MatchingAttentionLayer, m: Matrix, i_feat: Matrix) -> Matrix:
    return layer.forward(m, i_feat, cache=False)


class LmamModule(Layer):
    """Low-rank matching attention over several modality streams.

    ``dims`` are the raw modality widths in input order. Output width:
    ``W = sum(dims) + k`` for ``intra``/``fused`` and ``(k - 1) W`` for
    ``cross``, with ``k`` modalities (the ``+ k`` only when 1-padding is on).
    """

    method = "lmam"

    def __init__(self, dims: Sequence[int], rank: int | None = 45,
                 mode: Mode | str = Mode.FUSED,
                 value_source: ValueSource | str = ValueSource.QUERY_ROWS,
                 pad_with_one: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else make_rng(0)
        self.dims = tuple(int(d) for d in dims)
        if not self.dims:
            raise ConfigurationError("LMAM needs at least one modality")
        self.mode = Mode(mode)
        if self.mode is Mode.CROSS and len(self.dims) < 2:
            raise ConfigurationError("cross mode needs at least two modalities")
        self.rank = rank
        self.value_source = ValueSource(value_source)
        self.pad_with_one = pad_with_one
        pad = 1 if pad_with_one else 0
        self._widths = tuple(d + pad for d in self.dims)

        if self.mode is Mode.FUSED:
            total = sum(self._widths)
            specs = [(total, total)]
        elif self.mode is Mode.INTRA:
            specs = [(w, w) for w in self._widths]
        else:
            total = sum(self._widths)
            specs = [(w, total - w) for w in self._widths]
        for d_in, d_k in specs:
            if rank is not None and rank > min(d_in, d_k):
                raise ConfigurationError(
                    f"rank {rank} exceeds min(d_in={d_in}, d_Q={d_k}) for {self.mode.value} mode "
                    f"with modality dims {self.dims}"
                )
        self.layers = [MatchingAttentionLayer(d_in, d_k, rank, self.value_source, rng)
                       for d_in, d_k in specs]
        self.out_dim = sum(d_k for _, d_k in specs)
        self._cache = None

    @property
    def in_dims(self):
        return self.dims

    def _prepare(self, feats):
        if len(feats) != len(self.dims):
            raise ShapeError(f"expected {len(self.dims)} modalities, got {len(feats)}")
        rows = {f.shape[0] for f in feats}
        if len(rows) != 1:
            raise ShapeError(
                "modalities disagree on utterance count: " + ", ".join(str(f.shape) for f in feats)
            )
        for f, d in zip(feats, self.dims):
            if f.shape[1] != d:
                raise ShapeError(f"modality width {f.shape[1]} does not match configured {d}")
        return [pad_ones(f) if self.pad_with_one else f for f in feats]

    def _streams(self, padded):
        """Yield ``(layer, m, i_feat, m_parts, i_parts)``; the part lists index
        the modalities concatenated into ``m`` and ``i_feat``."""
        k = len(padded)
        if self.mode is Mode.FUSED:
            f = concat_cols(padded)
            yield self.layers[0], f, f, list(range(k)), list(range(k))
        elif self.mode is Mode.INTRA:
            for j in range(k):
                yield self.layers[j], padded[j], padded[j], [j], [j]
        else:
            for j in range(k):
                others = [o for o in range(k) if o != j]
                i_feat = concat_cols([padded[o] for o in others])
                yield self.layers[j], padded[j], i_feat, [j], others

    def forward(self, feats: Sequence[Matrix], cache: bool = True) -> Matrix:
        padded = self._prepare(list(feats))
        outs, stream_cache = [], []
        for layer, m, i_feat, m_parts, i_parts in self._streams(padded):
            psi = layer.forward(m, i_feat, cache=cache) + gelu_ew(i_feat)
            outs.append(psi)
            stream_cache.append((i_feat, m_parts, i_parts))
        if cache:
            self._cache = stream_cache
        return concat_cols(outs)

    def backward(self, dout: Matrix) -> list[Matrix]:
        stream_cache = self._require_cache()
        widths = [layer.d_k for layer in self.layers]
        grads_padded = [np.zeros((dout.shape[0], w)) for w in self._widths]
        for layer, dpsi, (i_feat, m_parts, i_parts) in zip(
                self.layers, split_cols(dout, widths), stream_cache):
            dm, di = layer.backward(dpsi)
            di = di + gelu_backward(i_feat, dpsi)
            for j, g in zip(m_parts, split_cols(dm, [self._widths[p] for p in m_parts])):
                grads_padded[j] += g
            for j, g in zip(i_parts, split_cols(di, [self._widths[p] for p in i_parts])):
                grads_padded[j] += g
        return [g[:, :d] for g, d in zip(grads_padded, self.dims)]

    def fusion_parameter_count(self) -> int:
        """Query-projection parameters, the only attention projection LMAM learns."""
        return sum(layer.query_parameter_count() for layer in self.layers)

    def forward_macs(self, rows: int) -> int:
        return sum(layer.forward_macs(rows, rows) for layer in self.layers)


def lmam_forward(module: LmamModule, feats: Sequence[Matrix]) -> Matrix:
    return module.forward(feats, cache=False)


class SelfAttentionLayer(Layer):
    """Scaled dot-product self-attention with learned Q, K and V projections."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else make_rng(0)
        self.d_in = d_in
        self.d_out = d_out
        self.W_Q = DenseWeight(d_in, d_out, rng)
        self.W_K = DenseWeight(d_in, d_out, rng)
        self.W_V = DenseWeight(d_in, d_out, rng)
        self._cache = None

    def forward(self, x: Matrix, cache: bool = True) -> Matrix:
        if x.shape[1] != self.d_in:
            raise ShapeError(f"self-attention expects {self.d_in} columns, got {x.shape}")
        q = self.W_Q.forward(x, cache=cache)
        k = self.W_K.forward(x, cache=cache)
        v = self.W_V.forward(x, cache=cache)
        alpha = softmax_rows(q @ k.T / math.sqrt(self.d_out))
        if cache:
            self._cache = (q, k, v, alpha)
        return alpha @ v

    def backward(self, dy: Matrix) -> Matrix:
        q, k, v, alpha = self._require_cache()
        dalpha = dy @ v.T
        dv = alpha.T @ dy
        ds = softmax_rows_backward(alpha, dalpha) / math.sqrt(self.d_out)
        dq = ds @ k
        dk = ds.T @ q
        return self.W_Q.backward(dq) + self.W_K.backward(dk) + self.W_V.backward(dv)

    def parameter_count(self) -> int:
        return parameter_count_self_attention(self.d_in, self.d_out)

    def forward_macs(self, rows: int) -> int:
        return 3 * rows * self.d_in * self.d_out + 2 * rows * rows * self.d_out


def self_attention_forward(layer: SelfAttentionLayer, x: Matrix) -> Matrix:
    return layer.forward(x, cache=False)
