"""Low-rank factorized projections ``x -> x U V^T + b`` and a dense counterpart."""

from __future__ import annotations

import numpy as np

from .tensor import (
    Layer,
    Matrix,
    Parameter,
    ShapeError,
    as_matrix,
    init_matrix,
    make_rng,
    matmul,
)


class DenseWeight(Layer):
    """Plain affine map ``x W + b`` with ``W`` of shape ``d_in x d_out``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 weight=None, bias=None):
        if d_in < 1 or d_out < 1:
            raise ShapeError(f"dense weight needs positive dims, got {d_in}x{d_out}")
        rng = rng if rng is not None else make_rng(0)
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Parameter(init_matrix(rng, d_in, d_out, d_in) if weight is None else weight)
        self.bias = Parameter(np.zeros((1, d_out)) if bias is None else bias)
        if self.weight.shape != (d_in, d_out) or self.bias.shape != (1, d_out):
            raise ShapeError(
                f"dense weight {self.weight.shape} / bias {self.bias.shape} "
                f"do not match {d_in}x{d_out}"
            )
        self._cache = None

    def dense(self) -> Matrix:
        return self.weight.value

    def forward(self, x: Matrix, cache: bool = True) -> Matrix:
        if x.shape[1] != self.d_in:
            raise ShapeError(f"dense weight expects {self.d_in} input columns, got {x.shape}")
        if cache:
            self._cache = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy: Matrix) -> Matrix:
        x = self._require_cache()
        self.weight.accumulate(x.T @ dy)
        self.bias.accumulate(dy.sum(axis=0, keepdims=True))
        return dy @ self.weight.value.T

    def forward_macs(self, rows: int) -> int:
        return rows * self.d_in * self.d_out


class LowRankWeight(Layer):
    """Rank-``r`` weight ``W = U V^T`` (sum of ``r`` outer products) plus a dense bias.

    ``U`` is ``d_in x r``, ``V`` is ``d_out x r``. The dense ``d_in x d_out``
    matrix is never formed on the forward path.
    """

    def __init__(self, d_in: int, d_out: int, rank: int,
                 rng: np.random.Generator | None = None, U=None, V=None, bias=None):
        if d_in < 1 or d_out < 1 or rank < 1:
            raise ShapeError(f"low-rank weight needs positive dims, got {d_in}x{d_out} rank {rank}")
        if rank > min(d_in, d_out):
            raise ShapeError(f"rank {rank} exceeds min({d_in}, {d_out})")
        rng = rng if rng is not None else make_rng(0)
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.U = Parameter(init_matrix(rng, d_in, rank, d_in) if U is None else U)
        self.V = Parameter(init_matrix(rng, d_out, rank, rank) if V is None else V)
        self.bias = Parameter(np.zeros((1, d_out)) if bias is None else bias)
        if (self.U.shape != (d_in, rank) or self.V.shape != (d_out, rank)
                or self.bias.shape != (1, d_out)):
            raise ShapeError(
                f"factor shapes U{self.U.shape} V{self.V.shape} bias{self.bias.shape} "
                f"inconsistent with d_in={d_in}, d_out={d_out}, rank={rank}"
            )
        self._cache = None

    def dense(self) -> Matrix:
        return reconstruct(self)

    def forward(self, x: Matrix, cache: bool = True) -> Matrix:
        if x.shape[1] != self.d_in:
            raise ShapeError(f"low-rank weight expects {self.d_in} input columns, got {x.shape}")
        h = x @ self.U.value
        if cache:
            self._cache = (x, h)
        return h @ self.V.value.T + self.bias.value

    def backward(self, dy: Matrix) -> Matrix:
        x, h = self._require_cache()
        self.V.accumulate(dy.T @ h)
        self.bias.accumulate(dy.sum(axis=0, keepdims=True))
        dh = dy @ self.V.value
        self.U.accumulate(x.T @ dh)
        return dh @ self.U.value.T

    def forward_macs(self, rows: int) -> int:
        return rows * self.rank * (self.d_in + self.d_out)

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "d_out": self.d_out,
            "rank": self.rank,
            "U": self.U.value.tolist(),
            "V": self.V.value.tolist(),
            "bias": self.bias.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LowRankWeight":
        return cls(d["d_in"], d["d_out"], d["rank"], U=d["U"], V=d["V"], bias=d["bias"])


def reconstruct(w: LowRankWeight) -> Matrix:
    return w.U.value @ w.V.value.T


def apply(w: LowRankWeight, x: Matrix) -> Matrix:
    """``x U V^T + b`` evaluated right-to-left through the rank bottleneck."""
    return w.forward(as_matrix(x), cache=False)


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def parameter_count_lowrank(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out) + d_out


def parameter_count_dense(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def parameter_count_self_attention(d_in: int, d_out: int) -> int:
    # query, key and value projections with biases; no output projection
    return 3 * parameter_count_dense(d_in, d_out)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def fit_rank_r(target: Matrix, rank: int, rng: np.random.Generator,
               max_iters: int = 500, tol: float = 1e-12, return_history: bool = False):
    """Alternating least squares fit of ``target ~ U V^T``.

    Each half-step solves its factor exactly, so the Frobenius error never
    increases. Stops once the relative improvement drops below ``tol`` or the
    error vanishes. The returned weight has a zero bias.
    """
    target = as_matrix(target)
    m, n = target.shape
    if rank < 1 or rank > min(m, n):
        raise ShapeError(f"rank {rank} invalid for target of shape {target.shape}")
    norm = np.linalg.norm(target)
    U = rng.standard_normal((m, rank))
    V = np.zeros((n, rank))
    history = []
    prev = np.inf
    for _ in range(max_iters):
        V = np.linalg.lstsq(U, target, rcond=None)[0].T
        U = np.linalg.lstsq(V, target.T, rcond=None)[0].T
        err = float(np.linalg.norm(target - matmul(U, V.T)))
        history.append(err)
        if err <= 1e-15 * max(norm, 1.0):
            break
        if np.isfinite(prev) and (prev - err) / prev < tol:
            break
        prev = err
    w = LowRankWeight(m, n, rank, U=U, V=V, bias=np.zeros((1, n)))
    return (w, history) if return_history else w
