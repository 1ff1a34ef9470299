"""Forward+backward timing of fusion layers on identical random data."""

from __future__ import annotations

import time
import warnings
from typing import Sequence

import numpy as np

from .baselines import make_fusion
from .tensor import make_rng

BENCH_FIELDS = ["fusion", "dims", "seq_len", "rank", "reps", "median_s", "iqr_s",
                "params", "forward_macs"]
WARMUP = 2
MIN_STABLE_REPS = 5


def _step(layer, feats, dout):
    layer.zero_grad()
    layer.forward(feats)
    layer.backward(dout)


def time_fusion(method: str, dims: Sequence[int], seq_len: int, reps: int = 7,
                rank: int | None = 45, seed: int = 0, warmup: int = WARMUP) -> dict:
    """Median and interquartile range of one forward+backward pass.

    Inputs and upstream gradients come from ``seed`` alone, so every method
    sees the same data.
    """
    rng = make_rng(seed)
    feats = [rng.standard_normal((seq_len, d)) for d in dims]
    layer = make_fusion(method, dims, rank=rank, rng=make_rng(seed + 1))
    dout = make_rng(seed + 2).standard_normal((seq_len, layer.out_dim))
    for _ in range(warmup):
        _step(layer, feats, dout)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        _step(layer, feats, dout)
        times.append(time.perf_counter() - start)
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return {
        "fusion": method,
        "dims": ",".join(str(d) for d in dims),
        "seq_len": seq_len,
        "rank": rank if method == "lmam" else "",
        "reps": reps,
        "median_s": float(med),
        "iqr_s": float(q3 - q1),
        "params": layer.fusion_parameter_count(),
        "forward_macs": layer.forward_macs(seq_len),
    }


def bench(fusions: Sequence[str] = ("lmam", "selfattn"), dims: Sequence[int] = (100, 100, 100),
          seq_len: int = 128, reps: int = 7, rank: int | None = 45, seed: int = 0) -> list[dict]:
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    if reps < MIN_STABLE_REPS:
        warnings.warn(f"reps={reps}: medians over fewer than {MIN_STABLE_REPS} repetitions are unstable",
                      RuntimeWarning, stacklevel=2)
    return [time_fusion(f, dims, seq_len, reps, rank, seed) for f in fusions]
