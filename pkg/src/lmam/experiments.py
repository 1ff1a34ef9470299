"""Multi-seed experiment drivers: fusion comparison, modality ablation,
embedding ways and rank sweeps.

Each driver trains one model per cell on the same dataset and returns rows in
a deterministic order (by cell key), whatever the worker count.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .pipeline.config import ExperimentConfig
from .pipeline.data import MODALITIES, Dataset
from .pipeline.model import assemble_model
from .pipeline.train import evaluate, train

DEFAULT_SEEDS = (1, 2, 3)
SWEEP_RANKS = (5, 15, 30, 45, "full")
MODALITY_SETS = (("text",), ("audio",), ("video",), MODALITIES)


@dataclass
class CellResult:
    label: str
    seed: int
    fusion: str
    rank: int | None
    embed_way: str
    modalities: str
    accuracy: float
    weighted_f1: float
    params: int
    model_params: int
    train_time: float

    def to_row(self) -> dict:
        row = asdict(self)
        row["rank"] = "dense" if self.rank is None else self.rank
        return row


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LMAM_THREADS", "1")))
    except ValueError:
        return 1


def config_for(dataset: Dataset, base: ExperimentConfig | None = None, **changes) -> ExperimentConfig:
    base = ExperimentConfig() if base is None else base
    return base.replace(dims=tuple(dataset.dims), num_classes=dataset.num_classes, **changes)


def run_cell(config: ExperimentConfig, dataset: Dataset, label: str = "") -> CellResult:
    model = assemble_model(config)
    start = time.perf_counter()
    model, _ = train(model, dataset.train, config)
    elapsed = time.perf_counter() - start
    m = evaluate(model, dataset.test)
    return CellResult(
        label=label or config.fusion,
        seed=config.seed,
        fusion=config.fusion,
        rank=config.rank,
        embed_way=config.embed_way,
        modalities="+".join(x[0].upper() for x in config.modalities),
        accuracy=m.accuracy,
        weighted_f1=m.weighted_f1,
        params=model.fusion_parameter_count(),
        model_params=model.num_parameters(),
        train_time=elapsed,
    )


def run_cells(cells: Sequence[tuple[str, ExperimentConfig]], dataset: Dataset,
              workers: int | None = None) -> list[CellResult]:
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda c: run_cell(c[1], dataset, c[0]), cells))
    return [run_cell(cfg, dataset, label) for label, cfg in cells]


def summarize(results: Iterable[CellResult]) -> list[dict]:
    """Seed-averaged rows, one per label, in first-seen order."""
    groups: dict[str, list[CellResult]] = {}
    for r in results:
        groups.setdefault(r.label, []).append(r)
    rows = []
    for label, rs in groups.items():
        n = len(rs)
        rows.append({
            "label": label,
            "seeds": n,
            "accuracy": sum(r.accuracy for r in rs) / n,
            "weighted_f1": sum(r.weighted_f1 for r in rs) / n,
            "params": rs[0].params,
            "model_params": rs[0].model_params,
            "train_time": sum(r.train_time for r in rs) / n,
        })
    return rows


def compare(dataset: Dataset, base: ExperimentConfig | None = None,
            fusions: Sequence[str] = ("add", "concat", "tfn", "lfm", "lmam", "selfattn"),
            seeds: Sequence[int] = DEFAULT_SEEDS, workers: int | None = None):
    cells = [(f, config_for(dataset, base, fusion=f, seed=s)) for f in fusions for s in seeds]
    results = run_cells(cells, dataset, workers)
    return results, summarize(results)


def max_fused_rank(dims: Sequence[int], pad_with_one: bool = True) -> int:
    return sum(d + (1 if pad_with_one else 0) for d in dims)


def ablation(dataset: Dataset, base: ExperimentConfig | None = None,
             modality_sets: Sequence[Sequence[str]] = MODALITY_SETS,
             seeds: Sequence[int] = DEFAULT_SEEDS, workers: int | None = None):
    """Unimodal vs multimodal LMAM. The query rank is capped at the fused
    width of each modality set so single-modality models stay valid."""
    cells = []
    for mods in modality_sets:
        cfg = config_for(dataset, base, modalities=tuple(mods))
        if cfg.fusion == "lmam" and cfg.rank is not None:
            cap = max_fused_rank(cfg.active_dims, cfg.pad_with_one)
            cfg = cfg.replace(rank=min(cfg.rank, cap))
        label = "+".join(m[0].upper() for m in mods)
        cells.extend((label, cfg.replace(seed=s)) for s in seeds)
    results = run_cells(cells, dataset, workers)
    return results, summarize(results)


def embedding_ways(dataset: Dataset, base: ExperimentConfig | None = None,
                   ways: Sequence[str] = ("early", "early_residual", "late"),
                   seeds: Sequence[int] = DEFAULT_SEEDS, workers: int | None = None):
    cells = [(w, config_for(dataset, base, embed_way=w, seed=s)) for w in ways for s in seeds]
    results = run_cells(cells, dataset, workers)
    return results, summarize(results)


SWEEP_FIELDS = ["rank", "seed", "accuracy", "weighted_f1", "params"]


def resolve_ranks(ranks: Sequence, full: int) -> list:
    out = []
    for r in ranks:
        if r in ("full", "max"):
            out.append(full)
        elif r == "dense":
            out.append("dense")
        else:
            out.append(int(r))
    return out


def rank_sweep(dataset: Dataset, csv_path, base: ExperimentConfig | None = None,
               ranks: Sequence = SWEEP_RANKS, seeds: Sequence[int] = DEFAULT_SEEDS,
               include_dense: bool = True, workers: int | None = None) -> list[dict]:
    """Train LMAM at each (rank, seed) and append rows to ``csv_path``.

    Cells already present in the CSV are skipped, so an interrupted sweep
    resumes where it stopped. ``"full"`` means the fused width; ``"dense"``
    (added when ``include_dense``) is the unfactorized query weight.
    """
    base = config_for(dataset, base, fusion="lmam")
    full = max_fused_rank(base.active_dims, base.pad_with_one)
    rank_list = resolve_ranks(ranks, full)
    if include_dense and "dense" not in rank_list:
        rank_list.append("dense")

    csv_path = Path(csv_path)
    done: dict[tuple[str, int], dict] = {}
    if csv_path.exists():
        with open(csv_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                done[(row["rank"], int(row["seed"]))] = row

    cells = []
    for r in rank_list:
        for s in seeds:
            if (str(r), s) in done:
                continue
            cfg = base.replace(rank=None if r == "dense" else r, seed=s)
            cells.append((str(r), cfg))
    results = run_cells(cells, dataset, workers)

    new_file = not csv_path.exists()
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        if new_file:
            writer.writeheader()
        for (label, _), res in zip(cells, results):
            row = {"rank": label, "seed": res.seed, "accuracy": repr(res.accuracy),
                   "weighted_f1": repr(res.weighted_f1), "params": res.params}
            writer.writerow(row)
            done[(label, res.seed)] = {k: str(v) for k, v in row.items()}

    return [done[(str(r), s)] for r in rank_list for s in seeds]
