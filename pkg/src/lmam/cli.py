"""Command-line entry point: ``lmam <command> [flags]``.

Exit codes: 0 success, 1 validation or usage error, 2 numeric failure
(NaN or divergence), 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
import warnings
from fractions import Fraction
from pathlib import Path

from . import experiments as ex
from .baselines import FUSION_METHODS, make_fusion, tfn_parameter_count
from .bench import BENCH_FIELDS, bench
from .gradcheck import DEFAULT_TOL, GRAD_SUITES, run_suite
from .lowrank import parameter_count_dense, parameter_count_lowrank, parameter_count_self_attention
from .pipeline import (
    EMBED_WAYS,
    MODALITIES,
    DivergenceError,
    ExperimentConfig,
    GeneratorSpec,
    ValidationError,
    assemble_model,
    evaluate,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    train,
)
from .tensor import ConfigurationError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
DEFAULT_RANK = 45

PARAM_FIELDS = ["section", "method", "d_in", "d_out", "rank", "params", "ratio_to_selfattn"]
COMPARE_FIELDS = ["label", "seeds", "accuracy", "weighted_f1", "params", "model_params", "train_time"]
DETAIL_FIELDS = ["label", "seed", "fusion", "rank", "embed_way", "modalities", "accuracy",
                 "weighted_f1", "params", "model_params", "train_time"]
GRAD_FIELDS = ["module", "group", "seed", "max_rel_error", "tol", "status"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; 2 is reserved for
    numeric failures here, so report usage problems with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument parsing helpers
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _rank(text: str):
    if text in ("dense", "none", "None"):
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rank must be an integer or 'dense', got {text!r}")


def _fusion_list(text: str) -> list[str]:
    names = list(FUSION_METHODS) if text == "all" else [x.strip() for x in text.split(",") if x.strip()]
    bad = [n for n in names if n not in FUSION_METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown fusion {', '.join(bad) or text!r}; choose from {', '.join(FUSION_METHODS)} or 'all'")
    return names


def parse_modalities(text: str) -> tuple[str, ...]:
    """``t``, ``t,a``, ``tav``, ``text,video`` or ``all``."""
    if text == "all":
        return MODALITIES
    by_letter = {m[0]: m for m in MODALITIES}
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) == 1 and parts[0] not in MODALITIES and len(parts[0]) > 1:
        parts = list(parts[0])
    out = []
    for p in parts:
        name = p if p in MODALITIES else by_letter.get(p)
        if name is None:
            raise argparse.ArgumentTypeError(f"unknown modality {p!r}; use t, a, v or {', '.join(MODALITIES)}")
        out.append(name)
    return tuple(m for m in MODALITIES if m in out)


def _modality_type(text):
    return parse_modalities(text)


def _modality_sets(text: str):
    return [parse_modalities(s) for s in text.split(";") if s.strip()]


def _add_config_flags(p, seeds=False):
    g = p.add_argument_group("model and training (override --config)")
    g.add_argument("--config", type=Path, help="JSON file mirroring ExperimentConfig")
    g.add_argument("--fusion", choices=FUSION_METHODS)
    g.add_argument("--rank", type=_rank, default=argparse.SUPPRESS,
                   help="LMAM query rank, or 'dense' (default 45)")
    g.add_argument("--mode", choices=["intra", "cross", "fused"])
    g.add_argument("--value-source", choices=["query_rows", "matched_features"])
    g.add_argument("--embed-way", choices=EMBED_WAYS)
    g.add_argument("--modalities", type=_modality_type, help="e.g. t, t,a or all")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--optimizer", choices=["adam", "sgd"])
    if seeds:
        g.add_argument("--seeds", type=_int_list, default=list(ex.DEFAULT_SEEDS),
                       help="comma-separated seeds (default 1,2,3)")
    else:
        g.add_argument("--seed", type=int)
    p.add_argument("--dataset", type=Path,
                   help="dataset directory from gen-data (default: regenerate the default synthetic set)")


def _add_out(p, default=None):
    p.add_argument("--out", type=Path, default=default, help="output directory")


def _add_format(p):
    p.add_argument("--format", choices=["table", "csv"], default="table", help="stdout format")


_CONFIG_KEYS = ["fusion", "mode", "value_source", "embed_way", "modalities", "epochs",
                "batch_size", "lr", "optimizer", "seed"]


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    if hasattr(args, "rank"):
        changes["rank"] = args.rank
    return cfg.replace(**changes)


def get_dataset(args):
    if args.dataset is None:
        _echo("dataset: default synthetic generator, seed 0")
        return generate_synthetic(GeneratorSpec())
    if not args.dataset.is_dir():
        raise UsageError(f"dataset directory {args.dataset} does not exist")
    return load_dataset(args.dataset)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _echo(msg: str):
    print(msg, file=sys.stderr)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def _table(rows, fields) -> str:
    cells = [[str(f) for f in fields]] + [[_fmt(r.get(f)) for f in fields] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(fields))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _csv_text(rows, fields) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return buf.getvalue()


def _emit(args, rows, fields, title=None):
    if args.format == "csv":
        sys.stdout.write(_csv_text(rows, fields))
    else:
        if title:
            print(title)
        print(_table(rows, fields))


def _write_csv(out: Path | None, name: str, rows, fields) -> str | None:
    if out is None:
        return None
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(_csv_text(rows, fields), encoding="utf-8")
    return str(path)


def _write_report(out: Path | None, report: dict) -> str | None:
    if out is None:
        return None
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = GeneratorSpec(
        num_classes=args.num_classes, dims=tuple(args.dims), n_train=args.n_train, n_val=args.n_val,
        n_test=args.n_test, min_utterances=args.min_utterances, max_utterances=args.max_utterances,
        beta=args.beta, gamma=tuple(args.gamma), rho=args.rho, sigma=args.sigma,
        interaction_dim=args.interaction_dim,
        class_weights=None if args.class_weights is None else tuple(args.class_weights),
        seed=args.seed,
    )
    spec.validate()
    _echo(f"seed: {spec.seed}")
    paths = save_dataset(generate_synthetic(spec), args.out)
    for p in paths:
        print(p)
    return EXIT_OK


def _param_rows(dims, rank, fusions):
    d = sum(dims)
    sa = parameter_count_self_attention(d, d)
    proj = [
        {"section": "projection", "method": "lowrank", "d_in": d, "d_out": d, "rank": rank,
         "params": parameter_count_lowrank(d, d, rank)},
        {"section": "projection", "method": "dense", "d_in": d, "d_out": d,
         "params": parameter_count_dense(d, d)},
        {"section": "projection", "method": "selfattn", "d_in": d, "d_out": d, "params": sa},
    ]
    for r in proj:
        r["ratio_to_selfattn"] = Fraction(r["params"], sa)
    fusion = []
    # TFN is counted from its shape; its dense map can be too large to build
    layers = {f: make_fusion(f, dims, rank=rank) for f in dict.fromkeys(list(fusions) + ["selfattn"])
              if f != "tfn"}
    sa_fusion = layers["selfattn"].fusion_parameter_count()
    for f in fusions:
        layer = layers.get(f)
        d_out = sum(dims) if layer is None else layer.out_dim
        params = tfn_parameter_count(dims, d_out) if layer is None else layer.fusion_parameter_count()
        fusion.append({
            "section": "fusion", "method": f, "d_in": ",".join(map(str, dims)), "d_out": d_out,
            "rank": rank if f == "lmam" else (layer.rank if f == "lfm" else None),
            "params": params,
            "ratio_to_selfattn": Fraction(params, sa_fusion),
        })
    return proj, fusion


def cmd_param_count(args) -> int:
    proj, fusion = _param_rows(args.dims, args.rank, args.fusion)
    rows = proj + fusion
    for r in rows:
        r["ratio_exact"] = r["ratio_to_selfattn"]
        r["ratio_to_selfattn"] = round(float(r["ratio_to_selfattn"]), 4)
    if args.format == "csv":
        sys.stdout.write(_csv_text(rows, PARAM_FIELDS))
    else:
        low, sa = proj[0], proj[2]
        print(_table(proj, PARAM_FIELDS[1:]))
        verdict = "below" if low["ratio_exact"] < Fraction(1, 3) else "not below"
        print(f"lowrank/selfattn = {low['params']}/{sa['params']} = {low['ratio_to_selfattn']:.4f} "
              f"({verdict} 1/3)")
        print()
        print(_table(fusion, PARAM_FIELDS[1:]))
    csv_path = _write_csv(args.out, "param_count.csv", rows, PARAM_FIELDS)
    _write_report(args.out, {
        "command": "param-count", "dims": list(args.dims), "rank": args.rank,
        "params": {f"{r['section']}/{r['method']}": r["params"] for r in rows},
        "artifacts": [csv_path],
    })
    return EXIT_OK


def cmd_grad_check(args) -> int:
    modules = list(GRAD_SUITES) if args.module == "all" else [args.module]
    rows = []
    for seed in args.seeds:
        _echo(f"seed: {seed}")
        for m in modules:
            for res in run_suite(m, seed, tol=args.tol):
                rows.append({"module": m, "group": res.group, "seed": seed,
                             "max_rel_error": f"{res.max_rel_error:.3e}", "tol": f"{args.tol:g}",
                             "status": "pass" if res.passed else "FAIL"})
    _emit(args, rows, GRAD_FIELDS)
    failed = sum(r["status"] != "pass" for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} groups passed", file=sys.stderr)
    _write_csv(args.out, "grad_check.csv", rows, GRAD_FIELDS)
    _write_report(args.out, {"command": "grad-check", "seeds": args.seeds, "tol": args.tol,
                             "groups": len(rows), "failed": failed})
    return EXIT_CHECK if failed else EXIT_OK


def cmd_bench(args) -> int:
    _echo(f"seed: {args.seed}")
    rows = bench(args.fusion, args.dims, args.seq_len, args.reps, args.rank, args.seed)
    _emit(args, rows, BENCH_FIELDS)
    path = _write_csv(args.out, "bench.csv", rows, BENCH_FIELDS)
    _write_report(args.out, {"command": "bench", "seed": args.seed, "rows": rows, "artifacts": [path]})
    return EXIT_OK


def _experiment_report(args, name, base, results, summary, extra_paths):
    return {
        "command": name,
        "config": base.to_dict(),
        "seeds": args.seeds,
        "summary": summary,
        "cells": [r.to_row() for r in results],
        "artifacts": extra_paths,
    }


def _run_experiment(args, name, driver, **kw) -> int:
    base = build_config(args)
    dataset = get_dataset(args)
    _echo(f"seeds: {','.join(map(str, args.seeds))}")
    results, summary = driver(dataset, base, seeds=args.seeds, **kw)
    _emit(args, summary, COMPARE_FIELDS)
    stem = name.replace("-", "_")
    paths = [_write_csv(args.out, f"{stem}.csv", summary, COMPARE_FIELDS),
             _write_csv(args.out, f"{stem}_seeds.csv", [r.to_row() for r in results], DETAIL_FIELDS)]
    _write_report(args.out, _experiment_report(args, name, ex.config_for(dataset, base), results, summary,
                                               [p for p in paths if p]))
    return EXIT_OK


def cmd_compare(args) -> int:
    return _run_experiment(args, "compare", ex.compare, fusions=args.fusions)


def cmd_ablation(args) -> int:
    return _run_experiment(args, "ablation", ex.ablation, modality_sets=args.sets)


def cmd_embed_ways(args) -> int:
    return _run_experiment(args, "embed-ways", ex.embedding_ways, ways=args.ways)


def cmd_rank_sweep(args) -> int:
    base = build_config(args)
    dataset = get_dataset(args)
    _echo(f"seeds: {','.join(map(str, args.seeds))}")
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path = args.out / "rank_sweep.csv"
    rows = ex.rank_sweep(dataset, csv_path, base, ranks=args.ranks, seeds=args.seeds,
                         include_dense=not args.no_dense)
    by_rank: dict[str, list[dict]] = {}
    for r in rows:
        by_rank.setdefault(r["rank"], []).append(r)
    summary = [{"rank": k, "seeds": len(v),
                "accuracy": sum(float(x["accuracy"]) for x in v) / len(v),
                "weighted_f1": sum(float(x["weighted_f1"]) for x in v) / len(v),
                "params": int(v[0]["params"])} for k, v in by_rank.items()]
    _emit(args, summary, ["rank", "seeds", "accuracy", "weighted_f1", "params"])
    _write_report(args.out, {"command": "rank-sweep", "config": ex.config_for(dataset, base).to_dict(),
                             "seeds": args.seeds, "summary": summary, "artifacts": [str(csv_path)]})
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = get_dataset(args)
    cfg = ex.config_for(dataset, build_config(args))
    _echo(f"seed: {cfg.seed}")
    model = assemble_model(cfg)
    start = time.perf_counter()
    model, log = train(model, dataset.train, cfg, val=dataset.val or None)
    train_time = time.perf_counter() - start
    metrics = {name: evaluate(model, split).to_dict()
               for name, split in (("val", dataset.val), ("test", dataset.test)) if split}
    ckpt = save_checkpoint(model, args.out / "checkpoints" / "model.json", cfg.epochs, metrics)
    report = {
        "command": "train",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "metrics": metrics,
        "timings": {"train_s": train_time, "epochs_s": [e.wall_time for e in log.epochs]},
        "training_log": log.to_dict(),
        "params": {"fusion": model.fusion_parameter_count(), "model": model.num_parameters()},
        "artifacts": [str(ckpt)],
    }
    _write_report(args.out, report)
    for name, m in metrics.items():
        print(f"{name}: accuracy {m['accuracy']:.4f}  weighted_f1 {m['weighted_f1']:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    model, ckpt = load_checkpoint(args.checkpoint)
    dataset = get_dataset(args)
    split = dataset.splits.get(args.split)
    if not split:
        raise UsageError(f"dataset has no {args.split!r} split")
    _echo(f"seed: {model.config.seed}")
    m = evaluate(model, split).to_dict()
    logged = ckpt.get("metrics", {}).get(args.split)
    print(f"{args.split}: accuracy {m['accuracy']:.4f}  weighted_f1 {m['weighted_f1']:.4f}")
    if logged is not None:
        print("matches training log: " + ("yes" if logged == m else "no"))
    _write_report(args.out, {"command": "eval", "config": model.config.to_dict(),
                             "checkpoint": str(args.checkpoint), "split": args.split, "metrics": m,
                             "matches_training_log": None if logged is None else logged == m})
    if logged is not None and logged != m and args.strict:
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="lmam", description="Low-rank matching attention fusion experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic dataset (manifest + 3 splits)")
    spec = GeneratorSpec()
    p.add_argument("--num-classes", type=int, default=spec.num_classes)
    p.add_argument("--dims", type=_int_list, default=list(spec.dims))
    p.add_argument("--n-train", type=int, default=spec.n_train)
    p.add_argument("--n-val", type=int, default=spec.n_val)
    p.add_argument("--n-test", type=int, default=spec.n_test)
    p.add_argument("--min-utterances", type=int, default=spec.min_utterances)
    p.add_argument("--max-utterances", type=int, default=spec.max_utterances)
    p.add_argument("--beta", type=float, default=spec.beta, help="interaction strength")
    p.add_argument("--gamma", type=_float_list, default=list(spec.gamma),
                   help="per-modality prototype strength t,a,v")
    p.add_argument("--rho", type=float, default=spec.rho, help="label stay-probability, in [0, 1)")
    p.add_argument("--sigma", type=float, default=spec.sigma, help="noise scale")
    p.add_argument("--interaction-dim", type=int, default=spec.interaction_dim)
    p.add_argument("--class-weights", type=_float_list)
    p.add_argument("--seed", type=int, default=spec.seed)
    _add_out(p, Path("data"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("param-count", help="exact parameter counts per method")
    p.add_argument("--fusion", type=_fusion_list, default=list(FUSION_METHODS))
    p.add_argument("--dims", type=_int_list, default=[100])
    p.add_argument("--rank", type=int, default=DEFAULT_RANK)
    _add_format(p)
    _add_out(p)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--module", choices=list(GRAD_SUITES) + ["all"], default="all")
    p.add_argument("--seed", dest="seeds", type=_int_list, default=[1, 2, 3],
                   help="seed or comma-separated seeds (default 1,2,3)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    _add_format(p)
    _add_out(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="forward+backward timing per fusion method")
    p.add_argument("--fusion", type=_fusion_list, default=["lmam", "selfattn"])
    p.add_argument("--dims", type=_int_list, default=[100, 100, 100])
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--reps", type=int, default=7)
    p.add_argument("--rank", type=_rank, default=DEFAULT_RANK)
    p.add_argument("--seed", type=int, default=0)
    _add_format(p)
    _add_out(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rank-sweep", help="LMAM accuracy per query rank (resumable CSV)")
    p.add_argument("--ranks", default=",".join(map(str, ex.SWEEP_RANKS)),
                   type=lambda s: [x.strip() for x in s.split(",") if x.strip()],
                   help="comma-separated ranks; 'full' is the fused width (default 5,15,30,45,full)")
    p.add_argument("--no-dense", action="store_true", help="skip the dense-weight reference row")
    _add_config_flags(p, seeds=True)
    _add_format(p)
    _add_out(p, Path("out"))
    p.set_defaults(func=cmd_rank_sweep)

    p = sub.add_parser("compare", help="fusion methods side by side")
    p.add_argument("--fusions", type=_fusion_list, default=list(FUSION_METHODS))
    _add_config_flags(p, seeds=True)
    _add_format(p)
    _add_out(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablation", help="unimodal vs multimodal")
    p.add_argument("--sets", type=_modality_sets, default=[tuple(s) for s in ex.MODALITY_SETS],
                   help="semicolon-separated modality sets (default 't;a;v;all')")
    _add_config_flags(p, seeds=True)
    _add_format(p)
    _add_out(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("embed-ways", help="early vs early_residual vs late")
    p.add_argument("--ways", type=lambda s: s.split(","), default=list(EMBED_WAYS))
    _add_config_flags(p, seeds=True)
    _add_format(p)
    _add_out(p)
    p.set_defaults(func=cmd_embed_ways)

    p = sub.add_parser("train", help="train one model, write checkpoint and report")
    _add_config_flags(p)
    _add_out(p, Path("out"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--strict", action="store_true",
                   help="exit 3 if metrics differ from those logged in the checkpoint")
    _add_out(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        try:
            return args.func(args)
        except ValidationError as e:
            for err in e.errors:
                print(f"error: {err}", file=sys.stderr)
            return EXIT_USAGE
        except (UsageError, ConfigurationError, ShapeError, FileNotFoundError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        except (DivergenceError, FloatingPointError) as e:
            print(f"numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
