"""Command-line surface: zoo / weights / merge / search / run / pareto / report.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, Hm3Error, StageError
from .merge import MergeConfig, merge_from_config
from .mo_eval import ObjectivePoint, ParetoFront, hypervolume, nondominated_filter, normalize_to_min
from .pipeline import (
    RunConfig,
    build_zoo,
    emit_reports,
    load_run_config,
    run_hm3,
)
from .simplex import WeightVector, generate_simplex
from .tensor_store import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out-dir", default=None, help="output directory override")
    p.add_argument("--ablation", choices=("full", "no_arch", "no_para"), default=None)


def _run_config(args) -> RunConfig:
    overrides = {
        "master_seed": args.seed,
        "out_dir": getattr(args, "out_dir", None),
        "ablation": getattr(args, "ablation", None),
    }
    if args.config:
        return load_run_config(args.config, overrides)
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    return RunConfig(**kwargs)


def _cmd_zoo(args) -> int:
    cfg = _run_config(args)
    if args.k is not None:
        cfg = replace(cfg, zoo=replace(cfg.zoo, k=args.k))
    out = Path(cfg.out_dir)
    tasks, base, finetuned = build_zoo(cfg, out if args.config is None else out / "zoo")
    print(f"zoo written: base + {len(finetuned)} fine-tuned models for {len(tasks)} tasks")
    return EXIT_OK


def _cmd_weights(args) -> int:
    vectors = generate_simplex(args.k, args.q)
    lines = ["index," + ",".join(f"lambda_{i}" for i in range(1, args.k + 1))]
    for w in vectors:
        lines.append(f"{w.index}," + ",".join(repr(c) for c in w.components))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(vectors)} weight vectors to {args.out}")
    return EXIT_OK


def _load_merge_config(path) -> tuple[MergeConfig, str, list[str], str]:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read merge config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    section = dict(data.get("merge", {}))
    base = section.pop("base", None)
    models = section.pop("models", None)
    if not base or not models:
        raise ConfigError("[merge] needs 'base' and 'models' checkpoint paths")
    weights = section.pop("weights", None)
    lam = None
    if weights is not None:
        lam = WeightVector(tuple(float(w) for w in weights), index=1)
    try:
        cfg = MergeConfig(weight_vector=lam, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [merge] section: {exc}") from exc
    return cfg, base, list(models), section.get("method", cfg.method)


def _cmd_merge(args) -> int:
    cfg, base_path, model_paths, method = _load_merge_config(args.config)
    base = load_checkpoint(base_path)
    models = [load_checkpoint(p) for p in model_paths]
    merged = merge_from_config(base, models, cfg)
    save_checkpoint(merged, args.out)
    print(f"merged {len(models)} models with {method} -> {args.out}")
    return EXIT_OK


def _cmd_search(args) -> int:
    cfg = _run_config(args)
    single = replace(cfg, workers=1)
    from .pipeline import _lambda_job  # single-preference path search

    out = Path(cfg.out_dir)
    tasks, base, finetuned = build_zoo(cfg, out / "zoo")
    vectors = generate_simplex(cfg.zoo.k, cfg.q)
    if not (1 <= args.lambda_index <= len(vectors)):
        raise ConfigError(
            f"--lambda-index must be in [1, {len(vectors)}], got {args.lambda_index}"
        )
    lam = vectors[args.lambda_index - 1]
    record, _snaps = _lambda_job((single, tasks, base, finetuned, lam))
    print(json.dumps({
        "index": record.index,
        "lambda": list(record.lam),
        "final_metrics": list(record.final_metrics),
        "final_source": record.final_source,
        "best_return": record.best_return,
        "path_length": record.path_length,
    }, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _run_config(args)
    report = run_hm3(cfg)
    print(f"ablation={report.ablation} config={report.config_hash} "
          f"front={len(report.front.points)} HV={report.hv!r} "
          f"({report.wall_clock:.1f}s)")
    return EXIT_OK


def _cmd_pareto(args) -> int:
    lines = Path(args.infile).read_text().strip().splitlines()
    if not lines:
        raise ConfigError(f"{args.infile} is empty")
    header = lines[0].split(",")
    k = len(header) - 1
    if k < 1:
        raise ConfigError(f"{args.infile} needs columns label,f_1,...,f_K")
    points = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != k + 1:
            raise ConfigError(f"malformed row in {args.infile}: {line!r}")
        points.append(ObjectivePoint(
            values=tuple(float(v) for v in parts[1:]),
            orientation="maximize", label=parts[0],
        ))
    reference = tuple(float(v) for v in args.ref.split(",")) if args.ref else tuple([1.0] * k)
    if len(reference) != k:
        raise ConfigError(f"--ref needs {k} comma-separated values")
    normalized = normalize_to_min(points, [(0.0, 1.0)] * k)
    front = nondominated_filter(normalized)
    hv = hypervolume(ParetoFront(points=front.points, reference=reference))
    kept = {p.label for p in front.points}
    out_lines = [lines[0]]
    for p in points:
        if p.label in kept:
            out_lines.append(p.label + "," + ",".join(repr(v) for v in p.values))
    if args.out:
        Path(args.out).write_text("\n".join(out_lines) + "\n")
    if args.hv:
        print(f"HV={hv!r}")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    payload = json.loads((run_dir / "reports" / "report.json").read_text())
    from .pipeline import LambdaRecord, RunReport

    records = [
        LambdaRecord(
            index=r["index"], lam=tuple(r["lambda"]),
            param_metrics=tuple(r["param_metrics"]) if r["param_metrics"] else None,
            path_metrics=tuple(r["path_metrics"]) if r["path_metrics"] else None,
            final_metrics=tuple(r["final_metrics"]), final_source=r["final_source"],
            best_return=r["best_return"], path_length=r["path_length"],
        )
        for r in payload["records"]
    ]
    baselines = [
        ObjectivePoint(values=tuple(b["values"]), orientation="maximize", label=b["label"])
        for b in payload["baselines"]
    ]
    front_points = tuple(
        ObjectivePoint(values=tuple(p["values"]), orientation="maximize", label=p["label"])
        for p in payload["front"]
    )
    k = len(front_points[0]) if front_points else len(records[0].final_metrics)
    report = RunReport(
        ablation=payload["ablation"], config_hash=payload["config_hash"],
        records=records, baselines=baselines,
        front=ParetoFront(points=front_points, reference=tuple([1.0] * k)),
        hv=payload["hv"],
        hv_history=[(int(it), float(hv)) for it, hv in payload["hv_history"]],
        wall_clock=payload["wall_clock_seconds"],
    )
    emit_reports(report, run_dir / "reports")
    print(f"re-emitted reports for {run_dir} (HV={report.hv!r})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hm3",
        description="Hierarchical multi-objective model merging on a synthetic zoo.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("zoo", help="train the base and fine-tuned checkpoints")
    _add_global_flags(p)
    p.add_argument("--k", type=int, default=None, help="number of tasks")
    p.set_defaults(func=_cmd_zoo)

    p = sub.add_parser("weights", help="emit the simplex lattice of weight vectors")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_weights)

    p = sub.add_parser("merge", help="run one parameter-space merge")
    p.add_argument("--config", required=True, help="TOML with a [merge] section")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("search", help="path search for a single weight vector")
    _add_global_flags(p)
    p.add_argument("--lambda-index", type=int, required=True)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("run", help="full pipeline: zoo, merges, search, reports")
    _add_global_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("pareto", help="filter a metrics CSV to its Pareto front")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ref", default=None, help="reference point, e.g. 1,1,1")
    p.add_argument("--out", default=None)
    p.add_argument("--hv", action="store_true", help="print HV=<value>")
    p.set_defaults(func=_cmd_pareto)

    p = sub.add_parser("report", help="re-emit report files from report.json")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_STAGE
    except Hm3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
