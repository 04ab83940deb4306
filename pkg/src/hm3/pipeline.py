"""End-to-end orchestration: zoo construction, simplex-indexed parameter
merges, per-preference path search, Pareto front assembly, and report files.

Every stage derives its randomness from the master seed through labeled
hashes, so stages rerun identically in isolation and parallel scheduling
cannot change any artifact. Reports are written with full-precision float
repr, which makes repeated runs byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .arch_search import (
    EnvConfig,
    assemble_model,
    path_to_record,
    scalarize,
)
from .errors import ConfigError, StageError
from .merge import MergeConfig, hm3_param_merge, merge_from_config
from .mo_eval import (
    ObjectivePoint,
    ParetoFront,
    hypervolume,
    nondominated_filter,
    normalize_to_min,
)
from .ppo import PPOConfig, save_policy, train
from .seeding import derive_seed
from .simplex import WeightVector, generate_simplex, uniform_weights
from .tensor_store import Checkpoint, compute_delta, load_checkpoint, save_checkpoint
from .zoo import TaskSpec, ZooModel, default_arch, evaluate, finetune_task, make_tasks, train_base

__all__ = [
    "ZooSettings",
    "RunConfig",
    "LambdaRecord",
    "RunReport",
    "load_run_config",
    "config_hash",
    "run_hm3",
    "run_baselines",
    "emit_reports",
    "build_zoo",
    "load_zoo",
]

ABLATIONS = ("full", "no_arch", "no_para")


@dataclass(frozen=True)
class ZooSettings:
    k: int = 3
    num_layers: int = 4
    hidden_width: int = 32
    activation: str = "relu"
    train_size: int = 2048
    val_size: int = 512
    base_steps: int = 2000
    base_lr: float = 0.17
    base_batch: int = 4
    finetune_steps: int = 2500
    finetune_lr: float = 0.08
    finetune_batch: int = 256


@dataclass(frozen=True)
class MergeSettings:
    drop_prob: float = 0.5
    keep_fraction: float = 0.2
    trim_scope: str = "global"
    lambda_stage: str = "pre_election"


@dataclass(frozen=True)
class EnvSettings:
    beta1: float = 0.01
    t_max: int | None = None  # defaults to twice the layer count
    reward_mode: str = "per_step"
    probe_batch: int = 64


@dataclass(frozen=True)
class PPOSettings:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    learning_rate: float = 3e-4
    epochs_per_batch: int = 4
    episodes_per_iter: int = 8
    max_iter: int = 1000
    warmup_iters: int = 200
    hidden: int = 64
    normalize_adv: bool = True
    snapshot_every: int = 50


@dataclass(frozen=True)
class RunConfig:
    zoo: ZooSettings = field(default_factory=ZooSettings)
    q: int = 4
    merge: MergeSettings = field(default_factory=MergeSettings)
    env: EnvSettings = field(default_factory=EnvSettings)
    ppo: PPOSettings = field(default_factory=PPOSettings)
    ablation: str = "full"
    master_seed: int = 0
    out_dir: str = "runs/hm3"
    workers: int | None = None

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")

    @property
    def t_max(self) -> int:
        return self.env.t_max if self.env.t_max is not None else 2 * self.zoo.num_layers


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of every semantically meaningful field.

    The output location and worker count do not affect results and are
    excluded on purpose.
    """
    payload = asdict(cfg)
    payload.pop("out_dir")
    payload.pop("workers")
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _build_section(cls, data: dict, section: str):
    valid = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{section}] section: {exc}") from exc


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a TOML run configuration, applying CLI overrides on top."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    run = dict(data.get("run", {}))
    weights = dict(data.get("weights", {}))
    kwargs = dict(
        zoo=_build_section(ZooSettings, dict(data.get("zoo", {})), "zoo"),
        merge=_build_section(MergeSettings, dict(data.get("merge", {})), "merge"),
        env=_build_section(EnvSettings, dict(data.get("env", {})), "env"),
        ppo=_build_section(PPOSettings, dict(data.get("ppo", {})), "ppo"),
    )
    if "q" in weights:
        kwargs["q"] = int(weights["q"])
    for key in ("ablation", "master_seed", "out_dir"):
        if key in run:
            kwargs[key] = run[key]
    for key, value in (overrides or {}).items():
        if value is not None:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad run configuration: {exc}") from exc


# --- zoo stage -------------------------------------------------------------------


def build_zoo(cfg: RunConfig, zoo_dir: Path) -> tuple[list[TaskSpec], Checkpoint, list[Checkpoint]]:
    """Train (or reuse) the base model and its fine-tuned variants on disk."""
    zs = cfg.zoo
    zoo_seed = derive_seed(cfg.master_seed, "zoo")
    tasks = [
        replace(t, train_size=zs.train_size, val_size=zs.val_size)
        for t in make_tasks(zs.k, zoo_seed)
    ]
    zoo_dir.mkdir(parents=True, exist_ok=True)
    stamp_path = zoo_dir / "tasks.json"
    stamp_key = config_hash(replace(cfg, ablation="full"))
    manifest = {
        "config_hash": stamp_key,
        "k": zs.k,
        "tasks": [
            {"task_id": t.task_id, "generator_seed": t.generator_seed,
             "train_size": t.train_size, "val_size": t.val_size,
             "metric_name": t.metric_name}
            for t in tasks
        ],
    }
    base_path = zoo_dir / "base.ckpt"
    task_paths = [zoo_dir / f"task{k}.ckpt" for k in range(1, zs.k + 1)]
    reusable = (
        stamp_path.exists()
        and all(p.exists() for p in [base_path, *task_paths])
        and json.loads(stamp_path.read_text()).get("config_hash") == stamp_key
    )
    if reusable:
        base = load_checkpoint(base_path)
        finetuned = [load_checkpoint(p) for p in task_paths]
        return tasks, base, finetuned

    arch = default_arch(zs.k, num_layers=zs.num_layers, hidden_width=zs.hidden_width,
                        activation=zs.activation)
    base = train_base(arch, tasks, steps=zs.base_steps, seed=zoo_seed,
                      lr=zs.base_lr, batch_size=zs.base_batch)
    finetuned = [
        finetune_task(base, task, steps=zs.finetune_steps,
                      seed=derive_seed(cfg.master_seed, f"finetune.{task.task_id}"),
                      lr=zs.finetune_lr, batch_size=zs.finetune_batch, tasks=tasks)
        for task in tasks
    ]
    save_checkpoint(base, base_path)
    for ckpt, p in zip(finetuned, task_paths):
        save_checkpoint(ckpt, p)
    stamp_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return tasks, base, finetuned


def load_zoo(zoo_dir: Path) -> tuple[list[TaskSpec], Checkpoint, list[Checkpoint]]:
    """Load a zoo directory written by build_zoo."""
    manifest = json.loads((Path(zoo_dir) / "tasks.json").read_text())
    tasks = [TaskSpec(**entry) for entry in manifest["tasks"]]
    base = load_checkpoint(Path(zoo_dir) / "base.ckpt")
    finetuned = [load_checkpoint(Path(zoo_dir) / f"task{t.task_id}.ckpt") for t in tasks]
    return tasks, base, finetuned


# --- per-preference jobs ------------------------------------------------------------


@dataclass
class LambdaRecord:
    index: int
    lam: tuple[float, ...]
    param_metrics: tuple[float, ...] | None
    path_metrics: tuple[float, ...] | None
    final_metrics: tuple[float, ...]
    final_source: str  # "param_merge" or "path"
    best_return: float | None
    path_length: int | None


def _merge_for_lambda(cfg: RunConfig, base: Checkpoint, finetuned: list[Checkpoint],
                      lam: WeightVector) -> Checkpoint:
    deltas = [compute_delta(m, base) for m in finetuned]
    mc = MergeConfig(
        method="hm3_param",
        drop_prob=cfg.merge.drop_prob,
        keep_fraction=cfg.merge.keep_fraction,
        weight_vector=lam,
        rng_seed=derive_seed(cfg.master_seed, f"merge.{lam.index}"),
        trim_scope=cfg.merge.trim_scope,
        lambda_stage=cfg.merge.lambda_stage,
    )
    return hm3_param_merge(base, deltas, lam, mc)


def _lambda_job(args) -> tuple[LambdaRecord, list[tuple[int, tuple[float, ...]]]]:
    """Merge, search, and score one weight vector. Runs in a worker process."""
    cfg, tasks, base, finetuned, lam = args
    out = Path(cfg.out_dir)
    merged_path = out / "merged" / f"lambda_{lam.index:02d}.ckpt"
    merged_path.parent.mkdir(parents=True, exist_ok=True)
    merged = _merge_for_lambda(cfg, base, finetuned, lam)
    save_checkpoint(merged, merged_path)
    eval_seed = derive_seed(cfg.master_seed, "eval")
    param_metrics = evaluate(ZooModel(merged), tasks, "val", seed=eval_seed)

    if cfg.ablation == "no_arch":
        record = LambdaRecord(
            index=lam.index, lam=lam.components,
            param_metrics=param_metrics.values, path_metrics=None,
            final_metrics=param_metrics.values, final_source="param_merge",
            best_return=None, path_length=None,
        )
        return record, []

    if cfg.ablation == "no_para":
        models = list(finetuned)
        param_values = None
    else:
        models = list(finetuned) + [merged]
        param_values = param_metrics.values
    env_cfg = EnvConfig(
        lam=lam,
        tasks=tuple(tasks),
        beta1=cfg.env.beta1,
        t_max=cfg.t_max,
        reward_mode=cfg.env.reward_mode,
        probe_batch=cfg.env.probe_batch,
        eval_seed=derive_seed(cfg.master_seed, f"env.{lam.index}"),
        num_models=len(models),
    )
    ppo_cfg = PPOConfig(
        gamma=cfg.ppo.gamma, gae_lambda=cfg.ppo.gae_lambda, clip_eps=cfg.ppo.clip_eps,
        c1=cfg.ppo.c1, c2=cfg.ppo.c2, learning_rate=cfg.ppo.learning_rate,
        epochs_per_batch=cfg.ppo.epochs_per_batch,
        episodes_per_iter=cfg.ppo.episodes_per_iter, max_iter=cfg.ppo.max_iter,
        warmup_iters=cfg.ppo.warmup_iters,
        seed=derive_seed(cfg.master_seed, f"ppo.{lam.index}"),
        hidden=cfg.ppo.hidden, normalize_adv=cfg.ppo.normalize_adv,
        snapshot_every=cfg.ppo.snapshot_every,
    )
    result = train(models, lam, env_cfg, ppo_cfg)
    path_metrics = evaluate(assemble_model(result.best_path, models), tasks, "val",
                            seed=eval_seed)

    # the searched path must never make a preference worse than its parameter
    # merge, so the better of the two (by scalarized metric) is the final model
    if param_values is not None and scalarize(param_metrics, lam) >= scalarize(path_metrics, lam):
        final_metrics, final_source = param_values, "param_merge"
    else:
        final_metrics, final_source = path_metrics.values, "path"

    run_dir = out / "runs" / f"lambda_{lam.index:02d}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_history_csv(run_dir / "history.csv", result.history)
    with open(run_dir / "best_path.json", "w", encoding="utf-8") as fh:
        json.dump(path_to_record(result.best_path, lam, result.best_return), fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    save_policy(result, run_dir / "policy.ckpt")

    snapshot_metrics = [
        (it, evaluate(assemble_model(path, models), tasks, "val", seed=eval_seed).values)
        for it, path, _ret in result.snapshots
    ]
    record = LambdaRecord(
        index=lam.index, lam=lam.components,
        param_metrics=param_values, path_metrics=path_metrics.values,
        final_metrics=final_metrics, final_source=final_source,
        best_return=result.best_return, path_length=result.best_path.length,
    )
    return record, snapshot_metrics


# --- aggregation --------------------------------------------------------------------


@dataclass
class RunReport:
    ablation: str
    config_hash: str
    records: list[LambdaRecord]
    baselines: list[ObjectivePoint]
    front: ParetoFront
    hv: float
    hv_history: list[tuple[int, float]]
    wall_clock: float


def front_and_hv(points: list[ObjectivePoint]) -> tuple[ParetoFront, float]:
    """Non-dominated filter and hypervolume for maximize-oriented metrics in [0, 1].

    The returned front keeps the original (maximize) values; the hypervolume
    is computed in the normalized minimization space against reference (1, .., 1).
    """
    if not points:
        return ParetoFront(points=(), reference=None), 0.0
    k = len(points[0])
    normalized = normalize_to_min(points, [(0.0, 1.0)] * k)
    norm_front = nondominated_filter(normalized)
    hv = hypervolume(ParetoFront(points=norm_front.points, reference=tuple([1.0] * k)))
    kept_labels = {p.label for p in norm_front.points}
    kept = [p for p in points if p.label in kept_labels]
    return ParetoFront(points=tuple(kept), reference=tuple([1.0] * k)), hv


def singleton_hv(point: ObjectivePoint) -> float:
    """Hypervolume of one maximize-oriented point against reference (1, ..., 1)."""
    _, hv = front_and_hv([point])
    return hv


def run_baselines(cfg: RunConfig, tasks: list[TaskSpec], base: Checkpoint,
                  finetuned: list[Checkpoint]) -> list[ObjectivePoint]:
    """Single fine-tuned models plus the classic single-solution merges."""
    eval_seed = derive_seed(cfg.master_seed, "eval")
    points = []
    for k, model in enumerate(finetuned, start=1):
        m = evaluate(ZooModel(model), tasks, "val", seed=eval_seed)
        points.append(ObjectivePoint(values=m.values, orientation="maximize",
                                     label=f"finetuned_{k}"))
    lam = uniform_weights(len(finetuned))
    for method in ("task_arithmetic", "ties", "dare_ties"):
        mc = MergeConfig(
            method=method,
            drop_prob=cfg.merge.drop_prob,
            keep_fraction=cfg.merge.keep_fraction,
            weight_vector=lam if method == "task_arithmetic" else None,
            rng_seed=derive_seed(cfg.master_seed, f"baseline.{method}"),
            lambda_scalar=1.0,
            trim_scope=cfg.merge.trim_scope,
        )
        merged = merge_from_config(base, finetuned, mc)
        m = evaluate(ZooModel(merged), tasks, "val", seed=eval_seed)
        points.append(ObjectivePoint(values=m.values, orientation="maximize",
                                     label=method))
    return points


def run_hm3(cfg: RunConfig) -> RunReport:
    """Execute the configured pipeline and leave all artifacts in out_dir."""
    started = time.monotonic()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)

    try:
        tasks, base, finetuned = build_zoo(cfg, out / "zoo")
    except Exception as exc:
        raise StageError("zoo", str(exc)) from exc

    try:
        weights = generate_simplex(cfg.zoo.k, cfg.q)
        _write_weights_csv(out / "weights.csv", weights)
    except Exception as exc:
        raise StageError("weights", str(exc)) from exc

    jobs = [(cfg, tasks, base, finetuned, lam) for lam in weights]
    try:
        outputs = _run_jobs(jobs, cfg.workers)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("search", str(exc)) from exc

    records = [rec for rec, _snaps in outputs]
    snapshot_lists = [snaps for _rec, snaps in outputs]

    try:
        baselines = run_baselines(cfg, tasks, base, finetuned)
    except Exception as exc:
        raise StageError("baselines", str(exc)) from exc

    final_points = [
        ObjectivePoint(values=rec.final_metrics, orientation="maximize",
                       label=f"lambda_{rec.index:02d}")
        for rec in records
    ]
    front, hv = front_and_hv(final_points)

    hv_history: list[tuple[int, float]] = []
    if cfg.ablation == "no_arch":
        hv_history.append((0, hv))
    else:
        by_iter: dict[int, list[tuple[float, ...]]] = {}
        for snaps in snapshot_lists:
            for it, values in snaps:
                by_iter.setdefault(it, []).append(values)
        for it in sorted(by_iter):
            pts = [
                ObjectivePoint(values=v, orientation="maximize", label=str(i))
                for i, v in enumerate(by_iter[it])
            ]
            hv_history.append((it, front_and_hv(pts)[1]))

    report = RunReport(
        ablation=cfg.ablation,
        config_hash=digest,
        records=records,
        baselines=baselines,
        front=front,
        hv=hv,
        hv_history=hv_history,
        wall_clock=time.monotonic() - started,
    )
    emit_reports(report, out / "reports")
    return report


def _run_jobs(jobs, workers: int | None):
    resolved = _resolve_workers(workers, len(jobs))
    if resolved <= 1 or len(jobs) <= 1:
        return [_lambda_job(j) for j in jobs]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    with ctx.Pool(processes=resolved) as pool:
        return pool.map(_lambda_job, jobs)


def _resolve_workers(configured: int | None, num_jobs: int) -> int:
    cap = os.environ.get("HM3_THREADS")
    if configured is None:
        configured = os.cpu_count() or 1
    if cap is not None:
        try:
            configured = min(configured, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"HM3_THREADS must be an integer, got {cap!r}") from exc
    return max(1, min(configured, num_jobs))


# --- report emission -------------------------------------------------------------------


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_weights_csv(path, weights: list[WeightVector]) -> None:
    k = len(weights[0]) if weights else 0
    lines = ["index," + ",".join(f"lambda_{i}" for i in range(1, k + 1))]
    for w in weights:
        lines.append(f"{w.index}," + ",".join(_fmt(c) for c in w.components))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_history_csv(path, history: list[dict]) -> None:
    cols = ["iter", "mean_return", "best_return", "policy_loss", "value_loss", "entropy"]
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(
            str(row["iter"]) if c == "iter" else _fmt(row[c]) for c in cols
        ))
    Path(path).write_text("\n".join(lines) + "\n")


def _metric_header(k: int) -> str:
    return "label," + ",".join(f"f_{i}" for i in range(1, k + 1))


def emit_reports(report: RunReport, out_dir) -> None:
    """Write front.csv, metrics.csv, hv_history.csv, pareto.svg, report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = len(report.front.points[0]) if report.front.points else (
        len(report.records[0].final_metrics) if report.records else 0
    )

    lines = [_metric_header(k)]
    for p in report.front.points:
        lines.append(p.label + "," + ",".join(_fmt(v) for v in p.values))
    (out / "front.csv").write_text("\n".join(lines) + "\n")

    lines = [_metric_header(k)]
    for rec in report.records:
        lines.append(f"lambda_{rec.index:02d}," + ",".join(_fmt(v) for v in rec.final_metrics))
        if rec.param_metrics is not None and rec.final_source != "param_merge":
            lines.append(f"lambda_{rec.index:02d}_param," + ",".join(_fmt(v) for v in rec.param_metrics))
    for p in report.baselines:
        lines.append(p.label + "," + ",".join(_fmt(v) for v in p.values))
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    lines = ["iter,hv"]
    for it, hv in report.hv_history:
        lines.append(f"{it},{_fmt(hv)}")
    (out / "hv_history.csv").write_text("\n".join(lines) + "\n")

    (out / "pareto.svg").write_text(_render_scatter_svg(report))

    payload = {
        "ablation": report.ablation,
        "config_hash": report.config_hash,
        "hv": report.hv,
        "wall_clock_seconds": report.wall_clock,
        "records": [
            {
                "index": rec.index,
                "lambda": list(rec.lam),
                "param_metrics": list(rec.param_metrics) if rec.param_metrics else None,
                "path_metrics": list(rec.path_metrics) if rec.path_metrics else None,
                "final_metrics": list(rec.final_metrics),
                "final_source": rec.final_source,
                "best_return": rec.best_return,
                "path_length": rec.path_length,
            }
            for rec in report.records
        ],
        "baselines": [
            {"label": p.label, "values": list(p.values)} for p in report.baselines
        ],
        "front": [
            {"label": p.label, "values": list(p.values)} for p in report.front.points
        ],
        "hv_history": [[it, hv] for it, hv in report.hv_history],
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _render_scatter_svg(report: RunReport, size: int = 420) -> str:
    """Minimal scatter of the first two objectives: front circles, baseline squares."""
    pad = 48
    span = size - 2 * pad

    def sx(v: float) -> float:
        return pad + span * min(max(v, 0.0), 1.0)

    def sy(v: float) -> float:
        return size - pad - span * min(max(v, 0.0), 1.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
        f'<text x="{size // 2}" y="{size - 12}" font-size="12" text-anchor="middle">f_1</text>',
        f'<text x="14" y="{size // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {size // 2})">f_2</text>',
    ]
    for tick in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{sx(tick):.1f}" y="{size - pad + 16}" font-size="10" '
            f'text-anchor="middle">{tick:g}</text>'
        )
        parts.append(
            f'<text x="{pad - 8}" y="{sy(tick) + 3:.1f}" font-size="10" '
            f'text-anchor="end">{tick:g}</text>'
        )
    for p in report.baselines:
        x, y = sx(p.values[0]), sy(p.values[1] if len(p.values) > 1 else p.values[0])
        parts.append(
            f'<rect x="{x - 4:.2f}" y="{y - 4:.2f}" width="8" height="8" '
            f'fill="#d62728" opacity="0.8"><title>{p.label}</title></rect>'
        )
    for p in report.front.points:
        x, y = sx(p.values[0]), sy(p.values[1] if len(p.values) > 1 else p.values[0])
        parts.append(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="#1f77b4" '
            f'opacity="0.85"><title>{p.label}</title></circle>'
        )
    parts.append(
        f'<text x="{size - pad}" y="{pad - 12}" font-size="11" text-anchor="end">'
        f'front (circles) vs single-solution baselines (squares)</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
