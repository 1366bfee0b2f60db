"""Command-line front end.

Reads a flat key=value configuration (optionally expanded from a named
preset), runs the experiment once per repeat seed, and writes long-format
CSV tables plus a JSON manifest into the output directory:

  metrics.csv   seed, round, method, dist_sq, loss_gap, grad_norm_sq,
                val_loss, accuracy, delta
  weights.csv   seed, round, method, client_index, weight
  theorem.csv   per-seed, per-method convergence-bound report
  manifest.json expanded config, code version, per-seed mixture direction

All floats are written with 17 significant digits so reruns are
byte-comparable; blank cells mean "not defined for this task or round".
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

from . import __version__
from .aggregators import (
    FEDADP_SMOOTH_RUNNING,
    KIND_FEDADP,
    KIND_FEDAVG,
    KIND_MERITFED,
    KIND_SGD_FULL,
    KIND_SGD_IDEAL,
    KIND_TAWT,
    TAWT_MODE_COSINE,
    MethodConfig,
)
from .clients import ATTACK_KINDS, AttackSpec
from .engine import TASK_MEAN, TASK_SOFTMAX, ExperimentSpec, run_experiment
from .errors import ConfigError, MeritFedError
from .simplex_opt import ESTIMATOR_EXACT, ESTIMATOR_ZO, MdConfig
from .tasks import MODE_EXTRA, MODE_POPULATION, MODE_REUSE_TRAIN

OUT_DIR_ENV = "MERITFED_OUT_DIR"
DEFAULT_OUT_DIR = "runs"

ATTACK_NONE = "none"

METRICS_COLUMNS = (
    "seed",
    "round",
    "method",
    "dist_sq",
    "loss_gap",
    "grad_norm_sq",
    "val_loss",
    "accuracy",
    "delta",
)
WEIGHTS_COLUMNS = ("seed", "round", "method", "client_index", "weight")
THEOREM_COLUMNS = (
    "seed",
    "method",
    "rounds",
    "group_size",
    "sigma_sq",
    "delta_bar",
    "delta_estimator",
    "initial_gap",
    "avg_grad_norm_sq",
    "noncvx_rhs",
    "noncvx_holds",
    "final_gap",
    "pl_rhs",
    "pl_holds",
    "step_size_ok",
    "applies",
)

# Configuration schema: key -> (python type, default used only by presets).
# Every key is required in a preset-free config file.
CONFIG_SCHEMA = {
    "task": str,
    "dim": int,
    "group1_count": int,
    "group2_count": int,
    "group3_count": int,
    "byzantine_count": int,
    "attack_kind": str,
    "attack_sigma": float,
    "attack_epsilon": float,
    "attack_z": float,
    "attack_shift_sign": int,
    "group2_shift": float,
    "shard_size": int,
    "batch_size": int,
    "model_step": float,
    "rounds": int,
    "validation_size": int,
    "validation_mode": str,
    "exact_gradients": bool,
    "weight_log_every": int,
    "mixing_alpha": float,
    "n_classes": int,
    "test_size": int,
    "methods": tuple,
    "md_steps": int,
    "md_lr": float,
    "md_smoothing": float,
    "smd_minibatch": int,
    "fedadp_alpha": float,
    "tawt_step": float,
    "seeds": int,
    "base_seed": int,
}

METHOD_LABELS_FIXED = (
    "meritfed-md",
    "meritfed-smd",
    "meritfed-zo",
    "sgd-full",
    "sgd-ideal",
    "fedadp",
    "tawt",
)


@dataclass
class RunConfig:
    """Validated flat configuration, one field per schema key."""

    task: str
    dim: int
    group1_count: int
    group2_count: int
    group3_count: int
    byzantine_count: int
    attack_kind: str
    attack_sigma: float
    attack_epsilon: float
    attack_z: float
    attack_shift_sign: int
    group2_shift: float
    shard_size: int
    batch_size: int
    model_step: float
    rounds: int
    validation_size: int
    validation_mode: str
    exact_gradients: bool
    weight_log_every: int
    mixing_alpha: float
    n_classes: int
    test_size: int
    methods: tuple
    md_steps: int
    md_lr: float
    md_smoothing: float
    smd_minibatch: int
    fedadp_alpha: float
    tawt_step: float
    seeds: int
    base_seed: int
    preset: Optional[str] = None


def _mean_preset(group2_shift: float, md_lr: float) -> dict:
    return {
        "task": TASK_MEAN,
        "dim": 10,
        "group1_count": 5,
        "group2_count": 95,
        "group3_count": 50,
        "byzantine_count": 0,
        "attack_kind": ATTACK_NONE,
        "attack_sigma": 1.0,
        "attack_epsilon": 0.1,
        "attack_z": 100.0,
        "attack_shift_sign": -1,
        "group2_shift": group2_shift,
        "shard_size": 1000,
        "batch_size": 100,
        "model_step": 0.01,
        "rounds": 2000,
        "validation_size": 100000,
        "validation_mode": MODE_EXTRA,
        "exact_gradients": False,
        "weight_log_every": 10,
        "mixing_alpha": 0.5,
        "n_classes": 10,
        "test_size": 4000,
        "methods": (
            "meritfed-md",
            "meritfed-smd",
            "sgd-full",
            "sgd-ideal",
            "fedadp",
            "tawt",
            "fedavg-5",
            "fedavg-10",
        ),
        "md_steps": 50,
        "md_lr": md_lr,
        "md_smoothing": 1e-4,
        "smd_minibatch": 100,
        "fedadp_alpha": 5.0,
        "tawt_step": 0.0,
        "seeds": 3,
        "base_seed": 0,
    }


def _byzantine_preset(attack_kind: str) -> dict:
    values = _mean_preset(group2_shift=0.1, md_lr=3.5)
    values.update(
        group2_count=0,
        group3_count=0,
        byzantine_count=50,
        attack_kind=attack_kind,
        rounds=1000,
        methods=("meritfed-md", "sgd-full", "sgd-ideal"),
        md_steps=10,
    )
    return values


def _theorem_preset() -> dict:
    values = _mean_preset(group2_shift=0.1, md_lr=3.5)
    values.update(
        group2_count=0,
        group3_count=0,
        shard_size=100000,
        methods=("meritfed-md", "sgd-ideal"),
    )
    return values


def _softmax_preset(mixing_alpha: float) -> dict:
    values = _mean_preset(group2_shift=0.1, md_lr=5.0)
    values.update(
        task=TASK_SOFTMAX,
        group1_count=1,
        group2_count=10,
        group3_count=9,
        shard_size=1000,
        batch_size=75,
        model_step=0.05,
        rounds=300,
        validation_size=4000,
        weight_log_every=1,
        mixing_alpha=mixing_alpha,
        methods=("meritfed-md", "sgd-ideal"),
        md_steps=30,
    )
    return values


PRESETS = {
    "mean-mu-0.1": lambda: _mean_preset(0.1, 12.5),
    "mean-mu-0.01": lambda: _mean_preset(0.01, 4.5),
    "mean-mu-0.001": lambda: _mean_preset(0.001, 3.5),
    "theorem-mean": _theorem_preset,
    "byzantine-bf": lambda: _byzantine_preset("bit-flip"),
    "byzantine-rn": lambda: _byzantine_preset("random-noise"),
    "byzantine-ipm": lambda: _byzantine_preset("ipm"),
    "byzantine-alie": lambda: _byzantine_preset("alie"),
    "softmax-alpha-0.5": lambda: _softmax_preset(0.5),
    "softmax-alpha-0.99": lambda: _softmax_preset(0.99),
}


def _parse_value(key: str, raw: str, where: str) -> object:
    kind = CONFIG_SCHEMA[key]
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "false"):
                return lowered == "true"
            raise ValueError(f"expected true or false, got {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            parts = tuple(p.strip() for p in text.split(",") if p.strip())
            if not parts:
                raise ValueError("expected a comma-separated method list")
            return parts
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_config(
    text: str, preset: Optional[str] = None, overrides: Optional[list[str]] = None
) -> RunConfig:
    """Parse key=value configuration text into a validated RunConfig.

    Lines are `key = value` with `#` comments. A `preset` key (or the
    explicit preset argument) supplies defaults for every other key;
    explicit keys override preset values, and override strings (from
    --set) are applied last. Without a preset, every schema key is
    required.
    """
    values: dict = {}
    seen: dict[str, int] = {}
    file_preset: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key == "preset":
            file_preset = raw.strip()
            continue
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        values[key] = _parse_value(key, raw, f"line {lineno}")

    preset_name = preset if preset is not None else file_preset
    if preset_name is not None:
        if preset_name not in PRESETS:
            known = ", ".join(sorted(PRESETS))
            raise ConfigError(f"unknown preset {preset_name!r}; known presets: {known}")
        merged = PRESETS[preset_name]()
        merged.update(values)
        values = merged

    for index, item in enumerate(overrides or [], start=1):
        if "=" not in item:
            raise ConfigError(f"--set entry {index}: expected key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"--set entry {index}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, f"--set entry {index}")

    missing = sorted(k for k in CONFIG_SCHEMA if k not in values)
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))

    config = RunConfig(preset=preset_name, **values)
    validate_config(config)
    return config


def emit_config(config: RunConfig) -> str:
    """Canonical text form; parse_config(emit_config(c)) equals c."""
    lines = []
    if config.preset is not None:
        lines.append(f"preset = {config.preset}")
    for key, kind in CONFIG_SCHEMA.items():
        value = getattr(config, key)
        if kind is bool:
            text = "true" if value else "false"
        elif kind is float:
            text = format(value, ".17g")
        elif kind is tuple:
            text = ",".join(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def validate_config(config: RunConfig) -> None:
    if config.seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {config.seeds}")
    if config.attack_kind != ATTACK_NONE and config.attack_kind not in ATTACK_KINDS:
        known = ", ".join((ATTACK_NONE,) + ATTACK_KINDS)
        raise ConfigError(f"unknown attack_kind {config.attack_kind!r}; known: {known}")
    if config.byzantine_count > 0 and config.attack_kind == ATTACK_NONE:
        raise ConfigError("byzantine_count > 0 requires an attack_kind")
    if config.attack_shift_sign not in (-1, 1):
        raise ConfigError(f"attack_shift_sign must be -1 or 1, got {config.attack_shift_sign}")
    for label in config.methods:
        _method_from_label(label, config)  # raises on unknown labels
    build_experiment(config)  # full engine-side validation


def _method_from_label(label: str, config: RunConfig) -> MethodConfig:
    step = config.model_step
    if label == "meritfed-md" or label == "meritfed-smd" or label == "meritfed-zo":
        # Solver step sizes are quoted per unit of model step, so the
        # simplex objective sees the same geometry at any model step.
        md = MdConfig(
            step_size=config.md_lr / step,
            step_count=config.md_steps,
            estimator=ESTIMATOR_ZO if label == "meritfed-zo" else ESTIMATOR_EXACT,
            smoothing=config.md_smoothing,
            minibatch=config.smd_minibatch if label == "meritfed-smd" else 0,
        )
        return MethodConfig(kind=KIND_MERITFED, label=label, model_step=step, md=md)
    if label == "sgd-full":
        return MethodConfig(kind=KIND_SGD_FULL, label=label, model_step=step)
    if label == "sgd-ideal":
        return MethodConfig(
            kind=KIND_SGD_IDEAL,
            label=label,
            model_step=step,
            ideal_indices=tuple(range(config.group1_count)),
        )
    if label == "fedadp":
        return MethodConfig(
            kind=KIND_FEDADP,
            label=label,
            model_step=step,
            fedadp_alpha=config.fedadp_alpha,
            fedadp_smoothing=FEDADP_SMOOTH_RUNNING,
        )
    if label == "tawt":
        return MethodConfig(
            kind=KIND_TAWT,
            label=label,
            model_step=step,
            tawt_step=config.tawt_step if config.tawt_step > 0 else config.md_lr,
            tawt_mode=TAWT_MODE_COSINE,
        )
    if label.startswith("fedavg-"):
        suffix = label[len("fedavg-"):]
        try:
            count = int(suffix)
        except ValueError:
            raise ConfigError(f"bad fedavg sample count in method label {label!r}") from None
        return MethodConfig(kind=KIND_FEDAVG, label=label, model_step=step, sample_count=count)
    known = ", ".join(METHOD_LABELS_FIXED + ("fedavg-<k>",))
    raise ConfigError(f"unknown method label {label!r}; known: {known}")


def build_experiment(config: RunConfig, master_seed: int = 0) -> ExperimentSpec:
    """Expand the flat config into an engine spec for one seed."""
    attack = None
    if config.byzantine_count > 0:
        attack = AttackSpec(
            kind=config.attack_kind,
            sigma=config.attack_sigma,
            epsilon=config.attack_epsilon,
            z=config.attack_z,
            shift_sign=config.attack_shift_sign,
        )
    spec = ExperimentSpec(
        methods=[_method_from_label(label, config) for label in config.methods],
        task=config.task,
        dim=config.dim,
        group_counts=(config.group1_count, config.group2_count, config.group3_count),
        byzantine_count=config.byzantine_count,
        attack=attack,
        group2_shift=config.group2_shift,
        shard_size=config.shard_size,
        batch_size=config.batch_size,
        model_step=config.model_step,
        rounds=config.rounds,
        validation_size=config.validation_size,
        validation_mode=config.validation_mode,
        exact_gradients=config.exact_gradients,
        master_seed=master_seed,
        weight_log_every=config.weight_log_every,
        mixing_alpha=config.mixing_alpha,
        n_classes=config.n_classes,
        test_size=config.test_size,
    )
    spec.validate()
    return spec


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _seed_payload(config: RunConfig, master_seed: int) -> dict:
    """Run one seed and flatten everything the writers need (picklable)."""
    spec = build_experiment(config, master_seed=master_seed)
    result = run_experiment(spec)
    metrics_rows = [
        (
            master_seed,
            m.round_index,
            m.method,
            m.dist_sq,
            m.loss_gap,
            m.grad_norm_sq,
            m.val_loss,
            m.accuracy,
            m.delta,
        )
        for m in result.metrics
    ]
    weight_rows = [
        (master_seed, round_index, method, client, float(value))
        for round_index, method, vector in result.weight_rows
        for client, value in enumerate(vector)
    ]
    theorem_rows = [
        (
            master_seed,
            row.method,
            row.rounds,
            row.group_size,
            row.sigma_sq,
            row.delta_bar,
            row.delta_estimator,
            row.initial_gap,
            row.avg_grad_norm_sq,
            row.noncvx_rhs,
            row.noncvx_holds,
            row.final_gap,
            row.pl_rhs,
            row.pl_holds,
            row.step_size_ok,
            row.applies,
        )
        for row in result.convergence
    ]
    direction = (
        None if result.mixture_direction is None else [float(v) for v in result.mixture_direction]
    )
    return {
        "seed": master_seed,
        "metrics": metrics_rows,
        "weights": weight_rows,
        "theorem": theorem_rows,
        "mixture_direction": direction,
    }


def _write_csv(path: str, columns: tuple, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(",".join(columns) + "\n")
        for row in rows:
            handle.write(",".join(_format_cell(cell) for cell in row) + "\n")


def run_config(config: RunConfig, out_dir: str, workers: int = 1) -> dict:
    """Run every repeat seed and write the output tables. Returns the manifest."""
    seeds = [config.base_seed + j for j in range(config.seeds)]
    if workers > 1 and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            payloads = list(pool.map(_seed_payload, [config] * len(seeds), seeds))
    else:
        payloads = [_seed_payload(config, seed) for seed in seeds]

    os.makedirs(out_dir, exist_ok=True)
    metrics_rows = [row for payload in payloads for row in payload["metrics"]]
    weight_rows = [row for payload in payloads for row in payload["weights"]]
    theorem_rows = [row for payload in payloads for row in payload["theorem"]]
    _write_csv(os.path.join(out_dir, "metrics.csv"), METRICS_COLUMNS, metrics_rows)
    _write_csv(os.path.join(out_dir, "weights.csv"), WEIGHTS_COLUMNS, weight_rows)
    _write_csv(os.path.join(out_dir, "theorem.csv"), THEOREM_COLUMNS, theorem_rows)

    manifest = {
        "version": __version__,
        "preset": config.preset,
        "config": {key: getattr(config, key) for key in CONFIG_SCHEMA},
        "seeds": seeds,
        "mixture_directions": {
            str(payload["seed"]): payload["mixture_direction"] for payload in payloads
        },
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meritfed",
        description="Federated aggregation-weight experiments with CSV output.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    run_cmd = commands.add_parser("run", help="run an experiment from a config or preset")
    run_cmd.add_argument("--config", help="path to a key=value config file")
    run_cmd.add_argument("--preset", help="named preset (e.g. mean-mu-0.1)")
    run_cmd.add_argument("--seed", type=int, help="override the base seed")
    run_cmd.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
    run_cmd.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )
    run_cmd.add_argument(
        "--workers", type=int, default=1, help="parallel processes across repeat seeds"
    )
    run_cmd.add_argument(
        "--list-presets", action="store_true", help="print known preset names and exit"
    )
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.list_presets:
        for name in sorted(PRESETS):
            print(name)
        return 0

    try:
        if args.config is None and args.preset is None:
            raise ConfigError("provide --config and/or --preset")
        text = ""
        if args.config is not None:
            try:
                with open(args.config, "r", encoding="utf-8") as handle:
                    text = handle.read()
            except OSError as exc:
                print(f"error: cannot read config: {exc}", file=sys.stderr)
                return 1
        config = parse_config(text, preset=args.preset, overrides=args.overrides)
        if args.seed is not None:
            config = dataclasses.replace(config, base_seed=args.seed)
        if args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = args.out or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR
    try:
        run_config(config, out_dir, workers=args.workers)
    except MeritFedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote metrics.csv, weights.csv, theorem.csv, manifest.json to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
