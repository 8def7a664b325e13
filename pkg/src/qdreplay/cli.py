"""Command-line entry points: batch selection, loop runs, ablation tables."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import LoopConfig, Variant, run_ablation, run_loop
from .geometry import encode_pool, median_bandwidth, rbf_similarity
from .kernels import build_joint_kernel, greedy_map
from .policy import LinearSoftmaxPolicy
from .replay import WeightMode
from .scoring import composite_quality
from .windows import JsonlParseError, load_jsonl

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EMPTY = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    pass


class EmptyInputError(Exception):
    pass


_INT_KEYS = {
    "horizon", "pool_size", "subset_size", "refresh_period", "batch_size",
    "passes", "episodes", "warmup_episodes", "pretrain_steps", "updates_per_episode",
    "eval_every", "eval_episodes", "feature_dim", "capacity",
    "num_stages", "action_count", "t_max",
}
_FLOAT_KEYS = {
    "eta", "alpha", "beta", "zeta", "lam", "gamma", "demo_epsilon",
    "learning_rate", "dropout_rate", "smoothing_alpha", "rtg_target", "slip",
}
_SPECIAL_KEYS = {"sigma", "steps_per_stage", "weight_mode", "seeds", "variant", "buffer", "out"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _SPECIAL_KEYS


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Plain key = value lines; '#' starts a comment; unknown keys rejected."""
    raw: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return raw


class RunSettings:
    def __init__(self, loop: LoopConfig, seeds: list[int], variant: Variant,
                 buffer: str | None, out: Path):
        self.loop = loop
        self.seeds = seeds
        self.variant = variant
        self.buffer = buffer
        self.out = out

    def config_hash(self) -> str:
        loop = self.loop
        parts = [f"{name}={getattr(loop, name)!r}" for name in sorted(vars(loop))]
        parts.append(f"variant={self.variant.value}")
        parts.append(f"seeds={self.seeds}")
        digest = hashlib.sha256("\n".join(parts).encode()).hexdigest()
        return digest[:12]


def build_settings(raw: dict[str, str], args: argparse.Namespace) -> RunSettings:
    loop = LoopConfig()
    updates = {}
    for key, value in raw.items():
        if key in _INT_KEYS:
            updates[key] = _coerce(key, value, int)
        elif key in _FLOAT_KEYS:
            updates[key] = _coerce(key, value, float)
        elif key == "sigma":
            updates[key] = None if value.lower() == "median" else _coerce(key, value, float)
        elif key == "steps_per_stage":
            updates[key] = tuple(_coerce(key, part, int) for part in value.split(","))
        elif key == "weight_mode":
            try:
                updates[key] = WeightMode[value.upper()]
            except KeyError:
                raise ConfigError(f"weight_mode must be RAW or MEAN_ONE, got {value!r}")
    loop = replace(loop, **updates)
    try:
        loop.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    seeds = [int(s) for s in args.seed] if args.seed else None
    if seeds is None and "seeds" in raw:
        try:
            seeds = [int(part) for part in raw["seeds"].split(",")]
        except ValueError as exc:
            raise ConfigError(f"seeds must be comma-separated integers: {raw['seeds']!r}") from exc
    if seeds is None:
        seeds = [0]

    variant_name = args.variant or raw.get("variant", "FULL")
    try:
        variant = Variant[variant_name.upper()]
    except KeyError:
        names = ", ".join(v.name for v in Variant)
        raise ConfigError(f"unknown variant {variant_name!r} (choose from {names})")

    buffer = getattr(args, "buffer", None) or raw.get("buffer")
    out = Path(args.out or raw.get("out", "."))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return RunSettings(loop=loop, seeds=seeds, variant=variant, buffer=buffer, out=out)


def _coerce(key: str, value: str, kind):
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from exc


def _provenance(settings: RunSettings, seed: int) -> str:
    return f"config_hash={settings.config_hash()} seed={seed}"


# ---------------------------------------------------------------------- select

def cmd_select(settings: RunSettings, kernel_dump: bool) -> int:
    if not settings.buffer:
        raise ConfigError("select needs a buffer path (positional argument or 'buffer' key)")
    if not Path(settings.buffer).exists():
        raise ConfigError(f"buffer file not found: {settings.buffer}")
    buffer = load_jsonl(settings.buffer, gamma=settings.loop.gamma)
    loop = settings.loop
    seed = settings.seeds[0]
    ss = np.random.SeedSequence(seed)
    policy_ss, pool_ss, score_ss = ss.spawn(3)

    try:
        pool = buffer.sample_candidate_pool(loop.pool_size, loop.horizon, np.random.default_rng(pool_ss))
    except ValueError as exc:
        raise EmptyInputError(str(exc)) from exc
    policy = LinearSoftmaxPolicy(
        state_dim=buffer.state_dim,
        action_count=loop.action_count,
        feature_dim=loop.feature_dim,
        dropout_rate=loop.dropout_rate,
        seed=policy_ss,
    )
    embeddings = encode_pool(pool, policy)
    sigma = loop.sigma if loop.sigma is not None else median_bandwidth(embeddings)
    similarity = rbf_similarity(embeddings, sigma)
    report = composite_quality(
        pool, loop.quality_weights(), policy,
        passes=loop.passes, gamma=loop.gamma,
        seed=int(np.random.default_rng(score_ss).integers(2 ** 31)),
        smoothing_alpha=loop.smoothing_alpha,
    )
    kernel = build_joint_kernel(similarity, report.composite, loop.lam)
    k = min(loop.subset_size, len(pool))
    selection = greedy_map(kernel, k)

    provenance = _provenance(settings, seed)
    selection_path = settings.out / "selection.json"
    payload = selection.to_json(extra={
        "config_hash": settings.config_hash(),
        "seed": seed,
        "windows": [
            {"episode": pool[i].episode_id, "start": pool[i].start}
            for i in selection.indices
        ],
    })
    selection_path.write_text(payload + "\n")
    if kernel_dump:
        kernel.write_csv(settings.out / "kernel.csv", header_comment=provenance)
    print(f"wrote {selection_path} ({len(selection.indices)} windows)")
    return EXIT_OK


# ------------------------------------------------------------------------ loop

_METRICS_COLUMNS = "variant,seed,step,success,diversity,redundancy,episodes"


def _metrics_row(variant: Variant, seed: int, point) -> str:
    return ",".join([
        variant.value, str(seed), str(point.gradient_steps),
        repr(point.success_rate), repr(point.diversity),
        repr(point.redundancy), str(point.episodes_used),
    ])


def cmd_loop(settings: RunSettings) -> int:
    seed = settings.seeds[0]
    provenance = _provenance(settings, seed)
    metrics_path = settings.out / "metrics.csv"
    audit_path = settings.out / "audit.jsonl"
    with open(metrics_path, "w") as metrics_fh, open(audit_path, "w") as audit_fh:
        metrics_fh.write(f"# {provenance}\n{_METRICS_COLUMNS}\n")
        metrics_fh.flush()
        audit_fh.write(json.dumps({"config_hash": settings.config_hash(), "seed": seed,
                                   "variant": settings.variant.value}) + "\n")
        audit_fh.flush()

        def on_metrics(point):
            metrics_fh.write(_metrics_row(settings.variant, seed, point) + "\n")
            metrics_fh.flush()

        def on_audit(event):
            audit_fh.write(json.dumps(event) + "\n")
            audit_fh.flush()

        run_loop(settings.loop, settings.variant, seed,
                 metrics_callback=on_metrics, audit_callback=on_audit)
    print(f"wrote {metrics_path} and {audit_path}")
    return EXIT_OK


# ---------------------------------------------------------------------- ablate

def cmd_ablate(settings: RunSettings) -> int:
    if len(settings.seeds) < 2:
        raise ConfigError("ablate needs at least 2 seeds (--seed, repeatable)")
    provenance = f"config_hash={settings.config_hash()} seeds={','.join(map(str, settings.seeds))}"
    metrics_path = settings.out / "ablation_runs.csv"
    table_path = settings.out / "ablation.csv"
    with open(metrics_path, "w") as metrics_fh:
        metrics_fh.write(f"# {provenance}\n{_METRICS_COLUMNS}\n")
        metrics_fh.flush()

        def on_metrics(variant, seed, point):
            metrics_fh.write(_metrics_row(variant, seed, point) + "\n")
            metrics_fh.flush()

        result = run_ablation(settings.loop, settings.seeds, metrics_callback=on_metrics)

    columns = [
        "variant", "success_mean", "success_ci", "redundancy_mean", "redundancy_ci",
        "diversity_mean", "diversity_ci", "rare_stage_mean", "rare_stage_ci",
    ]
    with open(table_path, "w") as fh:
        fh.write(f"# {provenance}\n")
        fh.write(",".join(columns) + "\n")
        for variant in Variant:
            row = result.summaries[variant].row()
            fh.write(",".join(
                row["variant"] if col == "variant" else repr(row[col]) for col in columns
            ) + "\n")

    print(f"{'variant':<15} {'success':>16} {'redundancy':>16} {'diversity':>16}")
    for variant in Variant:
        row = result.summaries[variant].row()
        print(
            f"{row['variant']:<15}"
            f" {row['success_mean']:>8.3f} ±{row['success_ci']:<6.3f}"
            f" {row['redundancy_mean']:>8.3f} ±{row['redundancy_ci']:<6.3f}"
            f" {row['diversity_mean']:>8.3f} ±{row['diversity_ci']:<6.3f}"
        )
    print(f"wrote {table_path} and {metrics_path}")
    return EXIT_OK


# ------------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qdreplay",
        description="Quality-diversity window selection and debiased mixed replay.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", action="append", type=int, help="seed (repeatable)")
        p.add_argument("--variant", help="FULL | QUALITY_ONLY | DIVERSITY_ONLY | UNIFORM")
        p.add_argument("--out", help="output directory (default '.')")

    p_select = sub.add_parser("select", help="score a stored buffer and select a subset")
    p_select.add_argument("buffer", nargs="?", help="JSON-lines transition dump")
    p_select.add_argument("--kernel-dump", action="store_true", help="also write kernel.csv")
    add_common(p_select)

    p_loop = sub.add_parser("loop", help="run the full selection-and-replay loop")
    add_common(p_loop)

    p_ablate = sub.add_parser("ablate", help="run all variants over multiple seeds")
    add_common(p_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = parse_config_file(args.config) if args.config else {}
        settings = build_settings(raw, args)
        if args.command == "select":
            return cmd_select(settings, kernel_dump=args.kernel_dump)
        if args.command == "loop":
            return cmd_loop(settings)
        return cmd_ablate(settings)
    except (ConfigError, JsonlParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY if "no valid windows" in str(exc) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
