"""Command line entry point: train-flow, build-dataset, post-train, evaluate.

Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("prefedit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass
class TargetConfig:
    kind: str = "two_mode"
    separation: float = 4.0
    std: float = 0.5
    centers: list | None = None
    point: list | None = None


@dataclass
class FlowConfig:
    steps: int
    lr: float
    momentum: float = 0.9
    batch_size: int = 256
    max_grad_norm: float | None = 10.0
    lr_schedule: str = "cosine"
    dim: int = 2
    cond_dim: int = 0
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "silu"
    init_seed: int = 0
    target: TargetConfig = field(default_factory=TargetConfig)


@dataclass
class NoiseConfig:
    kind: str = "constant"
    level: float = 0.3


@dataclass
class GrpoSection:
    checkpoint: str | None = None
    conditions: str | None = None
    group_size: int = 8
    epsilon: float = 0.2
    kl_weight: float = 0.01
    steps: int = 40
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    lr: float = 0.5
    momentum: float = 0.0
    max_grad_norm: float | None = None
    iterations: int = 300
    groups_per_iteration: int = 16
    alpha: float = 2.0
    beta: float = 5.0
    workers: int = 4


@dataclass
class ScorerConfig:
    kind: str = "synthetic"
    center: list = field(default_factory=lambda: [2.0, 0.0])
    r5: float = 0.25
    r3: float = 1.0
    endpoint: str | None = None
    timeout: float = 30.0
    max_in_flight: int = 4
    retries: int = 3
    backoff: float = 0.25
    prompts: str | None = None


@dataclass
class DatapipeConfig:
    raw: str
    categories: str | None = None
    cap_ratio: float | None = None
    filter_threshold: float | None = None
    order: str = "filter_first"
    workers: int = 4


@dataclass
class BenchConfig:
    suite: str
    checkpoint: str | None = None
    model_id: str = "model"
    steps: int = 40
    workers: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    flow: FlowConfig | None = None
    grpo: GrpoSection | None = None
    scorer: ScorerConfig | None = None
    datapipe: DatapipeConfig | None = None
    bench: BenchConfig | None = None


def _section_type(hint):
    """The dataclass inside ``X`` or ``X | None``, if any."""
    for cand in (hint, *typing.get_args(hint)):
        if dataclasses.is_dataclass(cand):
            return cand
    return None


def _check_leaf(value, hint, where):
    allowed = typing.get_args(hint) or (hint,)
    if value is None:
        if type(None) in allowed:
            return value
        raise ConfigError(f"{where} must not be null")
    for typ in allowed:
        origin = typing.get_origin(typ) or typ
        if origin is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if origin is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if origin in (str, bool, list, dict) and isinstance(value, origin):
            return value
    names = "/".join(getattr(t, "__name__", str(t)) for t in allowed)
    raise ConfigError(f"{where} has type {type(value).__name__}, expected {names}")


def build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        key = f"{where}.{name}" if where != "config" else name
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"missing required key {key}")
            continue
        sub = _section_type(hints[name])
        if sub is not None and data[name] is not None:
            kwargs[name] = build_section(sub, data[name], key)
        else:
            kwargs[name] = _check_leaf(data[name], hints[name], key)
    return cls(**kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``--set a.b=value`` overrides; values parse as JSON, else as strings."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = value
    return data


def load_config_data(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and "manifest_version" in data:
        data = data["config"]
    return data


def resolve_config(args) -> tuple[RunConfig, dict]:
    data = apply_overrides(load_config_data(args.config), args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    cfg = build_section(RunConfig, data, "config")
    required = {
        "train-flow": ["flow"],
        "build-dataset": ["datapipe", "scorer"],
        "post-train": ["grpo", "scorer"],
        "evaluate": ["bench", "scorer"],
    }[args.command]
    for name in required:
        if getattr(cfg, name) is None:
            if name == "scorer":
                cfg.scorer = ScorerConfig()
            elif name == "grpo":
                cfg.grpo = GrpoSection()
            else:
                raise ConfigError(f"missing required section {name}")
    if cfg.scorer is not None:
        env = os.environ.get("HP_SCORER_ENDPOINT")
        if env:
            cfg.scorer.endpoint = env
        if cfg.scorer.kind not in ("synthetic", "remote"):
            raise ConfigError(f"scorer.kind must be synthetic or remote, got {cfg.scorer.kind!r}")
        if cfg.scorer.kind == "remote" and not cfg.scorer.endpoint:
            raise ConfigError("scorer.endpoint is required for a remote scorer")
    resolved = dataclasses.asdict(cfg)
    return cfg, resolved


# -- helpers -----------------------------------------------------------------

def layout(out: Path) -> dict[str, Path]:
    dirs = {name: out / name for name in ("checkpoints", "curves", "datasets", "reports")}
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)
    return dirs


def write_manifest(out: Path, command: str, resolved: dict):
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": resolved,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": resolved["seed"],
        "versions": {
            "prefedit": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def make_scorer(cfg: ScorerConfig, prompts=None):
    from .rewards import mode_preference_scorer
    from .remote import RemoteScorer

    if cfg.kind == "synthetic":
        return mode_preference_scorer(cfg.center, (cfg.r5, cfg.r3))
    return RemoteScorer(cfg.endpoint, cfg.timeout, cfg.max_in_flight, cfg.retries, cfg.backoff, prompts)


def load_prompt_set(cfg: ScorerConfig):
    from .rewards import load_prompts, prompt_registry

    return prompt_registry() if cfg.prompts is None else load_prompts(cfg.prompts)


def make_target(t: TargetConfig):
    from .toy import GaussianMixture, point_mass, two_mode_mixture

    if t.kind == "two_mode":
        return two_mode_mixture(t.separation, t.std)
    if t.kind == "mixture":
        if not t.centers:
            raise ConfigError("flow.target.centers is required for a mixture target")
        return GaussianMixture(tuple(tuple(c) for c in t.centers), t.std)
    if t.kind == "point_mass":
        if t.point is None:
            raise ConfigError("flow.target.point is required for a point-mass target")
        return point_mass(t.point)
    raise ConfigError(f"unknown flow.target.kind {t.kind!r}")


# -- subcommands -------------------------------------------------------------

def cmd_train_flow(cfg: RunConfig, out: Path) -> int:
    from .field import MLPField
    from .flow import TrainConfig, train_flow
    from .io import save_field, write_loss_curve
    from .toy import pair_sampler

    fc = cfg.flow
    target = make_target(fc.target)
    if target.dim != fc.dim:
        raise ConfigError(f"target dimension {target.dim} != flow.dim {fc.dim}")
    if fc.cond_dim:
        raise ConfigError("train-flow supports unconditional targets only (flow.cond_dim = 0)")
    try:
        tc = TrainConfig(fc.steps, fc.lr, fc.momentum, fc.batch_size, fc.max_grad_norm,
                         fc.lr_schedule, cfg.seed)
        field0 = MLPField.create(fc.dim, fc.cond_dim, tuple(fc.hidden), fc.activation, seed=fc.init_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dirs = layout(out)
    res = train_flow(field0, pair_sampler(target), tc)
    save_field(res.field, dirs["checkpoints"] / "flow")
    write_loss_curve(res.losses, dirs["curves"] / "flow_loss.csv")
    final = res.smoothed_final_loss() if res.losses else float("nan")
    print(f"final loss {final:.6f}")
    return EXIT_OK


def cmd_build_dataset(cfg: RunConfig, out: Path) -> int:
    from .datapipe import (CategoryProfile, build_hard_case_dataset, ingest, synthetic_coco_profile,
                           write_jsonl)

    dc = cfg.datapipe
    if dc.order not in ("filter_first", "balance_first"):
        raise ConfigError(f"datapipe.order must be filter_first or balance_first, got {dc.order!r}")
    if dc.cap_ratio is not None and dc.cap_ratio < 1:
        raise ConfigError("datapipe.cap_ratio must be >= 1")
    raw = ingest(dc.raw)
    profile = None
    if dc.categories is not None:
        profile = CategoryProfile.load(dc.categories)
    elif dc.cap_ratio is not None and raw.cases:
        profile = synthetic_coco_profile(len(raw.cases[0].input_embedding), cfg.seed)
    prompts = load_prompt_set(cfg.scorer)
    scorer = make_scorer(cfg.scorer, prompts)
    dirs = layout(out)
    res = build_hard_case_dataset(raw, scorer, prompts, profile, dc.cap_ratio, dc.filter_threshold,
                                  dc.order, dc.workers)
    write_jsonl(res.final, dirs["datasets"] / "hard_cases.jsonl")
    res.stats.write_csv(dirs["reports"] / "dataset_stats.csv")
    for w in res.hard.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for case_id, msg in res.scored.failures:
        print(f"warning: case {case_id} not scored: {msg}", file=sys.stderr)
    print(f"retained {len(res.final)} discarded {res.discarded} failed {len(res.scored.failures)}")
    return EXIT_OK


def _checkpoint_path(explicit: str | None, out: Path, prefer=("post", "flow")) -> Path:
    if explicit is not None:
        return Path(explicit)
    for name in prefer:
        p = out / "checkpoints" / f"{name}.bin"
        if p.exists():
            return p
    raise FileNotFoundError(f"no checkpoint found under {out / 'checkpoints'}")


def cmd_post_train(cfg: RunConfig, out: Path) -> int:
    from .cases import Condition
    from .datapipe import ingest
    from .grpo import GrpoConfig, post_train
    from .io import RewardCurveWriter, load_field, save_field, save_grpo_state
    from .sampling import NoiseSchedule

    gc = cfg.grpo
    try:
        gcfg = GrpoConfig(gc.group_size, gc.epsilon, gc.kl_weight, gc.steps,
                          NoiseSchedule(gc.noise.kind, gc.noise.level), gc.lr, gc.momentum,
                          gc.max_grad_norm, gc.iterations, gc.groups_per_iteration, gc.alpha, gc.beta,
                          gc.workers, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    policy = load_field(_checkpoint_path(gc.checkpoint, out, prefer=("flow",)))
    if gc.conditions is not None:
        conditions = [c.to_condition() for c in ingest(gc.conditions).cases]
    else:
        conditions = [Condition("toy")]
    prompts = load_prompt_set(cfg.scorer)
    scorer = make_scorer(cfg.scorer, prompts)
    dirs = layout(out)
    writer = RewardCurveWriter(dirs["curves"] / "reward.csv")
    try:
        res = post_train(policy, conditions, scorer, gcfg, prompts, on_iteration=writer)
    finally:
        writer.close()
    save_field(res.policy, dirs["checkpoints"] / "post")
    save_grpo_state(dirs["checkpoints"] / "post", {
        "iterations": len(res.curve),
        "seed": cfg.seed,
        "config": res.metadata,
        "skipped_groups": [list(s) for s in res.skipped],
    })
    if res.curve:
        print(f"final mean reward {res.curve[-1].mean_reward:.4f}")
    else:
        print("no iterations run")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path, compare: str | None) -> int:
    from .bench import emit_report, evaluate, load_suite, policy_sampler, read_report_csv
    from .io import load_field

    bc = cfg.bench
    suite = load_suite(bc.suite)
    policy = load_field(_checkpoint_path(bc.checkpoint, out))
    prompts = load_prompt_set(cfg.scorer)
    scorer = make_scorer(cfg.scorer, prompts)
    report = evaluate(policy_sampler(policy, bc.steps), suite, scorer, prompts, cfg.seed,
                      bc.model_id, bc.workers)
    reports = [report]
    if compare is not None:
        reports += read_report_csv(compare)
    dirs = layout(out)
    emit_report(reports, dirs["reports"])
    print(f"overall {report.overall:.3f} failures {report.failures}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prefedit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("train-flow", "build-dataset", "post-train", "evaluate"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file or a run.json manifest")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config leaf")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            s.add_argument("--compare", metavar="CSV", help="merge rows from an earlier report")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, resolved = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train-flow":
            status = cmd_train_flow(cfg, out)
        elif args.command == "build-dataset":
            status = cmd_build_dataset(cfg, out)
        elif args.command == "post-train":
            status = cmd_post_train(cfg, out)
        else:
            status = cmd_evaluate(cfg, out, args.compare)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every module error maps to one exit code
        logger.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_manifest(out, args.command, resolved)
    return status


if __name__ == "__main__":
    sys.exit(main())
