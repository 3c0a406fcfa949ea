"""Command-line front end: configure worlds, run strategies and ablations,
emit metric CSVs, cost reports and attack reports.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Config files
are `key = value` lines with `#` comments; unknown keys are rejected and the
resolved configuration is echoed into every run directory so a run can be
reproduced byte-for-byte. The PERMSPLIT_OUT_ROOT environment variable
re-roots relative output directories.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attack, costs, model, protocol, tasks
from .model import ConfigError, ModelConfig
from .protocol import Ablations, RunConfig, Strategy, WorldConfig
from .transport import TrafficLedger

__all__ = ["main", "DEFAULTS", "parse_config_file", "resolve_config"]

OUT_ROOT_ENV = "PERMSPLIT_OUT_ROOT"

# every known key, its default, and a comment for dump-config
DEFAULTS: dict[str, tuple[object, str]] = {
    "strategy": ("pfesta", "one of pfesta, festa, fl, sl"),
    "rounds": (120, "training rounds R"),
    "unify_interval": (20, "rounds between tail/head/model averaging (n)"),
    "batch_size": (4, "batch size per client (B)"),
    "eta": (0.05, "learning rate after warmup"),
    "warmup_steps": (20, "linear warmup steps (0 disables)"),
    "optimizer": ("sgd", "sgd or adam"),
    "seed": (1, "seed for world, init and all streams"),
    "eval_interval": (0, "evaluate every k rounds (0: round 0 and R only)"),
    "grad_scale_classification": (1.0, "task gradient scale"),
    "grad_scale_severity": (2.0, "task gradient scale"),
    "grad_scale_segmentation": (10.0, "task gradient scale"),
    "ablate_learnable_head": (False, "train the patch embedder"),
    "ablate_no_permutation": (False, "identity keys instead of shuffles"),
    "ablate_no_pos_embedding": (False, "drop the position embedding"),
    "tasks": ("classification", "comma list of task kinds"),
    "clients_classification": ("24,16", "per-client sample counts"),
    "clients_severity": ("32,96", "per-client sample counts"),
    "clients_segmentation": ("32,32", "per-client sample counts"),
    "skew": (1.0, "classification class skew in [0,1]"),
    "test_size_classification": (90, "held-out test samples"),
    "test_size_severity": (48, "held-out test samples"),
    "test_size_segmentation": (48, "held-out test samples"),
    "image_size": (32, "square image side"),
    "patch_size": (8, "square patch side"),
    "embed_dim": (32, "token width d"),
    "encoder_layers": (4, "body depth L"),
    "attention_heads": (4, "attention heads"),
    "outdir": ("run_out", "output directory (re-rooted by PERMSPLIT_OUT_ROOT)"),
}

_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def _convert(key: str, raw: str):
    default = DEFAULTS[key][0]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw.strip()


def parse_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _convert(key, val)
    return values


def default_config_text() -> str:
    lines = ["# permsplit run configuration (key = value; unknown keys rejected)"]
    for key, (default, comment) in DEFAULTS.items():
        val = str(default).lower() if isinstance(default, bool) else default
        lines.append(f"{key} = {val}  # {comment}")
    return "\n".join(lines) + "\n"


def resolve_config(args) -> dict:
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    overrides = {
        "strategy": getattr(args, "strategy", None),
        "rounds": getattr(args, "rounds", None),
        "unify_interval": getattr(args, "n", None),
        "batch_size": getattr(args, "batch_size", None),
        "eta": getattr(args, "eta", None),
        "seed": getattr(args, "seed", None),
        "skew": getattr(args, "skew", None),
        "tasks": getattr(args, "tasks", None),
        "eval_interval": getattr(args, "eval_interval", None),
        "outdir": getattr(args, "outdir", None),
    }
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    for flag in getattr(args, "ablate", None) or []:
        key = f"ablate_{flag}"
        if key not in DEFAULTS:
            raise ConfigError(f"unknown ablation {flag!r}")
        cfg[key] = True
    if getattr(args, "clients", None) is not None:
        if args.clients < 1:
            raise ConfigError("--clients must be >= 1")
        for kind in cfg["tasks"].split(","):
            key = f"clients_{kind.strip()}"
            if key in DEFAULTS:
                sizes = str(cfg[key]).split(",")
                base = sizes[0]
                cfg[key] = ",".join([base] * args.clients)
    return cfg


def _world_and_run(cfg: dict):
    kinds = [k.strip() for k in str(cfg["tasks"]).split(",") if k.strip()]
    for kind in kinds:
        if kind not in tasks.TASK_KINDS:
            raise ConfigError(f"unknown task kind {kind!r}")
    if not kinds:
        raise ConfigError("tasks list is empty")
    sizes = {}
    test_sizes = {}
    for kind in kinds:
        raw = str(cfg[f"clients_{kind}"])
        sizes[kind] = [int(s) for s in raw.split(",") if s.strip()]
        test_sizes[kind] = int(cfg[f"test_size_{kind}"])
    wc = WorldConfig(sizes=sizes, skew=float(cfg["skew"]),
                     test_sizes=test_sizes,
                     image_h=int(cfg["image_size"]),
                     image_w=int(cfg["image_size"]))
    mc = ModelConfig(image_h=int(cfg["image_size"]),
                     image_w=int(cfg["image_size"]),
                     patch=int(cfg["patch_size"]), d=int(cfg["embed_dim"]),
                     layers=int(cfg["encoder_layers"]),
                     heads=int(cfg["attention_heads"]))
    rc = RunConfig(
        strategy=Strategy(str(cfg["strategy"])),
        rounds=int(cfg["rounds"]),
        unify_interval=int(cfg["unify_interval"]),
        batch_size=int(cfg["batch_size"]),
        eta=float(cfg["eta"]),
        warmup_steps=int(cfg["warmup_steps"]),
        grad_scales={k: float(cfg[f"grad_scale_{k}"]) for k in kinds},
        seed=int(cfg["seed"]),
        ablations=Ablations(
            learnable_head=bool(cfg["ablate_learnable_head"]),
            no_permutation=bool(cfg["ablate_no_permutation"]),
            no_pos_embedding=bool(cfg["ablate_no_pos_embedding"])),
        optimizer=str(cfg["optimizer"]),
        eval_interval=int(cfg["eval_interval"]))
    return wc, mc, rc


def _outdir(cfg: dict) -> str:
    out = str(cfg["outdir"])
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    wc, mc, rc = _world_and_run(cfg)
    world = wc.build(rc.seed)
    report = protocol.run(rc, world, mc)
    outdir = _outdir(cfg)
    protocol.write_report(report, outdir)
    print(f"run complete: strategy={rc.strategy.value} rounds={rc.rounds} "
          f"seed={rc.seed}")
    for kind, metrics in report.final_task_metrics.items():
        for name, val in metrics.items():
            print(f"  final {kind}.{name} = {val:.4f}")
    print(f"outputs in {outdir}")
    return 0


def _client_table(cfg: dict) -> list[tuple[int, str, int]]:
    """(client_id, task kind, samples) in world enumeration order."""
    kinds = [k.strip() for k in str(cfg["tasks"]).split(",") if k.strip()]
    table = []
    cid = 0
    for kind in tasks.TASK_KINDS:
        if kind not in kinds:
            continue
        for size in str(cfg[f"clients_{kind}"]).split(","):
            table.append((cid, kind, int(size)))
            cid += 1
    return table


def cmd_costs(args) -> int:
    path = args.constants or costs.default_constants_path()
    values, provenance = costs.load_constants(path)
    report = costs.table5_report(values, provenance)
    print(report.text())
    if not args.verify:
        return 0
    run_cfg_path = os.path.join(args.verify, "config.txt")
    traffic_path = os.path.join(args.verify, "traffic.csv")
    if not (os.path.exists(run_cfg_path) and os.path.exists(traffic_path)):
        raise ConfigError(f"{args.verify} lacks config.txt / traffic.csv")
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    cfg.update(parse_config_file(run_cfg_path))
    _, mc, rc = _world_and_run(cfg)
    ledger = TrafficLedger.read_csv(traffic_path)
    params = {cid: protocol.cost_params_from_parts(
                  rc.strategy, mc, rc.batch_size, rc.rounds,
                  rc.unify_interval, kind, size)
              for cid, kind, size in _client_table(cfg)}
    verdict = costs.verify_ledger(rc.strategy.value, params, ledger)
    print()
    print(verdict.text())
    return 0 if verdict.passed else 1


def cmd_attack(args) -> int:
    mc = ModelConfig(image_h=32, image_w=32, patch=8, d=64, layers=1, heads=1)
    head = attack.attack_head(mc, args.seed)
    world = tasks.generate_world(args.seed,
                                 {"classification": [max(32, args.trials // 4)]},
                                 skew=0.0,
                                 test_sizes={"classification": 4})
    images = world.tasks["classification"].clients[0].images
    rows = attack.run_scenario_grid(images, head, args.seed, args.trials)
    outdir = _outdir({"outdir": args.outdir})
    os.makedirs(outdir, exist_ok=True)
    out_path = os.path.join(outdir, "attack_report.csv")
    attack.write_attack_csv(out_path, rows)
    print(f"{'embedder':>9} {'pos':>6} {'perm':>6} {'mean_mse':>12} "
          f"{'assign_acc':>11}")
    for row in rows:
        print(f"{str(row['knows_embedder']):>9} "
              f"{str(row['knows_pos_embedding']):>6} "
              f"{str(row['knows_permutation']):>6} "
              f"{row['mean_mse']:>12.3e} {row['assignment_accuracy']:>11.4f}")
    print(f"report written to {out_path}")
    return 0


def cmd_gen_world(args) -> int:
    cfg = resolve_config(args)
    wc, _, rc = _world_and_run(cfg)
    world = wc.build(rc.seed)
    outdir = _outdir(cfg)
    os.makedirs(outdir, exist_ok=True)
    tensor_path = os.path.join(outdir, "world.tensors")
    manifest_path = os.path.join(outdir, "world.manifest.txt")
    tasks.dump_world(world, tensor_path, manifest_path)
    print(f"world written to {tensor_path} (+ manifest)")
    return 0


def cmd_dump_config(_args) -> int:
    sys.stdout.write(default_config_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="permsplit",
        description="split-federated multi-task learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a strategy on a synthetic world")
    p_run.add_argument("--config", help="config file (key = value lines)")
    p_run.add_argument("--strategy", choices=[s.value for s in Strategy])
    p_run.add_argument("--rounds", type=int)
    p_run.add_argument("--n", type=int, help="unify interval override")
    p_run.add_argument("--batch-size", dest="batch_size", type=int)
    p_run.add_argument("--eta", type=float)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--skew", type=float)
    p_run.add_argument("--tasks", help="comma list of task kinds")
    p_run.add_argument("--clients", type=int,
                       help="clients per task (first configured size repeated)")
    p_run.add_argument("--eval-interval", dest="eval_interval", type=int)
    p_run.add_argument("--ablate", action="append",
                       choices=["learnable_head", "no_permutation",
                                "no_pos_embedding"])
    p_run.add_argument("--outdir")
    p_run.set_defaults(func=cmd_run)

    p_costs = sub.add_parser("costs", help="closed-form cost table and "
                                           "ledger verification")
    p_costs.add_argument("--constants", help="constants file "
                                             "(default: shipped back-solved set)")
    p_costs.add_argument("--verify", help="run directory to verify against")
    p_costs.set_defaults(func=cmd_costs)

    p_attack = sub.add_parser("attack", help="feature-inversion scenario grid")
    p_attack.add_argument("--trials", type=int, default=200)
    p_attack.add_argument("--seed", type=int, default=1)
    p_attack.add_argument("--outdir", default="attack_out")
    p_attack.set_defaults(func=cmd_attack)

    p_world = sub.add_parser("gen-world", help="generate and dump a world")
    p_world.add_argument("--config")
    p_world.add_argument("--seed", type=int)
    p_world.add_argument("--tasks")
    p_world.add_argument("--skew", type=float)
    p_world.add_argument("--outdir")
    p_world.set_defaults(func=cmd_gen_world)

    p_dump = sub.add_parser("dump-config", help="print the default config")
    p_dump.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, costs.CostError, tasks.WorldError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:            # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
