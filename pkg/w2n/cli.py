"""Command-line front end.

    w2n gen-world   --config defaults --out-dir out/world
    w2n run         --config defaults --out-dir out/run T=1
    w2n ablate      --config defaults --out-dir out/abl --sweep p=0.2,0.4,0.6,0.8 --seeds 7,8
    w2n split-audit --config defaults --out-dir out/audit split.mode=instance
    w2n iou-curves  --config part_noise --out-dir out/curves
    w2n eval        --config defaults --out-dir out/eval --params out/run/params.json

Positional ``key=value`` arguments override the config file. Every command
writes the fully resolved config to ``<out-dir>/config.yaml``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from w2n.config import RunConfig, dump_run_config, load_run_config
from w2n.detector import load_params
from w2n.errors import ConfigError, W2NError
from w2n.la import emit_iou_curves
from w2n.logging_config import create_run_handler, setup_logging
from w2n.metrics import evaluate
from w2n.pipeline import adaptation_round, noisy_start, run, write_run
from w2n.split import split_audit, split_dataset
from w2n.synthworld import generate_world, load_world, save_world

logger = logging.getLogger(__name__)

# Overrides applied for each value of the ``modules`` sweep key.
MODULE_PRESETS = {
    "baseline": ["use_la=false", "use_ssl=false", "T=0"],
    "la": ["use_la=true", "use_ssl=false", "T=0"],
    "ssl": ["use_la=false", "use_ssl=true"],
    "la+ssl": ["use_la=true", "use_ssl=true"],
}
ABLATION_COLUMNS = ["sweep", "value", "seed", "map", "corloc", "mean_iou", "labeled_fraction"]


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def split_values(text: str) -> list[str]:
    """Split on commas that are not inside brackets."""
    values, depth, current = [], 0, ""
    for ch in text:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        if ch == "," and depth == 0:
            values.append(current.strip())
            current = ""
        else:
            current += ch
    if current.strip():
        values.append(current.strip())
    return values


def parse_sweep(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise ConfigError(f"sweep must look like key=v1,v2,..., got {text!r}")
    key, raw = text.split("=", 1)
    values = split_values(raw)
    if not values:
        raise ConfigError(f"sweep {key} has no values")
    if key == "modules":
        unknown = [v for v in values if v not in MODULE_PRESETS]
        if unknown:
            raise ConfigError(f"unknown modules value(s): {', '.join(unknown)}")
    return key.strip(), values


def sweep_overrides(key: str, value: str) -> list[str]:
    if key == "modules":
        return list(MODULE_PRESETS[value])
    return [f"{key}={value}"]


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(args: argparse.Namespace, extra: list[str] | None = None) -> RunConfig:
    return load_run_config(args.config, list(args.overrides) + (extra or []))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_world(args: argparse.Namespace, cfg: RunConfig, out: Path) -> None:
    world = generate_world(cfg.world, args.threads)
    save_world(world, out / "world.jsonl")


def cmd_run(args: argparse.Namespace, cfg: RunConfig, out: Path) -> None:
    result = run(cfg, args.threads)
    write_run(result, cfg, out)
    print(result.table().to_string(index=False))


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig, out: Path) -> None:
    key, values = parse_sweep(args.sweep)
    seeds = [int(s) for s in split_values(args.seeds)] if args.seeds else [cfg.seed]
    rows = []
    for value in values:
        for seed in seeds:
            extra = sweep_overrides(key, value)
            if args.seeds:
                extra += [f"seed={seed}", f"world.seed={seed}"]
            run_cfg = _resolved(args, extra)
            run_id = f"{key}-{value}-s{seed}".replace("/", "_")
            handler = create_run_handler(run_id, out, args.log_level)
            logging.getLogger().addHandler(handler)
            try:
                logger.info("Ablation run %s", run_id)
                result = run(run_cfg, args.threads)
                write_run(result, run_cfg, out / "runs" / run_id)
            finally:
                logging.getLogger().removeHandler(handler)
                handler.close()
            final = result.reports[-1]
            rows.append({
                "sweep": key,
                "value": value,
                "seed": seed,
                "map": final.toy_map,
                "corloc": final.corloc,
                "mean_iou": final.pseudo_label_mean_iou_to_gt,
                "labeled_fraction": final.labeled_fraction,
            })
    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    table.to_csv(out / "ablation.csv", index=False)
    means = table.groupby("value", sort=False)[["map", "corloc", "mean_iou", "labeled_fraction"]].mean().reset_index()
    means.to_csv(out / "ablation_mean.csv", index=False)
    print(means.to_string(index=False))


def cmd_split_audit(args: argparse.Namespace, cfg: RunConfig, out: Path) -> None:
    world, _, pseudo = noisy_start(cfg, args.threads)
    params, refined = adaptation_round(world, pseudo, cfg, 1, args.threads)
    result, records = split_dataset(params, world, refined, cfg.split, args.threads)
    split_audit(records, result).to_csv(out / "split_audit.csv", index=False)
    print(f"{len(result.labeled)} of {refined.num_instances} instances labeled ({cfg.split.mode}, p={cfg.split.p})")


def cmd_iou_curves(args: argparse.Namespace, cfg: RunConfig, out: Path) -> None:
    world, _, pseudo = noisy_start(cfg, args.threads)
    curves = emit_iou_curves(world, pseudo, cfg.la, cfg.seed)
    curves.to_csv(out / "curves.csv", index=False)
    print(curves.groupby("regularized").tail(1).to_string(index=False))


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, out: Path) -> None:
    params = load_params(args.params)
    if args.world:
        world = load_world(args.world, cfg.world)
    else:
        test_cfg = dataclasses.replace(cfg.world, seed=cfg.world.seed + 1, num_images=cfg.eval.test_images)
        world = generate_world(test_cfg, args.threads)
    breakdown, corloc_value = evaluate(params, world, cfg.eval, args.threads)
    summary = {
        "map": breakdown.mean,
        "corloc": corloc_value,
        "class_ap": {str(c): ap for c, ap in breakdown.class_ap.items()},
        "part_class_map": breakdown.part_class_map,
        "other_class_map": breakdown.other_class_map,
        "images": len(world),
        "ap_interpolation": "all-points",
    }
    (out / "eval.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(f"map={breakdown.mean:.4f} corloc={corloc_value:.4f}")


COMMANDS = {
    "gen-world": cmd_gen_world,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "split-audit": cmd_split_audit,
    "iou-curves": cmd_iou_curves,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="w2n", description="Weak-to-noisy detection lab")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Config file or name under config/ (e.g. defaults)")
    common.add_argument("--out-dir", default="out", help="Output directory (default: %(default)s)")
    common.add_argument("--threads", type=int, default=1, help="Worker threads (default: %(default)s)")
    common.add_argument("--log-level", default="INFO", help="Log level (default: %(default)s)")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="Config overrides, e.g. world.seed=7")

    sub.add_parser("gen-world", parents=[common], help="Generate and save a synthetic world")
    sub.add_parser("run", parents=[common], help="Run the iterative pipeline")
    ablate = sub.add_parser("ablate", parents=[common], help="Sweep one config key")
    ablate.add_argument("--sweep", required=True, help="key=v1,v2,... (key 'modules' takes baseline,la,ssl,la+ssl)")
    ablate.add_argument("--seeds", default=None, help="Comma-separated seeds to average over")
    sub.add_parser("split-audit", parents=[common], help="Write the loss ranking behind one split")
    sub.add_parser("iou-curves", parents=[common], help="IoU curves with and without regularization")
    ev = sub.add_parser("eval", parents=[common], help="Evaluate saved detector parameters")
    ev.add_argument("--params", required=True, help="Parameter file written by 'run'")
    ev.add_argument("--world", default=None, help="World file (default: generate the held-out world)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = _out_dir(args)
        setup_logging(level=args.log_level, out_dir=out)
        cfg = _resolved(args)
        dump_run_config(cfg, out / "config.yaml")
        COMMANDS[args.command](args, cfg, out)
    except W2NError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc.filename or args.out_dir}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
