# cli.py — command-line surface: train, clip test, optimize, RRET, evaluate, codec, bound check, correlate

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import binpack
import clipping
import data
import exits
import moga
import objectives
import sae
from clipping import ClipMask
from errors import ContractError, MosaeError
from export import (
    ARCHIVE_COLS, RRET_COLS, SCHEDULE_COLS, SWEEP_COLS, OutputGuard, correlation_summary, write_csv, write_json,
    write_scatter_svg,
)
from objectives import EvalContext
from settings import RunConfig, load_run_config

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CHECKPOINT_NAME = "model.mosm"
PAYLOAD_NAME = "update.mosu"

EXIT_OK, EXIT_PIPELINE, EXIT_USAGE = 0, 1, 2


# ---------- shared plumbing ----------
def load_dataset(cfg: RunConfig) -> data.Dataset:
    src = cfg.data
    if src.source == "smd":
        return data.load_smd(src.smd_dir, src.smd_name)
    if src.source == "csv":
        return data.load_labeled_csv(src.path, src.label_column)
    return data.generate_synthetic(src.synthetic_dims, src.synthetic_n, src.synthetic_anomaly_rate, cfg.seed)


def load_splits(cfg: RunConfig) -> data.Splits:
    d = load_dataset(cfg)
    splits = data.prepare_splits(d, cfg.data.train_frac, cfg.data.calib_frac, cfg.seed)
    logger.info("splits: train %d, calib %d, eval %d rows", splits.train.n, splits.calib.n, splits.eval.n)
    return splits


def _checkpoint_path(cfg: RunConfig, args: argparse.Namespace) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else cfg.out / CHECKPOINT_NAME


def _context(cfg: RunConfig, args: argparse.Namespace) -> EvalContext:
    model = sae.load_checkpoint(_checkpoint_path(cfg, args))
    splits = load_splits(cfg)
    return EvalContext(model, splits.eval, splits.calib, reps=cfg.timing_reps, final_quantile=cfg.final_quantile)


def _scatter_set(guard: OutputGuard, prefix: str, df: pd.DataFrame, pairs: Sequence[tuple]) -> None:
    for xcol, ycol in pairs:
        write_scatter_svg(guard.path(f"{prefix}_{ycol}_vs_{xcol}.svg"), df[xcol].to_numpy(), df[ycol].to_numpy(),
                          xcol, ycol, f"{prefix}: {ycol} vs {xcol}")


def _f1_no_exits(model: sae.SaeModel, ctx: EvalContext) -> float:
    thr = sae.calibrate_final_threshold(model, data.normals(ctx.calib_set), ctx.final_quantile)
    labels = sae.classify(model, ctx.eval_set, thr)
    return objectives.f1_score(objectives.confusion(ctx.eval_set.labels, labels))


# ---------- commands ----------
def cmd_train(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    splits = load_splits(cfg)
    model = sae.init_model(cfg.sae_config(splits.train.dims))
    report = sae.train(model, data.normals(splits.train))
    sae.save_checkpoint(model, guard.path(CHECKPOINT_NAME))
    write_json(guard.path("train_report.json"), {
        **report.to_dict(),
        "config": model.config.to_dict(),
        "parameters": model.parameter_count(),
        "train_rows": data.normals(splits.train).n,
    })


def cmd_cliptest(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    ctx = _context(cfg, args)
    model = ctx.model
    schedule = clipping.progressive_schedule(model, cfg.step_frac, cfg.seed)
    quantiles = exits.disabled_quantiles(model.depth, cfg.final_quantile)

    rows = []
    for step, mask in enumerate([ClipMask.identity(model), *schedule.masks]):
        res = objectives.evaluate_candidate_detail(ctx, mask, quantiles)
        rows.append({"step": step, "retained_fraction": clipping.retained_fraction(mask),
                     **res.objectives.to_dict(), "mean_exit": res.trace.mean_exit})
        logger.info("clip step %d: retained %.3f f1 %.4f storage %.3f power %.3f", step,
                    rows[-1]["retained_fraction"], res.objectives.f1, res.objectives.storage_ratio,
                    res.objectives.power_ratio)

    df = pd.DataFrame(rows)
    write_csv(guard.path("cliptest_schedule.csv"), rows, SCHEDULE_COLS)
    pairs = [("storage_ratio", "power_ratio"), ("f1", "power_ratio"), ("f1", "runtime_s")]
    write_json(guard.path("cliptest_summary.json"), {
        "steps": len(rows), "step_frac": cfg.step_frac, "seed": cfg.seed,
        "correlations": correlation_summary(df, pairs),
    })
    _scatter_set(guard, "cliptest", df, pairs)


def cmd_optimize(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    ctx = _context(cfg, args)
    base = objectives.baseline(ctx)
    result = moga.run_optimizer(ctx, cfg.ga, cfg.mode)
    chosen = moga.chosen_candidate(result.front)

    write_csv(guard.path("archive.csv"), [e.to_row() for e in result.archive], ARCHIVE_COLS)
    write_csv(guard.path("front.csv"), [e.to_row() for e in result.front], ARCHIVE_COLS)
    write_json(guard.path("chosen.json"), {
        "mode": cfg.mode,
        "candidate": chosen.to_row(),
        "baseline": base.to_dict(),
        "f1_drop": base.f1 - chosen.objectives.f1,
        "archive_size": len(result.archive),
        "front_size": len(result.front),
    })


def _rret_seed(master: int, i: int) -> int:
    return int(np.random.SeedSequence([master, i]).generate_state(1)[0])


def cmd_rret(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    ctx = _context(cfg, args)
    model = ctx.model
    identity = ClipMask.identity(model)

    rows = []
    for i in range(cfg.rret_policies):
        seed = _rret_seed(cfg.seed, i)
        policy = exits.rret_policy(model, ctx.calib_set, seed)
        labels, trace = exits.infer_with_exits(model, policy, ctx.eval_set)
        rows.append({
            "policy": i, "seed": seed,
            "runtime_s": objectives.measure_runtime(model, policy, ctx.eval_set, ctx.reps),
            "power_ratio": objectives.power_ratio(model, identity, trace),
            "f1": objectives.f1_score(objectives.confusion(ctx.eval_set.labels, labels)),
            "storage_ratio": 1.0,
            "mean_exit": trace.mean_exit,
            "quantiles": ";".join(f"{q:.6g}" for q in policy.quantiles),
        })

    df = pd.DataFrame(rows)
    write_csv(guard.path("rret.csv"), rows, RRET_COLS)
    pairs = [("runtime_s", "power_ratio"), ("f1", "power_ratio"), ("f1", "runtime_s")]
    write_json(guard.path("rret_summary.json"), {
        "policies": len(rows), "seed": cfg.seed, "correlations": correlation_summary(df, pairs),
    })
    _scatter_set(guard, "rret", df, pairs)


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    ctx = _context(cfg, args)
    model = ctx.model
    mask = ClipMask.identity(model) if cfg.keep_frac >= 1.0 else clipping.sample_mask(model, cfg.keep_frac, cfg.seed)
    quantiles = cfg.default_quantiles(model.depth)
    res = objectives.evaluate_candidate_detail(ctx, mask, quantiles)
    write_json(guard.path("evaluate.json"), {
        "objectives": res.objectives.to_dict(),
        "baseline": objectives.baseline(ctx).to_dict(),
        "policy": res.policy.to_dict(),
        "kept_neurons": list(mask.kept_counts),
        "retained_fraction": clipping.retained_fraction(mask),
        "mean_exit": res.trace.mean_exit,
        "exit_histogram": res.trace.exit_histogram().tolist(),
    })


def cmd_pack(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    model = sae.load_checkpoint(_checkpoint_path(cfg, args))
    packed = binpack.pack_model(model, cfg.density)
    blob = binpack.pack_payload(packed)
    guard.path(PAYLOAD_NAME).write_bytes(blob)
    decoded = [binpack.bin_decode(p) for p in packed]
    max_err = max(float(np.max(np.abs(d - m))) for d, m in zip(decoded, binpack.model_matrices(model)))
    write_json(guard.path("pack_report.json"), {
        **binpack.payload_report(packed, len(blob)),
        "max_abs_error": max_err,
    })


def cmd_unpack(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    payload = Path(args.payload) if args.payload else cfg.out / PAYLOAD_NAME
    if not payload.is_file():
        raise ContractError(f"no payload at {payload}")
    packed = binpack.unpack_payload(payload.read_bytes())
    model = binpack.unpack_model(packed, cfg.sae_config(1))
    target = guard.track(args.output) if args.output else guard.path("unpacked.mosm")
    sae.save_checkpoint(model, target)
    logger.info("reconstructed %d-parameter model into %s", model.parameter_count(), target)


def cmd_sweep_bins(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    ctx = _context(cfg, args)
    model = ctx.model
    raw = binpack.model_matrices(model)

    rows = []
    for density in cfg.sweep:
        packed = binpack.pack_model(model, density)
        blob = binpack.pack_payload(packed)
        decoded = binpack.unpack_model(binpack.unpack_payload(blob), model.config)
        q = exits.disabled_quantiles(decoded.depth, cfg.final_quantile)
        policy = exits.calibrate_exit_thresholds(decoded, ctx.calib_set, q)
        rows.append({
            "density": density,
            "f1": _f1_no_exits(decoded, ctx),
            "runtime_s": objectives.measure_runtime(decoded, policy, ctx.eval_set, ctx.reps),
            "formula_rate": binpack.compression_rate(density, sum(p.n for p in packed)),
            "wire_bytes": len(blob),
            "max_abs_error": max(float(np.max(np.abs(binpack.bin_decode(p) - m))) for p, m in zip(packed, raw)),
        })
        logger.info("density %d: f1 %.4f", density, rows[-1]["f1"])

    df = pd.DataFrame(rows)
    write_csv(guard.path("sweep_bins.csv"), rows, SWEEP_COLS)
    write_json(guard.path("sweep_summary.json"), {
        "uncompressed_f1": _f1_no_exits(model, ctx),
        "runtime_spread": float((df["runtime_s"].max() - df["runtime_s"].min()) / df["runtime_s"].median()),
    })
    _scatter_set(guard, "sweep", df, [("density", "f1"), ("density", "runtime_s")])


def cmd_verify_bound(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    rng = np.random.default_rng([cfg.seed, 15])
    instances = []
    for i in range(cfg.bound_instances):
        density = cfg.bound_densities[i % len(cfg.bound_densities)]
        a = binpack.random_well_conditioned(cfg.bound_size, rng)
        x = rng.standard_normal(cfg.bound_size)
        rep = binpack.verify_error_bound(a, density, x)
        instances.append({"instance": i, "density": density, "cond": rep.cond, "lhs": rep.lhs,
                          "ratio": rep.ratio, "holds": rep.holds})
    holds = [r["holds"] for r in instances]
    write_json(guard.path("bound_report.json"), {
        "instances": len(instances),
        "holds_rate": sum(holds) / len(holds) if holds else 1.0,
        "max_ratio": max((r["ratio"] for r in instances), default=0.0),
        "size": cfg.bound_size,
        "per_instance": instances,
    })
    if not all(holds):
        logger.warning("error bound violated on %d instances", len(holds) - sum(holds))


def cmd_correlate(cfg: RunConfig, args: argparse.Namespace, guard: OutputGuard) -> None:
    path = Path(args.csv)
    if not path.is_file():
        raise ContractError(f"no such report: {path}")
    df = pd.read_csv(path)
    for col in (args.x, args.y):
        if col not in df.columns:
            raise ContractError(f"column {col!r} not in {path.name} (has {list(df.columns)})")
    doc = {"csv": str(path), "x": args.x, "y": args.y, "n": len(df),
           **correlation_summary(df, [(args.x, args.y)])[f"{args.x}~{args.y}"]}
    write_json(guard.path(f"correlate_{args.x}_{args.y}.json"), doc)
    logger.info("pearson %s, spearman %s", doc["pearson"], doc["spearman"])


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace, OutputGuard], None]] = {
    "train": cmd_train,
    "cliptest": cmd_cliptest,
    "optimize": cmd_optimize,
    "rret": cmd_rret,
    "evaluate": cmd_evaluate,
    "pack": cmd_pack,
    "unpack": cmd_unpack,
    "sweep-bins": cmd_sweep_bins,
    "verify-bound": cmd_verify_bound,
    "correlate": cmd_correlate,
}


# ---------- argument parsing ----------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--mode", choices=moga.MODES, help="optimizer search space")
    common.add_argument("--density", type=int, help="bin density for pack")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--data", help="labeled CSV dataset (default: synthetic fixture)")
    common.add_argument("--checkpoint", help=f"model checkpoint (default: <out>/{CHECKPOINT_NAME})")
    common.add_argument("--epochs", type=int)
    common.add_argument("--population", type=int)
    common.add_argument("--generations", type=int)
    common.add_argument("--policies", type=int, help="RRET policy count")
    common.add_argument("--keep-frac", type=float, help="evaluate: fraction of neurons kept")

    parser = argparse.ArgumentParser(prog="mosae", description="Multi-objective stacked-autoencoder anomaly pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "unpack":
            p.add_argument("--payload", help=f"payload file (default: <out>/{PAYLOAD_NAME})")
            p.add_argument("--output", help="reconstructed checkpoint path (default: <out>/unpacked.mosm)")
        if name == "correlate":
            p.add_argument("--csv", required=True)
            p.add_argument("--x", required=True)
            p.add_argument("--y", required=True)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {
        "run.seed": args.seed,
        "run.out": args.out,
        "run.mode": args.mode,
        "run.log_level": args.log_level,
        "binpack.density": args.density,
        "data.path": args.data,
        "sae.epochs": args.epochs,
        "ga.population": args.population,
        "ga.generations": args.generations,
        "exits.rret_policies": args.policies,
        "clipping.keep_frac": args.keep_frac,
    }


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        cfg = load_run_config(args.config, _overrides(args))
    except MosaeError as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.error("configuration: %s", e)
        return EXIT_USAGE

    logging.basicConfig(level=getattr(logging, cfg.log_level, logging.INFO), format=LOG_FORMAT)
    try:
        with OutputGuard(cfg.out) as guard:
            COMMANDS[args.command](cfg, args, guard)
    except (MosaeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
