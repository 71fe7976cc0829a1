"""
cli.py
======
Command-line front end:

  register  align point-set files, write the transforms (+ trace, merged cloud)
  synth     write a synthetic scene and its ground-truth transforms
  eval      compare estimated transforms against ground truth
  sweep     sensitivity of the errors to the outlier ratio w
  trials    repeated registrations under fresh noise, mean and std of the errors
  bench     per-iteration runtime over a grid of set sizes and set counts

Exit codes: 0 success (register: converged), 1 error, 2 register stopped at
--max-iters without converging.

Every command writes a run manifest: --manifest when given, else
<out stem>.manifest.json beside --out, else <command>.manifest.json in the
working directory (eval: <estimated stem>.eval.manifest.json).

Environment (a .env file is honoured): EMPMR_THREADS is the fallback for
--threads, EMPMR_LOG_LEVEL sets the level of every module logger.
"""

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv
from termcolor import colored

from em_engine import EmConfig, merge_point_sets, register
from geometry import identity_transforms
from pointcloud_io import (
    FORMATS, PLY_BINARY_LE, TransformEntry, TransformFile,
    read_point_set, read_transforms, write_point_set, write_transform_file, write_transforms,
)
from run_manifest import ManifestClock, build_manifest, write_manifest
from synthesis_eval import (
    SHAPES, NoiseSpec, add_noise_to_scene, benchmark_scaling, downsample_uniform,
    evaluate_both, plot_benchmark, plot_sweep, sweep_w, synth_scene, trial_statistics,
)

# --- LOGGER ---
logger = logging.getLogger('cli')
logger.setLevel(logging.INFO)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - 🖥️ CLI - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.propagate = False

MODULE_LOGGERS = ('geometry', 'spatial_index', 'em_engine', 'synthesis_eval', 'pointcloud_io', 'cli')

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

DEFAULT_DOWNSAMPLE = "2000"


class CliUsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; exit code 2 is reserved for non-convergence
    def error(self, message):
        raise CliUsageError(f"{self.prog}: {message}")


# ==============================================================================
# Helpers
# ==============================================================================

def _configure_logging() -> None:
    level_name = os.getenv("EMPMR_LOG_LEVEL")
    if not level_name:
        return
    level = logging.getLevelName(level_name.upper())
    if not isinstance(level, int):
        raise CliUsageError(f"EMPMR_LOG_LEVEL: unknown log level '{level_name}'")
    for name in MODULE_LOGGERS:
        logging.getLogger(name).setLevel(level)


def _resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        threads = flag
    else:
        raw = os.getenv("EMPMR_THREADS", "1")
        try:
            threads = int(raw)
        except ValueError:
            raise CliUsageError(f"EMPMR_THREADS must be an integer, got '{raw}'")
    if threads < 1:
        raise CliUsageError(f"thread count must be >= 1, got {threads}")
    return threads


def _parse_downsample(value: str) -> Optional[int]:
    if value.lower() == "off":
        return None
    try:
        target = int(value)
    except ValueError:
        raise CliUsageError(f"--downsample expects an integer or 'off', got '{value}'")
    if target < 1:
        raise CliUsageError(f"--downsample must be >= 1, got {target}")
    return target


def _manifest_path(out: Optional[str], explicit: Optional[str], fallback: Path) -> Path:
    """--manifest, else beside --out, else `fallback`."""
    if explicit:
        return Path(explicit)
    if out:
        out = Path(out)
        return out.with_name(out.stem + ".manifest.json")
    return fallback


def _print_table(title: str, table: pd.DataFrame) -> None:
    print(colored(f"\n{title}", "green", attrs=['bold']))
    print(colored(table.to_markdown(index=False), "cyan"))


def _write_csv(table: pd.DataFrame, out: Optional[str]) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False)
        logger.info(f"Table written to {out}")


def _scene_from_args(args):
    return synth_scene(args.shape, args.sets, args.points, args.perturb_deg, args.perturb_trans,
                       args.overlap, args.seed)


def _config_from_args(args, threads: int) -> EmConfig:
    return EmConfig(w=args.w, max_iters=args.max_iters, tol=args.tol, seed=args.seed, threads=threads)


# ==============================================================================
# Commands
# ==============================================================================

def cmd_register(args) -> int:
    clock = ManifestClock()
    if len(args.inputs) < 2:
        raise CliUsageError("need at least two point sets (--inputs)")
    threads = _resolve_threads(args.threads)
    target = _parse_downsample(args.downsample)
    cfg = _config_from_args(args, threads)

    sets = []
    for i, path in enumerate(args.inputs):
        point_set = read_point_set(path, args.format, args.scale, index=i)
        if target is not None:
            point_set = downsample_uniform(point_set, target)
        sets.append(point_set)

    if args.init == "identity":
        init = identity_transforms(len(sets))
    else:
        init = read_transforms(args.init).transforms
        if len(init) != len(sets):
            raise CliUsageError(f"{args.init} holds {len(init)} transforms for {len(sets)} input files")

    params, report = register(sets, init, cfg)
    write_transforms(params, report, args.out, names=[s.name for s in sets])
    trace = report.to_frame()
    if args.trace:
        _write_csv(trace, args.trace)
    if args.merged:
        write_point_set(merge_point_sets(sets, params), args.merged, PLY_BINARY_LE)

    outcome = {"converged": report.converged, "iterations": report.iterations_run,
               "sigma2": params.sigma2, "sigma2_initial": report.sigma2_initial,
               "objective": report.objectives[-1] if report.objectives else None,
               "warnings": report.warnings}
    manifest = build_manifest(
        "register",
        {**asdict(cfg), "scale": args.scale, "downsample": target, "init": args.init, "format": args.format},
        args.inputs, {"seed": cfg.seed}, outcome, clock)
    write_manifest(manifest, _manifest_path(args.out, args.manifest, Path("register.manifest.json")))

    _print_table("Registration trace", trace.tail(5))
    for warning in report.warnings:
        print(colored(f"Warning: {warning}", "yellow"))
    if report.converged:
        print(colored(f"Converged after {report.iterations_run} iterations, sigma2={params.sigma2:.6g}", "green"))
        return EXIT_OK
    print(colored(f"Stopped at --max-iters {cfg.max_iters} without converging", "yellow"))
    return EXIT_NOT_CONVERGED


def cmd_synth(args) -> int:
    clock = ManifestClock()
    scene = _scene_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extension = ".xyz" if args.format == "xyz_text" else ".ply"

    written = []
    for point_set in scene.sets:
        path = out_dir / f"{point_set.name}{extension}"
        write_point_set(point_set, path, args.format)
        written.append(str(path))

    truth = TransformFile([TransformEntry(s.name, T) for s, T in zip(scene.sets, scene.truth)],
                          metadata={"shape": scene.shape, "seed": scene.seed,
                                    "scene_diameter": scene.scene_diameter})
    write_transform_file(truth, out_dir / "truth.json")

    manifest = build_manifest(
        "synth",
        {"shape": args.shape, "sets": args.sets, "points": args.points, "perturb_deg": args.perturb_deg,
         "perturb_trans": args.perturb_trans, "overlap": args.overlap, "format": args.format},
        [], {"seed": args.seed},
        {"files": written, "sizes": [len(s) for s in scene.sets], "scene_diameter": scene.scene_diameter},
        clock)
    write_manifest(manifest, out_dir / "manifest.json")
    print(colored(f"Wrote {len(written)} point sets and truth.json to {out_dir}", "green"))
    return EXIT_OK


def cmd_eval(args) -> int:
    clock = ManifestClock()
    estimated = read_transforms(args.estimated).transforms
    truth = read_transforms(args.truth).transforms
    both = evaluate_both(estimated, truth)
    key = "fixed" if args.gauge_fix else "raw"
    row = {"e_R": both[f"e_R_{key}"], "e_t": both[f"e_t_{key}"], **both}
    table = pd.DataFrame([row], columns=["e_R", "e_t", "e_R_raw", "e_t_raw", "e_R_fixed", "e_t_fixed"])
    table.to_csv(sys.stdout, index=False)
    _write_csv(table, args.out)

    estimated_path = Path(args.estimated)
    fallback = estimated_path.with_name(estimated_path.stem + ".eval.manifest.json")
    manifest = build_manifest("eval", {"gauge_fix": args.gauge_fix}, [args.estimated, args.truth], {}, row, clock)
    write_manifest(manifest, _manifest_path(args.out, args.manifest, fallback))
    return EXIT_OK


def cmd_sweep(args) -> int:
    clock = ManifestClock()
    if args.param != "w":
        raise CliUsageError(f"only the outlier ratio 'w' can be swept, got '{args.param}'")
    threads = _resolve_threads(args.threads)
    scene = _scene_from_args(args)
    if not math.isinf(args.snr):
        scene = add_noise_to_scene(scene, NoiseSpec(args.snr, args.seed))
    cfg = _config_from_args(args, threads)

    table = sweep_w(scene, args.values, cfg)
    _write_csv(table, args.out)
    if args.plot and not table.empty:
        plot_sweep(table, args.plot)
    _print_table("w sensitivity", table)

    config = {**asdict(cfg), "values": list(args.values), "snr": args.snr, "shape": args.shape,
              "sets": args.sets, "points": args.points, "perturb_deg": args.perturb_deg,
              "perturb_trans": args.perturb_trans, "overlap": args.overlap}
    outcome = table.drop(columns=["runtime_s"]).to_dict(orient="list")
    manifest_path = _manifest_path(args.out, args.manifest, Path("sweep.manifest.json"))
    write_manifest(build_manifest("sweep", config, [], {"seed": args.seed}, outcome, clock), manifest_path)
    return EXIT_OK


def cmd_trials(args) -> int:
    clock = ManifestClock()
    threads = _resolve_threads(args.threads)
    scene = _scene_from_args(args)
    cfg = _config_from_args(args, 1)
    summary = trial_statistics(scene, NoiseSpec(args.snr, args.seed), args.trials, cfg, threads=threads)

    _write_csv(summary.table, args.out)
    result = pd.DataFrame([{
        "snr_db": args.snr, "trials": args.trials,
        "mean_e_R": summary.mean_e_R, "std_e_R": summary.std_e_R,
        "mean_e_t": summary.mean_e_t, "std_e_t": summary.std_e_t,
        "mean_runtime_s": summary.mean_runtime_s,
    }])
    _print_table("Trial statistics", result)

    config = {**asdict(cfg), "snr": args.snr, "trials": args.trials, "shape": args.shape,
              "sets": args.sets, "points": args.points, "perturb_deg": args.perturb_deg,
              "perturb_trans": args.perturb_trans, "overlap": args.overlap}
    outcome = {"mean_e_R": summary.mean_e_R, "std_e_R": summary.std_e_R,
               "mean_e_t": summary.mean_e_t, "std_e_t": summary.std_e_t}
    manifest_path = _manifest_path(args.out, args.manifest, Path("trials.manifest.json"))
    write_manifest(build_manifest("trials", config, [], {"seed": args.seed}, outcome, clock), manifest_path)
    return EXIT_OK


def cmd_bench(args) -> int:
    clock = ManifestClock()
    threads = _resolve_threads(args.threads)
    cfg = EmConfig(w=args.w, max_iters=args.max_iters, tol=1e-300, seed=args.seed, threads=threads)
    table = benchmark_scaling(args.sizes, args.sets, cfg, seed=args.seed, shape=args.shape, repeats=args.repeats)

    _write_csv(table, args.out)
    if args.plot and not table.empty:
        plot_benchmark(table, args.plot)
    _print_table("Runtime scaling", table)

    config = {**asdict(cfg), "sizes": list(args.sizes), "sets": list(args.sets), "shape": args.shape,
              "repeats": args.repeats}
    outcome = {"rows": len(table)}
    manifest_path = _manifest_path(args.out, args.manifest, Path("bench.manifest.json"))
    write_manifest(build_manifest("bench", config, [], {"seed": args.seed}, outcome, clock), manifest_path)
    return EXIT_OK


# ==============================================================================
# Parser
# ==============================================================================

def _add_engine_args(p, max_iters: int = 100) -> None:
    p.add_argument("--w", type=float, default=0.01, help="outlier ratio in [0, 1)")
    p.add_argument("--max-iters", type=int, default=max_iters)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--threads", type=int, default=None, help="defaults to $EMPMR_THREADS, then 1")


def _add_scene_args(p, shape: str = "composite") -> None:
    p.add_argument("--shape", choices=SHAPES, default=shape)
    p.add_argument("--sets", type=int, default=5)
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--perturb-deg", type=float, default=10.0)
    p.add_argument("--perturb-trans", type=float, default=0.1)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="empmr", description="Multi-view rigid registration by EM with nearest-neighbour GMMs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register point-set files")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--init", default="identity", help="transforms file or 'identity'")
    _add_engine_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--downsample", default=DEFAULT_DOWNSAMPLE, help="target points per set or 'off'")
    p.add_argument("--format", choices=FORMATS, default=None, help="inferred from the extension by default")
    p.add_argument("--out", required=True, help="transforms file to write")
    p.add_argument("--trace", default=None, help="per-iteration trace CSV")
    p.add_argument("--merged", default=None, help="write all aligned sets as one binary PLY")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="write a synthetic scene")
    _add_scene_args(p, shape="sphere")
    p.add_argument("--format", choices=FORMATS, default=PLY_BINARY_LE)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="errors of estimated transforms against ground truth")
    p.add_argument("--estimated", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--gauge-fix", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="error sensitivity to w")
    p.add_argument("--param", default="w")
    p.add_argument("--values", type=float, nargs="*", default=[0.0005, 0.001, 0.005, 0.01, 0.05])
    p.add_argument("--snr", type=float, default=math.inf, help="noise level in dB, inf for clean")
    _add_scene_args(p)
    _add_engine_args(p)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", default=None, help="PNG chart of the sweep")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trials", help="repeated noisy registrations")
    p.add_argument("--snr", type=float, default=50.0)
    p.add_argument("--trials", type=int, default=30)
    _add_scene_args(p)
    _add_engine_args(p)
    p.add_argument("--out", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("bench", help="runtime scaling")
    p.add_argument("--sizes", type=int, nargs="*", default=[1000, 2000, 4000, 8000])
    p.add_argument("--sets", type=int, nargs="*", default=[4])
    p.add_argument("--shape", choices=SHAPES, default="sphere")
    p.add_argument("--w", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--repeats", type=int, default=1, help="runs per grid cell, fastest kept")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ValueError, OSError) as e:
        print(colored(f"Error: {e}", "red"), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
