"""Command-line entry point: ``topo3d`` / ``python -m topo3d``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import asdict
from datetime import datetime
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import Topo3dError
from .fem import MaterialModel, SolverConfig
from .geometry import export_stl
from .optimizer import PHASES, OcParams, OptimizationFailed, run_optimization
from .problem import ProblemDefinition

log = logging.getLogger("topo3d.cli")

# flag name -> (type, default)
OPTIONS = {
    "nelx": (int, 32),
    "nely": (int, 16),
    "nelz": (int, 16),
    "volfrac": (float, 0.2),
    "penal": (float, 3.0),
    "rmin": (float, 4.0),
    "max_iter": (int, 200),
    "tol": (float, 0.01),
    "move": (float, 0.2),
    "problem": (str, "cantilever"),
    "bc_config": (str, None),
    "obstacle_config": (str, None),
    "design_stl": (str, None),
    "export_threshold": (float, 0.5),
    "solver": (str, "cg"),
    "solver_tol": (float, 1e-8),
    "filter_mode": (str, "density_weighted"),
    "threads": (int, 0),
    "deterministic": (bool, False),
    "out": (str, "runs"),
}
CHOICES = {
    "problem": ["cantilever"],
    "solver": ["cg", "direct"],
    "filter_mode": ["plain", "density_weighted"],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="topo3d",
        description="3D SIMP compliance topology optimization on a hexahedral grid.",
        argument_default=argparse.SUPPRESS,
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", metavar="PATH", help="JSON file with any of the options below")
    for name, (typ, default) in OPTIONS.items():
        flag = "--" + name.replace("_", "-")
        if typ is bool:
            p.add_argument(flag, action="store_true", help="sequential, bit-reproducible run")
            continue
        p.add_argument(flag, type=typ, choices=CHOICES.get(name), help=f"default: {default}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    return p


def resolve_options(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Flags override config-file values, which override defaults."""
    opts = {name: default for name, (_, default) in OPTIONS.items()}
    if getattr(args, "config", None):
        try:
            file_opts = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        for key, value in file_opts.items():
            key = key.replace("-", "_")
            if key not in OPTIONS:
                parser.error(f"unknown key {key!r} in config {args.config}")
            if key in CHOICES and value not in CHOICES[key]:
                parser.error(f"config {key}={value!r} not one of {CHOICES[key]}")
            opts[key] = value
    opts.update({k: v for k, v in vars(args).items() if k in OPTIONS})
    for name in ("nelx", "nely", "nelz"):
        if not isinstance(opts[name], int) or opts[name] < 1:
            parser.error(f"--{name} must be a positive integer (got {opts[name]!r})")
    if not 0 < opts["volfrac"] < 1:
        parser.error(f"--volfrac must lie in (0, 1) (got {opts['volfrac']})")
    if opts["max_iter"] < 1:
        parser.error("--max-iter must be at least 1")
    if opts["rmin"] <= 0:
        parser.error("--rmin must be positive")
    return opts


def problem_from_options(opts: dict) -> ProblemDefinition:
    return ProblemDefinition(
        nelx=opts["nelx"],
        nely=opts["nely"],
        nelz=opts["nelz"],
        material=MaterialModel(penal=opts["penal"]),
        oc=OcParams(volfrac=opts["volfrac"], move=opts["move"]),
        rmin=opts["rmin"],
        filter_mode=opts["filter_mode"],
        max_iter=opts["max_iter"],
        change_tol=opts["tol"],
        solver=SolverConfig(backend=opts["solver"], rtol=opts["solver_tol"]),
        problem=opts["problem"],
        bc_config=opts["bc_config"],
        obstacle_config=opts["obstacle_config"],
        design_stl=opts["design_stl"],
        export_threshold=opts["export_threshold"],
        out_dir=opts["out"],
        deterministic=opts["deterministic"],
        threads=opts["threads"],
    )


def make_run_dir(root) -> Path:
    """Create a fresh timestamped directory under ``root``; never reuses one."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("run-%Y%m%d-%H%M%S")
    suffix = 0
    while True:
        path = root / (stamp if suffix == 0 else f"{stamp}-{suffix}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            suffix += 1


def timing_report(trace) -> dict:
    totals = trace.phase_totals()
    four = sum(totals.values())
    return {
        "iterations": len(trace),
        "phases": [
            {
                "phase": p.capitalize(),
                "seconds": round(totals[p], 6),
                "percent": round(100.0 * totals[p] / four, 3) if four > 0 else 0.0,
            }
            for p in PHASES
        ],
        "total_seconds": round(four, 6),
        "loop_seconds": round(trace.loop_time(), 6),
    }


def format_timing_table(report: dict) -> str:
    lines = [f"{'Phase':<10}{'Time (s)':>12}{'(%)':>9}"]
    for row in report["phases"]:
        lines.append(f"{row['phase']:<10}{row['seconds']:>12.2f}{row['percent']:>9.1f}")
    lines.append(f"{'Total':<10}{report['total_seconds']:>12.2f}{100.0:>9.1f}")
    return "\n".join(lines)


def write_outputs(run_dir: Path, problem: ProblemDefinition, density, trace, opts: dict) -> None:
    (run_dir / "trace.csv").write_text(trace.to_csv())
    report = timing_report(trace)
    (run_dir / "timing_report.json").write_text(json.dumps(report, indent=2) + "\n")
    summary = {
        "version": __version__,
        "options": opts,
        "material": asdict(problem.material),
        "designable_elements": int(density.design_mask.sum()),
        "passive_elements": int((~density.design_mask).sum()),
        **trace.summary(),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    np.save(run_dir / "density.npy", density.rho)
    (run_dir / "result.stl").write_bytes(
        export_stl(density.rho, problem.dims, problem.export_threshold)
    )
    log.info("timing breakdown:\n%s", format_timing_table(report))


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = resolve_options(args, parser)
    except SystemExit as exc:
        return int(exc.code or 0)

    level = logging.WARNING if getattr(args, "quiet", False) else logging.INFO
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(name)s: %(levelname)s: %(message)s", force=True
    )

    try:
        problem = problem_from_options(opts)
    except (Topo3dError, ValueError) as exc:
        log.error("%s", exc)
        return 2

    threads = 1 if problem.deterministic else problem.threads
    limiter = threadpool_limits(limits=threads) if threads > 0 else nullcontext()
    run_dir = None
    try:
        with limiter:
            run_dir = make_run_dir(problem.out_dir)
            log.info("writing results to %s", run_dir)
            density, trace = run_optimization(problem)
            write_outputs(run_dir, problem, density, trace, opts)
    except OptimizationFailed as exc:
        log.error("%s", exc)
        if run_dir is not None and len(exc.trace):
            (run_dir / "trace.csv").write_text(exc.trace.to_csv())
        return 1
    except (Topo3dError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    print(run_dir)
    return 0


def main() -> None:
    sys.exit(run_cli())
