"""Command-line front end: ``grayboxid simulate | identify | benchmark``.

Every run reads one YAML config; command-line flags override its keys.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 completed with warnings.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml

from .exceptions import ConfigError, ExcitationError, GrayBoxError, NumericalFailure, StructureError
from .harness import (
    ExperimentPlan,
    identify,
    iteration_trace_experiment,
    run_experiment,
    write_csv,
)
from .solvers import SolverConfig
from .ssmodel import add_noise, load_structure, simulate, structure_from_dict
from .subspace import SubspaceConfig

__all__ = ["main", "build_parser", "load_config", "bundled_configs"]

logger = logging.getLogger("grayboxid")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_WARN = 4

_FAILED = ("failed", "degenerate")


def bundled_configs() -> List[str]:
    return sorted(p.name[:-5] for p in resources.files("grayboxid.data").iterdir()
                  if p.name.endswith(".yaml"))


def _resolve_config(ref: str) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    bundled = resources.files("grayboxid.data") / f"{ref}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config not found: {ref!r} (bundled: {', '.join(bundled_configs())})")


def _nested_lines(text: str, key: str) -> dict:
    # line numbers of the keys under a top-level mapping entry
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(root, yaml.MappingNode):
        return {}
    for k, v in root.value:
        if k.value == key and isinstance(v, yaml.MappingNode):
            return {kk.value: kk.start_mark.line + 1 for kk, _ in v.value}
    return {}


def load_config(ref: Optional[str]) -> dict:
    """Parse a config file (path or bundled name) into a dict.

    Paths inside the file are resolved relative to the file's directory.
    """
    if ref is None:
        return {"_dir": Path.cwd(), "_text": ""}
    path = _resolve_config(ref)
    text = path.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"cannot parse {path}{loc}: {exc.problem if hasattr(exc, 'problem') else exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    data["_dir"] = path.parent
    data["_text"] = text
    return data


def _structure(cfg: dict):
    ref = cfg.get("structure")
    if ref is None:
        raise ConfigError("config needs a 'structure' entry (fixture name, file or mapping)")
    if isinstance(ref, dict):
        return structure_from_dict(ref, _nested_lines(cfg["_text"], "structure"))
    ref = str(ref)
    candidate = cfg["_dir"] / ref
    return load_structure(candidate if candidate.exists() else ref)


def _section(cfg: dict, key: str) -> dict:
    sec = cfg.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    return dict(sec)


def _solver_config(cfg: dict, args) -> SolverConfig:
    sec = _section(cfg, "solver")
    if "lambda" in sec:
        sec["lam"] = sec.pop("lambda")
    known = {f.name for f in fields(SolverConfig)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown solver keys {sorted(unknown)}; allowed {sorted(known)}")
    if args.lam is not None:
        sec["lam"] = args.lam
    if args.max_iters is not None:
        sec["max_iters"] = args.max_iters
    if args.tol is not None:
        sec["rel_tol"] = args.tol
    try:
        return SolverConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver settings: {exc}") from exc


def _subspace_config(cfg: dict, n: int) -> SubspaceConfig:
    sec = _section(cfg, "subspace")
    try:
        return SubspaceConfig(n=n, **sec)
    except TypeError as exc:
        raise ConfigError(f"invalid subspace settings: {exc}") from exc


def _pick(args, cfg, name, default=None, key=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(key or name, default)


def _parse_snr(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [_parse_snr(v) for v in value]
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        vals = [None if p.lower() in ("none", "inf", "clean") else float(p) for p in parts]
        return vals if len(vals) > 1 or "," in value else vals[0]
    return float(value)


def _out_dir(args, cfg) -> Path:
    out = Path(_pick(args, cfg, "out", "results"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _simulated(cfg, args, structure):
    samples = int(_pick(args, cfg, "samples", 400))
    if samples < 1:
        raise ConfigError(f"samples must be positive, got {samples}")
    snr = _parse_snr(_pick(args, cfg, "snr"))
    if isinstance(snr, list):
        if len(snr) != 1:
            raise ConfigError("simulate/identify take a single SNR")
        snr = snr[0]
    seed = int(_pick(args, cfg, "seed", 0))
    theta = cfg.get("theta", structure.theta_true)
    if theta is None:
        raise ConfigError("config needs 'theta' (the structure carries no true value)")
    theta = np.asarray(theta, dtype=float)
    if theta.size != structure.q:
        raise ConfigError(f"theta has {theta.size} entries; structure has q={structure.q}")
    burn_in = int(cfg.get("burn_in", structure.n))
    input_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    U = np.random.default_rng(input_seq).standard_normal((structure.m, samples + burn_in))
    sim = simulate(structure.evaluate(theta), U).trim(burn_in)
    return add_noise(sim, snr, noise_seq), theta


def _save(path: Path, arr) -> None:
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt="%.17g")


def _load(path: Path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read data file {path}: {exc}") from exc


def cmd_simulate(args, cfg) -> int:
    structure = _structure(cfg)
    sim, _ = _simulated(cfg, args, structure)
    out = _out_dir(args, cfg)
    for name, arr in (("U", sim.U), ("Y", sim.Y), ("Y_clean", sim.Y_clean)):
        _save(out / f"{name}.csv", arr)
    print(f"wrote U, Y, Y_clean ({sim.n_samples} samples) to {out}")
    return EXIT_OK


def _fmt_vec(v) -> str:
    return "[" + ", ".join(f"{x: .6g}" for x in np.asarray(v, dtype=float)) + "]"


def cmd_identify(args, cfg) -> int:
    structure = _structure(cfg)
    solver = _solver_config(cfg, args)
    method = _pick(args, cfg, "method", "dcp")
    methods = ("nun", "dcp", "ami") if method == "all" else ("nun", method)
    data_sec = cfg.get("data")
    if data_sec:
        if not isinstance(data_sec, dict) or not {"U", "Y"} <= set(data_sec):
            raise ConfigError("'data' must map U and Y to CSV paths")
        U = _load(cfg["_dir"] / data_sec["U"])
        Y = _load(cfg["_dir"] / data_sec["Y"])
        data, theta_true = (U, Y), cfg.get("theta", structure.theta_true)
    else:
        data, theta_true = _simulated(cfg, args, structure)
    ident = identify(structure, data, methods, solver, _subspace_config(cfg, structure.n),
                     cfg.get("basis", "given"))
    out = _out_dir(args, cfg)
    code = EXIT_OK
    for m in methods:
        r = ident[m]
        print(f"[{m}] status={r.status} iterations={r.iterations} cond(T)={r.cond_T:.4g}"
              f" sigma2_ratio={r.sigma2_ratio:.3g}")
        print(f"[{m}] theta = {_fmt_vec(r.theta)}")
        if theta_true is not None and r.usable:
            err = np.linalg.norm(r.theta - theta_true) / np.linalg.norm(theta_true)
            print(f"[{m}] relative error = {err:.3g}")
        if r.trace is not None and r.trace.records:
            last = r.trace.records[-1]
            print(f"[{m}] objective={last.objective:.6g} ls={last.ls_part:.6g} "
                  f"kyfan={last.kyfan_penalty:.6g}")
            write_csv(r.trace.to_rows(), out / f"trace_{m}.csv")
        if r.status in _FAILED:
            print(f"[{m}] failed: {r.message or r.status}", file=sys.stderr)
            code = EXIT_NUMERIC
        elif code == EXIT_OK and m != "nun" and (r.flagged or r.status != "converged"):
            code = EXIT_WARN
    for w in ident.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if code == EXIT_OK and ident.warnings:
        code = EXIT_WARN
    return code


def cmd_benchmark(args, cfg) -> int:
    structure = _structure(cfg)
    bench = _section(cfg, "benchmark")
    method = _pick(args, cfg, "method", "all")
    methods = ("nun", "dcp", "ami") if method == "all" else ("nun", method)
    mode = bench.get("mode", "sweep")
    grid = None
    if args.snr is not None:
        grid = _parse_snr(args.snr)
    elif "snr_grid" in bench:
        grid = _parse_snr(bench["snr_grid"])
    if grid is not None and not isinstance(grid, list):
        grid = [grid]
    trials = args.trials if args.trials is not None else bench.get("trials", 1 if mode == "trace" else 50)
    kwargs = dict(
        structure=structure,
        theta_true=cfg.get("theta"),
        trials=int(trials),
        samples=int(_pick(args, cfg, "samples", 400)),
        solver=_solver_config(cfg, args),
        subspace_rows=_section(cfg, "subspace").get("s"),
        methods=methods,
        base_seed=int(_pick(args, cfg, "seed", 0)),
        basis=cfg.get("basis", "given"),
    )
    if grid is not None:
        kwargs["snr_grid"] = tuple(grid)
    plan = ExperimentPlan(**kwargs)
    out = _out_dir(args, cfg)
    if mode == "trace":
        rows = iteration_trace_experiment(plan)
        write_csv(rows, out / "trace.csv")
        for m in plan.methods:
            mine = [r for r in rows if r["method"] == m]
            if mine:
                print(f"{m}: {len(mine)} iterations, final rel_err {mine[-1]['rel_err']:.3g}")
        print(f"wrote {out / 'trace.csv'}")
        return EXIT_OK
    if mode != "sweep":
        raise ConfigError(f"benchmark mode must be 'sweep' or 'trace', got {mode!r}")
    jobs = args.jobs if args.jobs is not None else int(cfg.get("jobs", _default_jobs()))
    result = run_experiment(plan, n_jobs=jobs)
    write_csv(result.tidy_rows(), out / "trials.csv")
    agg = result.aggregate_rows()
    write_csv(agg, out / "aggregate.csv")
    print(f"{'snr_db':>8} {'method':>6} {'rnmse':>12} {'trials_used':>11}")
    for row in agg:
        print(f"{str(row['snr_db']):>8} {row['method']:>6} {row['rnmse']:>12.4g} {row['trials_used']:>11d}")
    total = len(result.records) * len(plan.methods)
    failed = sum(1 for rec in result.records for r in rec.results.values() if not r.usable)
    if failed:
        print(f"{failed} of {total} method runs failed and were excluded", file=sys.stderr)
    if failed == total:
        return EXIT_NUMERIC
    return EXIT_WARN if failed else EXIT_OK


def _default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config path or bundled config name")
    common.add_argument("--method", choices=["nun", "dcp", "ami", "all"])
    common.add_argument("--snr", help="SNR in dB; comma-separated grid for benchmark; 'none' for noise-free")
    common.add_argument("--trials", type=int)
    common.add_argument("--samples", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--max-iters", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="grayboxid",
        description="Gray-box parameter estimation from subspace realizations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate data to CSV")
    sub.add_parser("identify", parents=[common], help="estimate theta from data")
    sub.add_parser("benchmark", parents=[common], help="Monte-Carlo sweep or iteration trace")
    return parser


_COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "benchmark": cmd_benchmark}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, StructureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ExcitationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GrayBoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
