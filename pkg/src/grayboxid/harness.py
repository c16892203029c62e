"""End-to-end identification pipeline and Monte-Carlo experiments.

A trial draws a white input and white measurement noise, simulates the true
model, fits a black-box realization with MOESP, computes the nuclear-norm
initialization and refines it with each requested method from that same
starting point.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .exceptions import (
    ConfigError,
    DegenerateExtractionError,
    ExcitationError,
    NumericalFailure,
    StructureError,
)
from .lifting import CLEAN_SIGMA2_RATIO, COND_WARN, assemble_H, build_lifted, extract
from .solvers import SolverConfig, SolveTrace, _Subproblem, ami_solve, dcp_solve, nun_solve
from .ssmodel import ParametrizedStructure, StateSpace, add_noise, simulate
from .subspace import MoespResult, SubspaceConfig, canonical_realization, moesp

__all__ = [
    "METHODS",
    "MethodResult",
    "Identification",
    "identify",
    "ExperimentPlan",
    "TrialRecord",
    "ExperimentResult",
    "rnmse",
    "trial_seed",
    "run_trial",
    "run_experiment",
    "iteration_trace_experiment",
    "write_csv",
]

logger = logging.getLogger(__name__)

METHODS = ("nun", "dcp", "ami")
DEFAULT_SNR_GRID = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
# statuses whose estimates enter the aggregates
_USABLE = ("ok", "converged", "max-iters")
_TRIAL_ERRORS = (
    DegenerateExtractionError,
    NumericalFailure,
    ExcitationError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


def _cond(T) -> float:
    T = np.asarray(T, dtype=float)
    return float(np.linalg.cond(T)) if np.all(np.isfinite(T)) else float("inf")


@dataclass
class MethodResult:
    """Outcome of one estimation method.

    ``status`` is ``"ok"`` for the closed-form NUN step, the trace status
    (``"converged"``, ``"max-iters"``, ``"degenerate"``) for the iterative
    methods, or ``"failed"`` when the method raised.
    """

    method: str
    theta: np.ndarray
    T: np.ndarray
    status: str
    iterations: int = 0
    cond_T: float = float("nan")
    sigma2_ratio: float = float("nan")
    seconds: float = 0.0
    trace: Optional[SolveTrace] = None
    message: str = ""

    @property
    def usable(self) -> bool:
        return self.status in _USABLE

    @property
    def flagged(self) -> bool:
        """True when the estimate looks unreliable (weak rank-one fit or ill-conditioned T)."""
        ratio_bad = np.isfinite(self.sigma2_ratio) and self.sigma2_ratio > CLEAN_SIGMA2_RATIO
        return bool(ratio_bad or not self.cond_T < COND_WARN)


@dataclass
class Identification:
    """Everything one pass of the pipeline produced."""

    system: StateSpace
    moesp: Optional[MoespResult]
    results: Dict[str, MethodResult]
    warnings: List[str] = field(default_factory=list)

    def __getitem__(self, method: str) -> MethodResult:
        return self.results[method]


def _failed(method, q, n, exc, t0):
    return MethodResult(method, np.full(q, np.nan), np.full((n, n), np.nan), "failed",
                        seconds=time.perf_counter() - t0, message=f"{type(exc).__name__}: {exc}")


def identify(structure: ParametrizedStructure, data, methods: Sequence[str] = ("dcp",),
             solver: Optional[SolverConfig] = None, subspace: Optional[SubspaceConfig] = None,
             basis: str = "given") -> Identification:
    """Run MOESP, NUN and the requested refinements on one data record.

    Parameters
    ----------
    structure : ParametrizedStructure
    data : SimData, tuple of (U, Y), or StateSpace
        Measured channels along rows. A ``StateSpace`` is taken as the
        black-box estimate directly and skips MOESP.
    methods : sequence of {"nun", "dcp", "ami"}
        NUN always runs, since it provides the shared initial point.
    basis : {"given", "canonical"}
        ``"canonical"`` maps the black-box realization to the
        system-determined basis of :func:`canonical_realization` first.

    Returns
    -------
    Identification
        Per-method failures are recorded in the results, not raised. MOESP
        errors propagate.
    """
    solver = solver or SolverConfig()
    methods = _check_methods(methods)
    if basis not in ("given", "canonical"):
        raise ConfigError(f"basis must be 'given' or 'canonical', got {basis!r}")
    n, q = structure.n, structure.q
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        if isinstance(data, StateSpace):
            mres, ss_hat = None, data
        else:
            mres = moesp(data, subspace or SubspaceConfig(n=n))
            ss_hat = mres.system
        if basis == "canonical":
            ss_hat = canonical_realization(ss_hat, s=(subspace.s if subspace else None))
        problem = build_lifted(structure, ss_hat)
        sp = _Subproblem(problem)
        results: Dict[str, MethodResult] = {}

        t0 = time.perf_counter()
        try:
            theta0, T0, vars0 = nun_solve(problem, solver, _cache=sp)
            ratio0 = extract(assemble_H(vars0)).sigma2_ratio
            results["nun"] = MethodResult("nun", theta0, T0, "ok", 0, _cond(T0), ratio0,
                                          time.perf_counter() - t0)
        except _TRIAL_ERRORS as exc:
            results["nun"] = _failed("nun", q, n, exc, t0)
            for m in methods:
                if m != "nun":
                    results[m] = _failed(m, q, n, RuntimeError("no initial point"), t0)
            return Identification(ss_hat, mres, results, _messages(wlist))

        if "dcp" in methods:
            t0 = time.perf_counter()
            try:
                th, T, tr = dcp_solve(problem, vars0, solver, _cache=sp)
                last = tr.records[-1] if tr.records else None
                results["dcp"] = MethodResult(
                    "dcp", th, T, tr.status, tr.iterations, _cond(T),
                    last.sigma2_ratio if last else float("nan"),
                    time.perf_counter() - t0, tr,
                )
            except _TRIAL_ERRORS as exc:
                results["dcp"] = _failed("dcp", q, n, exc, t0)
        if "ami" in methods:
            t0 = time.perf_counter()
            try:
                th, T, tr = ami_solve(structure, ss_hat, theta0, T0, solver, problem=problem)
                results["ami"] = MethodResult("ami", th, T, tr.status, tr.iterations, _cond(T),
                                              float("nan"), time.perf_counter() - t0, tr)
            except _TRIAL_ERRORS as exc:
                results["ami"] = _failed("ami", q, n, exc, t0)
    return Identification(ss_hat, mres, results, _messages(wlist))


def _messages(wlist) -> List[str]:
    return [f"{w.category.__name__}: {w.message}" for w in wlist]


def _check_methods(methods) -> Tuple[str, ...]:
    if isinstance(methods, str):
        methods = METHODS if methods == "all" else (methods,)
    methods = tuple(m.lower() for m in methods)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    return tuple(m for m in METHODS if m in methods)


def rnmse(estimates, theta_star) -> float:
    """Root normalized mean square error of a batch of estimates.

    ``sqrt(mean_i ||theta_i - theta*||^2 / ||theta*||^2)``, summed in the
    given order.
    """
    theta_star = np.asarray(theta_star, dtype=float).ravel()
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    if est.size == 0:
        raise ValueError("rnmse needs at least one estimate")
    if est.shape[1] != theta_star.size:
        raise ValueError(f"estimates have length {est.shape[1]}, theta* has {theta_star.size}")
    denom = float(theta_star @ theta_star)
    if denom == 0.0:
        raise ValueError("theta* must be nonzero")
    return float(np.sqrt(np.mean(np.sum((est - theta_star) ** 2, axis=1)) / denom))


@dataclass(frozen=True)
class ExperimentPlan:
    """Monte-Carlo experiment specification.

    ``snr_grid`` entries of ``None`` (or ``inf``) mean noise-free output.
    ``burn_in`` leading samples are simulated and discarded; it defaults to
    the model order.
    """

    structure: ParametrizedStructure
    theta_true: Optional[np.ndarray] = None
    snr_grid: Tuple[Optional[float], ...] = DEFAULT_SNR_GRID
    trials: int = 50
    samples: int = 400
    solver: SolverConfig = field(default_factory=SolverConfig)
    subspace_rows: Optional[int] = None
    methods: Tuple[str, ...] = METHODS
    base_seed: int = 0
    burn_in: Optional[int] = None
    basis: str = "given"
    keep_traces: bool = False

    def __post_init__(self):
        theta = self.theta_true if self.theta_true is not None else self.structure.theta_true
        if theta is None:
            raise ConfigError("plan needs theta_true (structure carries none)")
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.structure.q:
            raise ConfigError(f"theta_true has {theta.size} entries; structure has q={self.structure.q}")
        object.__setattr__(self, "theta_true", theta)
        grid = tuple(None if g is None or not np.isfinite(float(g)) else float(g)
                     for g in np.atleast_1d(np.asarray(self.snr_grid, dtype=object)))
        if not grid:
            raise ConfigError("snr_grid must be non-empty")
        object.__setattr__(self, "snr_grid", grid)
        if int(self.trials) < 1:
            raise ConfigError("trials must be at least 1")
        object.__setattr__(self, "methods", _check_methods(self.methods))
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", self.structure.n)
        cfg = self.subspace_config()
        m, p = self.structure.m, self.structure.p
        need = cfg.s * (m + p) + cfg.s - 1
        if self.samples < need:
            raise ConfigError(f"samples={self.samples} too few for {cfg.s} block rows (need {need})")

    def subspace_config(self) -> SubspaceConfig:
        return SubspaceConfig(n=self.structure.n, s=self.subspace_rows)


@dataclass
class TrialRecord:
    trial: int
    snr_index: int
    snr_db: Optional[float]
    results: Dict[str, MethodResult]
    seconds: float
    warnings: List[str] = field(default_factory=list)
    error: str = ""

    @property
    def cond_T(self) -> Dict[str, float]:
        return {m: r.cond_T for m, r in self.results.items()}


def trial_seed(base_seed: int, snr_index: int, trial: int) -> np.random.SeedSequence:
    """Seed of one trial: entropy ``(base_seed, snr_index, trial)``.

    Any trial can be replayed alone from these three integers.
    """
    return np.random.SeedSequence([int(base_seed), int(snr_index), int(trial)])


def run_trial(plan: ExperimentPlan, snr_index: int, trial: int) -> TrialRecord:
    """One seeded simulate/identify pass; method failures are recorded."""
    t0 = time.perf_counter()
    snr = plan.snr_grid[snr_index]
    s = plan.structure
    input_seq, noise_seq = trial_seed(plan.base_seed, snr_index, trial).spawn(2)
    U = np.random.default_rng(input_seq).standard_normal((s.m, plan.samples + plan.burn_in))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sim = simulate(s.evaluate(plan.theta_true), U).trim(plan.burn_in)
        sim = add_noise(sim, snr, noise_seq)
        ident = identify(s, sim, plan.methods, plan.solver, plan.subspace_config(), plan.basis)
    except (_TRIAL_ERRORS + (StructureError,)) as exc:
        logger.warning("trial %d at snr %s failed: %s", trial, snr, exc)
        failed = {m: _failed(m, s.q, s.n, exc, t0) for m in plan.methods}
        return TrialRecord(trial, snr_index, snr, failed, time.perf_counter() - t0,
                           error=f"{type(exc).__name__}: {exc}")
    results = {m: ident.results[m] for m in plan.methods}
    if not plan.keep_traces:
        for r in results.values():
            r.trace = None
    return TrialRecord(trial, snr_index, snr, results, time.perf_counter() - t0, ident.warnings)


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    records: List[TrialRecord]

    def _sorted(self):
        return sorted(self.records, key=lambda r: (r.snr_index, r.trial))

    def tidy_rows(self) -> List[dict]:
        q = self.plan.structure.q
        rows = []
        for rec in self._sorted():
            for m in self.plan.methods:
                r = rec.results[m]
                row = {"snr_db": _fmt_snr(rec.snr_db), "method": m, "trial": rec.trial}
                row.update({f"theta_{i + 1}": float(r.theta[i]) for i in range(q)})
                row.update(iters=r.iterations, status=r.status, cond_T=r.cond_T, seconds=r.seconds)
                rows.append(row)
        return rows

    def estimates(self, snr_index: int, method: str) -> np.ndarray:
        """Usable estimates at one grid point, in trial order."""
        est = [rec.results[method].theta for rec in self._sorted()
               if rec.snr_index == snr_index and rec.results[method].usable]
        return np.array(est).reshape(-1, self.plan.structure.q)

    def aggregate_rows(self) -> List[dict]:
        rows = []
        for i, snr in enumerate(self.plan.snr_grid):
            for m in self.plan.methods:
                est = self.estimates(i, m)
                value = rnmse(est, self.plan.theta_true) if len(est) else float("nan")
                rows.append({"snr_db": _fmt_snr(snr), "method": m, "rnmse": value,
                             "trials_used": len(est)})
        return rows

    def rnmse_table(self) -> Dict[str, np.ndarray]:
        """Per-method rNMSE along the SNR grid."""
        out = {m: np.full(len(self.plan.snr_grid), np.nan) for m in self.plan.methods}
        for i, _ in enumerate(self.plan.snr_grid):
            for m in self.plan.methods:
                est = self.estimates(i, m)
                if len(est):
                    out[m][i] = rnmse(est, self.plan.theta_true)
        return out


def _fmt_snr(snr):
    return "none" if snr is None else snr


def run_experiment(plan: ExperimentPlan, n_jobs: int = 1) -> ExperimentResult:
    """Run every (SNR, trial) pair of ``plan``.

    Trials are independent and run through joblib with ``n_jobs`` workers;
    results are identical for any ``n_jobs``.
    """
    jobs = [(i, k) for i in range(len(plan.snr_grid)) for k in range(plan.trials)]
    if n_jobs == 1:
        records = [run_trial(plan, i, k) for i, k in jobs]
    else:
        records = Parallel(n_jobs=n_jobs)(delayed(run_trial)(plan, i, k) for i, k in jobs)
    return ExperimentResult(plan, list(records))


def iteration_trace_experiment(plan: ExperimentPlan) -> List[dict]:
    """Per-iteration error and objective traces of one trial.

    The plan must hold exactly one SNR and one trial. Rows carry
    ``method, iter, rel_err, ls_part, kyfan_penalty, objective, rel_change,
    cond_T``, with ``rel_err = ||theta^k - theta*|| / ||theta*||`` and
    iterations counted from 1.
    """
    if len(plan.snr_grid) != 1 or plan.trials != 1:
        raise ConfigError("trace experiments need exactly one SNR and one trial")
    rec = run_trial(replace(plan, keep_traces=True), 0, 0)
    if rec.error:
        raise NumericalFailure(f"trace trial failed: {rec.error}")
    norm = np.linalg.norm(plan.theta_true)
    rows = []
    for m in plan.methods:
        tr = rec.results[m].trace
        if tr is None:
            continue
        for r in tr.records:
            rows.append({
                "method": m,
                "iter": r.iteration,
                "rel_err": float(np.linalg.norm(r.theta - plan.theta_true) / norm),
                "ls_part": r.ls_part,
                "kyfan_penalty": r.kyfan_penalty,
                "objective": r.objective,
                "rel_change": r.rel_change,
                "cond_T": r.cond_T,
            })
    return rows


def write_csv(rows: Sequence[dict], path: Union[str, Path]) -> Path:
    """Write dict rows to ``path``; columns follow the first row's key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if not rows:
            return path
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
