"""Solvers for the lifted estimation problem.

``nun_solve``
    Nuclear-norm regularized least squares; its rank-one extraction is the
    initial point for the refinements.
``dcp_solve``
    Sequential convex programming on ``ls + lam (||H||_* - ||H||_2)``: the
    spectral norm is linearized at the current iterate and the resulting
    convex problem is solved again, warm-started.
``ami_solve``
    Alternating least squares on the similarity mismatch ``h(theta, T)``,
    the classical baseline.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import ConditioningWarning, DegenerateExtractionError, NumericalFailure
from .lifting import (
    COND_WARN,
    LiftedProblem,
    LiftedVariables,
    assemble_H,
    build_lifted,
    extract,
    objective_dc,
    objective_h,
    solve_T,
    vec,
)
from .ssmodel import ParametrizedStructure, StateSpace, evaluate

__all__ = [
    "SolverConfig",
    "IterationRecord",
    "SolveTrace",
    "solve_convex_subproblem",
    "subproblem_objective",
    "nun_solve",
    "dcp_solve",
    "ami_solve",
    "gauss_newton_polish",
    "svt",
]

logger = logging.getLogger(__name__)

_ADMM_RELAX = 1.7
_APG_WINDOW = 50


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    Parameters
    ----------
    lam : float
        Weight of the nuclear-norm / rank penalty.
    max_iters : int
        Outer iteration cap for the DCP and AMI refinements.
    rel_tol : float
        Stop when ``||theta_next - theta|| / ||theta|| <= rel_tol``.
    inner_max_iters : int
        Iteration cap of each convex subproblem.
    inner_tol : float
        Relative tolerance of each convex subproblem.
    inner_method : {"admm", "apg"}
        ``"admm"`` splits ``H`` from the least-squares variables and is exact
        with respect to the pinned entry; ``"apg"`` is accelerated proximal
        gradient with singular-value thresholding and re-pinning.
    acceleration : {"anderson", "linesearch", "none"}
        Safeguarded extrapolation of the DCP outer iteration. A candidate
        (Anderson mixing of the last ``anderson_depth`` steps, or a doubling
        line search along the last step) replaces the plain convex step only
        if it lowers the rank-penalized objective, so monotonicity is kept.
        ``"none"`` gives the plain sequential convex iteration.
    polish : {"joint", "T", "none"}
        Final clean-up after the DCP refinement stops. ``"T"`` re-solves
        ``T`` by least squares at the final ``theta``; ``"joint"`` follows it
        with safeguarded Gauss-Newton steps on ``h(theta, T)``, accepted only
        while ``h`` decreases and ``theta`` moves by less than ``1e-3``
        relative (a local finish of the same stationary point).
    """

    lam: float = 1e-3
    max_iters: int = 100
    rel_tol: float = 1e-6
    inner_max_iters: int = 2000
    inner_tol: float = 1e-9
    inner_method: str = "admm"
    acceleration: str = "anderson"
    anderson_depth: int = 5
    polish: str = "joint"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.rel_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1 or self.inner_max_iters < 1:
            raise ValueError("iteration caps must be positive")
        if self.inner_method not in ("admm", "apg"):
            raise ValueError(f"unknown inner_method {self.inner_method!r}")
        if self.polish not in ("joint", "T", "none"):
            raise ValueError(f"unknown polish {self.polish!r}")
        if self.acceleration not in ("anderson", "linesearch", "none"):
            raise ValueError(f"unknown acceleration {self.acceleration!r}")


@dataclass
class IterationRecord:
    iteration: int
    theta: np.ndarray
    objective: float
    ls_part: float
    kyfan_penalty: float
    rel_change: float
    cond_T: float
    sigma2_ratio: float


@dataclass
class SolveTrace:
    """Per-iteration history; ``status`` is converged, max-iters or degenerate."""

    method: str
    records: List[IterationRecord] = field(default_factory=list)
    status: str = "max-iters"

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def to_rows(self) -> List[dict]:
        rows = []
        for r in self.records:
            row = {
                "iteration": r.iteration,
                "rel_change": r.rel_change,
                "ls_part": r.ls_part,
                "kyfan_penalty": r.kyfan_penalty,
                "cond_T": r.cond_T,
                "objective": r.objective,
                "sigma2_ratio": r.sigma2_ratio,
            }
            row.update({f"theta_{i + 1}": float(t) for i, t in enumerate(r.theta)})
            rows.append(row)
        return rows


# --------------------------------------------------------------------------
# convex subproblem

def svt(X, threshold: float) -> np.ndarray:
    """Singular-value soft thresholding, the prox of ``threshold * ||.||_*``."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    s = np.maximum(s - threshold, 0.0)
    return (U * s) @ Vt


class _Layout:
    """Index bookkeeping between the free-variable vector ``z`` and ``H``."""

    def __init__(self, n: int, q: int):
        self.n, self.q = n, q
        self.k = n * n
        self.rows, self.cols = self.k + 1, q + 1

    def to_H(self, z):
        H = np.empty((self.rows, self.cols))
        H[:-1] = z[:self.k * self.cols].reshape(self.k, self.cols, order="F")
        H[-1, 0] = 1.0
        H[-1, 1:] = z[self.k * self.cols:]
        return H

    def free(self, H):
        return np.concatenate([H[:-1].reshape(-1, order="F"), H[-1, 1:]])


def subproblem_objective(problem: LiftedProblem, vars: LiftedVariables, lam: float,
                         linear_term=None) -> float:
    """``||residual||^2 + lam ||H||_* - <linear_term, H>``."""
    total, ls, pen = objective_dc(problem, vars, 0.0)
    H = assemble_H(vars)
    val = ls + lam * float(np.sum(np.linalg.svd(H, compute_uv=False)))
    if linear_term is not None:
        val -= float(np.sum(linear_term * H))
    return val


class _Subproblem:
    # Cached factorizations shared by every convex solve on one lifted problem.
    def __init__(self, problem: LiftedProblem):
        self.layout = _Layout(problem.n, problem.q)
        G, b = problem.design()
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(b))):
            raise NumericalFailure("lifted problem has non-finite coefficients", iteration=0)
        self.G, self.b = G, b
        self.GtG = G.T @ G
        self.Gtb = G.T @ b
        self.eigval, self.eigvec = np.linalg.eigh(self.GtG)
        self.eigval = np.maximum(self.eigval, 0.0)
        self.lipschitz = 2.0 * float(self.eigval[-1])

    def objective(self, z, lam, c, L_pin):
        r = self.G @ z - self.b
        H = self.layout.to_H(z)
        nuc = float(np.sum(np.linalg.svd(H, compute_uv=False))) if lam else 0.0
        return float(r @ r) + lam * nuc - float(c @ z) - L_pin

    def grad(self, z, c):
        return 2.0 * (self.GtG @ z - self.Gtb) - c

    def solve_shifted(self, rhs, rho):
        V = self.eigvec
        return V @ ((V.T @ rhs) / (2.0 * self.eigval + rho))


def _check_finite(x, it):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite iterate at inner iteration {it}", iteration=it)


def _admm(sp: _Subproblem, z0, lam, c, cfg: SolverConfig):
    """Over-relaxed ADMM on ``f(z) + lam ||W||_*`` subject to ``W = H(z)``.

    The pinned entry lives in ``H(z)`` only, so the ``W``-update is a plain
    singular-value threshold. The penalty is fixed at ``rho = lam``, which
    measured faster than residual balancing on the bundled examples. Returns
    ``z`` and the thresholded ``W``.
    """
    lay = sp.layout
    z = z0.copy()
    W = lay.to_H(z)
    rho = max(lam, 1e-12)
    # dual warm start from the optimality conditions at z0
    Y = lay.to_H(-sp.grad(z, c) / rho)
    U0, _, Vt0 = np.linalg.svd(W, full_matrices=False)
    Y[-1, 0] = (lam / rho) * (U0[-1] @ Vt0[:, 0])
    rhs0 = 2.0 * sp.Gtb + c
    floor = lam * np.sqrt(W.size)
    for it in range(1, cfg.inner_max_iters + 1):
        z = sp.solve_shifted(rhs0 + rho * lay.free(W - Y), rho)
        Hz = lay.to_H(z)
        Hr = _ADMM_RELAX * Hz + (1.0 - _ADMM_RELAX) * W
        W_old = W
        W = svt(Hr + Y, lam / rho)
        Y += Hr - W
        _check_finite(Y, it)
        r_pri = np.linalg.norm(Hz - W)
        r_dual = rho * np.linalg.norm(W - W_old)
        scale = max(np.linalg.norm(Hz), np.linalg.norm(W), 1.0)
        if r_pri <= cfg.inner_tol * scale and r_dual <= cfg.inner_tol * max(rho * np.linalg.norm(Y), floor):
            break
    return z, W


def _apg(sp: _Subproblem, z0, lam, c, L_pin, cfg: SolverConfig):
    """FISTA with singular-value thresholding and re-pinning.

    Momentum restarts when the objective rises or the step opposes the
    extrapolation. Stops once the relative objective change over the last
    ``_APG_WINDOW`` iterations falls below ``inner_tol``.
    """
    lay = sp.layout
    step = 1.0 / max(sp.lipschitz, 1e-300)
    x = z0.copy()
    y = x.copy()
    t = 1.0
    f_x = sp.objective(x, lam, c, L_pin)
    history = [f_x]
    for it in range(1, cfg.inner_max_iters + 1):
        P = svt(lay.to_H(y - step * sp.grad(y, c)), lam * step)
        P[-1, 0] = 1.0
        x_new = lay.free(P)
        _check_finite(x_new, it)
        f_new = sp.objective(x_new, lam, c, L_pin)
        if f_new > f_x:
            # restart from the last accepted point
            y, t = x.copy(), 1.0
        else:
            if (y - x_new) @ (x_new - x) > 0:
                t = 1.0
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            x, f_x, t = x_new, f_new, t_new
        history.append(f_x)
        if it >= _APG_WINDOW:
            old = history[-_APG_WINDOW - 1]
            if old - f_x <= cfg.inner_tol * max(abs(f_x), 1e-12):
                break
    return x, it


def _dc_value(sp: _Subproblem, z, lam) -> float:
    r = sp.G @ z - sp.b
    sv = np.linalg.svd(sp.layout.to_H(z), compute_uv=False)
    return float(r @ r) + lam * float(np.sum(sv[1:]))


def _retract(sp: _Subproblem, z):
    # nearest rank-one H with the pinned entry restored, or None if degenerate
    H = sp.layout.to_H(z)
    U, s, Vt = np.linalg.svd(H, full_matrices=False)
    u, v = U[:, 0], Vt[0]
    if abs(u[-1] * v[0]) < 1e-8:
        return None
    R = np.outer(u / u[-1], v / v[0])
    return sp.layout.free(R)


def solve_convex_subproblem(problem: LiftedProblem, lam: float, linear_term=None,
                            warm_start: Optional[LiftedVariables] = None,
                            cfg: Optional[SolverConfig] = None, _cache=None) -> LiftedVariables:
    """Minimize ``||residual||^2 + lam ||H||_* - <linear_term, H>``.

    The bottom-left entry of ``H`` is fixed at one throughout. The returned
    point never has a larger objective than ``warm_start``.

    Parameters
    ----------
    problem : LiftedProblem
    lam : float
    linear_term : ndarray of shape ``(n^2 + 1, q + 1)``, optional
        Linearization of the concave part; ``None`` gives the plain
        nuclear-norm regularized problem.
    warm_start : LiftedVariables, optional
        Defaults to all free entries zero.
    cfg : SolverConfig, optional

    Raises
    ------
    NumericalFailure
        If an iterate becomes non-finite.
    """
    cfg = cfg or SolverConfig()
    sp = _cache if _cache is not None else _Subproblem(problem)
    lay = sp.layout
    if linear_term is None:
        c, L_pin = np.zeros(sp.G.shape[1]), 0.0
    else:
        linear_term = np.asarray(linear_term, dtype=float)
        c, L_pin = lay.free(linear_term), float(linear_term[-1, 0])
    z0 = (warm_start.to_vector() if warm_start is not None
          else np.zeros(sp.G.shape[1]))
    candidates = []

    if lam == 0.0:
        # with a linear term this is unbounded unless c lies in range(G^T);
        # the least-squares point is returned either way
        z = np.linalg.lstsq(sp.G, sp.b, rcond=None)[0]
    elif cfg.inner_method == "admm":
        z, W = _admm(sp, z0, lam, c, cfg)
        # the thresholded side is exactly low rank; re-pin it
        candidates.append(lay.free(W))
    else:
        z, _ = _apg(sp, z0, lam, c, L_pin, cfg)
    _check_finite(z, cfg.inner_max_iters)
    candidates.append(z)
    r = _retract(sp, z)
    if r is not None:
        candidates.append(r)
    if warm_start is not None:
        candidates.append(z0)
    values = [sp.objective(x, lam, c, L_pin) for x in candidates]
    z = candidates[int(np.argmin(values))]
    return LiftedVariables.from_vector(z, problem.n, problem.q)


# --------------------------------------------------------------------------
# outer methods

def _cond(T) -> float:
    with np.errstate(all="ignore"):
        c = float(np.linalg.cond(T))
    return c if np.isfinite(c) else np.inf


def _rel_change(new, old) -> float:
    denom = np.linalg.norm(old)
    diff = np.linalg.norm(new - old)
    if denom == 0.0:
        return 0.0 if diff == 0.0 else np.inf
    return float(diff / denom)


def _boost(sp: _Subproblem, x, y, lam, t0, t_max=1024.0):
    """Extrapolate from the convex step ``y`` along ``y - x``.

    Each trial point is also retracted to the nearest pinned rank-one ``H``
    and the better of the two is kept. Returns the accepted point and step;
    ``t = 0`` keeps ``y``. Only strict decreases of the objective are
    accepted, so monotonicity is preserved.
    """
    d = y - x
    f_y = _dc_value(sp, y, lam)
    if not np.any(d):
        return y, 0.0

    def trial(t):
        cand = y + t * d
        f = _dc_value(sp, cand, lam)
        r = _retract(sp, cand)
        if r is not None:
            fr = _dc_value(sp, r, lam)
            if fr < f:
                return r, fr
        return cand, f

    t = t0
    z_t, f_t = trial(t)
    if f_t < f_y:
        while 2.0 * t <= t_max:
            z2, f2 = trial(2.0 * t)
            if not f2 < f_t:
                break
            t, z_t, f_t = 2.0 * t, z2, f2
        return z_t, t
    while t > 0.125:
        t *= 0.5
        z_t, f_t = trial(t)
        if f_t < f_y:
            return z_t, t
    return y, 0.0


class _Anderson:
    """Type-II Anderson mixing for the fixed-point map ``x -> g(x)``."""

    def __init__(self, depth: int):
        self.depth = depth
        self.xs, self.gs = [], []

    def reset(self):
        # restart from the most recent pair only
        self.xs, self.gs = self.xs[-1:], self.gs[-1:]

    def propose(self, x, gx):
        self.xs.append(x)
        self.gs.append(gx)
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.gs.pop(0)
        if len(self.xs) < 2:
            return None
        F = np.array([g - x for x, g in zip(self.xs, self.gs)]).T
        Gm = np.array(self.gs).T
        dF, dG = np.diff(F, axis=1), np.diff(Gm, axis=1)
        gamma = np.linalg.lstsq(dF, F[:, -1], rcond=None)[0]
        return Gm[:, -1] - dG @ gamma


def nun_solve(problem: LiftedProblem, cfg: Optional[SolverConfig] = None,
              _cache=None) -> Tuple[np.ndarray, np.ndarray, LiftedVariables]:
    """Nuclear-norm regularized initialization.

    Returns
    -------
    theta0 : ndarray
    T0 : ndarray
    vars0 : LiftedVariables
        The raw (not rank-one projected) minimizer.
    """
    cfg = cfg or SolverConfig()
    vars0 = solve_convex_subproblem(problem, cfg.lam, None, None, cfg, _cache=_cache)
    ext = extract(assemble_H(vars0))
    return ext.theta, ext.T, vars0


def dcp_solve(problem: LiftedProblem, init: LiftedVariables,
              cfg: Optional[SolverConfig] = None, _cache=None):
    """Sequential convex programming for the rank-penalized problem.

    Each outer step linearizes ``||H||_2`` at the current iterate through its
    leading singular pair and re-solves the convex surrogate warm-started at
    the iterate; the surrogate majorizes the objective, so the objective is
    non-increasing. After stopping, the final extraction is cleaned up as set
    by ``cfg.polish``.

    Returns
    -------
    theta : ndarray
    T : ndarray
    trace : SolveTrace
    """
    cfg = cfg or SolverConfig()
    sp = _cache if _cache is not None else _Subproblem(problem)
    trace = SolveTrace("dcp")
    vars_k = init
    try:
        theta_prev = extract(assemble_H(init)).theta
    except DegenerateExtractionError:
        theta_prev = init.theta
    last_ok = None
    t_boost = 1.0
    anderson = _Anderson(cfg.anderson_depth)
    for k in range(1, cfg.max_iters + 1):
        H = assemble_H(vars_k)
        U, s, Vt = np.linalg.svd(H, full_matrices=False)
        if s.size > 1 and s[0] - s[1] < 1e-10 * s[0]:
            logger.debug("tied leading singular value at outer iteration %d", k)
        linear = cfg.lam * np.outer(U[:, 0], Vt[0])
        x = vars_k.to_vector()
        vars_k = solve_convex_subproblem(problem, cfg.lam, linear, vars_k, cfg, _cache=sp)
        y = vars_k.to_vector()
        if cfg.acceleration == "linesearch":
            z, t_acc = _boost(sp, x, y, cfg.lam, t_boost)
            t_boost = max(t_acc, 1.0)
            vars_k = LiftedVariables.from_vector(z, problem.n, problem.q)
        elif cfg.acceleration == "anderson":
            cand = anderson.propose(x, y)
            if cand is not None:
                r = _retract(sp, cand)
                cand = cand if r is None else r
                if np.all(np.isfinite(cand)) and _dc_value(sp, cand, cfg.lam) < _dc_value(sp, y, cfg.lam):
                    vars_k = LiftedVariables.from_vector(cand, problem.n, problem.q)
                else:
                    anderson.reset()
        total, ls, pen = objective_dc(problem, vars_k, cfg.lam)
        try:
            ext = extract(assemble_H(vars_k))
            theta_k, cond_T, ratio = ext.theta, _cond(ext.T), ext.sigma2_ratio
            last_ok = ext
        except DegenerateExtractionError:
            logger.debug("degenerate extraction at outer iteration %d", k)
            theta_k, cond_T, ratio = vars_k.theta, np.inf, np.nan
            last_ok = None
        rel = _rel_change(theta_k, theta_prev)
        trace.records.append(IterationRecord(k, theta_k.copy(), total, ls, pen, rel, cond_T, ratio))
        theta_prev = theta_k
        if rel <= cfg.rel_tol:
            trace.status = "converged"
            break
    if last_ok is None:
        trace.status = "degenerate"
        return vars_k.theta.copy(), np.full((problem.n, problem.n), np.nan), trace
    theta, T = last_ok.theta, last_ok.T
    if cfg.polish != "none":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConditioningWarning)
            T = solve_T(problem, theta)
    if cfg.polish == "joint":
        theta, T = gauss_newton_polish(problem, theta, T)
    return theta, T, trace


def _bilinear_residual(problem: LiftedProblem, theta, tau):
    return problem.M(theta) @ tau - problem.N(theta)


def gauss_newton_polish(problem: LiftedProblem, theta, T, max_steps: int = 10,
                        max_move: float = 1e-3):
    """Safeguarded Gauss-Newton on ``||M(theta) vec(T) - N(theta)||^2``.

    Steps are accepted only while the objective strictly decreases and the
    accumulated change of ``theta`` stays below ``max_move`` relative.
    """
    theta0 = np.asarray(theta, dtype=float)
    theta, tau = theta0.copy(), vec(T)
    r = _bilinear_residual(problem, theta, tau)
    f = float(r @ r)
    scale = max(np.linalg.norm(theta0), 1e-300)
    for _ in range(max_steps):
        J = np.hstack([
            problem.M(theta),
            np.column_stack([problem.M_coeffs[i + 1] @ tau - problem.N_coeffs[i + 1]
                             for i in range(problem.q)]),
        ])
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        tau_new = tau + step[:tau.size]
        theta_new = theta + step[tau.size:]
        if np.linalg.norm(theta_new - theta0) > max_move * scale:
            break
        r_new = _bilinear_residual(problem, theta_new, tau_new)
        f_new = float(r_new @ r_new)
        if not f_new < f:
            break
        theta, tau, r, f = theta_new, tau_new, r_new, f_new
    return theta, tau.reshape(problem.n, problem.n, order="F")


def _theta_step(structure: ParametrizedStructure, problem: LiftedProblem, tau):
    # residual(theta) = (M_0 tau - N_0) + sum theta_i (M_i tau - N_i)
    r0 = problem.M_coeffs[0] @ tau - problem.N_coeffs[0]
    J = np.column_stack([
        problem.M_coeffs[i + 1] @ tau - problem.N_coeffs[i + 1] for i in range(problem.q)
    ])
    theta, _, rank, _ = np.linalg.lstsq(J, -r0, rcond=None)
    if rank < problem.q:
        warnings.warn(
            f"theta-step is rank deficient ({rank} < {problem.q}); minimum-norm step",
            ConditioningWarning, stacklevel=3,
        )
    return theta


def ami_solve(structure: ParametrizedStructure, ss_hat: StateSpace, theta0, T0,
              cfg: Optional[SolverConfig] = None, problem: Optional[LiftedProblem] = None):
    """Alternating minimization of ``h(theta, T)``.

    Each iteration solves the linear least squares in ``theta`` at fixed ``T``
    and then in ``vec(T)`` at fixed ``theta``; ``h`` is therefore
    non-increasing. The stopping rule and cap are those of ``cfg``.
    """
    cfg = cfg or SolverConfig()
    problem = problem if problem is not None else build_lifted(structure, ss_hat)
    trace = SolveTrace("ami")
    theta = np.asarray(theta0, dtype=float).copy()
    tau = vec(T0)
    for k in range(1, cfg.max_iters + 1):
        theta_new = _theta_step(structure, problem, tau)
        Mt = problem.M(theta_new)
        tau, _, rank, _ = np.linalg.lstsq(Mt, problem.N(theta_new), rcond=None)
        if rank < Mt.shape[1]:
            warnings.warn("T-step is rank deficient; minimum-norm step",
                          ConditioningWarning, stacklevel=2)
        _check_finite(tau, k)
        T = tau.reshape(problem.n, problem.n, order="F")
        h = objective_h(structure, ss_hat, theta_new, T)
        rel = _rel_change(theta_new, theta)
        trace.records.append(IterationRecord(k, theta_new.copy(), h, h, 0.0, rel, _cond(T), 0.0))
        theta = theta_new
        if rel <= cfg.rel_tol:
            trace.status = "converged"
            break
    T = tau.reshape(problem.n, problem.n, order="F")
    if _cond(T) > COND_WARN:
        warnings.warn(f"AMI similarity estimate has condition number {_cond(T):.3g}",
                      ConditioningWarning, stacklevel=2)
    return theta, T, trace
