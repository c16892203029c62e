"""Rank-one lifting of the similarity equations.

With ``tau = vec(T)`` (column-major) the relations

    T A_hat = A(theta) T,   T B_hat = B(theta),   C_hat = C(theta) T

become ``M(theta) tau = N(theta)``, bilinear in ``(tau, theta)``. Replacing
``tau * theta_i`` by free vectors ``vartheta_i`` makes the system linear, and
the lost coupling is exactly the rank-one condition on

    H = [[tau, vartheta_1, ..., vartheta_q],
         [1,   theta_1,    ..., theta_q   ]].
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np

from .exceptions import ConditioningWarning, DegenerateExtractionError, StructureError
from .ssmodel import ParametrizedStructure, StateSpace, evaluate

__all__ = [
    "LiftedProblem",
    "LiftedVariables",
    "Extraction",
    "vec",
    "unvec",
    "build_lifted",
    "residual",
    "assemble_H",
    "extract",
    "objective_h",
    "objective_dc",
    "kyfan_penalty",
    "solve_T",
    "CLEAN_SIGMA2_RATIO",
    "COND_WARN",
]

CLEAN_SIGMA2_RATIO = 1e-6
COND_WARN = 1e6
_DEGENERATE_PIN = 1e-8
_TIE_TOL = 1e-10


def vec(X) -> np.ndarray:
    return np.asarray(X, dtype=float).reshape(-1, order="F")


def unvec(x, rows: int, cols: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(rows, cols, order="F")


@dataclass(frozen=True)
class LiftedProblem:
    """Coefficients of ``M(theta) = M_0 + sum theta_i M_i`` and ``N(theta)``.

    ``M_coeffs[i]`` has shape ``(n^2 + m n + p n, n^2)``; ``N_coeffs[i]`` is a
    vector of matching height.
    """

    M_coeffs: Tuple[np.ndarray, ...]
    N_coeffs: Tuple[np.ndarray, ...]
    dims: Tuple[int, int, int, int]

    @property
    def n(self) -> int:
        return self.dims[0]

    @property
    def q(self) -> int:
        return self.dims[3]

    def M(self, theta) -> np.ndarray:
        out = self.M_coeffs[0].copy()
        for t, Mi in zip(theta, self.M_coeffs[1:]):
            out += t * Mi
        return out

    def N(self, theta) -> np.ndarray:
        out = self.N_coeffs[0].copy()
        for t, Ni in zip(theta, self.N_coeffs[1:]):
            out += t * Ni
        return out

    def design(self) -> Tuple[np.ndarray, np.ndarray]:
        """Linear map ``G`` and offset ``b`` with ``residual = G z - b``.

        ``z = [tau; vartheta_1; ...; vartheta_q; theta]`` is the column-major
        vectorization of the free entries of ``H``.
        """
        G = np.hstack(list(self.M_coeffs) + [-np.column_stack(self.N_coeffs[1:])])
        return G, self.N_coeffs[0]


@dataclass(frozen=True)
class LiftedVariables:
    """The triple ``(tau, vartheta, theta)``; ``vartheta`` is ``(n^2, q)``."""

    tau: np.ndarray
    vartheta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float).ravel()
        theta = np.asarray(self.theta, dtype=float).ravel()
        vt = np.asarray(self.vartheta, dtype=float).reshape(tau.size, theta.size)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "vartheta", vt)

    @classmethod
    def from_rank_one(cls, tau, theta) -> "LiftedVariables":
        tau = np.asarray(tau, dtype=float).ravel()
        theta = np.asarray(theta, dtype=float).ravel()
        return cls(tau, np.outer(tau, theta), theta)

    @classmethod
    def zeros(cls, n: int, q: int) -> "LiftedVariables":
        return cls(np.zeros(n * n), np.zeros((n * n, q)), np.zeros(q))

    @classmethod
    def from_H(cls, H) -> "LiftedVariables":
        H = np.asarray(H, dtype=float)
        return cls(H[:-1, 0], H[:-1, 1:], H[-1, 1:])

    @classmethod
    def from_vector(cls, z, n: int, q: int) -> "LiftedVariables":
        k = n * n
        top = z[:k * (q + 1)].reshape(k, q + 1, order="F")
        return cls(top[:, 0], top[:, 1:], z[k * (q + 1):])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.tau, vec(self.vartheta), self.theta])

    @property
    def H(self) -> np.ndarray:
        return assemble_H(self)


def build_lifted(structure: ParametrizedStructure, ss_hat: StateSpace) -> LiftedProblem:
    """Vectorize the similarity equations for a black-box estimate ``ss_hat``."""
    n, m, p, q = structure.n, structure.m, structure.p, structure.q
    if (ss_hat.n, ss_hat.m, ss_hat.p) != (n, m, p):
        raise StructureError(
            f"estimate has (n, m, p) = {(ss_hat.n, ss_hat.m, ss_hat.p)}, "
            f"structure expects {(n, m, p)}"
        )
    I = np.eye(n)
    M0 = np.vstack([
        np.kron(ss_hat.A.T, I) - np.kron(I, structure.A_coeffs[0]),
        np.kron(ss_hat.B.T, I),
        np.kron(I, structure.C_coeffs[0]),
    ])
    N0 = np.concatenate([np.zeros(n * n), vec(structure.B_coeffs[0]), vec(ss_hat.C)])
    Ms, Ns = [M0], [N0]
    for Ai, Bi, Ci in zip(structure.A_coeffs[1:], structure.B_coeffs[1:], structure.C_coeffs[1:]):
        Ms.append(np.vstack([-np.kron(I, Ai), np.zeros((m * n, n * n)), np.kron(I, Ci)]))
        Ns.append(np.concatenate([np.zeros(n * n), vec(Bi), np.zeros(p * n)]))
    for a in Ms + Ns:
        a.setflags(write=False)
    return LiftedProblem(tuple(Ms), tuple(Ns), (n, m, p, q))


def residual(problem: LiftedProblem, vars: LiftedVariables) -> np.ndarray:
    """``M_0 tau + sum M_i vartheta_i - N_0 - sum N_i theta_i``."""
    r = problem.M_coeffs[0] @ vars.tau - problem.N_coeffs[0]
    for i in range(problem.q):
        r = r + problem.M_coeffs[i + 1] @ vars.vartheta[:, i]
        r = r - problem.N_coeffs[i + 1] * vars.theta[i]
    return r


def assemble_H(vars: LiftedVariables) -> np.ndarray:
    top = np.column_stack([vars.tau, vars.vartheta])
    bottom = np.concatenate([[1.0], vars.theta])
    return np.vstack([top, bottom])


class Extraction(NamedTuple):
    theta: np.ndarray
    T: np.ndarray
    sigma2_ratio: float


def extract(H) -> Extraction:
    """Recover ``(theta, T)`` from the best rank-one approximation of ``H``.

    The scale ambiguity of the singular pair is removed by normalizing the
    bottom-left entry of ``sigma_1 u_1 v_1^T`` to one, so the result does not
    depend on the sign convention of the SVD routine.

    Returns
    -------
    Extraction
        ``(theta, T, sigma2_ratio)``; ``sigma2_ratio = sigma_2 / sigma_1`` is
        zero for an exactly rank-one ``H``.

    Raises
    ------
    DegenerateExtractionError
        If the bottom-left entry of the rank-one factor is below ``1e-8 sigma_1``.
    """
    H = np.asarray(H, dtype=float)
    k = H.shape[0] - 1
    n = int(round(np.sqrt(k)))
    if n * n != k or H.shape[1] < 2:
        raise StructureError(f"H has shape {H.shape}; expected (n^2 + 1, q + 1)")
    U, s, Vt = np.linalg.svd(H, full_matrices=False)
    if s[0] == 0.0:
        raise DegenerateExtractionError("H is identically zero")
    if s.size > 1 and s[0] - s[1] < _TIE_TOL * s[0]:
        warnings.warn("leading singular value of H is tied", ConditioningWarning, stacklevel=2)
    u, v = U[:, 0], Vt[0]
    pin = s[0] * u[-1] * v[0]
    if abs(pin) < _DEGENERATE_PIN * s[0]:
        raise DegenerateExtractionError(
            f"rank-one factor has bottom-left entry {pin:.3g}; scale is unresolvable"
        )
    tau = u[:-1] / u[-1]
    theta = v[1:] / v[0]
    ratio = float(s[1] / s[0]) if s.size > 1 else 0.0
    return Extraction(theta, unvec(tau, n, n), ratio)


def objective_h(structure: ParametrizedStructure, ss_hat: StateSpace, theta, T) -> float:
    """Sum of squared Frobenius mismatches of the three similarity relations."""
    ss = evaluate(structure, theta)
    T = np.asarray(T, dtype=float)
    return float(
        np.sum((T @ ss_hat.A - ss.A @ T) ** 2)
        + np.sum((T @ ss_hat.B - ss.B) ** 2)
        + np.sum((ss_hat.C - ss.C @ T) ** 2)
    )


def kyfan_penalty(H) -> float:
    """Sum of all but the largest singular value (nuclear minus spectral norm)."""
    s = np.linalg.svd(H, compute_uv=False)
    return float(np.sum(s[1:]))


def objective_dc(problem: LiftedProblem, vars: LiftedVariables, lam: float):
    """Least-squares residual plus ``lam`` times the Ky Fan rank penalty.

    Returns
    -------
    tuple of float
        ``(total, ls_part, kyfan_penalty)``.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    r = residual(problem, vars)
    ls = float(r @ r)
    pen = kyfan_penalty(assemble_H(vars))
    return ls + lam * pen, ls, pen


def solve_T(problem: LiftedProblem, theta) -> np.ndarray:
    """Least-squares ``T`` for fixed ``theta`` (minimizes ``||M(theta) tau - N(theta)||``)."""
    theta = np.asarray(theta, dtype=float)
    Mt = problem.M(theta)
    tau, _, rank, _ = np.linalg.lstsq(Mt, problem.N(theta), rcond=None)
    if rank < Mt.shape[1]:
        warnings.warn(
            f"M(theta) is rank deficient ({rank} < {Mt.shape[1]}); minimum-norm T",
            ConditioningWarning,
            stacklevel=2,
        )
    return unvec(tau, problem.n, problem.n)
