"""Ordinary MOESP subspace identification (no feedthrough).

Produces a black-box realization ``(A, B, C)`` that is correct up to an
unknown similarity transform, the front end of the gray-box pipeline.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .exceptions import ExcitationError, OrderSelectionWarning, StructureError
from .ssmodel import SimData, StateSpace, spectral_radius

__all__ = [
    "SubspaceConfig",
    "MoespResult",
    "block_hankel",
    "moesp",
    "default_block_rows",
    "canonical_realization",
]


def default_block_rows(n: int) -> int:
    return max(10, 2 * n + 2)


@dataclass(frozen=True)
class SubspaceConfig:
    """MOESP settings.

    Parameters
    ----------
    n : int
        Model order, assumed known.
    s : int, optional
        Block rows of the Hankel matrices; ``max(10, 2n + 2)`` by default.
    gap_threshold : float
        Warn when ``sigma_n / sigma_{n+1}`` of the projected output falls below
        this ratio.
    excitation_tol : float
        Relative singular-value floor for the input Hankel matrix.
    """

    n: int
    s: Optional[int] = None
    gap_threshold: float = 1.5
    excitation_tol: float = 1e-10

    def __post_init__(self):
        if self.n < 1:
            raise StructureError("model order must be positive")
        if self.s is None:
            object.__setattr__(self, "s", default_block_rows(self.n))
        if self.s <= self.n:
            raise StructureError(f"block rows s={self.s} must exceed order n={self.n}")


@dataclass(frozen=True)
class MoespResult:
    system: StateSpace
    singular_values: np.ndarray
    gap_ratio: float
    x0: np.ndarray


def block_hankel(data: np.ndarray, rows: int, cols: Optional[int] = None) -> np.ndarray:
    """Block Hankel matrix with ``rows`` block rows from ``data`` of shape ``(l, N)``."""
    data = np.atleast_2d(data)
    l, N = data.shape
    cols = N - rows + 1 if cols is None else cols
    if cols < 1:
        raise StructureError(f"{N} samples too few for {rows} block rows")
    H = np.empty((l * rows, cols))
    for i in range(rows):
        H[i * l:(i + 1) * l] = data[:, i:i + cols]
    return H


def _canonical_signs(U):
    # make the largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _estimate_b_x0(A, C, U, Y):
    """Least squares for ``(x0, B)`` in ``y(k) = C A^k x0 + sum C A^(k-1-j) B u(j)``."""
    n, p = A.shape[0], C.shape[0]
    m, N = U.shape
    # regressors: C A^k for x0, and C S_c(k) for column c of B where
    # S_c(k+1) = A S_c(k) + u_c(k) I
    Phi = np.zeros((N, p, n + n * m))
    Ak = np.eye(n)
    S = np.zeros((m, n, n))
    for k in range(N):
        Phi[k, :, :n] = C @ Ak
        Phi[k, :, n:] = np.concatenate([C @ S[c] for c in range(m)], axis=1)
        Ak = A @ Ak
        S = A @ S + U[:, k][:, None, None] * np.eye(n)
    Phi = Phi.reshape(N * p, n + n * m)
    sol, *_ = np.linalg.lstsq(Phi, Y.T.reshape(-1), rcond=None)
    x0 = sol[:n]
    B = sol[n:].reshape(m, n).T
    return B, x0


def moesp(sim, cfg: SubspaceConfig) -> MoespResult:
    """Identify ``(A, B, C)`` of order ``cfg.n`` with ordinary MOESP.

    Parameters
    ----------
    sim : SimData or tuple of (U, Y)
        Channels along rows.
    cfg : SubspaceConfig

    Returns
    -------
    MoespResult
        ``system`` holds the realization; ``singular_values`` the spectrum of
        the projected output block used for order diagnostics.

    Raises
    ------
    ExcitationError
        If the input block Hankel matrix is rank deficient.
    """
    if isinstance(sim, SimData):
        U, Y = sim.U, sim.Y
    else:
        U, Y = (np.atleast_2d(np.asarray(a, dtype=float)) for a in sim)
    m, N = U.shape
    p = Y.shape[0]
    s, n = cfg.s, cfg.n
    if Y.shape[1] != N:
        raise StructureError("U and Y must share the sample count")
    cols = N - s + 1
    if cols < s * (m + p):
        raise StructureError(
            f"N={N} samples give {cols} Hankel columns; need at least {s * (m + p)}"
        )

    Uh = block_hankel(U, s)
    Yh = block_hankel(Y, s)
    su = np.linalg.svd(Uh, compute_uv=False)
    if su[0] == 0.0 or su[-1] < cfg.excitation_tol * su[0]:
        raise ExcitationError(
            f"input is not persistently exciting of order {s} "
            f"(sigma_min/sigma_max = {su[-1] / su[0] if su[0] else 0.0:.3g})"
        )

    # LQ factorization of [U; Y] via QR of the transpose
    R = scipy.linalg.qr(np.vstack([Uh, Yh]).T, mode="r")[0]
    L22 = R[s * m:s * (m + p), s * m:s * (m + p)].T
    Us, sv, _ = np.linalg.svd(L22)
    gap = sv[n - 1] / sv[n] if n < sv.size and sv[n] > 0 else np.inf
    if gap < cfg.gap_threshold:
        warnings.warn(
            f"weak singular-value gap at order {n}: ratio {gap:.3g}",
            OrderSelectionWarning,
            stacklevel=2,
        )
    # extended observability matrix, balanced scaling
    Gamma = _canonical_signs(Us[:, :n]) * np.sqrt(sv[:n])
    C = Gamma[:p]
    A = np.linalg.lstsq(Gamma[:-p], Gamma[p:], rcond=None)[0]
    B, x0 = _estimate_b_x0(A, C, U, Y)
    return MoespResult(StateSpace(A, B, C), sv, float(gap), x0)


def canonical_realization(ss: StateSpace, s: Optional[int] = None,
                          n_cols: Optional[int] = None) -> StateSpace:
    """Express ``ss`` in the coordinates MOESP converges to.

    For unit-variance white input, the projected output block of ordinary
    MOESP tends to ``sqrt(n_cols) * Gamma_s Wc^(1/2)`` (``Gamma_s`` the
    extended observability matrix, ``Wc`` the controllability Gramian), so
    the estimate ``Gamma = U_n sqrt(S_n)`` lands in a basis fixed by the
    system alone, up to column signs. Mapping an arbitrary realization there
    removes the dependence of the lifted problem on the original basis.

    ``n_cols`` defaults to the Hankel column count of a 400-sample record.
    Requires a stable, minimal ``ss``.
    """
    n = ss.n
    s = default_block_rows(n) if s is None else s
    n_cols = 400 - s + 1 if n_cols is None else n_cols
    if spectral_radius(ss.A) >= 1.0:
        raise StructureError("canonical basis needs a stable realization")
    Wc = scipy.linalg.solve_discrete_lyapunov(ss.A, ss.B @ ss.B.T)
    Wc = 0.5 * (Wc + Wc.T)
    evals, evecs = np.linalg.eigh(Wc)
    if evals[0] <= 0:
        raise StructureError("realization is not controllable")
    root = (evecs * np.sqrt(evals)) @ evecs.T
    blocks, CAk = [], ss.C
    for _ in range(s):
        blocks.append(CAk)
        CAk = CAk @ ss.A
    Gam = np.vstack(blocks)
    Us, sv, _ = np.linalg.svd(Gam @ root, full_matrices=False)
    target = _canonical_signs(Us[:, :n]) * np.sqrt(np.sqrt(n_cols) * sv[:n])
    # x = S x' with Gam S = target
    S = np.linalg.lstsq(Gam, target, rcond=None)[0]
    return ss.transform(S)
