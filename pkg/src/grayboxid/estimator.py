"""Scikit-learn style wrapper around the identification pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError
from .harness import identify
from .solvers import SolverConfig
from .ssmodel import ParametrizedStructure, load_structure, simulate
from .subspace import SubspaceConfig

__all__ = ["GrayBoxIdentifier"]


class GrayBoxIdentifier(RegressorMixin, BaseEstimator):
    """Estimate the physical parameters of a gray-box model from I/O data.

    ``fit`` takes samples along rows, as scikit-learn does: ``U`` is
    ``(N, m)`` and ``Y`` is ``(N, p)``.

    Parameters
    ----------
    structure : str, dict or ParametrizedStructure
        Fixture name, YAML path, mapping, or structure object.
    method : {"dcp", "ami", "nun"}
    lam : float
        Rank-penalty weight.
    max_iters, tol
        Outer iteration cap and relative-change stopping threshold.
    block_rows : int, optional
        MOESP block rows.
    basis : {"given", "canonical"}
        Basis of the black-box realization handed to the lifted problem.

    Attributes
    ----------
    theta_ : ndarray of shape (q,)
    T_ : ndarray of shape (n, n)
        Similarity between the MOESP realization and the structured model.
    system_ : StateSpace
        The structured model at ``theta_``.
    init_theta_ : ndarray
        The nuclear-norm initialization.
    trace_ : SolveTrace or None
    status_ : str
    n_iter_ : int
    cond_T_, sigma2_ratio_ : float
    """

    def __init__(self, structure="example1", method="dcp", lam=1e-3, max_iters=100,
                 tol=1e-6, block_rows=None, basis="given"):
        self.structure = structure
        self.method = method
        self.lam = lam
        self.max_iters = max_iters
        self.tol = tol
        self.block_rows = block_rows
        self.basis = basis

    def _structure(self) -> ParametrizedStructure:
        if isinstance(self.structure, ParametrizedStructure):
            return self.structure
        return load_structure(self.structure)

    def fit(self, U, Y):
        U, Y = check_X_y(U, Y, multi_output=True, y_numeric=True)
        Y = Y.reshape(len(Y), -1)
        structure = self._structure()
        if U.shape[1] != structure.m or Y.shape[1] != structure.p:
            raise ConfigError(
                f"data has m={U.shape[1]}, p={Y.shape[1]}; structure expects "
                f"m={structure.m}, p={structure.p}"
            )
        if self.method not in ("nun", "dcp", "ami"):
            raise ConfigError(f"unknown method {self.method!r}")
        solver = SolverConfig(lam=self.lam, max_iters=self.max_iters, rel_tol=self.tol)
        ident = identify(structure, (U.T, Y.T), (self.method,), solver,
                         SubspaceConfig(n=structure.n, s=self.block_rows), self.basis)
        res = ident[self.method]
        self.structure_ = structure
        self.theta_ = res.theta
        self.T_ = res.T
        self.init_theta_ = ident["nun"].theta
        self.trace_ = res.trace
        self.status_ = res.status
        self.n_iter_ = res.iterations
        self.cond_T_ = res.cond_T
        self.sigma2_ratio_ = res.sigma2_ratio
        self.warnings_ = ident.warnings
        self.system_ = structure.evaluate(res.theta) if res.usable else None
        self.n_features_in_ = U.shape[1]
        return self

    def predict(self, U):
        """Noise-free output from a zero initial state, shape ``(N, p)``."""
        check_is_fitted(self, "theta_")
        if self.system_ is None:
            raise ConfigError(f"fit ended with status {self.status_!r}; no model to simulate")
        U = check_array(U, ensure_2d=False)
        U = U.reshape(len(U), -1)
        Y = simulate(self.system_, U.T).Y_clean.T
        return Y[:, 0] if Y.shape[1] == 1 else Y
