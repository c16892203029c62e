"""Affinely parametrized discrete-time state-space models.

A gray-box structure is described by coefficient matrices

    A(theta) = A_0 + sum_i theta_i A_i,    (same for B and C)

and is simulated without feedthrough, with white measurement noise added
to the output at a prescribed per-channel SNR.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
import yaml

from .exceptions import (
    ConfigError,
    IdentifiabilityWarning,
    StabilityWarning,
    StructureError,
)

__all__ = [
    "ParametrizedStructure",
    "StateSpace",
    "SimData",
    "evaluate",
    "simulate",
    "add_noise",
    "fixtures",
    "get_fixture",
    "load_structure",
    "structure_to_dict",
    "spectral_radius",
]


def _frozen(a, ndim=2):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise StructureError(f"expected a {ndim}-D array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if np.size(A) else 0.0


@dataclass(frozen=True)
class StateSpace:
    """Concrete realization ``x+ = A x + B u``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A, B, C = _frozen(self.A), _frozen(self.B), _frozen(self.C)
        n = A.shape[0]
        if A.shape != (n, n):
            raise StructureError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise StructureError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise StructureError(f"C must have {n} columns, got {C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def markov_parameters(self, count: int) -> np.ndarray:
        """Return ``C A^k B`` for ``k = 0..count-1``, shape ``(count, p, m)``."""
        out = np.empty((count, self.p, self.m))
        AkB = self.B.copy()
        for k in range(count):
            out[k] = self.C @ AkB
            AkB = self.A @ AkB
        return out

    def transform(self, T) -> "StateSpace":
        """Similarity transform ``(T^-1 A T, T^-1 B, C T)``."""
        T = np.asarray(T, dtype=float)
        Tinv_A = np.linalg.solve(T, self.A)
        return StateSpace(Tinv_A @ T, np.linalg.solve(T, self.B), self.C @ T)


@dataclass(frozen=True)
class ParametrizedStructure:
    """Affine gray-box model family.

    Parameters
    ----------
    A_coeffs, B_coeffs, C_coeffs : sequence of array_like
        ``q + 1`` coefficient matrices each; index 0 is the constant term.
    name : str, optional
        Label used by fixtures and reports.
    theta_true : array_like, optional
        Reference parameter vector, if known.
    """

    A_coeffs: Sequence[np.ndarray]
    B_coeffs: Sequence[np.ndarray]
    C_coeffs: Sequence[np.ndarray]
    name: str = "custom"
    theta_true: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        A = tuple(_frozen(a) for a in self.A_coeffs)
        B = tuple(_frozen(b) for b in self.B_coeffs)
        C = tuple(_frozen(c) for c in self.C_coeffs)
        if not (len(A) == len(B) == len(C)):
            raise StructureError(
                f"coefficient lists differ in length: {len(A)}, {len(B)}, {len(C)}"
            )
        if len(A) < 2:
            raise StructureError("need at least one parameter (q >= 1)")
        n = A[0].shape[0]
        m = B[0].shape[1]
        p = C[0].shape[0]
        for name, mats, shape in (("A", A, (n, n)), ("B", B, (n, m)), ("C", C, (p, n))):
            for i, M in enumerate(mats):
                if M.shape != shape:
                    raise StructureError(
                        f"{name}_{i} has shape {M.shape}, expected {shape}"
                    )
        object.__setattr__(self, "A_coeffs", A)
        object.__setattr__(self, "B_coeffs", B)
        object.__setattr__(self, "C_coeffs", C)
        if self.theta_true is not None:
            theta = _frozen(self.theta_true, ndim=1)
            if theta.shape != (len(A) - 1,):
                raise StructureError(
                    f"theta_true has length {theta.size}, expected {len(A) - 1}"
                )
            object.__setattr__(self, "theta_true", theta)
        q = len(A) - 1
        if q >= n * (p + m):
            warnings.warn(
                f"q={q} parameters >= n(p+m)={n * (p + m)}: structure cannot be "
                "identifiable",
                IdentifiabilityWarning,
                stacklevel=3,
            )

    @property
    def n(self) -> int:
        return self.A_coeffs[0].shape[0]

    @property
    def m(self) -> int:
        return self.B_coeffs[0].shape[1]

    @property
    def p(self) -> int:
        return self.C_coeffs[0].shape[0]

    @property
    def q(self) -> int:
        return len(self.A_coeffs) - 1

    def evaluate(self, theta) -> StateSpace:
        return evaluate(self, theta)


def evaluate(structure: ParametrizedStructure, theta) -> StateSpace:
    """Evaluate the affine structure at ``theta``.

    Raises
    ------
    StructureError
        If ``theta`` does not have ``structure.q`` entries.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape != (structure.q,):
        raise StructureError(
            f"theta has length {theta.size}, structure expects {structure.q}"
        )

    def combine(coeffs):
        out = np.array(coeffs[0], dtype=float)
        for t, M in zip(theta, coeffs[1:]):
            out = out + t * M
        return out

    return StateSpace(
        combine(structure.A_coeffs),
        combine(structure.B_coeffs),
        combine(structure.C_coeffs),
    )


@dataclass(frozen=True)
class SimData:
    """Input/output record, channels along rows: ``U`` is ``(m, N)``."""

    U: np.ndarray
    Y: np.ndarray
    Y_clean: np.ndarray
    snr_db: Optional[float] = None

    def __post_init__(self):
        U, Y, Yc = _frozen(self.U), _frozen(self.Y), _frozen(self.Y_clean)
        if not (U.shape[1] == Y.shape[1] == Yc.shape[1]):
            raise StructureError("U, Y and Y_clean must share the sample count")
        if Y.shape != Yc.shape:
            raise StructureError("Y and Y_clean must have the same shape")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Y_clean", Yc)

    @property
    def n_samples(self) -> int:
        return self.U.shape[1]

    def trim(self, start: int) -> "SimData":
        """Drop the first ``start`` samples (transient burn-in)."""
        return replace(
            self, U=self.U[:, start:], Y=self.Y[:, start:], Y_clean=self.Y_clean[:, start:]
        )


def simulate(ss: StateSpace, U, x0=None) -> SimData:
    """Noise-free response of ``ss`` to the input sequence ``U`` (shape ``(m, N)``)."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[0] != ss.m:
        raise StructureError(f"U must have {ss.m} rows, got {U.shape}")
    N = U.shape[1]
    if N < 1:
        raise StructureError("need at least one sample")
    x = np.zeros(ss.n) if x0 is None else np.asarray(x0, dtype=float).ravel()
    if x.shape != (ss.n,):
        raise StructureError(f"x0 must have length {ss.n}")
    if spectral_radius(ss.A) >= 1.0:
        warnings.warn(
            f"spectral radius {spectral_radius(ss.A):.4g} >= 1", StabilityWarning,
            stacklevel=2,
        )
    A, B, C = ss.A, ss.B, ss.C
    X = np.empty((ss.n, N))
    for k in range(N):
        X[:, k] = x
        x = A @ x + B @ U[:, k]
    Y = C @ X
    return SimData(U=U, Y=Y, Y_clean=Y, snr_db=None)


def add_noise(sim: SimData, snr_db: Optional[float], rng_seed) -> SimData:
    """Add white Gaussian output noise at ``snr_db`` per output channel.

    The noise variance of channel ``j`` is ``var(Y_clean[j]) / 10**(snr_db/10)``.
    ``snr_db=None`` or ``+inf`` returns a noise-free copy. ``rng_seed`` may be an
    int, a ``SeedSequence`` or a ``Generator``.
    """
    if snr_db is None or np.isposinf(snr_db):
        return replace(sim, Y=sim.Y_clean, snr_db=None)
    var = np.var(sim.Y_clean, axis=1)
    if np.any(var <= 0.0):
        raise ValueError("zero-variance clean output channel: SNR is undefined")
    rng = np.random.default_rng(rng_seed)
    std = np.sqrt(var / 10.0 ** (snr_db / 10.0))
    W = rng.standard_normal(sim.Y_clean.shape) * std[:, None]
    return replace(sim, Y=sim.Y_clean + W, snr_db=float(snr_db))


# --------------------------------------------------------------------------
# fixtures

def _basis(n, rows, cols, entries):
    M = np.zeros((rows, cols))
    for (i, j), v in entries.items():
        M[i, j] = v
    return M


def _compartmental(third_row_param: int, C, name, theta_true):
    # rows/cols zero-based; third_row_param selects theta_2 (identifiable) or
    # theta_3 (unidentifiable) in entry (3, 2)
    A0 = np.zeros((3, 3))
    A1 = _basis(3, 3, 3, {(0, 0): -1.0, (1, 0): 1.0})
    A2 = _basis(3, 3, 3, {(1, 1): -1.0})
    A3 = _basis(3, 3, 3, {(0, 1): 1.0, (1, 1): -1.0})
    A4 = _basis(3, 3, 3, {(1, 2): 1.0, (2, 2): -1.0})
    [A2, A3][third_row_param - 2][2, 1] = 1.0
    B0 = np.array([[0.0], [0.0], [1.0]])
    C0 = np.asarray(C, dtype=float).reshape(1, 3)
    zB, zC = np.zeros((3, 1)), np.zeros((1, 3))
    return ParametrizedStructure(
        [A0, A1, A2, A3, A4], [B0, zB, zB, zB, zB], [C0, zC, zC, zC, zC],
        name=name, theta_true=theta_true,
    )


THETA_EXAMPLE1 = (-0.394, -0.893, 0.325, 0.383)
THETA_EXAMPLE2 = (-0.537, 0.567, -0.363, 0.156)


def _belt_drive():
    A0 = np.array([[0.0, -1.0, 0.15], [0.2, 0.0, 0.0], [0.0, 0.0, 0.0]])
    A = [A0] + [_basis(3, 3, 3, {(2, j): 1.0}) for j in range(3)] + [np.zeros((3, 3))]
    zB = np.zeros((3, 1))
    B = [zB, zB, zB, zB, np.array([[0.0], [0.0], [1.0]])]
    C0 = np.array([[0.0, 1.0, 0.0]])
    C = [C0] + [np.zeros((1, 3))] * 4
    return ParametrizedStructure(A, B, C, name="example2", theta_true=THETA_EXAMPLE2)


def fixtures() -> Dict[str, ParametrizedStructure]:
    """Bundled structures keyed by name.

    ``example1``
        Compartmental network, output at the last compartment.
    ``example2``
        Printer belt drive; third row of ``A`` and the input gain are free.
    ``unidentifiable``
        Compartmental variant with output at the first compartment. No true
        value is published for it; the ``example1`` vector is attached.
    """
    out = {
        "example1": _compartmental(2, [0, 0, 1], "example1", THETA_EXAMPLE1),
        "example2": _belt_drive(),
        "unidentifiable": _compartmental(3, [1, 0, 0], "unidentifiable", THETA_EXAMPLE1),
    }
    for s in out.values():
        rho = spectral_radius(evaluate(s, s.theta_true).A)
        if rho >= 1.0:  # pragma: no cover - guards fixture edits
            raise StructureError(f"fixture {s.name} is unstable (rho={rho})")
    return out


def get_fixture(name: str) -> ParametrizedStructure:
    table = fixtures()
    try:
        return table[name]
    except KeyError:
        raise ConfigError(
            f"unknown fixture {name!r}; choose from {sorted(table)}"
        ) from None


# --------------------------------------------------------------------------
# config files

def _key_lines(text):
    """Map top-level YAML keys to 1-based line numbers (best effort)."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def structure_from_dict(data: dict, lines: Optional[dict] = None) -> ParametrizedStructure:
    """Build a structure from the documented mapping schema.

    Keys: ``A``, ``B``, ``C`` (lists of ``q + 1`` nested arrays), optional
    ``name``, ``theta_true`` and ``n``/``m``/``p`` (checked when present).
    A mapping with only ``fixture: <name>`` loads a bundled structure.
    """
    lines = lines or {}

    def where(key):
        return f" (line {lines[key]})" if key in lines else ""

    if not isinstance(data, dict):
        raise ConfigError("structure config must be a mapping")
    if "fixture" in data:
        return get_fixture(str(data["fixture"]))
    for key in ("A", "B", "C"):
        if key not in data:
            raise ConfigError(f"structure config is missing key {key!r}")
        if not isinstance(data[key], list):
            raise ConfigError(f"{key!r}{where(key)} must be a list of matrices")
    try:
        s = ParametrizedStructure(
            [np.atleast_2d(np.asarray(a, dtype=float)) for a in data["A"]],
            [np.atleast_2d(np.asarray(b, dtype=float)) for b in data["B"]],
            [np.atleast_2d(np.asarray(c, dtype=float)) for c in data["C"]],
            name=str(data.get("name", "custom")),
            theta_true=data.get("theta_true"),
        )
    except (StructureError, ValueError, TypeError) as exc:
        key = next((k for k in ("A", "B", "C", "theta_true") if k in str(exc)), None)
        raise ConfigError(f"invalid structure{where(key) if key else ''}: {exc}") from exc
    for key in ("n", "m", "p"):
        if key in data and int(data[key]) != getattr(s, key):
            raise ConfigError(
                f"{key}={data[key]}{where(key)} disagrees with matrices ({getattr(s, key)})"
            )
    return s


def load_structure(source: Union[str, Path, dict]) -> ParametrizedStructure:
    """Load a structure from a fixture name, a YAML/JSON file or a mapping."""
    if isinstance(source, dict):
        return structure_from_dict(source)
    source = str(source)
    if source in fixtures():
        return get_fixture(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"structure file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"cannot parse {path}{loc}: {exc}") from exc
    if isinstance(data, dict) and "structure" in data:
        data = data["structure"]
        if isinstance(data, str):
            return load_structure(data)
    return structure_from_dict(data, _key_lines(text))


def structure_to_dict(s: ParametrizedStructure) -> dict:
    out = {
        "name": s.name,
        "n": s.n,
        "m": s.m,
        "p": s.p,
        "A": [a.tolist() for a in s.A_coeffs],
        "B": [b.tolist() for b in s.B_coeffs],
        "C": [c.tolist() for c in s.C_coeffs],
    }
    if s.theta_true is not None:
        out["theta_true"] = s.theta_true.tolist()
    return out
