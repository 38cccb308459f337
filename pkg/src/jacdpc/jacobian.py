"""Jacobians of the chain forward map and their rank diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numba import njit

from .stokes import DPCChain, _forward, _matmul3, _matvec3, _rodrigues, forward

__all__ = [
    "DEFAULT_RANK_TOL",
    "JacobianDiagnostics",
    "TaskProjection",
    "analytic_jacobian",
    "fd_jacobian",
    "diagnostics",
    "null_space_basis",
    "minor_null_vector",
    "project_task",
]

#: Relative singular-value cutoff: ``sigma_i > DEFAULT_RANK_TOL * sigma_max`` counts.
DEFAULT_RANK_TOL = 1e-9


@njit(cache=True)
def _jacobian_from_intermediates(axes, gains, phi, inter):
    m = axes.shape[0]
    J = np.empty((3, m))
    P = np.eye(3)  # M_m ... M_{i+1}
    for i in range(m - 1, -1, -1):
        r = axes[i]
        s = inter[i]
        rxs = np.array([r[1] * s[2] - r[2] * s[1], r[2] * s[0] - r[0] * s[2], r[0] * s[1] - r[1] * s[0]])
        col = _matvec3(P, rxs)
        for j in range(3):
            J[j, i] = gains[i] * col[j]
        P = _matmul3(P, _rodrigues(r, gains[i] * phi[i]))
    return J


@njit(cache=True)
def _analytic_jacobian(axes, gains, phi, s_in):
    inter = _forward(axes, gains, phi, s_in, np.empty((axes.shape[0], 3)))
    return _jacobian_from_intermediates(axes, gains, phi, inter), inter


def analytic_jacobian(chain: DPCChain, phi, s_in) -> np.ndarray:
    """Closed-form ``3 x m`` Jacobian ``d S_out / d phi``.

    Column ``i`` is ``g_i (M_m ... M_{i+1}) (r_i x S_i)`` where ``S_i`` is the
    SOP leaving stage ``i``. The partial products are accumulated in a single
    backward sweep over the forward-pass intermediates.
    """
    _, inter = forward(chain, phi, s_in)
    return _jacobian_from_intermediates(chain.axes, chain.gains, np.asarray(phi, dtype=float), inter)


def fd_jacobian(chain: DPCChain, phi, s_in, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian; used as an independent check."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    phi = chain.check_phi(phi)
    J = np.empty((3, chain.m))
    for i in range(chain.m):
        e = np.zeros(chain.m)
        e[i] = h
        plus, _ = forward(chain, phi + e, s_in)
        minus, _ = forward(chain, phi - e, s_in)
        J[:, i] = (plus - minus) / (2 * h)
    return J


@dataclass(frozen=True)
class JacobianDiagnostics:
    singular_values: np.ndarray
    numerical_rank: int
    manipulability: float


@njit(cache=True)
def _rank(s, rank_tol):
    if s.shape[0] == 0 or s[0] == 0.0:
        return 0
    cut = rank_tol * s[0]
    r = 0
    for v in s:
        if v > cut:
            r += 1
    return r


def diagnostics(J, rank_tolerance: float = DEFAULT_RANK_TOL) -> JacobianDiagnostics:
    """Singular values, numerical rank and manipulability ``sqrt(det(J J^T))``.

    ``rank_tolerance`` is relative to the largest singular value. For a
    ``k x m`` matrix the manipulability is the product of the ``k`` singular
    values when ``m >= k`` and exactly zero otherwise.
    """
    if not rank_tolerance > 0:
        raise ValueError("rank_tolerance must be positive")
    J = np.atleast_2d(np.asarray(J, dtype=float))
    s = np.linalg.svd(J, compute_uv=False)
    k, m = J.shape
    manip = float(np.prod(s)) if m >= k else 0.0
    return JacobianDiagnostics(s, int(_rank(s, rank_tolerance)), manip)


def null_space_basis(J, rank_tolerance: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis ``N`` (``m x k``) of the null space, ``k = m - rank``."""
    if not rank_tolerance > 0:
        raise ValueError("rank_tolerance must be positive")
    J = np.atleast_2d(np.asarray(J, dtype=float))
    _, s, Vt = np.linalg.svd(J, full_matrices=True)
    r = int(_rank(s, rank_tolerance))
    return Vt[r:].T.copy()


def minor_null_vector(J) -> np.ndarray:
    """Signed 3x3 minors of a ``3 x 4`` matrix: ``(-1)**(i+1) det(J without column i)``.

    Exactly annihilated by ``J`` when ``J`` has full rank; identically zero
    when ``rank(J) < 3``, which is the case for every chain Jacobian.
    """
    J = np.asarray(J, dtype=float)
    if J.shape != (3, 4):
        raise ValueError(f"minor_null_vector needs a 3x4 matrix, got {J.shape}")
    cols = np.arange(4)
    return np.array([(-1) ** i * np.linalg.det(J[:, cols != i]) for i in range(4)])


@dataclass(frozen=True)
class TaskProjection:
    """Subset of Stokes components (1-based) that the controller regulates."""

    rows: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        rows = tuple(int(r) for r in self.rows)
        if not rows:
            raise ValueError("task projection needs at least one row")
        if len(set(rows)) != len(rows):
            raise ValueError(f"duplicate task rows {rows}")
        if any(r not in (1, 2, 3) for r in rows):
            raise ValueError(f"task rows must be drawn from 1, 2, 3; got {rows}")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def of(cls, rows: Iterable[int]) -> "TaskProjection":
        return cls(tuple(rows))

    @property
    def index(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.int64) - 1

    @property
    def is_full(self) -> bool:
        return self.rows == (1, 2, 3)


def project_task(J, err, proj: TaskProjection) -> tuple[np.ndarray, np.ndarray]:
    """Keep only the selected rows of ``J`` and entries of ``err``."""
    idx = proj.index
    return np.asarray(J, dtype=float)[idx], np.asarray(err, dtype=float)[idx]
