"""Rate-control solvers: map a Stokes error ``dS`` to a control update ``dphi``.

Every method is a pure function of ``(J, dS)`` plus, for the null-space
methods, the current control vector. The numeric core lives in
:func:`_solve_kernel` so that the closed-loop simulator runs exactly the same
code as the public functions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .jacobian import DEFAULT_RANK_TOL

__all__ = [
    "Method",
    "SolverConfig",
    "SolveResult",
    "SingularJacobianError",
    "RankDeficientError",
    "solve",
    "solve_direct",
    "solve_transpose",
    "solve_damped",
    "solve_regularized",
    "solve_pinv",
    "solve_gradient_projection",
    "solve_extended",
    "pinv",
]


class SingularJacobianError(np.linalg.LinAlgError):
    """The matrix that has to be inverted is numerically singular."""


class RankDeficientError(np.linalg.LinAlgError):
    """The extended-Jacobian method needs a task Jacobian of full row rank.

    Chain Jacobians over the full Stokes task have rank <= 2, so the extended
    matrix is always singular for them; reduce the task first.
    """


class Method(enum.Enum):
    DirectInverse = "DirectInverse"
    Transpose = "Transpose"
    Damped = "Damped"
    RegularizedLS = "RegularizedLS"
    PseudoInverse = "PseudoInverse"
    GradientProjection = "GradientProjection"
    ExtendedJacobian = "ExtendedJacobian"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        key = str(name).replace("_", "").replace("-", "").lower()
        for m in cls:
            if m.value.lower() == key:
                return m
        aliases = {"pinv": cls.PseudoInverse, "inverse": cls.DirectInverse, "direct": cls.DirectInverse,
                   "regularized": cls.RegularizedLS, "extended": cls.ExtendedJacobian}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown solver method {name!r}; choose from {[m.value for m in cls]}")

    @property
    def code(self) -> int:
        return _CODES[self]


_CODES = {m: i for i, m in enumerate(Method)}

# kernel status codes
OK, SINGULAR, RANK_DEFICIENT = 0, 1, 2


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.GradientProjection
    lam: float = 0.1
    mu: float = 0.1
    rank_tolerance: float = DEFAULT_RANK_TOL
    nullspace_threshold: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.method in (Method.Damped, Method.RegularizedLS) and not self.lam > 0:
            raise ValueError(f"{self.method.value} needs lambda > 0")
        if self.method is Method.GradientProjection and not 0 < self.mu < 1:
            raise ValueError(f"gradient projection needs 0 < mu < 1, got {self.mu}")
        if not self.rank_tolerance > 0:
            raise ValueError("rank_tolerance must be positive")
        if self.nullspace_threshold is not None and not self.nullspace_threshold > 0:
            raise ValueError("nullspace_threshold must be positive when set")


@dataclass(frozen=True)
class SolveResult:
    delta_phi: np.ndarray
    nullspace_active: bool = False
    singular: bool = False
    residual_norm: float = 0.0
    flags: dict = field(default_factory=dict)


@njit(cache=True)
def _svd_rank(s, rtol):
    if s.shape[0] == 0 or s[0] == 0.0:
        return 0
    r = 0
    for v in s:
        if v > rtol * s[0]:
            r += 1
    return r


@njit(cache=True)
def _mv(A, x):
    # small dense mat-vec; avoids BLAS call overhead on 3x4 operands
    out = np.zeros(A.shape[0])
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            out[i] += A[i, j] * x[j]
    return out


@njit(cache=True)
def _pinv(J, rtol):
    U, s, Vt = np.linalg.svd(J)
    k, m = J.shape
    r = _svd_rank(s, rtol)
    Jp = np.zeros((m, k))
    for i in range(r):
        for a in range(m):
            for b in range(k):
                Jp[a, b] += Vt[i, a] * U[b, i] / s[i]
    return Jp


@njit(cache=True)
def _square_solve(A, b, rtol):
    s = np.linalg.svd(A)[1]
    if _svd_rank(s, rtol) < A.shape[0]:
        return np.zeros(A.shape[1]), SINGULAR
    return np.linalg.solve(A, b), OK


@njit(cache=True)
def _solve_kernel(code, J, dS, phi, lam, mu, rtol, threshold):
    """Returns ``(dphi, status, nullspace_active, cond)``; ``threshold < 0`` disables it."""
    k, m = J.shape
    cond = np.nan
    if code == 0:  # DirectInverse
        dphi, status = _square_solve(J, dS, rtol)
        return dphi, status, False, cond
    if code == 1:  # Transpose
        return _mv(np.ascontiguousarray(J.T), dS), OK, False, cond
    if code == 2:  # Damped
        dphi, status = _square_solve(J + lam * np.eye(k), dS, rtol)
        return dphi, status, False, cond
    if code == 3:  # RegularizedLS
        Jt = np.ascontiguousarray(J.T)
        return Jt @ np.linalg.solve(J @ Jt + lam * np.eye(k), dS), OK, False, cond
    if code == 4:  # PseudoInverse
        return _mv(_pinv(J, rtol), dS), OK, False, cond
    if code == 5:  # GradientProjection
        Jp = _pinv(J, rtol)
        dphi = _mv(Jp, dS)
        active = threshold < 0 or np.max(np.abs(phi)) > threshold
        if active:
            dphi = dphi - mu * (phi - _mv(Jp, _mv(J, phi)))
        return dphi, OK, active, cond
    # ExtendedJacobian
    U, s, Vt = np.linalg.svd(J)
    if k >= m or _svd_rank(s, rtol) < k:
        return np.zeros(m), RANK_DEFICIENT, True, np.inf
    Nt = np.ascontiguousarray(Vt[k:])
    Je = np.empty((m, m))
    Je[:k] = J
    Je[k:] = Nt
    rhs = np.empty(m)
    rhs[:k] = dS
    rhs[k:] = -_mv(Nt, phi)
    se = np.linalg.svd(Je)[1]
    cond = se[0] / se[-1] if se[-1] > 0 else np.inf
    if _svd_rank(se, rtol) < m:
        return np.zeros(m), SINGULAR, True, cond
    return np.linalg.solve(Je, rhs), OK, True, cond


def _prep(J, dS):
    J = np.ascontiguousarray(np.atleast_2d(np.asarray(J, dtype=float)))
    dS = np.ascontiguousarray(np.atleast_1d(np.asarray(dS, dtype=float)))
    if dS.shape != (J.shape[0],):
        raise ValueError(f"dS has shape {dS.shape}, J has {J.shape[0]} rows")
    return J, dS


def _finish(J, dS, dphi, active=False, **flags) -> SolveResult:
    res = float(np.linalg.norm(J @ dphi - dS))
    return SolveResult(dphi, bool(active), False, res, flags)


def solve_direct(J, dS, rank_tolerance: float = DEFAULT_RANK_TOL) -> SolveResult:
    """``dphi = J^-1 dS`` for a square, invertible ``J``.

    Raises :class:`SingularJacobianError` for every 3-stage chain Jacobian,
    since those have rank at most two.
    """
    J, dS = _prep(J, dS)
    if J.shape[0] != J.shape[1]:
        raise ValueError(f"direct inverse needs a square Jacobian, got {J.shape}")
    dphi, status, _, _ = _solve_kernel(0, J, dS, np.zeros(J.shape[1]), 0.0, 0.0, rank_tolerance, -1.0)
    if status != OK:
        raise SingularJacobianError("Jacobian is singular at the requested rank tolerance")
    return _finish(J, dS, dphi)


def solve_transpose(J, dS) -> SolveResult:
    J, dS = _prep(J, dS)
    return _finish(J, dS, J.T @ dS)


def solve_damped(J, dS, lam: float = 0.1, rank_tolerance: float = DEFAULT_RANK_TOL) -> SolveResult:
    """``dphi = (J + lam I)^-1 dS``; only defined for square ``J``.

    For ``m != 3`` use :func:`solve_regularized` instead.
    """
    J, dS = _prep(J, dS)
    if J.shape[0] != J.shape[1]:
        raise ValueError(f"damped inverse needs a square Jacobian, got {J.shape}; use solve_regularized")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    dphi, status, _, _ = _solve_kernel(2, J, dS, np.zeros(J.shape[1]), lam, 0.0, rank_tolerance, -1.0)
    if status != OK:
        raise SingularJacobianError(f"J + {lam:g} I is singular")
    return _finish(J, dS, dphi)


def solve_regularized(J, dS, lam: float = 0.1) -> SolveResult:
    """Regularized least squares ``dphi = J^T (J J^T + lam I)^-1 dS``.

    Minimizes ``||J dphi - dS||^2 + lam ||dphi||^2``.
    """
    J, dS = _prep(J, dS)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    dphi, _, _, _ = _solve_kernel(3, J, dS, np.zeros(J.shape[1]), lam, 0.0, 1.0, -1.0)
    return _finish(J, dS, dphi)


def pinv(J, rank_tolerance: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose inverse from the SVD; relative cutoff ``rank_tolerance``."""
    return _pinv(np.ascontiguousarray(np.atleast_2d(np.asarray(J, dtype=float))), rank_tolerance)


def solve_pinv(J, dS, rank_tolerance: float = DEFAULT_RANK_TOL) -> SolveResult:
    """Minimum-norm least-squares update ``dphi = J^+ dS``."""
    J, dS = _prep(J, dS)
    return _finish(J, dS, pinv(J, rank_tolerance) @ dS)


def solve_gradient_projection(J, dS, phi, mu: float = 0.1, rank_tolerance: float = DEFAULT_RANK_TOL,
                              threshold: Optional[float] = None) -> SolveResult:
    """``dphi = J^+ dS - mu (I - J^+ J) phi``.

    The second term descends ``||phi||^2`` inside the null space of ``J`` and
    so leaves the output unchanged to first order. With ``threshold`` set,
    that term is only added while ``max|phi_i| > threshold``.
    """
    J, dS = _prep(J, dS)
    phi = np.ascontiguousarray(phi, dtype=float)
    if phi.shape != (J.shape[1],):
        raise ValueError(f"phi has shape {phi.shape}, J has {J.shape[1]} columns")
    if not 0 < mu < 1:
        raise ValueError(f"mu must lie in (0, 1), got {mu}")
    thr = -1.0 if threshold is None else float(threshold)
    dphi, _, active, _ = _solve_kernel(5, J, dS, phi, 0.0, mu, rank_tolerance, thr)
    return _finish(J, dS, dphi, active)


def solve_extended(J_task, dS_task, phi, rank_tolerance: float = DEFAULT_RANK_TOL) -> SolveResult:
    """Simplified extended Jacobian with cost ``||phi||^2``.

    Solves ``[J; N^T] dphi = [dS; -N^T phi]`` where the columns of ``N`` span
    the null space of ``J_task``. The derivative of ``N`` is neglected.

    Raises
    ------
    RankDeficientError
        If ``J_task`` does not have full row rank ``k < m``.
    SingularJacobianError
        If the assembled extended matrix is singular.
    """
    J, dS = _prep(J_task, dS_task)
    phi = np.ascontiguousarray(phi, dtype=float)
    if phi.shape != (J.shape[1],):
        raise ValueError(f"phi has shape {phi.shape}, J has {J.shape[1]} columns")
    dphi, status, _, cond = _solve_kernel(6, J, dS, phi, 0.0, 0.0, rank_tolerance, -1.0)
    if status == RANK_DEFICIENT:
        raise RankDeficientError(
            f"task Jacobian {J.shape} is not of full row rank; the extended matrix would be singular")
    if status == SINGULAR:
        raise SingularJacobianError(f"extended Jacobian is singular (cond {cond:.3g})")
    return _finish(J, dS, dphi, True, cond=float(cond))


def solve(config: SolverConfig, J, dS, phi=None) -> SolveResult:
    """Dispatch on ``config.method``."""
    m = config.method
    if m is Method.DirectInverse:
        return solve_direct(J, dS, config.rank_tolerance)
    if m is Method.Transpose:
        return solve_transpose(J, dS)
    if m is Method.Damped:
        return solve_damped(J, dS, config.lam, config.rank_tolerance)
    if m is Method.RegularizedLS:
        return solve_regularized(J, dS, config.lam)
    if m is Method.PseudoInverse:
        return solve_pinv(J, dS, config.rank_tolerance)
    if phi is None:
        raise ValueError(f"{m.value} needs the current control vector")
    if m is Method.GradientProjection:
        return solve_gradient_projection(J, dS, phi, config.mu, config.rank_tolerance,
                                         config.nullspace_threshold)
    return solve_extended(J, dS, phi, config.rank_tolerance)
