"""Stokes vectors, Mueller rotations and the multi-stage waveplate forward map.

Stokes vectors are plain ``(3,)`` float arrays; rotations are ``(3, 3)``
arrays. Stage ``1`` of a chain sits nearest the input and is applied first,
so ``S_out = M_m ... M_2 M_1 S_in``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

__all__ = [
    "DegenerateInputError",
    "WaveplateStage",
    "DPCChain",
    "S1",
    "S2",
    "S3",
    "normalize",
    "cross_matrix",
    "rodrigues",
    "elemental",
    "forward",
    "euler_chain",
]

S1 = np.array([1.0, 0.0, 0.0])
S2 = np.array([0.0, 1.0, 0.0])
S3 = np.array([0.0, 0.0, 1.0])

_BASIS = {1: S1, 2: S2, 3: S3}
_NORM_FLOOR = 1e-12
_UNIT_TOL = 1e-9


class DegenerateInputError(ValueError):
    """A vector could not be normalized (norm too close to zero)."""


def normalize(v) -> np.ndarray:
    """Scale a raw 3-vector onto the unit sphere.

    Raises
    ------
    DegenerateInputError
        If ``||v|| <= 1e-12``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n <= _NORM_FLOOR:
        raise DegenerateInputError(f"cannot normalize vector with norm {n:g}")
    return v / n


def _unit_axis(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3,):
        raise ValueError(f"expected a 3-vector axis, got shape {r.shape}")
    if abs(np.linalg.norm(r) - 1.0) > _UNIT_TOL:
        raise ValueError(f"axis must be unit norm, got |r| = {np.linalg.norm(r):.12g}")
    return r


@njit(cache=True)
def _cross_matrix(r):
    out = np.zeros((3, 3))
    out[0, 1] = -r[2]
    out[0, 2] = r[1]
    out[1, 0] = r[2]
    out[1, 2] = -r[0]
    out[2, 0] = -r[1]
    out[2, 1] = r[0]
    return out


@njit(cache=True)
def _rodrigues(r, theta):
    # K @ K == r r^T - I for unit r, so M = cos I + (1 - cos) r r^T + sin K
    c = math.cos(theta)
    s = math.sin(theta)
    v = 1.0 - c
    M = np.empty((3, 3))
    M[0, 0] = c + v * r[0] * r[0]
    M[1, 1] = c + v * r[1] * r[1]
    M[2, 2] = c + v * r[2] * r[2]
    M[0, 1] = v * r[0] * r[1] - s * r[2]
    M[1, 0] = v * r[0] * r[1] + s * r[2]
    M[0, 2] = v * r[0] * r[2] + s * r[1]
    M[2, 0] = v * r[0] * r[2] - s * r[1]
    M[1, 2] = v * r[1] * r[2] - s * r[0]
    M[2, 1] = v * r[1] * r[2] + s * r[0]
    return M


@njit(cache=True)
def _matvec3(M, x):
    out = np.empty(3)
    for i in range(3):
        out[i] = M[i, 0] * x[0] + M[i, 1] * x[1] + M[i, 2] * x[2]
    return out


@njit(cache=True)
def _matmul3(A, B):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
    return out


def cross_matrix(r) -> np.ndarray:
    """Antisymmetric matrix ``K`` with ``K @ v == np.cross(r, v)``."""
    return _cross_matrix(_unit_axis(r))


def rodrigues(r, theta: float) -> np.ndarray:
    """Right-handed rotation by ``theta`` radians about the unit axis ``r``.

    ``M = I + sin(theta) K + (1 - cos(theta)) K @ K`` with ``K = cross_matrix(r)``.
    """
    return _rodrigues(_unit_axis(r), float(theta))


def elemental(axis_index: int, theta: float) -> np.ndarray:
    """Elemental rotation about S1, S2 or S3 (``axis_index`` 1, 2 or 3)."""
    if axis_index not in _BASIS:
        raise ValueError(f"axis_index must be 1, 2 or 3, got {axis_index!r}")
    return _rodrigues(_BASIS[axis_index], float(theta))


@dataclass(frozen=True)
class WaveplateStage:
    """One fixed-axis rotation stage driven by a scalar control signal.

    The rotation angle is ``gain * phi``. ``signal_range`` is advisory: it is
    reported in diagnostics but never used to clip the signal.
    """

    axis: np.ndarray
    gain: float = np.pi
    signal_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        axis = _unit_axis(self.axis).copy()
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "gain", float(self.gain))
        if self.gain == 0.0 or not np.isfinite(self.gain):
            raise ValueError("stage gain must be finite and nonzero")
        lo, hi = (float(x) for x in self.signal_range)
        if not lo <= hi:
            raise ValueError(f"empty signal_range ({lo}, {hi})")
        object.__setattr__(self, "signal_range", (lo, hi))

    @classmethod
    def about(cls, axis_index: int, gain: float = np.pi, signal_range=(-1.0, 1.0)):
        """Stage rotating about a Stokes basis axis (1, 2 or 3)."""
        if axis_index not in _BASIS:
            raise ValueError(f"axis_index must be 1, 2 or 3, got {axis_index!r}")
        return cls(_BASIS[axis_index], gain, signal_range)

    def matrix(self, phi: float) -> np.ndarray:
        return _rodrigues(self.axis, self.gain * float(phi))

    def __eq__(self, other):
        if not isinstance(other, WaveplateStage):
            return NotImplemented
        return (
            np.array_equal(self.axis, other.axis)
            and self.gain == other.gain
            and self.signal_range == other.signal_range
        )

    def __hash__(self):
        return hash((tuple(self.axis), self.gain, self.signal_range))


@dataclass(frozen=True)
class DPCChain:
    """Ordered waveplate stages; ``stages[0]`` is nearest the input."""

    stages: tuple[WaveplateStage, ...] = field(default_factory=tuple)

    def __post_init__(self):
        stages = tuple(self.stages)
        if len(stages) < 1:
            raise ValueError("a chain needs at least one stage")
        for st in stages:
            if not isinstance(st, WaveplateStage):
                raise TypeError(f"not a WaveplateStage: {st!r}")
        object.__setattr__(self, "stages", stages)

    @property
    def m(self) -> int:
        return len(self.stages)

    def __len__(self):
        return len(self.stages)

    @property
    def axes(self) -> np.ndarray:
        """``(m, 3)`` array of stage axes."""
        return np.array([st.axis for st in self.stages])

    @property
    def gains(self) -> np.ndarray:
        return np.array([st.gain for st in self.stages])

    def check_phi(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.m,):
            raise ValueError(f"control vector has shape {phi.shape}, chain has {self.m} stages")
        return phi


def euler_chain(axis_indices: Sequence[int], gain: float = np.pi, signal_range=(-1.0, 1.0)) -> DPCChain:
    """Chain of elemental stages, e.g. ``euler_chain([1, 3, 1])`` for R1 R3 R1.

    Indices are listed in light-propagation order (first entry applied first).
    """
    return DPCChain(tuple(WaveplateStage.about(i, gain, signal_range) for i in axis_indices))


@njit(cache=True)
def _forward(axes, gains, phi, s_in, out):
    """Fill ``out[i]`` with the SOP leaving stage ``i``; re-normalizes each step."""
    s = s_in
    for i in range(axes.shape[0]):
        s = _matvec3(_rodrigues(axes[i], gains[i] * phi[i]), s)
        n = math.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
        for j in range(3):
            out[i, j] = s[j] / n
        s = out[i]
    return out


def forward(chain: DPCChain, phi, s_in) -> tuple[np.ndarray, np.ndarray]:
    """Propagate ``s_in`` through the chain.

    Returns
    -------
    s_out : ndarray, shape (3,)
    intermediates : ndarray, shape (m, 3)
        ``intermediates[i]`` is the SOP after stage ``i + 1``; the last row
        equals ``s_out``.
    """
    phi = chain.check_phi(phi)
    s_in = np.asarray(s_in, dtype=float)
    if s_in.shape != (3,):
        raise ValueError(f"s_in must be a 3-vector, got shape {s_in.shape}")
    if abs(np.linalg.norm(s_in) - 1.0) > _UNIT_TOL:
        raise ValueError("s_in must be a unit Stokes vector; use normalize() first")
    inter = _forward(chain.axes, chain.gains, phi, s_in, np.empty((chain.m, 3)))
    return inter[-1].copy(), inter
