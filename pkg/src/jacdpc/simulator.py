"""Closed-loop simulation of a waveplate chain tracking a scrambled input SOP.

Timeline per acquisition sample ``k`` (``t = k / sample_rate``)::

    S_in[k]  = scrambler(k)
    S_out[k] = f(phi[k], S_in[k])                      -> recorded
    dphi[k]  = controller(...)        (only once t >= activation_time)
    phi[k+1] = phi[k] + dphi[k - d]                    d = delay in samples

so an update computed at ``t`` first reaches the waveplates at ``t + tau``.

Two error sources are supported. ``feedback="measured"`` uses the measured
``S_out[k]`` and the Jacobian at the currently applied ``phi[k]``; with a
nonzero delay that loop double-counts every update still in flight and is
only stable for small ``d``. ``feedback="model"`` (default) evaluates the
forward map at the *commanded* control vector (applied value plus all
pending updates) and, with ``predict_input``, at the input SOP extrapolated
to the moment the update lands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit

from .jacobian import TaskProjection, _jacobian_from_intermediates
from .solvers import OK, Method, SolverConfig, _solve_kernel
from .stokes import S1, S2, S3, DPCChain, _forward, _matvec3, _rodrigues, euler_chain, normalize

__all__ = [
    "ScramblerConfig",
    "LoopConfig",
    "LoopState",
    "TraceRecord",
    "Trace",
    "RunSummary",
    "perturbation_walk",
    "scrambler_sop",
    "scrambler_trajectory",
    "initial_state",
    "control_step",
    "run",
    "summarize",
]

FEEDBACK_MODES = ("model", "measured")


@dataclass(frozen=True)
class ScramblerConfig:
    """Input SOP: constant-rate drift about S3, then a random-walk rotation about ``perturb_axis``.

    ``perturb_sigma`` is the standard deviation of the per-sample increment
    of the perturbation angle, in radians.
    """

    base_sop: np.ndarray = field(default_factory=lambda: S1.copy())
    drift_rate: float = 1e5
    perturb_axis: np.ndarray = field(default_factory=lambda: S2.copy())
    perturb_sigma: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "base_sop", normalize(self.base_sop))
        object.__setattr__(self, "perturb_axis", normalize(self.perturb_axis))
        if not np.isfinite(self.drift_rate):
            raise ValueError("drift_rate must be finite")
        if not self.perturb_sigma >= 0:
            raise ValueError("perturb_sigma must be >= 0")
        object.__setattr__(self, "seed", int(self.seed))

    def __eq__(self, other):
        if not isinstance(other, ScramblerConfig):
            return NotImplemented
        return (np.array_equal(self.base_sop, other.base_sop)
                and np.array_equal(self.perturb_axis, other.perturb_axis)
                and (self.drift_rate, self.perturb_sigma, self.seed)
                == (other.drift_rate, other.perturb_sigma, other.seed))


def perturbation_walk(cfg: ScramblerConfig, n: int) -> np.ndarray:
    """Perturbation angle for samples ``0 .. n-1``; starts at exactly zero.

    Sample ``k`` depends only on ``(seed, k)``: the increments come from one
    seeded stream consumed in order.
    """
    if n <= 0:
        return np.zeros(0)
    steps = np.random.default_rng(cfg.seed).standard_normal(n - 1) * cfg.perturb_sigma
    return np.concatenate(([0.0], np.cumsum(steps)))


def scrambler_sop(cfg: ScramblerConfig, t: float, perturb_angle: float = 0.0) -> np.ndarray:
    """``R(perturb_axis, eps) R(S3, drift_rate * t) base_sop`` for one instant."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return _scramble(cfg.base_sop, cfg.perturb_axis, cfg.drift_rate * t, perturb_angle)


@njit(cache=True)
def _scramble(base, axis, drift_angle, eps):
    s = _matvec3(_rodrigues(axis, eps), _matvec3(_rodrigues(S3, drift_angle), base))
    return s / math.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])


@njit(cache=True)
def _scramble_all(base, axis, rate, dt, eps):
    n = eps.shape[0]
    out = np.empty((n, 3))
    for k in range(n):
        out[k] = _scramble(base, axis, rate * (k * dt), eps[k])
    return out


def scrambler_trajectory(cfg: ScramblerConfig, sample_rate: float, n: int) -> np.ndarray:
    """Input SOP at every acquisition sample, shape ``(n, 3)``."""
    return _scramble_all(cfg.base_sop, cfg.perturb_axis, float(cfg.drift_rate), 1.0 / sample_rate,
                         perturbation_walk(cfg, n))


@dataclass(frozen=True)
class LoopConfig:
    """Everything about the control loop except the input scrambler."""

    chain: DPCChain = field(default_factory=lambda: euler_chain([1, 3, 1]))
    target_sop: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.6, 0.8]))
    solver: SolverConfig = field(default_factory=SolverConfig)
    task: TaskProjection = field(default_factory=TaskProjection)
    sample_rate: float = 50e6
    delay: float = 1e-6
    activation_time: float = 2e-3
    duration: float = 4e-3
    phi_initial: Optional[np.ndarray] = None
    lock_tolerance: float = 0.02
    control_decimation: int = 1
    feedback: str = "model"
    predict_input: bool = True
    predict_window: Optional[int] = None
    corrections: int = 1

    def __post_init__(self):
        object.__setattr__(self, "target_sop", normalize(self.target_sop))
        if self.phi_initial is None:
            object.__setattr__(self, "phi_initial", np.zeros(self.chain.m))
        object.__setattr__(self, "phi_initial", self.chain.check_phi(self.phi_initial).copy())
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not self.delay >= 0:
            raise ValueError("delay must be >= 0")
        if not self.activation_time < self.duration:
            raise ValueError("activation_time must be earlier than duration")
        if not self.lock_tolerance > 0:
            raise ValueError("lock_tolerance must be positive")
        if int(self.control_decimation) < 1:
            raise ValueError("control_decimation must be >= 1")
        object.__setattr__(self, "control_decimation", int(self.control_decimation))
        if self.feedback not in FEEDBACK_MODES:
            raise ValueError(f"feedback must be one of {FEEDBACK_MODES}")
        if int(self.corrections) < 0:
            raise ValueError("corrections must be >= 0")
        object.__setattr__(self, "corrections", int(self.corrections))
        if self.predict_window is not None and int(self.predict_window) < 1:
            raise ValueError("predict_window must be >= 1")
        m = self.solver.method
        if m in (Method.DirectInverse, Method.Damped) and len(self.task.rows) != self.chain.m:
            raise ValueError(f"{m.value} needs a square task Jacobian: "
                             f"{len(self.task.rows)} task rows vs {self.chain.m} stages")

    @property
    def delay_samples(self) -> int:
        return int(round(self.delay * self.sample_rate))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def activation_index(self) -> int:
        return int(math.ceil(self.activation_time * self.sample_rate - 1e-9))

    @property
    def horizon(self) -> int:
        """Samples between computing an update and its first effect on ``S_out``."""
        return self.delay_samples + 1

    @property
    def window(self) -> int:
        """Look-back (samples) used to estimate the input SOP rotation rate."""
        if self.predict_window is not None:
            return int(self.predict_window)
        return 4 * self.horizon

    def __eq__(self, other):
        if not isinstance(other, LoopConfig):
            return NotImplemented
        a, b = self.__dict__, other.__dict__
        return all(
            np.array_equal(a[k], b[k]) if isinstance(a[k], np.ndarray) else a[k] == b[k] for k in a
        )


# --------------------------------------------------------------------------- kernels


@njit(cache=True)
def _predict(prev, cur, lag, horizon):
    """Extrapolate ``cur`` by the rotation that carried ``prev`` to it over ``lag`` samples."""
    c = np.array([prev[1] * cur[2] - prev[2] * cur[1],
                  prev[2] * cur[0] - prev[0] * cur[2],
                  prev[0] * cur[1] - prev[1] * cur[0]])
    sn = np.sqrt(c @ c)
    if lag <= 0 or sn < 1e-15:
        return cur.copy()
    ang = math.atan2(sn, prev @ cur)
    s = _matvec3(_rodrigues(c / sn, ang * horizon / lag), cur)
    return s / math.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])


@njit(cache=True)
def _controller(axes, gains, phi, s_in, s_out_measured, use_measured, target, rows,
                code, lam, mu, rtol, thr, corrections):
    """One control-law evaluation at ``(phi, s_in)``; returns ``(dphi, status, ns_active)``."""
    inter = _forward(axes, gains, phi, s_in, np.empty((axes.shape[0], 3)))
    J = _jacobian_from_intermediates(axes, gains, phi, inter)
    s_out = s_out_measured if use_measured else inter[-1]
    err = target - s_out
    Jt = np.ascontiguousarray(J[rows])
    dphi, status, active, _ = _solve_kernel(code, Jt, np.ascontiguousarray(err[rows]), phi,
                                            lam, mu, rtol, thr)
    if status != OK:
        return np.zeros(axes.shape[0]), status, active
    if not use_measured:
        # Newton corrections: model and Jacobian re-evaluated at the updated signals
        ccode = 4 if code == 5 else code
        for _ in range(corrections):
            phi_new = phi + dphi
            _forward(axes, gains, phi_new, s_in, inter)
            res = target - inter[-1]
            Jn = np.ascontiguousarray(_jacobian_from_intermediates(axes, gains, phi_new, inter)[rows])
            c, st, _, _ = _solve_kernel(ccode, Jn, np.ascontiguousarray(res[rows]), phi_new,
                                        lam, mu, rtol, -1.0)
            if st != OK:
                break
            dphi = dphi + c
    return dphi, status, active


@njit(cache=True)
def _sigma2(axes, gains, phi, inter):
    J = _jacobian_from_intermediates(axes, gains, phi, inter)
    s = np.linalg.svd(J)[1]
    return s[1] if s.shape[0] > 1 else 0.0


@njit(cache=True)
def _run_kernel(axes, gains, phi0, s_in_traj, target, rows, code, lam, mu, rtol, thr,
                d, act, dec, use_measured, predict, window, corr):
    n = s_in_traj.shape[0]
    m = axes.shape[0]
    s_out = np.empty((n, 3))
    phi_tr = np.empty((n, m))
    ns = np.zeros(n, dtype=np.bool_)
    bad = np.zeros(n, dtype=np.bool_)
    sig2 = np.empty(n)
    ring = np.zeros((d + 1, m))
    phi = phi0.copy()
    phi_cmd = phi0.copy()
    inter = np.empty((m, 3))
    for k in range(n):
        s_in = s_in_traj[k]
        _forward(axes, gains, phi, s_in, inter)
        s_out[k] = inter[-1]
        phi_tr[k] = phi
        sig2[k] = _sigma2(axes, gains, phi, inter)
        dphi = np.zeros(m)
        if k >= act and (k - act) % dec == 0:
            if use_measured:
                dphi, status, active = _controller(axes, gains, phi, s_in, inter[-1], True, target,
                                                   rows, code, lam, mu, rtol, thr, corr)
            else:
                s_hat = s_in
                if predict:
                    lag = min(window, k)
                    s_hat = _predict(s_in_traj[k - lag], s_in, lag, d + 1)
                dphi, status, active = _controller(axes, gains, phi_cmd, s_hat, inter[-1], False,
                                                   target, rows, code, lam, mu, rtol, thr, corr)
            ns[k] = active
            bad[k] = status != OK
            phi_cmd += dphi
        ring[k % (d + 1)] = dphi
        phi = phi + ring[(k + 1) % (d + 1)]
    return s_out, phi_tr, ns, bad, sig2


# --------------------------------------------------------------------------- step API


@dataclass(frozen=True)
class LoopState:
    """Controller state between samples.

    ``phi`` is the control vector on the waveplates, ``phi_cmd`` the value the
    controller has commanded (``phi`` plus everything in ``pending``), and
    ``history`` the most recent input SOPs, newest last.
    """

    k: int
    phi: np.ndarray
    phi_cmd: np.ndarray
    pending: tuple
    history: tuple = ()
    nullspace_active: bool = False
    singular: bool = False


def initial_state(cfg: LoopConfig) -> LoopState:
    zero = np.zeros(cfg.chain.m)
    return LoopState(0, cfg.phi_initial.copy(), cfg.phi_initial.copy(), (zero,) * cfg.delay_samples)


def control_step(cfg: LoopConfig, state: LoopState, s_in, s_out=None) -> LoopState:
    """Advance the loop by one acquisition sample.

    ``s_in`` is the input SOP measured at sample ``state.k``; ``s_out`` the
    measured output (computed from the model when omitted). Before the
    activation time, and on samples skipped by ``control_decimation``, the
    update is zero. A solver failure holds the signals (zero update) and sets
    ``singular`` on the returned state.
    """
    ch = cfg.chain
    s_in = np.asarray(s_in, dtype=float)
    if s_out is None:
        s_out = _forward(ch.axes, ch.gains, state.phi, s_in, np.empty((ch.m, 3)))[-1]
    history = (state.history + (s_in,))[-(cfg.window + 1):]
    k = state.k
    dphi = np.zeros(ch.m)
    active = singular = False
    if k >= cfg.activation_index and (k - cfg.activation_index) % cfg.control_decimation == 0:
        sv = cfg.solver
        thr = -1.0 if sv.nullspace_threshold is None else float(sv.nullspace_threshold)
        args = (cfg.target_sop, cfg.task.index, sv.method.code, sv.lam, sv.mu, sv.rank_tolerance, thr,
                cfg.corrections)
        if cfg.feedback == "measured":
            dphi, status, active = _controller(ch.axes, ch.gains, state.phi, s_in,
                                               np.asarray(s_out, dtype=float), True, *args)
        else:
            s_hat = s_in
            if cfg.predict_input:
                lag = min(cfg.window, k)
                s_hat = _predict(history[-1 - lag], s_in, lag, cfg.horizon)
            dphi, status, active = _controller(ch.axes, ch.gains, state.phi_cmd, s_hat, s_out, False,
                                               *args)
        singular = status != OK
    queue = state.pending + (dphi,)
    return LoopState(k + 1, state.phi + queue[0], state.phi_cmd + dphi, queue[1:], history,
                     bool(active), bool(singular))


# --------------------------------------------------------------------------- traces


@dataclass(frozen=True)
class TraceRecord:
    t: float
    s_in: np.ndarray
    s_out: np.ndarray
    phi: np.ndarray
    error_norm: float
    nullspace_active: bool
    sigma2: float
    max_abs_phi: float


@dataclass
class Trace:
    """Columnar closed-loop trace; indexing yields :class:`TraceRecord`."""

    t: np.ndarray
    s_in: np.ndarray
    s_out: np.ndarray
    phi: np.ndarray
    error_norm: np.ndarray
    task_error: np.ndarray
    nullspace_active: np.ndarray
    singular: np.ndarray
    sigma2: np.ndarray

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> TraceRecord:
        return TraceRecord(float(self.t[i]), self.s_in[i], self.s_out[i], self.phi[i],
                           float(self.error_norm[i]), bool(self.nullspace_active[i]),
                           float(self.sigma2[i]), float(self.max_abs_phi[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def max_abs_phi(self) -> np.ndarray:
        return np.max(np.abs(self.phi), axis=1)


@dataclass(frozen=True)
class RunSummary:
    """Scalar figures of merit for one run.

    ``convergence_time`` is measured from activation to the first sample after
    which the task error stays below ``lock_tolerance``; it is ``None`` when
    the loop never locks, in which case ``steady_state_error`` is NaN.
    """

    convergence_time: Optional[float]
    steady_state_error: float
    max_abs_phi: float
    nullspace_duty: float
    singular_fraction: float
    activation_index: int
    lock_index: Optional[int]
    per_sample_max_phi: np.ndarray = field(repr=False)

    @property
    def locked(self) -> bool:
        return self.lock_index is not None

    def bounded_fraction(self, bound: float, window: str = "post_activation") -> float:
        """Fraction of samples in ``window`` with ``max_i |phi_i| <= bound``.

        ``window`` is ``"all"``, ``"post_activation"`` or ``"post_lock"``.
        """
        start = {"all": 0, "post_activation": self.activation_index,
                 "post_lock": self.lock_index}[window]
        if start is None:
            return 0.0
        seg = self.per_sample_max_phi[start:]
        return float(np.mean(seg <= bound)) if seg.size else 0.0


def summarize(trace: Trace, cfg: LoopConfig) -> RunSummary:
    act = cfg.activation_index
    n = len(trace)
    above = np.flatnonzero(trace.task_error[act:] >= cfg.lock_tolerance)
    lock = act if above.size == 0 else act + int(above[-1]) + 1
    if lock >= n:
        conv, sse, lock = None, float("nan"), None
    else:
        conv = (lock - act) / cfg.sample_rate
        sse = float(np.mean(trace.task_error[lock:]))
    mphi = trace.max_abs_phi
    post = slice(act, n)
    ctrl = np.zeros(n, dtype=bool)
    ctrl[act::cfg.control_decimation] = True
    return RunSummary(
        convergence_time=conv,
        steady_state_error=sse,
        max_abs_phi=float(mphi.max()),
        nullspace_duty=float(np.mean(trace.nullspace_active[post])) if n > act else 0.0,
        singular_fraction=float(np.mean(trace.singular[ctrl])) if ctrl.any() else 0.0,
        activation_index=act,
        lock_index=lock,
        per_sample_max_phi=mphi,
    )


def run(loop: LoopConfig, scrambler: ScramblerConfig) -> tuple[Trace, RunSummary]:
    """Simulate ``loop.duration`` seconds at ``loop.sample_rate``; fully deterministic."""
    n = loop.n_steps
    s_in = scrambler_trajectory(scrambler, loop.sample_rate, n)
    sv = loop.solver
    thr = -1.0 if sv.nullspace_threshold is None else float(sv.nullspace_threshold)
    s_out, phi, ns, bad, sig2 = _run_kernel(
        loop.chain.axes, loop.chain.gains, loop.phi_initial, s_in, loop.target_sop, loop.task.index,
        sv.method.code, sv.lam, sv.mu, sv.rank_tolerance, thr,
        loop.delay_samples, loop.activation_index, loop.control_decimation,
        loop.feedback == "measured", loop.predict_input, loop.window, loop.corrections,
    )
    diff = loop.target_sop - s_out
    trace = Trace(
        t=np.arange(n) / loop.sample_rate,
        s_in=s_in,
        s_out=s_out,
        phi=phi,
        error_norm=np.linalg.norm(diff, axis=1),
        task_error=np.linalg.norm(diff[:, loop.task.index], axis=1),
        nullspace_active=ns,
        singular=bad,
        sigma2=sig2,
    )
    return trace, summarize(trace, loop)


def with_seed(scrambler: ScramblerConfig, seed: int) -> ScramblerConfig:
    return replace(scrambler, seed=seed)
