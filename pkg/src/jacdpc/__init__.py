"""Jacobian-based dynamic polarization control.

Stokes-space forward model of multi-stage waveplate chains, analytic
Jacobians, rate-control solvers with null-space gradient projection, and a
closed-loop tracking simulator.
"""

from .jacobian import (DEFAULT_RANK_TOL, JacobianDiagnostics, TaskProjection, analytic_jacobian, diagnostics,
                       fd_jacobian, minor_null_vector, null_space_basis, project_task)
from .scenario import Scenario, ScenarioError, dump_scenario, load_scenario
from .simulator import (LoopConfig, LoopState, RunSummary, ScramblerConfig, Trace, TraceRecord, control_step,
                        initial_state, run, scrambler_sop, scrambler_trajectory)
from .solvers import (Method, RankDeficientError, SingularJacobianError, SolveResult, SolverConfig, pinv, solve,
                      solve_damped, solve_direct, solve_extended, solve_gradient_projection, solve_pinv,
                      solve_regularized, solve_transpose)
from .stokes import (S1, S2, S3, DegenerateInputError, DPCChain, WaveplateStage, cross_matrix, elemental,
                     euler_chain, forward, normalize, rodrigues)
from .tracecsv import write_trace_csv

__version__ = "0.1.0"
