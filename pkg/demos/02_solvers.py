"""
Rate-control solvers on a rank-deficient Jacobian
=================================================

The direct inverse fails on every chain Jacobian; the pseudo-inverse gives
the smallest update that realizes a reachable output change; gradient
projection adds a null-space step that shrinks the signals without moving
the output.
"""

import numpy as np

from jacdpc import (SingularJacobianError, analytic_jacobian, euler_chain, forward, normalize, pinv, solve_direct,
                    solve_extended, solve_gradient_projection, solve_pinv, solve_regularized, solve_transpose)

rng = np.random.default_rng(1)
chain = euler_chain([1, 3, 1])
phi = np.array([1.5, -1.3, 1.4])
s_in = normalize([0.1, 0.7, -0.4])
J = analytic_jacobian(chain, phi, s_in)
dS = J @ rng.standard_normal(3) * 1e-2  # a reachable output change

try:
    solve_direct(J, dS)
except SingularJacobianError as e:
    print("direct inverse:", e)

for name, res in [("transpose", solve_transpose(J, dS)),
                  ("regularized (lambda 0.1)", solve_regularized(J, dS, 0.1)),
                  ("pseudo-inverse", solve_pinv(J, dS))]:
    print(f"{name:26s} |dphi| = {np.linalg.norm(res.delta_phi):.5f}  residual = {res.residual_norm:.2e}")

# hold the output at s0 while the null-space term walks the signals down
s0, _ = forward(chain, phi, s_in)
p = phi.copy()
for k in range(300):
    sk, _ = forward(chain, p, s_in)
    Jk = analytic_jacobian(chain, p, s_in)
    p = p + solve_gradient_projection(Jk, s0 - sk, p, mu=0.1).delta_phi
s1, _ = forward(chain, p, s_in)
print(f"null-space descent: phi {phi.round(3)} -> {p.round(3)}, |phi| {np.linalg.norm(phi):.3f} -> "
      f"{np.linalg.norm(p):.3f}, output moved {np.linalg.norm(s1 - s0):.1e}")

# the full extended system is singular for a 3-row task; a 1-row task is fine
J3 = J[2:3]
res = solve_extended(J3, [0.05], phi)
print("extended Jacobian on the s3 task: dphi =", res.delta_phi.round(5), " cond =", round(res.flags["cond"], 3))
print("same as a unit projection step:",
      np.allclose(res.delta_phi, pinv(J3) @ [0.05] - (phi - pinv(J3) @ (J3 @ phi))))
