"""
Forward map and Jacobian of a waveplate chain
=============================================

A three-stage R1 R3 R1 chain can reach any output SOP, yet its Jacobian
never has full rank: every column is perpendicular to the output Stokes
vector, so at most two directions on the sphere are reachable per step.
"""

import numpy as np

from jacdpc import analytic_jacobian, diagnostics, euler_chain, fd_jacobian, forward, normalize, null_space_basis

chain = euler_chain([1, 3, 1])  # gain pi per unit signal
phi = np.array([0.3, -0.7, 1.1])
s_in = normalize([0.2, -0.5, 0.8])

s_out, inter = forward(chain, phi, s_in)
print("SOP after each stage:\n", inter.round(6))

J = analytic_jacobian(chain, phi, s_in)
print("analytic Jacobian:\n", J.round(6))
print("largest deviation from finite differences:", np.abs(J - fd_jacobian(chain, phi, s_in)).max())

# columns are tangent to the sphere at s_out
print("s_out . J =", (s_out @ J).round(15))

d = diagnostics(J)
print("singular values:", d.singular_values, "rank:", d.numerical_rank, "manipulability:", d.manipulability)

# the null space holds signal changes that leave s_out fixed to first order
N = null_space_basis(J)
print("null-space basis:\n", N.round(6))
for eps in (1e-2, 1e-3, 1e-4):
    moved, _ = forward(chain, phi + eps * N[:, 0], s_in)
    print(f"step {eps:g} along the null space moves s_out by {np.linalg.norm(moved - s_out):.2e}")

# one more stage buys a second null direction
J4 = analytic_jacobian(euler_chain([1, 3, 1, 3]), np.append(phi, 0.4), s_in)
print("4-stage null-space dimension:", null_space_basis(J4).shape[1])
