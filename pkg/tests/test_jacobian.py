import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jacdpc import (S3, DPCChain, TaskProjection, WaveplateStage, analytic_jacobian, diagnostics, euler_chain,
                    fd_jacobian, forward, minor_null_vector, null_space_basis, project_task)

from oracles import complex_step_jacobian, random_unit

EULER = {3: [1, 3, 1], 4: [1, 3, 1, 3]}

unit_vectors = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: np.array(v) / np.linalg.norm(v))


def configurations(m):
    return st.tuples(st.lists(st.floats(-2, 2), min_size=m, max_size=m).map(np.array), unit_vectors)


def test_single_stage_unit_gain():
    chain = DPCChain((WaveplateStage([1, 0, 0], gain=1.0),))
    J = analytic_jacobian(chain, [0.0], S3)
    np.testing.assert_allclose(J, [[0], [-1], [0]], atol=1e-15)
    np.testing.assert_allclose(fd_jacobian(chain, [0.0], S3, h=1e-6), [[0], [-1], [0]], atol=1e-9)


def test_single_stage_gain_pi():
    chain = euler_chain([1])
    np.testing.assert_allclose(analytic_jacobian(chain, [0.0], S3), [[0], [-np.pi], [0]], atol=1e-15)


@pytest.mark.parametrize("m", [3, 4])
@given(data=st.data())
def test_analytic_matches_complex_step(m, data):
    phi, s_in = data.draw(configurations(m))
    J = analytic_jacobian(euler_chain(EULER[m]), phi, s_in)
    np.testing.assert_allclose(J, complex_step_jacobian(EULER[m], [np.pi] * m, phi, s_in), atol=1e-12)


def test_general_axes_and_gains_match_complex_step():
    # axes off the basis directions; compare against a rotation-vector oracle built by composition
    from scipy.spatial.transform import Rotation
    rng = np.random.default_rng(11)
    for _ in range(50):
        m = rng.integers(1, 6)
        axes = [random_unit(rng) for _ in range(m)]
        gains = rng.uniform(0.5, 4, m) * rng.choice([-1, 1], m)
        chain = DPCChain(tuple(WaveplateStage(a, g) for a, g in zip(axes, gains)))
        phi, s_in = rng.uniform(-2, 2, m), random_unit(rng)

        def f(p):
            s = s_in
            for a, g, x in zip(axes, gains, p):
                s = Rotation.from_rotvec(g * x * a).apply(s)
            return s

        h = 1e-5
        Jref = np.column_stack([(f(phi + h * e) - f(phi - h * e)) / (2 * h) for e in np.eye(m)])
        np.testing.assert_allclose(analytic_jacobian(chain, phi, s_in), Jref, atol=1e-8)


def test_fd_agrees_at_zero_for_random_chains():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        m = rng.integers(1, 5)
        chain = DPCChain(tuple(WaveplateStage(random_unit(rng), rng.uniform(0.5, 4)) for _ in range(m)))
        s_in = random_unit(rng)
        phi = np.zeros(m)
        assert np.abs(fd_jacobian(chain, phi, s_in) - analytic_jacobian(chain, phi, s_in)).max() < 1e-6


def test_fd_four_stage_relative_error():
    rng = np.random.default_rng(6)
    chain = euler_chain(EULER[4])
    for _ in range(200):
        phi, s_in = rng.uniform(-2, 2, 4), random_unit(rng)
        J = analytic_jacobian(chain, phi, s_in)
        err = np.linalg.norm(fd_jacobian(chain, phi, s_in) - J, axis=0) / np.linalg.norm(J, axis=0)
        assert err.max() < 1e-5


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        fd_jacobian(euler_chain([1]), [0.0], S3, h=0)


@pytest.mark.parametrize("m", [3, 4])
@given(data=st.data())
def test_columns_orthogonal_to_output(m, data):
    phi, s_in = data.draw(configurations(m))
    chain = euler_chain(EULER[m])
    s_out, _ = forward(chain, phi, s_in)
    assert np.abs(s_out @ analytic_jacobian(chain, phi, s_in)).max() < 1e-9


@pytest.mark.parametrize("m", [3, 4])
@given(data=st.data())
def test_rank_at_most_two(m, data):
    phi, s_in = data.draw(configurations(m))
    d = diagnostics(analytic_jacobian(euler_chain(EULER[m]), phi, s_in))
    s = d.singular_values
    assert np.all(np.diff(s) <= 0)
    assert d.numerical_rank <= 2
    assert s[2] < 1e-9 * (s[0] + 1)
    assert 0 <= d.manipulability < 1e-12


def test_diagnostics_identity():
    d = diagnostics(np.eye(3))
    assert d.numerical_rank == 3
    assert d.manipulability == pytest.approx(1.0)


def test_manipulability_is_sqrt_det_jjt():
    rng = np.random.default_rng(2)
    for _ in range(50):
        J = rng.standard_normal((3, 4))
        assert diagnostics(J).manipulability == pytest.approx(np.sqrt(np.linalg.det(J @ J.T)), rel=1e-10)
    assert diagnostics(rng.standard_normal((3, 2))).manipulability == 0.0


def test_rank_tolerance_is_relative():
    J = 1e-12 * np.diag([1.0, 1.0, 1e-3])
    assert diagnostics(J, rank_tolerance=1e-9).numerical_rank == 3
    assert diagnostics(J, rank_tolerance=1e-2).numerical_rank == 2
    with pytest.raises(ValueError):
        diagnostics(J, rank_tolerance=0)


def test_null_space_coordinate():
    N = null_space_basis(np.array([[1.0, 0], [0, 0], [0, 0]]))
    assert N.shape == (2, 1)
    np.testing.assert_allclose(np.abs(N[:, 0]), [0, 1], atol=1e-15)


@pytest.mark.parametrize("m,k_min", [(3, 1), (4, 2)])
def test_null_space_of_chain_jacobians(m, k_min):
    rng = np.random.default_rng(m)
    chain = euler_chain(EULER[m])
    for _ in range(300):
        J = analytic_jacobian(chain, rng.uniform(-2, 2, m), random_unit(rng))
        N = null_space_basis(J)
        assert N.shape[1] >= k_min
        assert np.abs(J @ N).max() < 1e-9
        np.testing.assert_allclose(N.T @ N, np.eye(N.shape[1]), atol=1e-9)


def test_minor_null_vector_hand_value():
    J = np.eye(3, 4)
    np.testing.assert_allclose(minor_null_vector(J), [0, 0, 0, -1], atol=1e-15)


def test_minor_null_vector_vanishes_for_four_stage_chains():
    rng = np.random.default_rng(4)
    chain = euler_chain(EULER[4])
    for _ in range(500):
        J = analytic_jacobian(chain, rng.uniform(-2, 2, 4), random_unit(rng))
        assert np.linalg.norm(minor_null_vector(J)) < 1e-9


def test_minor_null_vector_annihilated_by_full_rank_j():
    rng = np.random.default_rng(8)
    for _ in range(200):
        J = rng.standard_normal((3, 4))
        N = minor_null_vector(J)
        assert np.linalg.norm(J @ N) / np.linalg.norm(N) < 1e-9
        # matches the decomposition null vector up to scale
        n = null_space_basis(J)[:, 0]
        assert abs(abs(N @ n) / np.linalg.norm(N) - 1) < 1e-9


def test_minor_null_vector_shape_checked():
    with pytest.raises(ValueError):
        minor_null_vector(np.eye(3))


def test_task_projection_selects_rows():
    J = np.arange(12.0).reshape(3, 4)
    err = np.array([1.0, 2.0, 3.0])
    Jt, et = project_task(J, err, TaskProjection((3,)))
    np.testing.assert_array_equal(Jt, J[2:3])
    np.testing.assert_array_equal(et, [3.0])
    Jf, ef = project_task(J, err, TaskProjection())
    np.testing.assert_array_equal(Jf, J)
    np.testing.assert_array_equal(ef, err)


@pytest.mark.parametrize("rows", [(), (1, 1), (0,), (4,)])
def test_task_projection_invariants(rows):
    with pytest.raises(ValueError):
        TaskProjection(rows)


def test_reduced_s3_task_has_full_rank():
    rng = np.random.default_rng(9)
    chain = euler_chain(EULER[3])
    proj = TaskProjection((3,))
    full = 0
    for _ in range(500):
        J, _ = project_task(analytic_jacobian(chain, rng.uniform(-2, 2, 3), random_unit(rng)), np.zeros(3), proj)
        full += diagnostics(J).numerical_rank == 1
    assert full == 500
