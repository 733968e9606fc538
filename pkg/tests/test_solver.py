import numpy as np
import pytest

from covlearn import lie, solver
from covlearn.graph import GPS, ODOM, Factor, FactorGraph, NoiseParams, SparseSystem, StructuralError, linearize
from covlearn.solver import SolverOptions, dead_reckoning, gauss_newton_step, solve, solve_many
from covlearn.synth import build_graph

import oracles
from conftest import noise_free, random_trajectory


def dense_system(A, b, num_poses):
    """Wrap a dense A as one group of per-row-block factors touching every pose."""
    m = A.shape[0] // 3
    ids = np.tile(np.arange(num_poses), (m, 1))
    blocks = A.reshape(m, 3, num_poses, 3).transpose(0, 2, 1, 3)
    return SparseSystem(((np.arange(m), ids, blocks),), b, num_poses)


def test_step_examples():
    sys_ = dense_system(np.eye(3), np.zeros(3), 1)
    assert np.allclose(gauss_newton_step(sys_), 0.0)
    sys_ = dense_system(np.eye(3), np.array([1.0, 0, 0]), 1)
    assert np.allclose(gauss_newton_step(sys_).ravel(), [1, 0, 0])


@pytest.mark.parametrize("damping", [0.0, 1e-3, 1.0])
def test_step_matches_pseudo_inverse(rng, damping):
    for _ in range(5):
        A = rng.normal(size=(9, 6))
        b = rng.normal(size=9)
        got = gauss_newton_step(dense_system(A, b, 2), damping).ravel()
        assert np.allclose(got, oracles.damped_step_oracle(A, b, damping), atol=1e-10)


def test_banded_and_dense_paths_agree(rng, monkeypatch):
    traj, theta = random_trajectory(rng, 60)
    g = build_graph(traj)
    sys_ = linearize(g, traj.gt + 0.1, theta)
    assert 4 * (3 * sys_.pose_span + 2) < 3 * g.num_poses  # banded path taken
    banded = gauss_newton_step(sys_, 1e-4)
    dense = np.linalg.solve(sys_.normal_matrix() + 1e-4 * np.eye(180), sys_.gradient)
    assert np.allclose(banded.ravel(), dense, atol=1e-10)


def test_step_rejects_singular():
    sys_ = dense_system(np.zeros((3, 3)), np.zeros(3), 1)
    with pytest.raises(np.linalg.LinAlgError):
        gauss_newton_step(sys_, 0.0)


def test_noise_free_ground_truth_is_fixed_point(rng):
    traj, theta = random_trajectory(rng, 20)
    clean = noise_free(traj)
    res = solve(build_graph(clean), clean.gt, theta)
    assert res.converged
    assert res.iterations == 0
    assert np.allclose(res.estimate, clean.gt, atol=1e-12)


def test_single_gps_solution_is_measurement(rng):
    z = np.array([2.0, -1.0, 2.5])
    g = FactorGraph(1, [Factor.gps(0, z)])
    for _ in range(5):
        x0 = rng.normal(scale=2.0, size=(1, 3))
        res = solve(g, x0, NoiseParams({GPS: rng.uniform(0.1, 2, 3)}))
        assert res.converged
        assert np.allclose(res.estimate[0, :2], z[:2], atol=1e-9)
        assert lie.wrap_angle(res.estimate[0, 2] - z[2]) == pytest.approx(0.0, abs=1e-9)


def test_two_poses_gps_on_first_only():
    x0_true = np.array([1.0, 1.0, 0.3])
    x1_true = lie.compose(x0_true, [1.0, 0.2, -0.4])
    g = FactorGraph(2, [Factor.gps(0, x0_true), Factor.odom(1, lie.between(x0_true, x1_true))])
    res = solve(g, np.zeros((2, 3)), NoiseParams({GPS: [1, 1, 1], ODOM: [0.1, 0.1, 0.1]}))
    assert res.converged
    assert np.allclose(res.estimate, [x0_true, x1_true], atol=1e-9)


def test_converged_solution_is_stationary(rng):
    for _ in range(5):
        traj, theta = random_trajectory(rng, 30, switched=True)
        g = build_graph(traj)
        res = solve(g, dead_reckoning(traj.gps[0], traj.odom), theta)
        assert res.converged
        assert np.max(np.abs(linearize(g, res.estimate, theta).gradient)) < 1e-6


def test_iteration_cap_flags_non_convergence(rng):
    traj, theta = random_trajectory(rng, 30)
    g = build_graph(traj)
    res = solve(g, dead_reckoning(traj.gps[0], traj.odom) + 1.0, theta, SolverOptions(max_iterations=1))
    assert not res.converged


def test_scaling_theta_leaves_solution_unchanged(rng):
    traj, theta = random_trajectory(rng, 10)
    g = build_graph(traj)
    x0 = dead_reckoning(traj.gps[0], traj.odom)
    ref = solve(g, x0, theta).estimate
    for c in (0.01, 100.0):
        assert np.allclose(solve(g, x0, theta.scaled(c)).estimate, ref, atol=1e-8)


def test_solve_input_checks(rng):
    traj, theta = random_trajectory(rng, 5)
    g = build_graph(traj)
    with pytest.raises(StructuralError):
        solve(g, np.zeros((4, 3)), theta)
    with pytest.raises(StructuralError):
        solve(g, traj.gt, NoiseParams({GPS: [1, 1, 1]}))
    with pytest.raises(ValueError):
        SolverOptions(step_tol=0.0)


def test_dead_reckoning_chains_odometry():
    odom = np.array([[1.0, 0, np.pi / 2], [1.0, 0, 0]])
    x = dead_reckoning([0.0, 0.0, 0.0], odom)
    assert np.allclose(x, [[0, 0, 0], [1, 0, np.pi / 2], [1, 1, np.pi / 2]])


def test_retract_is_left_plus(rng):
    x = rng.normal(size=(4, 3))
    d = rng.normal(scale=0.1, size=(4, 3))
    assert np.allclose(solver.retract(x, d), lie.compose(lie.exp(d), x))


def test_solve_many_matches_lone_solves_bitwise(rng):
    traj, theta = random_trajectory(rng, 40, switched=True)
    g = build_graph(traj)
    v = theta.to_vector()
    thetas = [NoiseParams.from_vector(theta.classes, v * rng.uniform(0.5, 2.0, v.size))
              for _ in range(5)]
    starts = traj.gt + rng.normal(scale=0.02, size=(5,) + traj.gt.shape)
    lone = [solve(g, x0, th) for x0, th in zip(starts, thetas)]
    for sel in ([0, 1, 2, 3, 4], [3, 1], [4]):
        many = solve_many(g, starts[sel], [thetas[i] for i in sel])
        for i, res in zip(sel, many):
            assert np.array_equal(res.estimate, lone[i].estimate)
            assert (res.iterations, res.converged, res.final_error) == (
                lone[i].iterations, lone[i].converged, lone[i].final_error)


def test_solve_many_argument_checks(rng):
    traj, theta = random_trajectory(rng, 6)
    g = build_graph(traj)
    assert solve_many(g, traj.gt, []) == []
    with pytest.raises(StructuralError):
        solve_many(g, np.stack([traj.gt] * 3), [theta, theta])
    with pytest.raises(StructuralError):
        solve_many(g, traj.gt, [theta, NoiseParams({GPS: [1.0, 1.0, 1.0]})])
