from __future__ import annotations

import numpy as np
import pytest

from sessiongraph import geometry as geo
from sessiongraph.geometry import Pose
from sessiongraph.graph import Edge, EdgeKind, PoseGraph, Role, Vertex, VertexId
from sessiongraph.optimizer import (Convergence, OptimizationProblem, Termination, build_problem,
                                    chi_squared, jacobian_check, localization_problem,
                                    mapping_problem, marginal_covariances, optimize, residual)

from conftest import random_pose, random_spd


def V(i, s=0):
    return VertexId(s, i)


def circle(m=10, radius=5.0):
    return [Pose.from_xyz_yaw(radius * np.cos(a), radius * np.sin(a), 0.0, a + np.pi / 2)
            for a in np.linspace(0, 2 * np.pi, m, endpoint=False)]


def circle_problem(rng, m=10, sigma=0.1):
    truth = circle(m)
    edges = [Edge(V(k), V((k + 1) % m) if k + 1 < m else V(0), EdgeKind.LOOP if k + 1 == m else EdgeKind.INTRA,
                  geo.inverse(truth[k]) @ truth[(k + 1) % m], np.eye(6)) for k in range(m)]
    edges.append(Edge(V(0), V(0), EdgeKind.PRIOR, truth[0], np.eye(6)))
    init = {V(k): truth[k] @ geo.exp(sigma * rng.standard_normal(6)) for k in range(m)}
    return OptimizationProblem(init, edges, [V(k) for k in range(m)], []), truth


def random_problem(rng, m=6, extra=4, fixed=1, tree=True):
    poses = {V(k): random_pose(rng, max_angle=2.0) for k in range(m)}
    pairs = [(k, k + 1) for k in range(m - 1)] if tree else []
    while len(pairs) < m - 1 + extra:
        a, b = rng.choice(m, 2, replace=False)
        pairs.append((int(a), int(b)))
    edges = []
    for a, b in pairs:
        Z = geo.inverse(poses[V(a)]) @ poses[V(b)] @ geo.exp(0.3 * rng.standard_normal(6))
        edges.append(Edge(V(a), V(b), EdgeKind.LOOP, Z, random_spd(rng)))
    edges.append(Edge(V(0), V(0), EdgeKind.PRIOR, random_pose(rng), random_spd(rng)))
    free = [V(k) for k in range(fixed, m)]
    return OptimizationProblem(poses, edges, free, [V(k) for k in range(fixed)])


def test_residual_examples(rng):
    a, Z = random_pose(rng), random_pose(rng)
    poses = {V(0): a, V(1): a @ Z}
    e = Edge(V(0), V(1), EdgeKind.LOOP, Z, np.eye(6))
    np.testing.assert_allclose(residual(e, poses), 0, atol=1e-12)
    same = {V(0): a, V(1): a}
    np.testing.assert_allclose(residual(Edge(V(0), V(1), EdgeKind.LOOP, Pose.identity(), np.eye(6)), same),
                               0, atol=1e-12)
    xi = 1e-4 * rng.standard_normal(6)
    pert = {V(0): a, V(1): a @ Z @ geo.exp(xi)}
    r = residual(e, pert)
    assert np.max(np.abs(r - xi)) / np.max(np.abs(xi)) < 1e-5


def test_prior_residual(rng):
    Z = random_pose(rng)
    e = Edge(V(0), V(0), EdgeKind.PRIOR, Z, np.eye(6))
    np.testing.assert_allclose(residual(e, {V(0): Z}), 0, atol=1e-12)


def test_chi_squared_examples(rng):
    e = Edge(V(0), V(1), EdgeKind.INTRA, Pose.identity(), np.eye(6))
    poses = {V(0): Pose.identity(), V(1): geo.exp(np.array([1.0, 0, 0, 0, 0, 0]))}
    p = OptimizationProblem(poses, [e], [V(1)], [V(0)], kernels={EdgeKind.INTRA: None})
    assert chi_squared(p) == pytest.approx(1.0, abs=1e-12)
    poses[V(1)] = Pose.identity()
    assert chi_squared(p) == 0.0


def test_chi_squared_matches_brute_force(rng):
    p = random_problem(rng, m=8, extra=3)
    p.kernels = {k: None for k in EdgeKind}
    brute = 0.0
    for e in p.edges:
        r = residual(e, p.poses)
        brute += float(r @ e.information @ r)
    assert chi_squared(p) == pytest.approx(brute, rel=1e-12)


def test_huber_is_linear_beyond_delta():
    e = Edge(V(0), V(1), EdgeKind.LOOP, Pose.identity(), np.eye(6))
    poses = {V(0): Pose.identity(), V(1): geo.exp(np.array([3.0, 0, 0, 0, 0, 0]))}
    p = OptimizationProblem(poses, [e], [V(1)], [V(0)])
    assert chi_squared(p) == pytest.approx(2 * 1.0 * 3.0 - 1.0)


def test_circle_converges(rng):
    p, truth = circle_problem(rng)
    res = optimize(p)
    assert res.termination is Termination.CONVERGED
    assert res.final_chi2 < 1e-10
    for k, T in enumerate(truth):
        ang, tr = geo.pose_distance(res.poses[V(k)], T)
        assert ang < 1e-6 and tr < 1e-6


def test_closed_form_inter_edge(rng):
    ref = random_pose(rng)
    Z = random_pose(rng, scale=2.0)
    g = PoseGraph()
    g.add_vertex(Vertex(V(0), ref, 0.0, Role.REFERENCE))
    g.add_vertex(Vertex(V(0, 1), random_pose(rng), 0.0, Role.ACTIVE))
    g.add_edge(Edge(V(0, 1), V(0), EdgeKind.INTER, geo.inverse(Z), np.eye(6)))
    res = optimize(localization_problem(g, [V(0, 1)]))
    ang, tr = geo.pose_distance(res.poses[V(0, 1)], ref @ Z)
    assert ang < 1e-9 and tr < 1e-9
    assert res.iterations <= 8


def test_zero_free_vertices(rng):
    p = random_problem(rng)
    q = OptimizationProblem(p.poses, p.edges, [], list(p.poses))
    res = optimize(q)
    assert res.termination is Termination.CONVERGED and res.iterations == 0
    assert res.final_chi2 == res.initial_chi2


def test_gauge_failure_without_anchor():
    g = PoseGraph()
    g.add_vertex(Vertex(V(0), Pose.identity()))
    g.add_vertex(Vertex(V(1), Pose.from_xyz_yaw(1, 0)))
    g.add_edge(Edge(V(0), V(1), EdgeKind.INTRA, Pose.from_xyz_yaw(1, 0), np.eye(6)))
    res = optimize(build_problem(g, [V(0), V(1)]))
    assert res.termination is Termination.GAUGE_FAILURE


def test_monotone_cost(rng):
    for _ in range(5):
        p = random_problem(rng, m=7, extra=5)
        costs = []
        for it in range(1, 8):
            p.convergence = Convergence(max_iterations=it)
            costs.append(optimize(p).final_chi2)
        assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
        assert costs[0] <= chi_squared(p)


def test_jacobians_random_graphs(rng):
    worst = max(jacobian_check(random_problem(rng, m=5, extra=3)) for _ in range(10))
    assert worst < 1e-5


def test_jacobian_linear_and_prior_cases():
    poses = {V(k): Pose((0, 0, 0, 1), (k, 0.5 * k, 0)) for k in range(4)}
    edges = [Edge(V(k), V(k + 1), EdgeKind.INTRA, Pose((0, 0, 0, 1), (1.1, 0.4, 0.1)), np.eye(6))
             for k in range(3)]
    p = OptimizationProblem(poses, edges, [V(1), V(2), V(3)], [V(0)])
    assert jacobian_check(p) < 1e-9
    prior = OptimizationProblem({V(0): Pose.identity()},
                                [Edge(V(0), V(0), EdgeKind.PRIOR, Pose.identity(), np.eye(6))], [V(0)], [])
    assert jacobian_check(prior) < 1e-9


def test_gauge_equivalence(rng):
    p = random_problem(rng, m=6, extra=4)
    p.edges = [e for e in p.edges if not e.is_unary]  # vertex 0 fixed anchors the gauge
    G = random_pose(rng)
    p.convergence = Convergence(max_iterations=200, relative_cost_tol=1e-15, update_norm_tol=1e-13)
    moved = OptimizationProblem({k: G @ v for k, v in p.poses.items()}, p.edges, p.free, p.fixed,
                                convergence=p.convergence)
    a, b = optimize(p), optimize(moved)
    assert b.final_chi2 == pytest.approx(a.final_chi2, abs=1e-9)
    for vid in p.free:
        ang, tr = geo.pose_distance(G @ a.poses[vid], b.poses[vid])
        assert ang < 1e-6 and tr < 1e-6


def test_huber_below_delta_equals_plain(rng):
    p, _ = circle_problem(rng, sigma=1e-4)
    p.edges = [Edge(e.source, e.target, EdgeKind.LOOP if not e.is_unary else e.kind, e.measurement,
                    1e-4 * np.eye(6) if not e.is_unary else e.information) for e in p.edges]
    plain = OptimizationProblem(p.poses, p.edges, p.free, p.fixed, kernels={k: None for k in EdgeKind})
    a, b = optimize(p), optimize(plain)
    for vid in p.free:
        np.testing.assert_allclose(a.poses[vid].translation, b.poses[vid].translation, atol=1e-12)
        np.testing.assert_allclose(a.poses[vid].quat, b.poses[vid].quat, atol=1e-12)


def _snapshot(rng, n_active=4, n_ref=6):
    g = PoseGraph()
    for k in range(n_ref):
        g.add_vertex(Vertex(V(k, 0), random_pose(rng), 0.0, Role.REFERENCE))
    for k in range(n_ref - 1):
        Z = geo.inverse(g.vertices[V(k)].pose) @ g.vertices[V(k + 1)].pose
        g.add_edge(Edge(V(k), V(k + 1), EdgeKind.INTRA, Z, random_spd(rng)), check_roles=False)
    for k in range(n_active):
        g.add_vertex(Vertex(V(k, 1), random_pose(rng), 0.0, Role.ACTIVE))
        if k:
            g.add_edge(Edge(V(k - 1, 1), V(k, 1), EdgeKind.INTRA, random_pose(rng, 0.3, 1.0), random_spd(rng)))
        r = V(int(rng.integers(n_ref)))
        g.add_edge(Edge(V(k, 1), r, EdgeKind.INTER, random_pose(rng, 0.5, 2.0), random_spd(rng)))
    return g


def test_mapping_with_fixed_reference_equals_localization(rng):
    g = _snapshot(rng)
    active = [v for v in g.vertices if v.session == 1]
    ref = [v for v in g.vertices if v.session == 0]
    a = optimize(localization_problem(g, active))
    b = optimize(mapping_problem(g, active, ref, fixed=ref))
    assert a.iterations == b.iterations and a.final_chi2 == b.final_chi2
    for vid in active:
        assert np.array_equal(a.poses[vid].quat, b.poses[vid].quat)
        assert np.array_equal(a.poses[vid].translation, b.poses[vid].translation)


def test_mapping_problem_adds_gauge_prior(rng):
    g = _snapshot(rng)
    active = [v for v in g.vertices if v.session == 1]
    ref = [v for v in g.vertices if v.session == 0]
    p = mapping_problem(g, active, ref)
    priors = [e for e in p.edges if e.is_unary]
    assert len(priors) == 1 and priors[0].source == min(ref)
    res = optimize(p)
    assert res.termination is not Termination.GAUGE_FAILURE
    assert res.final_chi2 <= res.initial_chi2


def test_marginal_covariance_matches_dense_inverse(rng):
    p = random_problem(rng, m=4, extra=2)
    # One vertex free: its covariance is the inverse of its 6x6 information block.
    q = OptimizationProblem(p.poses, p.edges, [V(3)], [V(0), V(1), V(2)], kernels={k: None for k in EdgeKind})
    info = np.zeros((6, 6))
    for e in q.edges:
        if V(3) in (e.source, e.target) and not e.is_unary:
            from sessiongraph.optimizer import edge_jacobians
            _, Ja, Jb = edge_jacobians(e, q.poses)
            J = Jb if e.target == V(3) else Ja
            info += J.T @ e.information @ J
    cov = marginal_covariances(q, [V(3), V(0)])
    np.testing.assert_allclose(cov["cov"][:6, :6], np.linalg.inv(info), rtol=1e-8, atol=1e-12)
    assert np.all(cov["cov"][6:, 6:] == 0)


def test_truth_does_not_affect_estimation(rng):
    g = _snapshot(rng)
    active = [v for v in g.vertices if v.session == 1]
    for v in g.vertices.values():
        v.truth = random_pose(rng)
    a = optimize(localization_problem(g, active))
    b = optimize(localization_problem(g.without_truth(), active))
    for vid in active:
        assert np.array_equal(a.poses[vid].translation, b.poses[vid].translation)
