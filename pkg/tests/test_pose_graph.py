import math

import numpy as np
import pytest

from lidarloop.cell_map import CellMap
from lidarloop.core_math import InvalidInputError, RigidTransform, random_rotation, se3_exp
from lidarloop.pose_graph import (
    EdgeKind,
    PoseEdge,
    PoseGraph,
    PreconditionError,
    apply_correction,
    edge_jacobians,
    edge_residual,
    loop_information,
    translation_error,
)


def yaw(deg, t=(0.0, 0.0, 0.0)):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return RigidTransform(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.array(t, float))


def square_truth(side=40.0, step=4.0):
    """Poses every ``step`` metres around a square, ending back at the start."""
    poses = []
    per = int(side / step)
    for k in range(4):
        corner = yaw(90 * k)
        start = [np.zeros(3), [side, 0, 0], [side, side, 0], [0, side, 0]][k]
        for i in range(per):
            p = corner.rotation @ np.array([i * step, 0.0, 0.0]) + np.asarray(start, float)
            poses.append(RigidTransform(corner.rotation, p))
    poses.append(RigidTransform(yaw(360).rotation, np.zeros(3)))
    return poses


def drifted(truth, deg_per_step=0.3, scale=1.01):
    out = [truth[0]]
    for a, b in zip(truth[:-1], truth[1:]):
        rel = a.inverse() @ b
        rel = RigidTransform(yaw(deg_per_step).rotation @ rel.rotation, scale * rel.translation)
        out.append(out[-1] @ rel)
    return out


def chain_graph(poses, odom=None):
    odom = poses if odom is None else odom
    g = PoseGraph()
    for i, p in enumerate(poses):
        g.add_node(i, p)
    for i in range(1, len(poses)):
        g.add_odometry_edge(i - 1, i, odom[i - 1], odom[i])
    return g


def test_odometry_edge_measurement():
    a, b = yaw(10, (1, 2, 0)), yaw(40, (3, -1, 0.5))
    g = chain_graph([a, b])
    e = g.edges[0]
    assert e.kind is EdgeKind.ODOMETRY
    assert np.allclose((a @ e.measurement).matrix(), b.matrix(), atol=1e-12)
    assert np.allclose(edge_residual(e, a, b), 0.0, atol=1e-12)
    with pytest.raises(InvalidInputError):
        g.add_odometry_edge(0, 2)


def test_chain_recovers_odometry():
    rng = np.random.default_rng(0)
    truth = [RigidTransform.identity()]
    for _ in range(9):
        truth.append(truth[-1] @ RigidTransform(random_rotation(rng, 0.3), rng.normal(size=3)))
    start = [truth[0]] + [p @ se3_exp(0.1 * rng.normal(size=6)) for p in truth[1:]]
    g = chain_graph(start, truth)
    rep = g.optimize()
    assert rep.final_cost < 1e-16 * (1 + rep.initial_cost)
    for i, p in enumerate(truth):
        assert np.allclose(g.pose(i).matrix(), p.matrix(), atol=1e-6)
    assert np.all(np.diff(rep.cost_history) <= 0)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(20):
        xi = RigidTransform(random_rotation(rng), rng.normal(size=3))
        xj = RigidTransform(random_rotation(rng), rng.normal(size=3))
        z = RigidTransform(random_rotation(rng), rng.normal(size=3))
        # keep the residual away from the pi singularity of the log
        xj = xi @ z @ se3_exp(0.8 * rng.normal(size=6) / 3)
        e = PoseEdge(0, 1, z, np.eye(6), EdgeKind.LOOP)
        r, ji, jj = edge_jacobians(e, xi, xj)
        eps = 1e-6
        for k in range(6):
            d = np.zeros(6)
            d[k] = eps
            num_i = (edge_residual(e, xi @ se3_exp(d), xj) - edge_residual(e, xi @ se3_exp(-d), xj)) / (2 * eps)
            num_j = (edge_residual(e, xi, xj @ se3_exp(d)) - edge_residual(e, xi, xj @ se3_exp(-d))) / (2 * eps)
            assert np.allclose(ji[:, k], num_i, atol=1e-5)
            assert np.allclose(jj[:, k], num_j, atol=1e-5)


def test_square_loop_with_true_loop_edge():
    truth = square_truth()
    odom = drifted(truth)
    g = chain_graph(odom)
    n = len(truth) - 1
    z = truth[0].inverse() @ truth[n]
    g.add_edge(PoseEdge(0, n, z, loop_information(0.01, 0.1), EdgeKind.LOOP))
    before = translation_error(odom[n], truth[n])
    g.optimize()
    after = translation_error(g.pose(n), truth[n])
    assert before > 1.0
    assert after <= 0.1 * before


def test_gauge_invariance():
    truth = square_truth(step=8.0)
    odom = drifted(truth)
    n = len(truth) - 1
    gmove = yaw(33, (5, -2, 1)) @ RigidTransform(random_rotation(np.random.default_rng(2), 0.4), np.zeros(3))
    results = []
    for shift in (RigidTransform.identity(), gmove):
        start = [shift @ p for p in odom]
        g = chain_graph(start)
        z = truth[0].inverse() @ truth[n]
        g.add_edge(PoseEdge(0, n, z, np.eye(6), EdgeKind.LOOP))
        g.optimize()
        results.append([g.pose(i) for i in range(n + 1)])
    for a, b in zip(*results):
        assert np.allclose((gmove @ a).matrix(), b.matrix(), atol=1e-6)


def test_loop_information_scales_translation_only():
    info = loop_information(0.05, 0.1)
    assert np.allclose(np.diag(info), [4, 4, 4, 1, 1, 1])
    assert loop_information(0.0, 0.1)[0, 0] == pytest.approx(1e4)


def test_loop_edge_needs_accepted_alignment():
    g = chain_graph([RigidTransform.identity(), yaw(5, (1, 0, 0))])

    class Result:
        accepted = False
        relative_pose = RigidTransform.identity()
        mean_residual = 0.05

    with pytest.raises(PreconditionError):
        g.add_loop_edge(Result(), 1, 0)
    Result.accepted = True
    e = g.add_loop_edge(Result(), 1, 0)
    assert e.kind is EdgeKind.LOOP and e.from_id == 0 and e.to_id == 1


def test_edge_validation():
    with pytest.raises(InvalidInputError):
        PoseEdge(1, 1, RigidTransform.identity(), np.eye(6), EdgeKind.LOOP)
    bad = np.eye(6)
    bad[0, 1] = 1.0
    with pytest.raises(InvalidInputError):
        PoseEdge(0, 1, RigidTransform.identity(), bad, EdgeKind.LOOP)
    with pytest.raises(InvalidInputError):
        PoseEdge(0, 1, RigidTransform.identity(), -np.eye(6), EdgeKind.LOOP)


def test_disconnected_graph_rejected():
    g = PoseGraph()
    g.add_node(0, RigidTransform.identity())
    g.add_node(1, RigidTransform.identity())
    with pytest.raises(InvalidInputError):
        g.optimize()


def test_single_node_is_a_no_op():
    g = PoseGraph()
    g.add_node(0, yaw(3))
    rep = g.optimize()
    assert rep.converged and rep.final_cost == 0.0


def wall_frame(rng, n=400):
    """Points on the plane x = 3 in front of the sensor."""
    return np.column_stack([np.full(n, 3.0) + rng.normal(0, 0.002, n), rng.uniform(-4, 4, n), rng.uniform(-1, 1, n)])


def test_apply_correction_thins_the_wall():
    rng = np.random.default_rng(3)
    truth = [RigidTransform.identity() for _ in range(30)]
    # three keyframes of ten frames; each later keyframe is offset along the wall normal
    odom = [RigidTransform(np.eye(3), np.array([0.15 * (f // 10), 0.0, 0.0])) for f in range(30)]
    frames = [wall_frame(rng) for _ in range(30)]
    cmap = CellMap.from_frames(10.0, list(zip(frames, odom)))
    g = PoseGraph()
    for k in range(3):
        g.add_node(k, odom[10 * k])
    g.last_initial_poses = g.poses()
    for k in range(3):
        g.nodes[k].pose = truth[10 * k]
    ranges = {k: (10 * k, 10 * k + 9) for k in range(3)}
    poses, rebuilt = apply_correction(g, odom, ranges, cmap)
    for p, t in zip(poses, truth):
        assert np.allclose(p.matrix(), t.matrix(), atol=1e-12)

    def thickness(m):
        return max(float(np.sqrt(c.covariance[0, 0])) for c in m.cells())

    assert thickness(rebuilt) < 0.1 * thickness(cmap)
    assert rebuilt.num_points == cmap.num_points


def test_apply_correction_extends_to_trailing_frames():
    g = PoseGraph()
    g.add_node(0, RigidTransform.identity())
    g.last_initial_poses = g.poses()
    g.nodes[0].pose = yaw(0, (1, 0, 0))
    out = apply_correction(g, [RigidTransform.identity()] * 5, {0: (1, 2)})
    assert all(np.allclose(p.translation, [1, 0, 0]) for p in out)


def test_g2o_export(tmp_path):
    g = chain_graph([RigidTransform.identity(), yaw(20, (1, 1, 0)), yaw(40, (2, 1, 0))])
    g.write_g2o(tmp_path / "g.g2o")
    lines = (tmp_path / "g.g2o").read_text().splitlines()
    assert sum(line.startswith("VERTEX_SE3:QUAT") for line in lines) == 3
    assert "FIX 0" in lines
    edges = [line.split() for line in lines if line.startswith("EDGE_SE3:QUAT")]
    assert len(edges) == 2 and all(len(e) == 3 + 7 + 21 for e in edges)


def test_four_node_square_with_half_metre_drift():
    truth = [yaw(90 * k, p) for k, p in enumerate(([0, 0, 0], [10, 0, 0], [10, 10, 0], [0, 10, 0]))]
    g = PoseGraph()
    for k, p in enumerate(truth):
        # drift accumulates to 0.5 m at the last node
        g.add_node(k, RigidTransform(p.rotation, p.translation + [0.5 * k / 3, 0.2 * k / 3, 0.0]))
    for k in range(1, 4):
        g.add_odometry_edge(k - 1, k, truth[k - 1], truth[k])
    g.add_edge(PoseEdge(3, 0, truth[3].inverse() @ truth[0], np.eye(6), EdgeKind.LOOP))
    initial = [edge_residual(e, g.pose(e.from_id), g.pose(e.to_id)) for e in g.edges]
    assert sum(np.linalg.norm(r) > 1e-3 for r in initial) >= 2
    rep = g.optimize()
    assert rep.final_cost < 1e-10 * rep.initial_cost
    for k, p in enumerate(truth):
        assert np.allclose(g.pose(k).matrix(), p.matrix(), atol=1e-6)


def test_conflicting_loop_edges_reach_a_stationary_point():
    truth = square_truth(step=10.0)
    n = len(truth) - 1
    g = chain_graph(drifted(truth))
    z = truth[0].inverse() @ truth[n]
    g.add_edge(PoseEdge(0, n, z @ yaw(2, (0.3, 0, 0)), np.eye(6), EdgeKind.LOOP))
    g.add_edge(PoseEdge(0, n, z @ yaw(-2, (-0.3, 0.2, 0)), np.eye(6), EdgeKind.LOOP))
    rep = g.optimize()
    assert rep.converged and rep.final_cost > 0.0
    assert np.all(np.diff(rep.cost_history) <= 0)
    # no small right perturbation of any free node lowers the cost any further
    base = g.cost()
    rng = np.random.default_rng(5)
    for _ in range(30):
        k = int(rng.integers(1, n + 1))
        poses = g.poses()
        poses[k] = poses[k] @ se3_exp(1e-4 * rng.normal(size=6))
        assert g.cost(poses) >= base - 1e-12
