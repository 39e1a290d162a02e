"""Keyframe pose graph with odometry and loop edges.

Edge residual for an edge i -> j with measurement Z is

    e = log(Z^-1 X_i^-1 X_j)

and the poses are perturbed on the right, ``X <- X exp(xi)``.  With that
convention

    de/dxi_j =  Jr^-1(e)
    de/dxi_i = -Jr^-1(e) Ad(X_j^-1 X_i)

The first node is held fixed.  Steps come from a damped normal-equation solve
(dense Cholesky) and are accepted only when the total cost drops.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core_math import (
    InvalidInputError,
    RigidTransform,
    adjoint,
    rotation_to_quat,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
    validate_transform,
)


class EdgeKind(enum.Enum):
    ODOMETRY = "odometry"
    LOOP = "loop"


class PreconditionError(ValueError):
    pass


@dataclass
class PoseNode:
    keyframe_id: int
    pose: RigidTransform


@dataclass
class PoseEdge:
    from_id: int
    to_id: int
    measurement: RigidTransform
    information: np.ndarray
    kind: EdgeKind

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise InvalidInputError("edge endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6) or not np.allclose(info, info.T, atol=1e-9):
            raise InvalidInputError("information must be a symmetric 6x6 matrix")
        if np.min(np.linalg.eigvalsh(info)) <= 0.0:
            raise InvalidInputError("information must be positive definite")
        self.information = info


@dataclass
class OptimizationReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    cost_history: list[float] = field(default_factory=list)


def edge_residual(edge: PoseEdge, xi: RigidTransform, xj: RigidTransform) -> np.ndarray:
    return se3_log(edge.measurement.inverse() @ xi.inverse() @ xj)


def edge_jacobians(edge: PoseEdge, xi: RigidTransform, xj: RigidTransform
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and its derivatives with respect to right perturbations of both ends."""
    e = edge_residual(edge, xi, xj)
    jr_inv = se3_right_jacobian_inv(e)
    jj = jr_inv
    ji = -jr_inv @ adjoint(xj.inverse() @ xi)
    return e, ji, jj


def loop_information(mean_residual: float, accept_distance: float) -> np.ndarray:
    """Identity with the translation block scaled by (accept / residual)^2."""
    info = np.eye(6)
    info[:3, :3] *= (accept_distance / max(mean_residual, 1e-3)) ** 2
    return info


class PoseGraph:
    def __init__(self):
        self.nodes: dict[int, PoseNode] = {}
        self.edges: list[PoseEdge] = []
        self.last_initial_poses: dict[int, RigidTransform] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def add_node(self, keyframe_id: int, pose: RigidTransform) -> PoseNode:
        if keyframe_id in self.nodes:
            raise InvalidInputError(f"node {keyframe_id} already exists")
        validate_transform(pose)
        node = PoseNode(keyframe_id, pose)
        self.nodes[keyframe_id] = node
        return node

    def pose(self, keyframe_id: int) -> RigidTransform:
        return self.nodes[keyframe_id].pose

    def poses(self) -> dict[int, RigidTransform]:
        return {k: n.pose for k, n in self.nodes.items()}

    def add_odometry_edge(self, prev_id: int, next_id: int, odom_prev: RigidTransform | None = None,
                          odom_next: RigidTransform | None = None) -> PoseEdge:
        """Edge ``prev -> next`` measuring ``odom_prev^-1 odom_next``.

        Without explicit odometry poses the current node poses are used.
        """
        if next_id != prev_id + 1:
            raise InvalidInputError(f"odometry edge needs consecutive ids, got {prev_id} -> {next_id}")
        for k in (prev_id, next_id):
            if k not in self.nodes:
                raise InvalidInputError(f"unknown node {k}")
        a = self.nodes[prev_id].pose if odom_prev is None else odom_prev
        b = self.nodes[next_id].pose if odom_next is None else odom_next
        edge = PoseEdge(prev_id, next_id, a.inverse() @ b, np.eye(6), EdgeKind.ODOMETRY)
        self.edges.append(edge)
        return edge

    def add_loop_edge(self, result, query_id: int, match_id: int, accept_distance: float = 0.1) -> PoseEdge:
        """Edge ``match -> query`` from an accepted alignment.

        ``result.relative_pose`` maps the query keyframe's points, as placed by
        the current query pose, onto the matched region, so the corrected query
        pose is ``relative_pose * X_q`` and the measurement is
        ``X_m^-1 * relative_pose * X_q``.
        """
        if not getattr(result, "accepted", False):
            raise PreconditionError("loop edge requires an accepted alignment")
        for k in (query_id, match_id):
            if k not in self.nodes:
                raise InvalidInputError(f"unknown node {k}")
        xm = self.nodes[match_id].pose
        xq = self.nodes[query_id].pose
        z = xm.inverse() @ result.relative_pose @ xq
        info = loop_information(result.mean_residual, accept_distance)
        edge = PoseEdge(match_id, query_id, z, info, EdgeKind.LOOP)
        self.edges.append(edge)
        return edge

    def add_edge(self, edge: PoseEdge) -> PoseEdge:
        for k in (edge.from_id, edge.to_id):
            if k not in self.nodes:
                raise InvalidInputError(f"unknown node {k}")
        self.edges.append(edge)
        return edge

    # -- optimization ------------------------------------------------------------

    def _check_connected(self) -> None:
        if not self.nodes:
            raise InvalidInputError("empty graph")
        adj: dict[int, list[int]] = {k: [] for k in self.nodes}
        for e in self.edges:
            adj[e.from_id].append(e.to_id)
            adj[e.to_id].append(e.from_id)
        start = next(iter(self.nodes))
        seen = {start}
        queue = deque([start])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        if len(seen) != len(self.nodes):
            raise InvalidInputError("pose graph is disconnected")

    def cost(self, poses: dict[int, RigidTransform] | None = None) -> float:
        poses = poses or self.poses()
        total = 0.0
        for e in self.edges:
            r = edge_residual(e, poses[e.from_id], poses[e.to_id])
            total += float(r @ e.information @ r)
        return total

    def _linearize(self, poses, order: dict[int, int], n_free: int):
        h = np.zeros((6 * n_free, 6 * n_free))
        g = np.zeros(6 * n_free)
        for e in self.edges:
            r, ji, jj = edge_jacobians(e, poses[e.from_id], poses[e.to_id])
            blocks = [(order.get(e.from_id), ji), (order.get(e.to_id), jj)]
            for a, ja in blocks:
                if a is None:
                    continue
                g[6 * a:6 * a + 6] += ja.T @ e.information @ r
                for b, jb in blocks:
                    if b is None:
                        continue
                    h[6 * a:6 * a + 6, 6 * b:6 * b + 6] += ja.T @ e.information @ jb
        return h, g

    def optimize(self, max_iterations: int = 100, tolerance: float = 1e-12,
                 damping: float = 1e-6) -> OptimizationReport:
        """Damped Gauss-Newton over every pose except the first node.

        Stops when the relative cost decrease of an accepted step falls below
        ``tolerance``, when the cost reaches zero, or after ``max_iterations``.
        """
        self._check_connected()
        ids = list(self.nodes)
        fixed = ids[0]
        free = [k for k in ids if k != fixed]
        order = {k: i for i, k in enumerate(free)}
        poses = self.poses()
        self.last_initial_poses = dict(poses)
        cost = self.cost(poses)
        history = [cost]
        initial = cost
        converged = not free or cost == 0.0
        lam = damping
        it = 0
        while not converged and it < max_iterations:
            it += 1
            h, g = self._linearize(poses, order, len(free))
            improved = False
            while lam < 1e16:
                a = h + lam * np.diag(np.diag(h) + 1.0)
                try:
                    step = -cho_solve(cho_factor(a), g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                cand = dict(poses)
                for k, i in order.items():
                    cand[k] = poses[k] @ se3_exp(step[6 * i:6 * i + 6])
                new_cost = self.cost(cand)
                if new_cost < cost:
                    rel = (cost - new_cost) / cost
                    poses, cost = cand, new_cost
                    history.append(cost)
                    lam = max(lam * 0.1, 1e-15)
                    improved = True
                    if rel < tolerance or cost == 0.0 or np.linalg.norm(step) < 1e-15:
                        converged = True
                    break
                if np.linalg.norm(step) < 1e-15:
                    break
                lam *= 10.0
            if not improved:
                # no descent direction left at machine precision: stationary point
                converged = True
        for k, p in poses.items():
            self.nodes[k].pose = p
        return OptimizationReport(it, initial, cost, converged, history)

    # -- export -------------------------------------------------------------------

    def write_g2o(self, path) -> None:
        with open(Path(path), "w") as fh:
            for k, n in self.nodes.items():
                fh.write(f"VERTEX_SE3:QUAT {k} {_pose_fields(n.pose)}\n")
            for k in list(self.nodes)[:1]:
                fh.write(f"FIX {k}\n")
            for e in self.edges:
                iu = np.triu_indices(6)
                info = " ".join(repr(float(v)) for v in e.information[iu])
                fh.write(f"EDGE_SE3:QUAT {e.from_id} {e.to_id} {_pose_fields(e.measurement)} {info}\n")


def _pose_fields(t: RigidTransform) -> str:
    q = rotation_to_quat(t.rotation)
    return " ".join(repr(float(v)) for v in (*t.translation, *q))


def keyframe_corrections(before: dict[int, RigidTransform], after: dict[int, RigidTransform]
                         ) -> dict[int, RigidTransform]:
    """Left correction ``after * before^-1`` per keyframe."""
    return {k: after[k] @ before[k].inverse() for k in after if k in before}


def apply_correction(graph: PoseGraph, frame_poses: Sequence[RigidTransform],
                     keyframe_frame_ranges: dict[int, tuple[int, int]], cell_map=None,
                     before: dict[int, RigidTransform] | None = None):
    """Corrected per-frame poses, plus the rebuilt map when ``cell_map`` is given.

    Each frame inside a keyframe's range gets that keyframe's correction.
    Frames after the last keyframe take the last correction; frames before
    the first take the first.
    """
    before = graph.last_initial_poses if before is None else before
    corr = keyframe_corrections(before, graph.poses())
    n = len(frame_poses)
    owner = np.full(n, -1, dtype=np.int64)
    for kid, (a, b) in sorted(keyframe_frame_ranges.items()):
        if kid in corr:
            owner[a:b + 1] = kid
    known = [k for k in sorted(keyframe_frame_ranges) if k in corr]
    out = list(frame_poses)
    if known:
        last = -1
        first = known[0]
        for f in range(n):
            if owner[f] >= 0:
                last = int(owner[f])
            kid = last if last >= 0 else first
            c = corr[kid]
            out[f] = c @ frame_poses[f]
    if cell_map is None:
        return out
    return out, cell_map.rebuild(out)


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def rotation_error_deg(a: RigidTransform, b: RigidTransform) -> float:
    r = a.rotation.T @ b.rotation
    return math.degrees(math.acos(min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))))
