"""Trajectory and loop metrics against a ground-truth trajectory.

Trajectories are compared after anchoring the estimate at the first ground
truth pose (``gt[0] * est[0]^-1`` applied on the left), which is the identity
for synthetic runs whose odometry starts at the true pose.

A ground-truth revisit is a keyframe pair ``(q, m)`` with ``m <= q - k``
(the temporal exclusion) whose true reference positions lie within twice the
largest cell side.  Precision counts loops accepted by alignment; recall is
per query keyframe that has at least one revisit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core_math import InvalidInputError, RigidTransform
from ..loop_detector import LoopRecord, read_loop_report
from . import io
from .config import Config, ConfigError, load_config


@dataclass
class Metrics:
    endpoint_before: float
    endpoint_after: float
    ate_before: float
    ate_after: float
    precision: float  # NaN when no loop was accepted
    recall: float  # NaN when the run has no revisits
    accepted_loops: int
    true_loops: int
    revisit_queries: int

    @property
    def endpoint_ratio(self) -> float:
        return self.endpoint_after / self.endpoint_before if self.endpoint_before > 0 else math.nan

    def to_json(self) -> str:
        d = asdict(self)
        d["endpoint_ratio"] = self.endpoint_ratio
        return json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()},
                          indent=2, sort_keys=True)


def _anchored(est: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> np.ndarray:
    a = gt[0] @ est[0].inverse()
    return np.array([(a @ p).translation for p in est])


def trajectory_errors(est: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> tuple[float, float]:
    """(endpoint translation error, translation RMSE)."""
    if len(est) != len(gt):
        raise InvalidInputError(f"trajectory has {len(est)} poses, ground truth {len(gt)}")
    if len(est) == 0:
        raise InvalidInputError("empty trajectory")
    p = _anchored(est, gt)
    q = np.array([g.translation for g in gt])
    d = np.linalg.norm(p - q, axis=1)
    return float(d[-1]), float(np.sqrt(np.mean(d ** 2)))


def revisit_pairs(first_frames: dict[int, int], gt: Sequence[RigidTransform], cell_size,
                  temporal_exclusion: int) -> set[tuple[int, int]]:
    radius = 2.0 * float(np.max(np.atleast_1d(cell_size)))
    ids = sorted(first_frames)
    pos = {k: gt[first_frames[k]].translation for k in ids}
    out = set()
    for q in ids:
        for m in ids:
            if m <= q - temporal_exclusion and np.linalg.norm(pos[q] - pos[m]) <= radius:
                out.add((q, m))
    return out


def loop_scores(loops: Sequence[LoopRecord], revisits: set[tuple[int, int]]) -> tuple[float, float, int, int, int]:
    accepted = [(lp.query_id, lp.match_id) for lp in loops if lp.accepted_by_alignment]
    true = [p for p in accepted if p in revisits]
    precision = len(true) / len(accepted) if accepted else math.nan
    queries = {q for q, _ in revisits}
    hit = {q for q, _ in true}
    recall = len(hit) / len(queries) if queries else math.nan
    return precision, recall, len(accepted), len(true), len(queries)


def evaluate(before: Sequence[RigidTransform], after: Sequence[RigidTransform], loops: Sequence[LoopRecord],
             first_frames: dict[int, int], gt: Sequence[RigidTransform], cell_size=1.0,
             temporal_exclusion: int = 5) -> Metrics:
    eb, rb = trajectory_errors(before, gt)
    ea, ra = trajectory_errors(after, gt)
    revisits = revisit_pairs(first_frames, gt, cell_size, temporal_exclusion)
    precision, recall, n_acc, n_true, n_q = loop_scores(loops, revisits)
    return Metrics(eb, ea, rb, ra, precision, recall, n_acc, n_true, n_q)


def evaluate_report(report, gt: Sequence[RigidTransform], config: Config | None = None) -> Metrics:
    cfg = config or getattr(report, "config", None) or Config()
    first = {kf.id: kf.first_frame for kf in report.keyframes}
    return evaluate(report.trajectory_before, report.trajectory_after, report.loops, first, gt,
                    cfg.cell_size, cfg.temporal_exclusion)


def read_keyframes(path) -> dict[int, int]:
    with open(Path(path), newline="") as fh:
        return {int(r["id"]): int(r["first_frame"]) for r in csv.DictReader(fh)}


def evaluate_dir(report_dir, ground_truth) -> Metrics:
    """Metrics for a directory written by the ``run`` command."""
    d = Path(report_dir)
    cfg = Config()
    if (d / "config.toml").exists():
        try:
            cfg = load_config(d / "config.toml")
        except ConfigError as exc:
            raise io.DatasetIOError(str(exc)) from exc
    _, before = io.read_tum(d / "trajectory_before.tum")
    _, after = io.read_tum(d / "trajectory_after.tum")
    _, gt = io.read_tum(ground_truth)
    try:
        loops = read_loop_report(d / "loops.csv")
        first = read_keyframes(d / "keyframes.csv")
    except (OSError, KeyError, ValueError) as exc:
        raise io.DatasetIOError(f"{d}: {exc}") from exc
    return evaluate(before, after, loops, first, gt, cfg.cell_size, cfg.temporal_exclusion)
