"""End-to-end loop-closure run over a dataset of frames and odometry poses.

Per frame: register into the global cell map at the current pose estimate.
Every ``keyframe_size`` registered frames: build the keyframe's own cell map,
classify, compute its histograms, query the database, then insert it.  The
best candidate is aligned; an accepted alignment adds a loop edge, the pose
graph is optimized, every frame pose is corrected rigidly per keyframe and
the global map is rebuilt.  Later frames inherit the latest correction.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..alignment import AlignmentError, AlignmentResult, align, initial_guesses_from_histograms
from ..cell_map import CellMap
from ..core_math import InvalidInputError, RigidTransform
from ..descriptor import Keyframe, build_keyframe, write_histogram_csv
from ..loop_detector import KeyframeDatabase, LoopRecord, write_loop_report
from ..pose_graph import OptimizationReport, PoseGraph, apply_correction
from . import io
from .config import Config, dump_config

log = logging.getLogger(__name__)

STAGES = ("registration", "histogram", "similarity", "alignment", "optimization", "rebuild")


@dataclass
class Dataset:
    """Frames are arrays or zero-argument loaders (so large datasets stay on disk)."""

    frames: Sequence[np.ndarray | Callable[[], np.ndarray]]
    poses: list[RigidTransform]
    timestamps: np.ndarray
    ground_truth: list[RigidTransform] | None = None
    names: list[str] | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.frames) != len(self.poses):
            raise InvalidInputError(f"{len(self.frames)} frames but {len(self.poses)} poses")
        if len(self.timestamps) != len(self.poses):
            raise InvalidInputError("timestamp count differs from pose count")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise InvalidInputError("timestamps must be strictly increasing")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.poses):
            raise InvalidInputError("ground truth length differs from trajectory length")

    def __len__(self) -> int:
        return len(self.poses)

    def frame(self, k: int) -> np.ndarray:
        f = self.frames[k]
        return f() if callable(f) else f


def load_dataset(frames_dir, trajectory, ground_truth=None) -> Dataset:
    files = io.list_frames(frames_dir)
    stamps, poses = io.read_tum(trajectory)
    gt = None
    if ground_truth is not None:
        gt_stamps, gt = io.read_tum(ground_truth)
        if len(gt) != len(poses):
            raise InvalidInputError(f"{ground_truth}: {len(gt)} poses, trajectory has {len(poses)}")
    if len(files) != len(poses):
        raise InvalidInputError(f"{frames_dir}: {len(files)} frames, trajectory has {len(poses)} poses")
    loaders = [(lambda p=p: io.read_points(p)) for p in files]
    return Dataset(loaders, poses, stamps, gt, [p.name for p in files])


@dataclass
class KeyframeInfo:
    id: int
    first_frame: int
    last_frame: int
    num_features: int
    weakly_invariant: bool


@dataclass
class RunReport:
    timestamps: np.ndarray
    trajectory_before: list[RigidTransform]
    trajectory_after: list[RigidTransform]
    loops: list[LoopRecord]
    keyframes: list[KeyframeInfo]
    timing: dict[str, list[float]]
    optimizations: list[OptimizationReport] = field(default_factory=list)
    alignments: dict[tuple[int, int], AlignmentResult] = field(default_factory=dict)
    skipped_frames: int = 0
    skipped_points: int = 0
    map_cells: int = 0
    histograms: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    final_map: CellMap | None = None
    graph: PoseGraph | None = None
    registered_frames: list[int] = field(default_factory=list)
    config: Config | None = None

    def timing_summary(self) -> list[tuple[str, int, float, float]]:
        rows = []
        for stage in STAGES:
            v = np.asarray(self.timing.get(stage, []), dtype=float)
            if v.size:
                rows.append((stage, int(v.size), float(v.mean()), float(np.percentile(v, 99))))
            else:
                rows.append((stage, 0, float("nan"), float("nan")))
        return rows


class _Timer:
    def __init__(self, sink: dict[str, list[float]], stage: str, per: int = 1):
        self.sink, self.stage, self.per = sink, stage, max(per, 1)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        dt = time.perf_counter() - self.t0
        if self.per == 1:
            self.sink[self.stage].append(dt)
        else:
            self.sink[self.stage].extend([dt / self.per] * self.per)
        return False


def _clean(points) -> tuple[np.ndarray | None, int]:
    try:
        pts = np.asarray(points, dtype=float)
    except (TypeError, ValueError):
        return None, 0
    if pts.ndim != 2 or pts.shape[1] < 3:
        return None, 0
    pts = pts[:, :3]
    ok = np.all(np.isfinite(pts), axis=1)
    return pts[ok], int((~ok).sum())


def run(config: Config, dataset: Dataset) -> RunReport:
    if len(dataset) == 0:
        raise InvalidInputError("dataset has no frames")
    cfg = config
    dparams = cfg.descriptor_params()
    aparams = cfg.alignment_params()
    timing: dict[str, list[float]] = defaultdict(list)

    gmap = CellMap(cfg.cell_size)
    db = KeyframeDatabase(cfg.temporal_exclusion)
    graph = PoseGraph()
    odom = list(dataset.poses)
    est: list[RigidTransform] = list(odom)
    correction = RigidTransform.identity()
    registered: list[int] = []  # dataset index of every frame in gmap.frame_log
    frame_points: dict[int, np.ndarray] = {}
    pending: list[int] = []
    keyframes: dict[int, tuple[int, int]] = {}
    kf_frames: dict[int, list[int]] = {}
    infos: list[KeyframeInfo] = []
    loops: list[LoopRecord] = []
    opt_reports: list[OptimizationReport] = []
    alignments: dict[tuple[int, int], AlignmentResult] = {}
    histograms: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    kf_store: dict[int, Keyframe] = {}
    skipped_frames = 0
    skipped_points = 0

    def local_map(kid: int) -> CellMap:
        return CellMap.from_frames(cfg.cell_size, [(frame_points[f], est[f]) for f in kf_frames[kid]])

    for k in range(len(dataset)):
        est[k] = correction @ odom[k]
        try:
            raw = dataset.frame(k)
        except (OSError, ValueError) as exc:
            log.warning("frame %d skipped: %s", k, exc)
            skipped_frames += 1
            continue
        pts, bad = _clean(raw)
        skipped_points += bad
        if pts is None or len(pts) == 0:
            skipped_frames += 1
            continue
        with _Timer(timing, "registration"):
            gmap.register_frame(pts, est[k])
        registered.append(k)
        frame_points[k] = pts
        pending.append(k)
        if len(pending) < cfg.keyframe_size:
            continue

        kid = len(infos)
        frames = pending
        pending = []
        kf_frames[kid] = frames
        keyframes[kid] = (frames[0], frames[-1])
        lm = local_map(kid)
        with _Timer(timing, "histogram"):
            kf = build_keyframe(kid, (frames[0], frames[-1]), lm, est[frames[0]], dparams)
        kf_store[kid] = kf
        histograms[kid] = (kf.hist_plane, kf.hist_line)
        infos.append(KeyframeInfo(kid, frames[0], frames[-1], len(kf.features), kf.weakly_invariant))

        graph.add_node(kid, est[frames[0]])
        if kid > 0:
            prev = keyframes[kid - 1][0]
            graph.add_odometry_edge(kid - 1, kid, odom[prev], odom[frames[0]])

        with _Timer(timing, "similarity", per=max(len(db), 1)):
            candidates = db.query(kf, cfg.plane_thresh, cfg.line_thresh)
        db.insert(kf)
        if not candidates:
            continue
        best = candidates[0]
        match = kf_store[best.match_id]
        accepted = False
        with _Timer(timing, "alignment"):
            try:
                target_map = local_map(best.match_id)
                target = build_keyframe(match.id, keyframes[match.id], target_map, est[keyframes[match.id][0]],
                                        dparams)
                guesses = initial_guesses_from_histograms(kf, target)
                result = align(kf.features, target.features, guesses, aparams, cfg.cell_size)
                alignments[(kid, best.match_id)] = result
                accepted = result.accepted
            except (AlignmentError, InvalidInputError) as exc:
                log.info("alignment %d -> %d failed: %s", kid, best.match_id, exc)
        loops.append(LoopRecord(kid, best.match_id, best.sim_plane, best.sim_line, accepted))
        if not accepted:
            continue

        graph.add_loop_edge(result, kid, best.match_id, cfg.accept_distance)
        with _Timer(timing, "optimization"):
            rep = graph.optimize(cfg.graph_max_iterations, cfg.graph_tolerance)
        opt_reports.append(rep)
        with _Timer(timing, "rebuild"):
            reg_poses = [est[f] for f in registered]
            ranges = {i: (registered.index(a), registered.index(b)) for i, (a, b) in keyframes.items()}
            corrected, gmap = apply_correction(graph, reg_poses, ranges, gmap)
            fixes = {f: p @ est[f].inverse() for f, p in zip(registered, corrected)}
            fix = fixes[registered[0]]
            for f in range(k + 1):
                fix = fixes.get(f, fix)  # skipped frames follow the previous registered frame
                est[f] = corrected[registered.index(f)] if f in fixes else fix @ est[f]
        last_fix = graph.pose(kid) @ graph.last_initial_poses[kid].inverse()
        correction = last_fix @ correction

    return RunReport(
        timestamps=np.asarray(dataset.timestamps, dtype=float),
        trajectory_before=odom,
        trajectory_after=est,
        loops=loops,
        keyframes=infos,
        timing=dict(timing),
        optimizations=opt_reports,
        alignments=alignments,
        skipped_frames=skipped_frames,
        skipped_points=skipped_points + gmap.skipped_points,
        map_cells=len(gmap),
        histograms=histograms,
        final_map=gmap,
        graph=graph,
        registered_frames=registered,
        config=cfg,
    )


def write_outputs(report: RunReport, out_dir, write_maps: bool = True) -> Path:
    out = io.ensure_dir(out_dir)
    io.write_tum(out / "trajectory_before.tum", report.timestamps, report.trajectory_before)
    io.write_tum(out / "trajectory_after.tum", report.timestamps, report.trajectory_after)
    write_loop_report(out / "loops.csv", report.loops)
    if report.config is not None:
        (out / "config.toml").write_text(dump_config(report.config))
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "count", "mean_ms", "p99_ms"])
        for stage, n, mean, p99 in report.timing_summary():
            w.writerow([stage, n, f"{1e3 * mean:.6f}", f"{1e3 * p99:.6f}"])
    with open(out / "keyframes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "first_frame", "last_frame", "num_features", "weakly_invariant"])
        for kf in report.keyframes:
            w.writerow([kf.id, kf.first_frame, kf.last_frame, kf.num_features, int(kf.weakly_invariant)])
    hdir = io.ensure_dir(out / "histograms")
    for kid, (hp, hl) in report.histograms.items():
        write_histogram_csv(hdir / f"{kid}.csv", hp)
        write_histogram_csv(hdir / f"{kid}_line.csv", hl)
    if report.graph is not None:
        report.graph.write_g2o(out / "graph.g2o")
    if write_maps and report.final_map is not None:
        before = report.final_map.rebuild([report.trajectory_before[f] for f in report.registered_frames])
        before.write_ply(out / "map_before.ply")
        report.final_map.write_ply(out / "map_after.ply")
    return out
