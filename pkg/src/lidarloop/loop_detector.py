"""Keyframe database and histogram-similarity loop search."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core_math import InvalidInputError, RigidTransform
from .descriptor import BINS, Keyframe


class UndefinedSimilarityError(ValueError):
    """NCC denominator is zero: one of the histograms is constant."""


def similarity(h1: np.ndarray, h2: np.ndarray) -> float:
    """Normalized cross-correlation of two 60x60 histograms, in [-1, 1]."""
    a = np.asarray(h1, dtype=float)
    b = np.asarray(h2, dtype=float)
    if a.shape != (BINS, BINS) or b.shape != (BINS, BINS):
        raise InvalidInputError(f"histograms must be {BINS}x{BINS}")
    a = a - a.mean()
    b = b - b.mean()
    saa = float(np.vdot(a, a))
    sbb = float(np.vdot(b, b))
    if saa == 0.0 or sbb == 0.0 or not np.isfinite(saa * sbb):
        raise UndefinedSimilarityError("constant histogram")
    s = float(np.vdot(a, b)) / np.sqrt(saa * sbb)
    return min(1.0, max(-1.0, s))


@dataclass
class LoopCandidate:
    query_id: int
    match_id: int
    sim_plane: float
    sim_line: float


@dataclass
class _Entry:
    id: int
    hist_plane: np.ndarray
    hist_line: np.ndarray
    reference_pose: RigidTransform


@dataclass
class KeyframeDatabase:
    temporal_exclusion: int = 5
    entries: list[_Entry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def insert(self, kf: Keyframe) -> None:
        if self.entries and kf.id <= self.entries[-1].id:
            raise InvalidInputError(f"keyframe id {kf.id} does not follow {self.entries[-1].id}")
        for h in (kf.hist_plane, kf.hist_line):
            if h.shape != (BINS, BINS) or not np.all(np.isfinite(h)) or np.any(h < 0):
                raise InvalidInputError("invalid histogram")
        self.entries.append(_Entry(kf.id, kf.hist_plane, kf.hist_line, kf.reference_pose))

    def query(self, kf: Keyframe, plane_thresh: float = 0.90, line_thresh: float = 0.65) -> list[LoopCandidate]:
        """Entries at least ``temporal_exclusion`` ids older than ``kf`` passing both thresholds.

        Sorted by plane similarity, best first (ties broken by lower id).
        """
        out = []
        for e in self.entries:
            if e.id > kf.id - self.temporal_exclusion:
                continue
            try:
                sp = similarity(kf.hist_plane, e.hist_plane)
                sl = similarity(kf.hist_line, e.hist_line)
            except UndefinedSimilarityError:
                continue
            if sp >= plane_thresh and sl >= line_thresh:
                out.append(LoopCandidate(kf.id, e.id, sp, sl))
        out.sort(key=lambda c: (-c.sim_plane, c.match_id))
        return out

    def scores(self, kf: Keyframe) -> list[tuple[int, float | None, float | None]]:
        """(id, plane similarity, line similarity) for every eligible entry; None when undefined."""
        rows = []
        for e in self.entries:
            if e.id > kf.id - self.temporal_exclusion:
                continue
            rows.append((e.id, _safe(kf.hist_plane, e.hist_plane), _safe(kf.hist_line, e.hist_line)))
        return rows


def _safe(a, b) -> float | None:
    try:
        return similarity(a, b)
    except UndefinedSimilarityError:
        return None


@dataclass
class LoopRecord:
    query_id: int
    match_id: int
    sim_plane: float
    sim_line: float
    accepted_by_alignment: bool


def write_loop_report(path, records: Iterable[LoopRecord]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "match_id", "sim_plane", "sim_line", "accepted_by_alignment"])
        for r in records:
            w.writerow([r.query_id, r.match_id, f"{r.sim_plane:.17g}", f"{r.sim_line:.17g}",
                        int(r.accepted_by_alignment)])


def read_loop_report(path) -> list[LoopRecord]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LoopRecord(int(r["query_id"]), int(r["match_id"]), float(r["sim_plane"]), float(r["sim_line"]),
                   r["accepted_by_alignment"].strip() in ("1", "true", "True"))
        for r in rows
    ]
