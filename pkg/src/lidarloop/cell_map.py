"""Fixed-partition cell map: per-cell running statistics, hash lookup, octree range queries.

Space is cut into boxes of size ``cell_size``.  A point ``p`` belongs to grid
index ``floor(p / S)`` and that cell is centred at ``(k + 0.5) * S``, so every
stored point lies inside its cell (half-open on the upper side).

Cell mean/covariance are updated one point at a time with the recursive
formulas

    mu_N+1    = (N mu' + p) / (N + 1)
    Sigma_N+1 = [(N-1) Sigma' + (p - mu')(p - mu')^T
                 + (N+1)(mu' - mu)(mu' - mu)^T + 2 (mu' - mu)(p - mu')^T] / N

where primes denote the statistics of the N existing points.  The covariance
is the unbiased (N - 1) estimator; a single-point cell has zero covariance.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core_math import InvalidInputError, RigidTransform, validate_transform
from .octree import Octree

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
# per-axis salts keep (1,0,0), (0,1,0) and (0,0,1) apart under XOR
_AXIS_SALT = (0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9)


def _mix64(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_of(index: Sequence[int]) -> int:
    """64-bit hash of a grid index: XOR of independently mixed components."""
    h = 0
    for k, c in enumerate(index):
        h ^= _mix64((int(c) & _MASK64) ^ _AXIS_SALT[k])
    return h


class GridIndex(NamedTuple):
    ix: int
    iy: int
    iz: int

    def __hash__(self) -> int:
        return hash_of(self)


class Shape(enum.Enum):
    NONE = "none"
    PLANE = "plane"
    LINE = "line"


class ContainmentError(ValueError):
    """A point was offered to a cell whose bounds do not contain it."""


@dataclass
class Cell:
    index: GridIndex
    size: np.ndarray
    center: np.ndarray
    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    shape: Shape = Shape.NONE
    feature_direction: np.ndarray | None = None

    @classmethod
    def empty(cls, index: Sequence[int], cell_size) -> "Cell":
        size = _as_cell_size(cell_size)
        idx = GridIndex(*(int(v) for v in index))
        return cls(idx, size, (np.array(idx, dtype=float) + 0.5) * size)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        lo = self.center - 0.5 * self.size
        hi = self.center + 0.5 * self.size
        return bool(np.all(p >= lo) and np.all(p < hi))


def _as_cell_size(cell_size) -> np.ndarray:
    s = np.broadcast_to(np.asarray(cell_size, dtype=float), (3,)).copy()
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise InvalidInputError(f"cell size must be positive, got {s}")
    return s


def _floor_index(pts: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``floor(pts / s)`` nudged by one where rounding of the quotient broke ``k*s <= p < (k+1)*s``."""
    k = np.floor(pts / s)
    k -= k * s > pts
    k += (k + 1) * s <= pts
    return k.astype(np.int64)


def grid_index_of(p, cell_size) -> GridIndex:
    p = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("point must be finite")
    k = _floor_index(p, _as_cell_size(cell_size))
    return GridIndex(int(k[0]), int(k[1]), int(k[2]))


def cell_center(index: Sequence[int], cell_size) -> np.ndarray:
    return (np.asarray(index, dtype=float) + 0.5) * _as_cell_size(cell_size)


def update_stats(cell: Cell, p) -> Cell:
    """Return a copy of ``cell`` with ``p`` appended and its statistics advanced."""
    p = np.asarray(p, dtype=float).reshape(3)
    if not cell.contains(p):
        raise ContainmentError(f"point {p} is outside cell {tuple(cell.index)}")
    n = cell.count
    if n == 0:
        mean, cov = p.copy(), np.zeros((3, 3))
    else:
        mean_prev = cell.mean
        mean = (n * mean_prev + p) / (n + 1)
        a = p - mean_prev
        d = mean_prev - mean
        cov = ((n - 1) * cell.covariance + np.outer(a, a) + (n + 1) * np.outer(d, d) + 2.0 * np.outer(d, a)) / n
        cov = 0.5 * (cov + cov.T)
    points = np.vstack([cell.points, p[None]])
    return replace(cell, count=n + 1, mean=mean, covariance=cov, points=points, shape=Shape.NONE,
                   feature_direction=None)


def _advance(counts, means, covs, pts) -> None:
    """One vectorized recursive step; row i of each array takes point ``pts[i]``."""
    n = counts.astype(float)
    mean_prev = means.copy()
    mean = (n[:, None] * mean_prev + pts) / (n[:, None] + 1.0)
    a = pts - mean_prev
    d = mean_prev - mean
    fresh = counts == 0
    if fresh.any():
        n = np.where(fresh, 1.0, n)
    cov = (n - 1.0)[:, None, None] * covs
    cov += a[:, :, None] * a[:, None, :]
    cov += (n + 1.0)[:, None, None] * (d[:, :, None] * d[:, None, :])
    cov += 2.0 * (d[:, :, None] * a[:, None, :])
    cov /= n[:, None, None]
    cov += np.swapaxes(cov, 1, 2)
    cov *= 0.5
    if fresh.any():
        cov[fresh] = 0.0
        mean[fresh] = pts[fresh]
    means[:] = mean
    covs[:] = cov
    counts += 1


def accumulate(counts: np.ndarray, means: np.ndarray, covs: np.ndarray, groups: np.ndarray, pts: np.ndarray) -> None:
    """Feed ``pts`` (in order) into the running statistics of cells ``groups``.

    In-place.  Points of the same cell are consumed in their given order; each
    round advances every cell that still has pending points by one point.
    """
    if len(pts) == 0:
        return
    order = np.argsort(groups, kind="stable")
    g = groups[order]
    p = pts[order]
    uniq, starts, sizes = np.unique(g, return_index=True, return_counts=True)
    by_size = np.argsort(-sizes, kind="stable")
    uniq, starts, sizes = uniq[by_size], starts[by_size], sizes[by_size]
    # cells sorted by pending-point count, so the active set is always a prefix
    c_loc = counts[uniq].copy()
    m_loc = means[uniq].copy()
    s_loc = covs[uniq].copy()
    active = len(uniq)
    for r in range(int(sizes[0])):
        while active and sizes[active - 1] <= r:
            active -= 1
        _advance(c_loc[:active], m_loc[:active], s_loc[:active], p[starts[:active] + r])
    counts[uniq] = c_loc
    means[uniq] = m_loc
    covs[uniq] = s_loc


def batch_stats(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass mean and unbiased covariance; zero covariance for < 2 points."""
    pts = np.asarray(points, dtype=float)
    mean = pts.mean(axis=0)
    if len(pts) < 2:
        return mean, np.zeros((3, 3))
    d = pts - mean
    return mean, d.T @ d / (len(pts) - 1)


class CellMap:
    """Global map: hash index GridIndex -> cell, plus an octree over cell centers."""

    def __init__(self, cell_size=1.0, leaf_capacity: int = 8, max_depth: int = 21):
        self.cell_size = _as_cell_size(cell_size)
        self.hash_index: dict[GridIndex, int] = {}
        self.octree = Octree(leaf_capacity, max_depth, initial_half=16.0 * float(self.cell_size.max()))
        self.frame_log: list[tuple[np.ndarray, RigidTransform]] = []
        self.skipped_points = 0
        self._keys: list[GridIndex] = []
        self._cap = 0
        self._counts = np.zeros(0, dtype=np.int64)
        self._means = np.zeros((0, 3))
        self._covs = np.zeros((0, 3, 3))
        self._points: list[list[np.ndarray]] = []
        self._grow(256)

    # -- storage -----------------------------------------------------------

    def _grow(self, cap: int) -> None:
        if cap <= self._cap:
            return
        for name, shape, dtype in (
            ("_counts", (cap,), np.int64),
            ("_means", (cap, 3), float),
            ("_covs", (cap, 3, 3), float),
        ):
            new = np.zeros(shape, dtype=dtype)
            old = getattr(self, name)
            new[: len(old)] = old
            setattr(self, name, new)
        self._cap = cap

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, index) -> bool:
        return GridIndex(*index) in self.hash_index

    @property
    def num_points(self) -> int:
        return int(self._counts[: len(self)].sum())

    def _slot_for(self, index: GridIndex) -> int:
        slot = self.hash_index.get(index)
        if slot is None:
            slot = len(self._keys)
            if slot >= self._cap:
                self._grow(2 * self._cap)
            self._keys.append(index)
            self._points.append([])
            self.hash_index[index] = slot
            octree_id = self.octree.insert(cell_center(index, self.cell_size))
            assert octree_id == slot
        return slot

    # -- registration ------------------------------------------------------

    def insert_points(self, world_points) -> set[GridIndex]:
        """Assign world-frame points to cells and update statistics; no frame log entry."""
        pts = np.asarray(world_points, dtype=float).reshape(-1, 3)
        finite = np.all(np.isfinite(pts), axis=1)
        if not finite.all():
            self.skipped_points += int((~finite).sum())
            pts = pts[finite]
        if len(pts) == 0:
            return set()
        k = _floor_index(pts, self.cell_size)
        uniq, inverse = np.unique(k, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        touched = [GridIndex(int(a), int(b), int(c)) for a, b, c in uniq]
        slots = np.array([self._slot_for(g) for g in touched], dtype=np.int64)
        groups = slots[inverse]
        accumulate(self._counts, self._means, self._covs, groups, pts)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
        for u, slot in enumerate(slots):
            self._points[slot].append(pts[order[bounds[u] : bounds[u + 1]]])
        return set(touched)

    def register_frame(self, frame_points, pose: RigidTransform) -> set[GridIndex]:
        """Transform a sensor-frame scan by ``pose`` and insert it; logs the frame."""
        validate_transform(pose)
        pts = np.asarray(frame_points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise InvalidInputError("frame has no points")
        self.frame_log.append((pts, pose))
        finite = np.all(np.isfinite(pts), axis=1)
        if not finite.all():
            self.skipped_points += int((~finite).sum())
            pts = pts[finite]
        return self.insert_points(pose.apply(pts))

    def rebuild(self, corrected_poses: Sequence[RigidTransform]) -> "CellMap":
        """Fresh map from every logged frame re-registered at its corrected pose."""
        if len(corrected_poses) != len(self.frame_log):
            raise InvalidInputError(
                f"{len(corrected_poses)} poses supplied for {len(self.frame_log)} logged frames"
            )
        fresh = CellMap(self.cell_size, self.octree.leaf_capacity, self.octree.max_depth)
        for (pts, _), pose in zip(self.frame_log, corrected_poses):
            fresh.register_frame(pts, pose)
        return fresh

    @classmethod
    def from_frames(cls, cell_size, frames: Iterable[tuple[np.ndarray, RigidTransform]]) -> "CellMap":
        m = cls(cell_size)
        for pts, pose in frames:
            m.register_frame(pts, pose)
        return m

    # -- lookup ------------------------------------------------------------

    def slot(self, index) -> int | None:
        return self.hash_index.get(GridIndex(*index))

    def cell(self, index) -> Cell | None:
        slot = self.slot(index)
        return None if slot is None else self._cell_at(slot)

    def _cell_at(self, slot: int) -> Cell:
        key = self._keys[slot]
        chunks = self._points[slot]
        pts = np.concatenate(chunks) if chunks else np.empty((0, 3))
        return Cell(
            index=key,
            size=self.cell_size.copy(),
            center=cell_center(key, self.cell_size),
            count=int(self._counts[slot]),
            mean=self._means[slot].copy(),
            covariance=self._covs[slot].copy(),
            points=pts,
        )

    def cells(self, indices: Iterable[Sequence[int]] | None = None) -> list[Cell]:
        if indices is None:
            return [self._cell_at(s) for s in range(len(self))]
        slots = sorted(s for s in (self.slot(i) for i in indices) if s is not None)
        return [self._cell_at(s) for s in slots]

    def indices(self) -> list[GridIndex]:
        return list(self._keys)

    def centers(self) -> np.ndarray:
        return cell_center(np.array(self._keys, dtype=float).reshape(-1, 3), self.cell_size)

    def stats(self, slots=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Arrays ``(counts, means, covariances)`` for ``slots`` (all cells by default)."""
        n = len(self)
        sl = slice(0, n) if slots is None else np.asarray(slots, dtype=np.int64)
        return self._counts[sl].copy(), self._means[sl].copy(), self._covs[sl].copy()

    def slots_in_box(self, lo, hi) -> np.ndarray:
        lo, hi = _check_box(lo, hi)
        return self.octree.query_box(lo, hi)

    def cells_in_box(self, lo, hi) -> list[Cell]:
        """Cells whose centers lie in the closed box ``[lo, hi]``, in insertion order."""
        return [self._cell_at(int(s)) for s in self.slots_in_box(lo, hi)]

    def all_points(self) -> np.ndarray:
        chunks = [c for per_cell in self._points[: len(self)] for c in per_cell]
        return np.concatenate(chunks) if chunks else np.empty((0, 3))

    # -- export ------------------------------------------------------------

    def write_ply(self, path) -> None:
        from .pipeline.io import write_ply

        write_ply(path, self.all_points())

    def write_cell_summary(self, path, shapes: Sequence[Shape] | None = None,
                           directions: np.ndarray | None = None) -> None:
        """One CSV row per cell: center, count, mean, covariance upper triangle, shape, direction."""
        n = len(self)
        centers = self.centers()
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["cx", "cy", "cz", "count", "mx", "my", "mz",
                 "cxx", "cxy", "cxz", "cyy", "cyz", "czz", "shape", "dx", "dy", "dz"]
            )
            for s in range(n):
                cov = self._covs[s]
                shape = shapes[s] if shapes is not None else Shape.NONE
                d = directions[s] if (directions is not None and shape is not Shape.NONE) else (np.nan,) * 3
                w.writerow(
                    [*(repr(float(v)) for v in centers[s]), int(self._counts[s]),
                     *(repr(float(v)) for v in self._means[s]),
                     *(repr(float(cov[i, j])) for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))),
                     shape.value, *(repr(float(v)) for v in d)]
                )


def _check_box(lo, hi) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(lo, dtype=float).reshape(3)
    hi = np.asarray(hi, dtype=float).reshape(3)
    if np.any(lo > hi):
        raise InvalidInputError(f"inverted box: lo={lo}, hi={hi}")
    return lo, hi
