"""Cell shape classification and rotation-invariant direction histograms.

Each feature cell contributes a direction: the normal of a plane cell or the
axis of a line cell.  A keyframe-level rotation built from the plane normals
brings the dominant normal onto X and the secondary one onto Y.  Rotated
directions are folded to non-negative X and binned by pitch/yaw into two
60x60 histograms (3 degrees per bin), which are then Gaussian-blurred.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cell_map import Cell, CellMap, GridIndex, Shape
from .core_math import InvalidInputError, RigidTransform, eig_sym3, eig_sym3_batch

BINS = 60
BIN_DEG = 3.0

NONE, PLANE, LINE = 0, 1, 2
_SHAPE_CODE = {Shape.NONE: NONE, Shape.PLANE: PLANE, Shape.LINE: LINE}
_CODE_SHAPE = {v: k for k, v in _SHAPE_CODE.items()}

# eigenvalues below this fraction of the largest count as zero
_RANK_TOL = 1e-12


class DegenerateKeyframeError(ValueError):
    """Too few plane cells to fix a canonical orientation."""


@dataclass
class DescriptorParams:
    min_points: int = 5
    plane_ratio: float = 3.0
    line_ratio: float = 3.0
    blur_size: int = 5
    blur_sigma: float = 1.0
    min_plane_cells: int = 3


@dataclass
class FeatureSet:
    """Classified cells as parallel arrays (only PLANE / LINE rows are kept)."""

    means: np.ndarray
    directions: np.ndarray
    shapes: np.ndarray
    indices: list[GridIndex] = field(default_factory=list)
    eigenvalues: np.ndarray | None = None  # (N, 3) descending, when known

    def __len__(self) -> int:
        return len(self.shapes)

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(np.empty((0, 3)), np.empty((0, 3)), np.empty(0, dtype=np.int8), [], np.empty((0, 3)))

    @property
    def planes(self) -> np.ndarray:
        return self.directions[self.shapes == PLANE]

    @property
    def lines(self) -> np.ndarray:
        return self.directions[self.shapes == LINE]

    def transformed(self, t: RigidTransform) -> "FeatureSet":
        vals = None if self.eigenvalues is None else self.eigenvalues.copy()
        return FeatureSet(t.apply(self.means), self.directions @ t.rotation.T, self.shapes.copy(),
                          list(self.indices), vals)

    def subset(self, rows) -> "FeatureSet":
        rows = np.asarray(rows)
        vals = None if self.eigenvalues is None else self.eigenvalues[rows]
        return FeatureSet(self.means[rows], self.directions[rows], self.shapes[rows],
                          [self.indices[i] for i in np.arange(len(self))[rows]] if self.indices else [], vals)

    def sharpness(self) -> np.ndarray:
        """lambda3/lambda2 for planes and lambda2/lambda1 for lines (0 is ideal); NaN if unknown."""
        if self.eigenvalues is None:
            return np.full(len(self), np.nan)
        v = self.eigenvalues
        with np.errstate(divide="ignore", invalid="ignore"):
            plane = np.where(v[:, 1] > 0, v[:, 2] / v[:, 1], 0.0)
            line = np.where(v[:, 0] > 0, v[:, 1] / v[:, 0], 0.0)
        return np.where(self.shapes == PLANE, plane, line)


def _shape_test(vals: np.ndarray, params: DescriptorParams) -> np.ndarray:
    l1 = vals[:, 0]
    tol = _RANK_TOL * np.maximum(l1, 0.0)
    l2 = np.where(vals[:, 1] > tol, vals[:, 1], 0.0)
    l3 = np.where(vals[:, 2] > tol, vals[:, 2], 0.0)
    plane = (l2 > 0.0) & (l2 >= params.plane_ratio * l3)
    line = ~plane & (l1 > tol) & (l1 > 0.0) & (l1 >= params.line_ratio * l2)
    return np.where(plane, PLANE, np.where(line, LINE, NONE)).astype(np.int8)


def classify_cell(cell: Cell, min_points: int = 5, plane_ratio: float = 3.0,
                  line_ratio: float = 3.0) -> tuple[Shape, np.ndarray | None]:
    """Plane (direction = smallest eigenvector), line (largest) or neither.

    The plane test runs first; a cell is a line only if it is not a plane.
    """
    if cell.count < min_points:
        return Shape.NONE, None
    eig = eig_sym3(cell.covariance)
    code = int(_shape_test(eig.eigenvalues[None], DescriptorParams(min_points, plane_ratio, line_ratio))[0])
    if code == PLANE:
        return Shape.PLANE, eig.eigenvectors[:, 2].copy()
    if code == LINE:
        return Shape.LINE, eig.eigenvectors[:, 0].copy()
    return Shape.NONE, None


def classify_cells(cells: Sequence[Cell], params: DescriptorParams | None = None) -> list[Cell]:
    """Return the cells with ``shape`` / ``feature_direction`` filled in."""
    params = params or DescriptorParams()
    out = []
    for c in cells:
        shape, d = classify_cell(c, params.min_points, params.plane_ratio, params.line_ratio)
        c.shape, c.feature_direction = shape, d
        out.append(c)
    return out


def classify_arrays(counts: np.ndarray, means: np.ndarray, covs: np.ndarray,
                    params: DescriptorParams | None = None,
                    return_eigenvalues: bool = False):
    """Vectorized classification; returns ``(shape codes, directions)`` for every row.

    With ``return_eigenvalues`` the descending eigenvalues are appended (NaN
    rows for cells below ``min_points``).
    """
    params = params or DescriptorParams()
    n = len(counts)
    shapes = np.zeros(n, dtype=np.int8)
    dirs = np.full((n, 3), np.nan)
    all_vals = np.full((n, 3), np.nan)
    enough = np.flatnonzero(counts >= params.min_points)
    if enough.size:
        vals, vecs = eig_sym3_batch(covs[enough])
        codes = _shape_test(vals, params)
        shapes[enough] = codes
        all_vals[enough] = vals
        dirs[enough] = np.where((codes == PLANE)[:, None], vecs[:, :, 2], vecs[:, :, 0])
        dirs[shapes == NONE] = np.nan
    if return_eigenvalues:
        return shapes, dirs, all_vals
    return shapes, dirs


def extract_features(cell_map: CellMap, params: DescriptorParams | None = None,
                     indices: Sequence[GridIndex] | None = None) -> FeatureSet:
    """Classified feature cells of ``cell_map`` (optionally restricted to ``indices``)."""
    if indices is None:
        slots = np.arange(len(cell_map))
    else:
        slots = np.array(sorted(s for s in (cell_map.slot(i) for i in indices) if s is not None), dtype=np.int64)
    counts, means, covs = cell_map.stats(slots)
    shapes, dirs, vals = classify_arrays(counts, means, covs, params, return_eigenvalues=True)
    keep = shapes != NONE
    keys = cell_map.indices()
    return FeatureSet(means[keep], dirs[keep], shapes[keep], [keys[s] for s in slots[keep]], vals[keep])


def features_from_cells(cells: Sequence[Cell]) -> FeatureSet:
    """FeatureSet from cells that already carry a shape label."""
    rows = [c for c in cells if c.shape is not Shape.NONE and c.feature_direction is not None]
    if not rows:
        return FeatureSet.empty()
    return FeatureSet(
        np.array([c.mean for c in rows]),
        np.array([c.feature_direction for c in rows]),
        np.array([_SHAPE_CODE[c.shape] for c in rows], dtype=np.int8),
        [c.index for c in rows],
    )


def canonical_rotation(plane_directions, min_cells: int = 3) -> np.ndarray:
    """Rotation whose rows are the two dominant normal axes and their cross product."""
    d = np.asarray(plane_directions, dtype=float).reshape(-1, 3)
    if len(d) < min_cells:
        raise DegenerateKeyframeError(f"{len(d)} plane cells, need at least {min_cells}")
    scatter = d.T @ d
    v = eig_sym3(scatter).eigenvectors
    v1, v2 = v[:, 0], v[:, 1]
    return np.vstack([v1, v2, np.cross(v1, v2)])


def direction_to_angles(d) -> tuple[float, float]:
    """Pitch and yaw, in degrees, of a direction folded onto x >= 0."""
    d = np.asarray(d, dtype=float).reshape(3)
    if not np.all(np.isfinite(d)) or abs(float(np.linalg.norm(d)) - 1.0) > 1e-6:
        raise InvalidInputError("direction must be a unit vector")
    theta, phi = directions_to_angles(d[None])
    return float(theta[0]), float(phi[0])


def directions_to_angles(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    d = np.where((d[:, 0] < 0.0)[:, None], -d, d)
    dx = d[:, 0] + 0.0  # turns -0.0 into +0.0 so atan2 stays in [-90, 90]
    theta = np.degrees(np.arcsin(np.clip(d[:, 2], -1.0, 1.0))) + 90.0
    phi = np.degrees(np.arctan2(d[:, 1], dx)) + 90.0
    return theta, phi


def angle_bins(theta: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) = (floor(phi / 3), floor(theta / 3)), clamped to [0, 59]."""
    row = np.clip(np.floor(phi / BIN_DEG).astype(np.int64), 0, BINS - 1)
    col = np.clip(np.floor(theta / BIN_DEG).astype(np.int64), 0, BINS - 1)
    return row, col


def raw_histogram(directions: np.ndarray) -> np.ndarray:
    h = np.zeros((BINS, BINS))
    if len(directions) == 0:
        return h
    row, col = angle_bins(*directions_to_angles(directions))
    np.add.at(h, (row, col), 1.0)
    return h


_BLUR_CACHE: dict[tuple[int, float], np.ndarray] = {}


def blur_matrix(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """60x60 operator M with blurred = M @ H @ M.T.

    Each source bin spreads over its in-range neighbours with weights
    renormalized to one, so the total histogram mass is preserved.
    """
    key = (size, sigma)
    m = _BLUR_CACHE.get(key)
    if m is None:
        r = size // 2
        k = np.arange(BINS)
        diff = k[:, None] - k[None, :]
        m = np.where(np.abs(diff) <= r, np.exp(-0.5 * (diff / sigma) ** 2), 0.0)
        m /= m.sum(axis=0, keepdims=True)
        m.setflags(write=False)
        _BLUR_CACHE[key] = m
    return m


def gaussian_blur(h: np.ndarray, size: int = 5, sigma: float = 1.0) -> np.ndarray:
    m = blur_matrix(size, sigma)
    return m @ h @ m.T


def build_histograms(features, rotation, params: DescriptorParams | None = None,
                     blur: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Plane and line histograms of feature directions rotated by ``rotation``.

    ``features`` is a :class:`FeatureSet` or a sequence of classified cells.
    """
    params = params or DescriptorParams()
    if not isinstance(features, FeatureSet):
        features = features_from_cells(features)
    r = np.asarray(rotation, dtype=float)
    rotated = features.directions @ r.T
    h_plane = raw_histogram(rotated[features.shapes == PLANE])
    h_line = raw_histogram(rotated[features.shapes == LINE])
    if blur:
        h_plane = gaussian_blur(h_plane, params.blur_size, params.blur_sigma)
        h_line = gaussian_blur(h_line, params.blur_size, params.blur_sigma)
    return h_plane, h_line


def describe(features: FeatureSet, params: DescriptorParams | None = None
             ) -> tuple[np.ndarray, bool, np.ndarray, np.ndarray]:
    """Canonical rotation, weak-invariance flag, plane histogram, line histogram."""
    params = params or DescriptorParams()
    weak = False
    try:
        rot = canonical_rotation(features.planes, params.min_plane_cells)
    except DegenerateKeyframeError:
        rot, weak = np.eye(3), True
    h_plane, h_line = build_histograms(features, rot, params)
    return rot, weak, h_plane, h_line


@dataclass
class Keyframe:
    id: int
    frame_range: tuple[int, int]
    cells: list[GridIndex]
    canonical_rotation: np.ndarray
    hist_plane: np.ndarray
    hist_line: np.ndarray
    reference_pose: RigidTransform
    features: FeatureSet = field(default_factory=FeatureSet.empty)
    weakly_invariant: bool = False


def build_keyframe(kf_id: int, frame_range: tuple[int, int], local_map: CellMap,
                   reference_pose: RigidTransform, params: DescriptorParams | None = None) -> Keyframe:
    """Classify ``local_map`` (the keyframe's own cells) and compute its descriptor."""
    params = params or DescriptorParams()
    feats = extract_features(local_map, params)
    rot, weak, hp, hl = describe(feats, params)
    return Keyframe(kf_id, frame_range, local_map.indices(), rot, hp, hl, reference_pose, feats, weak)


def write_histogram_csv(path, hist: np.ndarray) -> None:
    """60 rows (yaw bins) by 60 columns (pitch bins)."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(hist):
            w.writerow([repr(float(v)) for v in row])


def read_histogram_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
    h = np.array(rows)
    if h.shape != (BINS, BINS):
        raise InvalidInputError(f"{path}: expected {BINS}x{BINS} histogram, got {h.shape}")
    return h


def shape_of(code: int) -> Shape:
    return _CODE_SHAPE[int(code)]
