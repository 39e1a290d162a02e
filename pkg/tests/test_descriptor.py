import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarloop.cell_map import Cell, CellMap, Shape
from lidarloop.core_math import InvalidInputError, RigidTransform, random_rotation
from lidarloop.descriptor import (
    LINE,
    PLANE,
    DegenerateKeyframeError,
    DescriptorParams,
    FeatureSet,
    build_histograms,
    build_keyframe,
    canonical_rotation,
    classify_arrays,
    classify_cell,
    describe,
    direction_to_angles,
    directions_to_angles,
    extract_features,
    gaussian_blur,
    raw_histogram,
    read_histogram_csv,
    write_histogram_csv,
)
from lidarloop.pipeline import synthetic


def cell_with(points):
    pts = np.asarray(points, dtype=float)
    c = Cell.empty((0, 0, 0), 100.0)
    d = pts - pts.mean(axis=0)
    return Cell(c.index, c.size, c.center, len(pts), pts.mean(axis=0), d.T @ d / (len(pts) - 1), pts)


def cell_with_cov(cov, count=10):
    c = Cell.empty((0, 0, 0), 1.0)
    return Cell(c.index, c.size, c.center, count, np.zeros(3), np.asarray(cov, float))


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# --- classification --------------------------------------------------------------------


def test_plane_cell():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 1, 10), rng.uniform(0, 1, 10), np.zeros(10)])
    shape, d = classify_cell(cell_with(pts))
    assert shape is Shape.PLANE
    assert np.allclose(np.abs(d), [0, 0, 1], atol=1e-12)


def test_line_cell():
    t = np.linspace(0, 1, 10)
    pts = t[:, None] * unit([1, 1, 1])
    shape, d = classify_cell(cell_with(pts))
    assert shape is Shape.LINE
    assert np.allclose(np.abs(d), unit([1, 1, 1]), atol=1e-12)


def test_isotropic_cell_is_none():
    # eigenvalues (1, 0.9, 0.8): 0.9 < 3 * 0.8 and 1 < 3 * 0.9, so neither test passes
    q = random_rotation(np.random.default_rng(1))
    cov = q @ np.diag([1.0, 0.9, 0.8]) @ q.T
    assert classify_cell(cell_with_cov(0.5 * (cov + cov.T))) == (Shape.NONE, None)


def test_ratio_boundaries_and_ordering():
    # lambda2 == 3 lambda3 is a plane (>=); a plane-and-line-capable spectrum is a plane
    assert classify_cell(cell_with_cov(np.diag([9.0, 3.0, 1.0])))[0] is Shape.PLANE
    assert classify_cell(cell_with_cov(np.diag([8.0, 2.9, 1.0])))[0] is Shape.NONE
    assert classify_cell(cell_with_cov(np.diag([9.0, 3.0, 1.01])))[0] is Shape.LINE
    assert classify_cell(cell_with_cov(np.diag([8.9, 3.0, 1.01])))[0] is Shape.NONE
    assert classify_cell(cell_with_cov(np.diag([100.0, 10.0, 0.0])))[0] is Shape.PLANE


def test_too_few_points():
    assert classify_cell(cell_with_cov(np.diag([1.0, 0.0, 0.0]), count=4)) == (Shape.NONE, None)
    assert classify_cell(cell_with_cov(np.diag([1.0, 0.0, 0.0]), count=5))[0] is Shape.LINE


def test_degenerate_covariance_is_none():
    assert classify_cell(cell_with_cov(np.zeros((3, 3))))[0] is Shape.NONE


def test_vectorized_classification_matches_scalar():
    rng = np.random.default_rng(2)
    n = 400
    covs = []
    for _ in range(n):
        q = random_rotation(rng)
        lam = np.sort(rng.uniform(0, 1, 3) ** 3)[::-1]
        c = q @ np.diag(lam) @ q.T
        covs.append(0.5 * (c + c.T))
    covs = np.array(covs)
    counts = rng.integers(0, 12, size=n)
    shapes, dirs = classify_arrays(counts, np.zeros((n, 3)), covs)
    for k in range(n):
        shape, d = classify_cell(cell_with_cov(covs[k], counts[k]))
        assert {Shape.NONE: 0, Shape.PLANE: 1, Shape.LINE: 2}[shape] == shapes[k]
        if d is not None:
            assert np.allclose(d, dirs[k], atol=1e-9)


# --- canonical rotation ----------------------------------------------------------------


def test_canonical_rotation_axis_aligned():
    d = [[1, 0, 0]] * 5 + [[0, 1, 0]] * 2
    r = canonical_rotation(d)
    assert np.allclose(r @ [1, 0, 0], [1, 0, 0])
    assert np.allclose(np.abs(r @ [0, 1, 0]), [0, 1, 0])


def test_canonical_rotation_in_so3():
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = rng.normal(size=(rng.integers(3, 40), 3))
        r = canonical_rotation(d / np.linalg.norm(d, axis=1, keepdims=True))
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert math.isclose(np.linalg.det(r), 1.0, abs_tol=1e-9)


SIGN_GROUP = [np.diag([a, b, a * b]) for a, b in itertools.product((1, -1), repeat=2)]


def test_canonical_rotation_equivariance_up_to_sign_group():
    rng = np.random.default_rng(4)
    for _ in range(200):
        d = rng.normal(size=(30, 3)) * [3.0, 1.5, 0.5]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        q = random_rotation(rng)
        a = canonical_rotation(d @ q.T) @ q
        b = canonical_rotation(d)
        assert any(np.allclose(s @ b, a, atol=1e-6) for s in SIGN_GROUP)


def test_canonical_rotation_needs_three_planes():
    with pytest.raises(DegenerateKeyframeError):
        canonical_rotation([[1, 0, 0], [0, 1, 0]])


def test_describe_flags_weak_keyframe():
    feats = FeatureSet(np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 0, 1.0]]), np.array([PLANE, LINE], np.int8))
    rot, weak, hp, hl = describe(feats)
    assert weak and np.array_equal(rot, np.eye(3))
    assert math.isclose(hp.sum(), 1.0) and math.isclose(hl.sum(), 1.0)


# --- angles and binning ----------------------------------------------------------------


def test_angle_examples():
    assert direction_to_angles([1, 0, 0]) == pytest.approx((90.0, 90.0))
    assert direction_to_angles([0, 0, 1]) == pytest.approx((180.0, 90.0))
    assert direction_to_angles([-1, 0, 0]) == pytest.approx((90.0, 90.0))
    assert direction_to_angles([0, 1, 0]) == pytest.approx((90.0, 180.0))
    assert direction_to_angles([0, -1, 0]) == pytest.approx((90.0, 0.0))


def test_angles_reject_non_unit():
    with pytest.raises(InvalidInputError):
        direction_to_angles([1, 1, 0])
    with pytest.raises(InvalidInputError):
        direction_to_angles([np.nan, 0, 0])


def test_angles_match_formula_for_positive_x():
    rng = np.random.default_rng(5)
    d = rng.normal(size=(1000, 3))
    d[:, 0] = np.abs(d[:, 0]) + 1e-3
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    theta, phi = directions_to_angles(d)
    assert np.allclose(theta, np.degrees(np.arcsin(d[:, 2])) + 90, atol=1e-12)
    assert np.allclose(phi, np.degrees(np.arctan(d[:, 1] / d[:, 0])) + 90, atol=1e-9)
    assert np.all((theta >= 0) & (theta <= 180) & (phi >= 0) & (phi <= 180))


def test_pole_clamps_to_last_bin():
    h = raw_histogram(np.array([[0.0, 0.0, 1.0]]))
    assert h[30, 59] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_antipodal_invariance(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    flip = rng.random(50) < 0.5
    shapes = rng.choice([PLANE, LINE], size=50).astype(np.int8)
    a = FeatureSet(np.zeros((50, 3)), d, shapes)
    b = FeatureSet(np.zeros((50, 3)), np.where(flip[:, None], -d, d), shapes)
    r = random_rotation(rng)
    ha, hb = build_histograms(a, r), build_histograms(b, r)
    assert np.array_equal(ha[0], hb[0]) and np.array_equal(ha[1], hb[1])


# --- histograms ------------------------------------------------------------------------


def scatter_blur(h, size=5, sigma=1.0):
    """Each bin spreads over in-range neighbours with weights renormalized per axis."""
    r = size // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    out = np.zeros_like(h)
    n = h.shape[0]
    for i, j in zip(*np.nonzero(h)):
        ri = [(i + a, g[a + r]) for a in range(-r, r + 1) if 0 <= i + a < n]
        rj = [(j + b, g[b + r]) for b in range(-r, r + 1) if 0 <= j + b < n]
        si, sj = sum(w for _, w in ri), sum(w for _, w in rj)
        for ii, wi in ri:
            for jj, wj in rj:
                out[ii, jj] += h[i, j] * wi * wj / (si * sj)
    return out


def test_blur_matches_scatter_oracle():
    rng = np.random.default_rng(6)
    h = np.zeros((60, 60))
    idx = rng.integers(0, 60, size=(80, 2))
    idx[:4] = [[0, 0], [59, 59], [1, 58], [30, 0]]
    np.add.at(h, (idx[:, 0], idx[:, 1]), 1.0)
    assert np.allclose(gaussian_blur(h), scatter_blur(h), atol=1e-13)


def test_blur_preserves_mass():
    rng = np.random.default_rng(7)
    for _ in range(50):
        h = rng.poisson(0.3, size=(60, 60)).astype(float)
        assert abs(gaussian_blur(h).sum() - h.sum()) <= 1e-9
        assert np.all(gaussian_blur(h) >= 0)


def test_empty_and_counted_histograms():
    hp, hl = build_histograms(FeatureSet.empty(), np.eye(3))
    assert not hp.any() and not hl.any()
    rng = np.random.default_rng(8)
    d = rng.normal(size=(7, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    feats = FeatureSet(np.zeros((7, 3)), d, np.full(7, PLANE, np.int8))
    hp, hl = build_histograms(feats, np.eye(3))
    assert abs(hp.sum() - 7) <= 1e-9 and hl.sum() == 0
    raw_p, _ = build_histograms(feats, np.eye(3), blur=False)
    assert raw_p.sum() == 7 and np.array_equal(raw_p, np.round(raw_p))


def test_histograms_from_cells_and_feature_sets_agree():
    rng = np.random.default_rng(9)
    m = CellMap(1.0)
    m.insert_points(synthetic.sample_world(synthetic.furnished_room(), [11, 7.5, 2], 30.0, rng, 40, 40, 0.01))
    feats = extract_features(m)
    cells = [c for c in m.cells()]
    from lidarloop.descriptor import classify_cells

    labelled = classify_cells(cells)
    r = random_rotation(rng)
    a = build_histograms(feats, r)
    b = build_histograms(labelled, r)
    assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)


def test_room_has_three_peaks_at_hand_computed_angles():
    rng = np.random.default_rng(10)
    world = synthetic.box_room([0.31, 0.43, 0.17], [12.31, 8.43, 4.17])
    pts = synthetic.sample_world(world, [6, 4, 2], 30.0, rng, 60, 60, 0.005)
    m = CellMap(1.0)
    m.insert_points(pts)
    kf = build_keyframe(0, (0, 0), m, RigidTransform.identity())
    assert not kf.weakly_invariant
    # the room is axis-aligned, so the canonical rotation is a signed permutation
    assert np.allclose(np.abs(kf.canonical_rotation), np.round(np.abs(kf.canonical_rotation)), atol=0.05)
    # Hand-computed clusters in the canonical frame.  +-x: (90, 90) deg -> bin (30, 30).
    # +-y and +-z lie on the x = 0 fold, so each appears at both of its antipodal images:
    # +-y at yaw 0 or 180 (rows 0 / 59, column 30); +-z at pitch 0 or 180 (columns 0 / 59),
    # where yaw is ill-conditioned.
    h = kf.hist_plane
    total = h.sum()
    x_peak = h[27:33, 27:33].sum()
    y_peak = h[:4, 27:33].sum() + h[56:, 27:33].sum()
    z_peak = h[:, :4].sum() + h[:, 56:].sum()
    # the rest comes from cells straddling room edges and corners
    assert (x_peak + y_peak + z_peak) / total > 0.75
    assert min(x_peak, y_peak, z_peak) / total > 0.1
    # floor + ceiling is the largest surface, so the global maximum is the +-x peak
    assert np.unravel_index(np.argmax(h), h.shape) in {(i, j) for i in range(28, 32) for j in range(28, 32)}
    # the bin of each room normal under the computed rotation holds a blurred peak
    for n in np.eye(3):
        theta, phi = direction_to_angles(kf.canonical_rotation @ n)
        i, j = min(int(phi // 3), 59), min(int(theta // 3), 59)
        assert h[i, j] > 0.01 * total


def test_histogram_csv_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    h = rng.random((60, 60))
    write_histogram_csv(tmp_path / "h.csv", h)
    assert np.array_equal(read_histogram_csv(tmp_path / "h.csv"), h)
    (tmp_path / "bad.csv").write_text("1,2\n3,4\n")
    with pytest.raises(InvalidInputError):
        read_histogram_csv(tmp_path / "bad.csv")


def test_keyframe_determinism():
    rng = np.random.default_rng(12)
    pts = synthetic.sample_world(synthetic.pitched_hall(), [7, 4.5, 2], 30.0, rng, 30, 30, 0.01)
    a, b = CellMap(1.0), CellMap(1.0)
    a.insert_points(pts)
    b.insert_points(pts.copy())
    ka = build_keyframe(0, (0, 0), a, RigidTransform.identity())
    kb = build_keyframe(0, (0, 0), b, RigidTransform.identity())
    assert np.array_equal(ka.hist_plane, kb.hist_plane) and np.array_equal(ka.hist_line, kb.hist_line)
    assert np.allclose(ka.canonical_rotation @ ka.canonical_rotation.T, np.eye(3), atol=1e-9)
    assert len(ka.cells) == len(a)
