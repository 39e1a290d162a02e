"""Synthetic structured worlds, trajectories and drifted odometry.

A world is a set of rectangles (walls, floors, ramps, panels) and segments
(poles, edges).  A simulated scan samples every primitive uniformly inside the
sensor range around the true sensor position, adds isotropic Gaussian noise
and expresses the points in the sensor frame.  Odometry is the true relative
motion composed with a small per-frame drift twist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core_math import InvalidInputError, RigidTransform, se3_exp, so3_exp


@dataclass
class Rect:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))


@dataclass
class Segment:
    """Straight line feature; with ``radius > 0`` the surface of a cylinder."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float = 0.0

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float)
        self.p1 = np.asarray(self.p1, dtype=float)


@dataclass
class SensorSpec:
    range: float = 12.0
    plane_density: float = 6.0  # points per m^2 per scan
    line_density: float = 10.0  # points per m per scan
    noise: float = 0.01
    height: float = 1.2


@dataclass
class DriftSpec:
    translation_rate: float = 0.0  # m per frame
    rotation_rate_deg: float = 0.0  # deg per frame
    systematic: bool = False  # True: one fixed drift direction; False: fresh random direction per frame
    # body-frame directions of a systematic drift; None draws one at random
    translation_axis: tuple[float, float, float] | None = None
    rotation_axis: tuple[float, float, float] | None = None


@dataclass
class WorldSpec:
    rects: list[Rect] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)
    waypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    step: float = 1.0
    sensor: SensorSpec = field(default_factory=SensorSpec)

    def extend(self, other: "WorldSpec") -> "WorldSpec":
        self.rects.extend(other.rects)
        self.segments.extend(other.segments)
        return self

    def translated(self, offset) -> "WorldSpec":
        """Copy with every surface and waypoint shifted by ``offset``."""
        o = np.asarray(offset, dtype=float)
        return WorldSpec(
            [Rect(r.origin + o, r.u, r.v) for r in self.rects],
            [Segment(g.p0 + o, g.p1 + o, g.radius) for g in self.segments],
            self.waypoints + o if len(self.waypoints) else self.waypoints,
            self.step,
            self.sensor,
        )


@dataclass
class SyntheticDataset:
    frames: list[np.ndarray]
    true_poses: list[RigidTransform]
    odometry: list[RigidTransform]
    timestamps: np.ndarray
    drift_twists: np.ndarray


# -- primitives ---------------------------------------------------------------


def box_room(lo, hi, floor: bool = True, ceiling: bool = True,
             walls: Sequence[str] = ("x-", "x+", "y-", "y+")) -> WorldSpec:
    """Axis-aligned room; ``walls`` picks which of the four side walls exist."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dx, dy, dz = hi - lo
    ex, ey, ez = np.eye(3)
    w = WorldSpec()
    if floor:
        w.rects.append(Rect(lo, dx * ex, dy * ey))
    if ceiling:
        w.rects.append(Rect([lo[0], lo[1], hi[2]], dx * ex, dy * ey))
    sides = {
        "x-": Rect(lo, dy * ey, dz * ez),
        "x+": Rect([hi[0], lo[1], lo[2]], dy * ey, dz * ez),
        "y-": Rect(lo, dx * ex, dz * ez),
        "y+": Rect([lo[0], hi[1], lo[2]], dx * ex, dz * ez),
    }
    w.rects.extend(sides[k] for k in walls)
    return w


def box_obstacle(lo, hi) -> WorldSpec:
    """Closed box (five visible faces, no bottom)."""
    return box_room(lo, hi, floor=False, ceiling=True)


def pole(x: float, y: float, z0: float, z1: float, radius: float = 0.0) -> Segment:
    return Segment([x, y, z0], [x, y, z1], radius)


def panel(center, yaw_deg: float, tilt_deg: float, width: float, height: float) -> Rect:
    """Rectangle whose normal has the given yaw and elevation (tilt) angles."""
    yaw, tilt = math.radians(yaw_deg), math.radians(tilt_deg)
    normal = np.array([math.cos(tilt) * math.cos(yaw), math.cos(tilt) * math.sin(yaw), math.sin(tilt)])
    side = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
    up = np.cross(normal, side)
    c = np.asarray(center, float)
    return Rect(c - 0.5 * width * side - 0.5 * height * up, width * side, height * up)


def roughen(world: WorldSpec, rng: np.random.Generator, tile: float = 2.0,
            sigma_deg: float = 1.5) -> WorldSpec:
    """Split every rectangle into tiles of about ``tile`` metres, each tilted slightly.

    Real walls and floors are not perfectly flat; the tilts (Gaussian,
    ``sigma_deg`` about both in-plane axes through the tile centre) give
    plane normals a realistic spread.
    """
    rects = []
    for r in world.rects:
        lu, lv = np.linalg.norm(r.u), np.linalg.norm(r.v)
        nu, nv = max(1, round(lu / tile)), max(1, round(lv / tile))
        du, dv = r.u / nu, r.v / nv
        for i in range(nu):
            for j in range(nv):
                o = r.origin + i * du + j * dv
                c = o + 0.5 * (du + dv)
                axes = np.stack([du / np.linalg.norm(du), dv / np.linalg.norm(dv)])
                tilt = np.radians(rng.normal(scale=sigma_deg, size=2)) @ axes
                q = so3_exp(tilt)
                u, v = q @ du, q @ dv
                rects.append(Rect(c - 0.5 * (u + v), u, v))
    return WorldSpec(rects, list(world.segments), world.waypoints, world.step, world.sensor)


# -- scanning -------------------------------------------------------------------


def _sample_rect(rect: Rect, center: np.ndarray, radius: float, density: float,
                 rng: np.random.Generator) -> np.ndarray:
    lu, lv = np.linalg.norm(rect.u), np.linalg.norm(rect.v)
    uh, vh = rect.u / lu, rect.v / lv
    rel = center - rect.origin
    dist_plane = abs(float(rel @ rect.normal))
    if dist_plane > radius:
        return np.empty((0, 3))
    a0, a1 = max(0.0, rel @ uh - radius), min(lu, rel @ uh + radius)
    b0, b1 = max(0.0, rel @ vh - radius), min(lv, rel @ vh + radius)
    if a1 <= a0 or b1 <= b0:
        return np.empty((0, 3))
    n = rng.poisson(density * (a1 - a0) * (b1 - b0))
    a = rng.uniform(a0, a1, n)
    b = rng.uniform(b0, b1, n)
    pts = rect.origin + a[:, None] * uh + b[:, None] * vh
    return pts[np.sum((pts - center) ** 2, axis=1) <= radius * radius]


def _sample_segment(seg: Segment, center: np.ndarray, radius: float, density: float,
                    rng: np.random.Generator) -> np.ndarray:
    d = seg.p1 - seg.p0
    length = float(np.linalg.norm(d))
    dh = d / length
    s = float((center - seg.p0) @ dh)
    s0, s1 = max(0.0, s - radius), min(length, s + radius)
    if s1 <= s0:
        return np.empty((0, 3))
    n = rng.poisson(density * (s1 - s0))
    pts = seg.p0 + rng.uniform(s0, s1, n)[:, None] * dh
    if seg.radius > 0.0:
        e1 = np.cross(dh, [1.0, 0.0, 0.0] if abs(dh[0]) < 0.9 else [0.0, 1.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(dh, e1)
        ang = rng.uniform(0.0, 2.0 * math.pi, n)
        pts = pts + seg.radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
    return pts[np.sum((pts - center) ** 2, axis=1) <= radius * radius]


def sample_world(world: WorldSpec, center, radius: float, rng: np.random.Generator,
                 plane_density: float | None = None, line_density: float | None = None,
                 noise: float | None = None) -> np.ndarray:
    """World-frame points of every primitive within ``radius`` of ``center``."""
    s = world.sensor
    pd = s.plane_density if plane_density is None else plane_density
    ld = s.line_density if line_density is None else line_density
    sigma = s.noise if noise is None else noise
    c = np.asarray(center, dtype=float)
    chunks = [_sample_rect(r, c, radius, pd, rng) for r in world.rects]
    chunks += [_sample_segment(g, c, radius, ld, rng) for g in world.segments]
    pts = np.concatenate(chunks) if chunks else np.empty((0, 3))
    if sigma > 0.0 and len(pts):
        pts = pts + rng.normal(scale=sigma, size=pts.shape)
    return pts


def scan(world: WorldSpec, pose: RigidTransform, rng: np.random.Generator) -> np.ndarray:
    """Sensor-frame scan taken at the true ``pose``."""
    pts = sample_world(world, pose.translation, world.sensor.range, rng)
    return pose.inverse().apply(pts)


# -- trajectories -----------------------------------------------------------------


def trajectory_from_waypoints(waypoints, step: float) -> list[RigidTransform]:
    """Poses every ``step`` metres along a polyline, heading along the current leg."""
    wp = np.asarray(waypoints, dtype=float)
    if len(wp) < 2:
        raise InvalidInputError("need at least two waypoints")
    poses = []
    carry = 0.0
    for a, b in zip(wp[:-1], wp[1:]):
        leg = b - a
        length = float(np.linalg.norm(leg))
        if length == 0.0:
            continue
        heading = math.atan2(leg[1], leg[0])
        rot = so3_exp([0.0, 0.0, heading])
        s = carry
        while s < length - 1e-9:
            poses.append(RigidTransform(rot, a + leg * (s / length)))
            s += step
        carry = s - length
    poses.append(RigidTransform(poses[-1].rotation, wp[-1]))
    return poses


def drift_twists(n: int, drift: DriftSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-frame ``(rho, omega)`` drift increments; row 0 is zero."""
    out = np.zeros((n, 6))
    if n < 2 or (drift.translation_rate == 0.0 and drift.rotation_rate_deg == 0.0):
        return out

    def unit(size):
        v = rng.normal(size=size)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def fixed(axis):
        if axis is None:
            return unit(3)
        a = np.asarray(axis, dtype=float)
        if a.shape != (3,) or not np.linalg.norm(a) > 0:
            raise InvalidInputError(f"drift axis must be a nonzero 3-vector, got {axis}")
        return a / np.linalg.norm(a)

    if drift.systematic:
        tu = np.broadcast_to(fixed(drift.translation_axis), (n - 1, 3))
        ru = np.broadcast_to(fixed(drift.rotation_axis), (n - 1, 3))
    else:
        tu = unit((n - 1, 3))
        ru = unit((n - 1, 3))
    out[1:, :3] = drift.translation_rate * tu
    out[1:, 3:] = math.radians(drift.rotation_rate_deg) * ru
    return out


def apply_drift(true_poses: Sequence[RigidTransform], twists: np.ndarray) -> list[RigidTransform]:
    """Odometry: D_k = D_(k-1) * (T_(k-1)^-1 T_k) * exp(twist_k), D_0 = T_0."""
    out = [true_poses[0]]
    for k in range(1, len(true_poses)):
        rel = true_poses[k - 1].inverse() @ true_poses[k]
        if np.any(twists[k]):
            rel = rel @ se3_exp(twists[k])
        out.append(out[-1] @ rel)
    return out


def generate_synthetic(world: WorldSpec, drift: DriftSpec, seed: int, frame_rate: float = 10.0) -> SyntheticDataset:
    """Deterministic dataset: scans at the true poses, drifted odometry."""
    if not world.rects and not world.segments:
        raise InvalidInputError("world has no surfaces")
    true_poses = trajectory_from_waypoints(world.waypoints, world.step)
    twists = drift_twists(len(true_poses), drift, np.random.default_rng([seed, 1]))
    odom = apply_drift(true_poses, twists)
    frames = [scan(world, pose, np.random.default_rng([seed, 2, k])) for k, pose in enumerate(true_poses)]
    stamps = np.arange(len(true_poses)) / frame_rate
    return SyntheticDataset(frames, true_poses, odom, stamps, twists)


# -- preset scenes ------------------------------------------------------------------


def furnished_room() -> WorldSpec:
    """Axis-aligned 22 x 15 x 4 m room with box furniture and three poles."""
    w = box_room([0, 0, 0], [22, 15, 4])
    for lo, hi in (([2, 2, 0], [5, 3.5, 1]), ([14, 9, 0], [18, 11, 1.3]), ([8, 2, 0], [9.5, 4, 2.2]),
                   ([3, 10, 0], [6, 13, 1.6]), ([16, 2, 0], [20, 3, 0.8])):
        w.extend(box_obstacle(lo, hi))
    w.segments += [pole(7, 7, 0, 4), pole(12, 5, 0, 4), pole(18, 13, 0, 4)]
    return w


def pitched_hall() -> WorldSpec:
    """Hall with a pitched roof, skewed end walls and tilted panels."""
    w = WorldSpec()
    w.rects.append(Rect([0, 0, 0], [14, 0, 0], [0, 9, 0]))
    w.rects += [panel([7, 0, 1.7], 90, 0, 14, 3.4), panel([7, 9, 1.7], -90, 0, 14, 3.4)]
    w.rects += [panel([0, 4.5, 1.7], 20, 0, 9, 3.4), panel([14, 4.5, 1.7], 200, 0, 9, 3.4)]
    w.rects += [panel([7, 2.5, 4.2], 90, -60, 14, 5.6), panel([7, 6.5, 4.2], -90, -60, 14, 5.6)]
    w.rects += [panel([4, 4, 0.6], 45, 35, 2, 1.5), panel([10, 5, 0.8], 160, -25, 2, 1.5)]
    w.segments += [pole(3, 5, 0, 4), pole(11, 3, 0, 4)]
    return w


def dense_keyframe(world: WorldSpec, rng: np.random.Generator, density: float = 60.0) -> np.ndarray:
    """Every surface of ``world`` densely sampled, as one world-frame cloud."""
    lo = np.min([np.minimum.reduce([r.origin, r.origin + r.u, r.origin + r.v, r.origin + r.u + r.v])
                 for r in world.rects], axis=0)
    hi = np.max([np.maximum.reduce([r.origin, r.origin + r.u, r.origin + r.v, r.origin + r.u + r.v])
                 for r in world.rects], axis=0)
    center = 0.5 * (lo + hi)
    radius = float(np.linalg.norm(hi - lo))
    return sample_world(world, center, radius, rng, plane_density=density, line_density=density, noise=0.01)


def _wall(p0, p1, z0: float, height: float, lean_deg: float = 0.0, outward=None) -> Rect:
    """Vertical (optionally leaning) wall over the floor segment ``p0 -> p1``."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    up = np.array([0.0, 0.0, height])
    if lean_deg:
        up = up + height * math.tan(math.radians(lean_deg)) * np.asarray(outward, float)
    return Rect([p0[0], p0[1], z0], [p1[0] - p0[0], p1[1] - p0[1], 0.0], up)


def _decorate(w: WorldSpec, start, axis, lateral, length: float, width: float, height,
              rng: np.random.Generator) -> None:
    """Boxes, pilasters, panels, poles, braces and beams along one corridor.

    ``height`` is the ceiling height, a number or a function of the distance
    along ``axis``.  The centre line is kept clear.
    """
    start, axis, lateral = (np.asarray(v, float) for v in (start, axis, lateral))
    hfun = height if callable(height) else (lambda _s, h=float(height): h)

    def at(s, l, z=0.0):
        return start + s * axis + l * lateral + np.array([0.0, 0.0, z])

    half = 0.5 * width
    for _ in range(8):
        s = rng.uniform(2.0, length - 2.0)
        side = rng.choice([-1.0, 1.0])
        sx, sl, sz = rng.uniform(0.8, 2.0), rng.uniform(0.6, 1.2), rng.uniform(0.6, 1.8)
        c = at(s, side * (half - 0.2 - 0.5 * sl))
        ext = 0.5 * (sx * np.abs(axis) + sl * np.abs(lateral))
        w.extend(box_obstacle([c[0] - ext[0], c[1] - ext[1], 0.0], [c[0] + ext[0], c[1] + ext[1], sz]))
    # pilasters against both walls at irregular spacing
    for side in (-1.0, 1.0):
        s = rng.uniform(0.5, 3.0)
        while s < length - 1.0:
            wd, dp = rng.uniform(0.5, 0.8), rng.uniform(0.3, 0.5)
            c = at(s, side * (half - 0.5 * dp))
            ext = 0.5 * (wd * np.abs(axis) + dp * np.abs(lateral))
            w.extend(box_room([c[0] - ext[0], c[1] - ext[1], 0.0], [c[0] + ext[0], c[1] + ext[1], hfun(s)],
                              floor=False, ceiling=False))
            s += rng.uniform(2.5, 6.0)
    heading = math.degrees(math.atan2(axis[1], axis[0]))
    for _ in range(3):
        s = rng.uniform(1.0, length - 1.0)
        side = rng.choice([-1.0, 1.0])
        c = at(s, side * (half - 0.6), rng.uniform(0.8, hfun(s) - 0.8))
        w.rects.append(panel(c, heading + rng.uniform(-80, 80) + (90 if side < 0 else -90),
                             rng.uniform(-40, 40), 1.6, 1.2))
    for _ in range(24):
        s = rng.uniform(0.5, length - 0.5)
        c = at(s, rng.choice([-1.0, 1.0]) * (half - rng.uniform(1.1, 1.5)))
        top = hfun(s) if rng.random() < 0.5 else rng.uniform(1.0, 1.6)  # columns and short posts
        w.segments.append(pole(c[0], c[1], 0.0, top, radius=rng.uniform(0.05, 0.1)))
    # diagonal braces and free-standing oblique panels: directions well off the horizontal
    for _ in range(6):
        s = rng.uniform(1.5, length - 1.5)
        l = rng.choice([-1.0, 1.0]) * (half - rng.uniform(1.2, 1.6))
        run = rng.uniform(1.2, 2.2) * rng.choice([-1.0, 1.0])
        drift = rng.uniform(-0.6, 0.6)
        top = min(hfun(s - run), hfun(s + run)) - 0.3
        w.segments.append(Segment(at(s - run, l - drift, 0.3), at(s + run, l + drift, top),
                                  rng.uniform(0.06, 0.12)))
    for _ in range(3):
        s = rng.uniform(2.0, length - 2.0)
        c = at(s, rng.choice([-1.0, 1.0]) * (half - 1.4), rng.uniform(1.2, hfun(s) - 1.2))
        w.rects.append(panel(c, heading + rng.uniform(0, 360), rng.uniform(25, 60), 1.4, 1.0))
    # beams hang mid-cell (with the default grid offset), clear of floor and ceiling
    for _ in range(3):
        s = rng.uniform(1.0, length - 1.0)
        skew = rng.uniform(-1.5, 1.5)
        z = rng.uniform(2.15, 2.25) if hfun(s) >= 3.0 else 0.5 * hfun(s)
        w.segments.append(Segment(at(s - skew, -half + 0.1, z), at(s + skew, half - 0.1, z),
                                  rng.uniform(0.08, 0.15)))


def _sections(rng: np.random.Generator, s0: float, s1: float, low: float, high: float
              ) -> list[tuple[float, float, float]]:
    """Split ``[s0, s1]`` into 5-10 m pieces, each with its own ceiling height."""
    out = []
    s = s0
    while s < s1 - 1e-9:
        e = s + rng.uniform(5.0, 10.0)
        if s1 - e < 4.0:
            e = s1
        out.append((s, e, float(rng.uniform(low, high))))
        s = e
    return out


def _height_fn(sections):
    ends = np.array([e for _, e, _ in sections])
    hs = [h for _, _, h in sections]
    return lambda s: hs[min(int(np.searchsorted(ends, s)), len(hs) - 1)]


def square_loop_world(side: float = 40.0, width: float = 6.0, height: float = 3.0,
                      seed: int = 7, height_spread: float = 1.2) -> WorldSpec:
    """Four corridors around a square, each with its own cross-section and clutter.

    Corridor centre lines run counter-clockwise around ``[0, side]^2``; each
    corridor owns the corner square it starts in.  Ceiling heights change
    every 5-10 m (``height`` to ``height + height_spread``) with a bulkhead
    face at every change.  South: flat ceilings.  East: pitched ceilings.
    North: outer wall leaning out.  West: saw-tooth inner wall.
    """
    rng = np.random.default_rng(seed)
    L, b = float(side), 0.5 * width
    lean = math.tan(math.radians(18.0))
    w = WorldSpec()
    corridors = [
        ("south", [0.0, 0.0], [1.0, 0.0]),
        ("east", [L, 0.0], [0.0, 1.0]),
        ("north", [L, L], [-1.0, 0.0]),
        ("west", [0.0, L], [0.0, -1.0]),
    ]
    sections = [_sections(rng, -b, L - b, height, height + height_spread) for _ in corridors]
    for k, (name, start, axis) in enumerate(corridors):
        c0 = np.array([start[0], start[1], 0.0])
        u = np.array([axis[0], axis[1], 0.0])
        lat = np.array([-axis[1], axis[0], 0.0])  # left, towards the square's centre
        up = np.array([0.0, 0.0, 1.0])

        def at(s, l, z=0.0):
            return c0 + s * u + l * lat + z * up

        def outer(z):  # lateral position of the outer wall at height z
            return -b - (z * lean if name == "north" else 0.0)

        secs = sections[k]
        w.rects.append(Rect(at(-b, -b), L * u, width * lat))  # floor
        for s0, s1, h in secs:
            n = s1 - s0
            if name == "east":
                ridge = h + 1.2
                w.rects.append(Rect(at(s0, -b, h), n * u, at(0, 0, ridge) - at(0, -b, h)))
                w.rects.append(Rect(at(s0, 0, ridge), n * u, at(0, b, h) - at(0, 0, ridge)))
            else:
                w.rects.append(Rect(at(s0, outer(h), h), n * u, (b - outer(h)) * lat))
            w.rects.append(Rect(at(s0, -b), n * u, at(0, outer(h), h) - at(0, -b)))  # outer wall
            a0, a1 = max(s0, b), min(s1, L - b)
            if a1 > a0 and name != "west":
                w.rects.append(Rect(at(a0, b), (a1 - a0) * u, h * up))  # inner wall
        # bulkhead faces between sections, and towards the next corridor's corner
        nxt = sections[(k + 1) % 4][0][2]
        steps = [(e, h0, h1) for (_, e, h0), (_, _, h1) in zip(secs, secs[1:])] + [(L - b, secs[-1][2], nxt)]
        for s, h0, h1 in steps:
            lo, hi = min(h0, h1), max(h0, h1)
            if hi - lo > 1e-9:
                w.rects.append(Rect(at(s, outer(lo), lo), (b - outer(lo)) * lat, (hi - lo) * up))
        # corner back wall behind the start of the corridor
        h_first = secs[0][2]
        w.rects.append(Rect(at(-b, -b), width * lat, h_first * up))
        if name == "west":
            hfun = _height_fn(secs)
            s = b
            while s < L - b - 1e-9:
                s1, s2 = min(s + 2.0, L - b), min(s + 4.0, L - b)
                w.rects.append(Rect(at(s, b), at(s1, b - 1.2) - at(s, b), hfun(s) * up))
                if s2 > s1:
                    w.rects.append(Rect(at(s1, b - 1.2), at(s2, b) - at(s1, b - 1.2), hfun(s1) * up))
                s = s2
        _decorate(w, start + [0.0], axis + [0.0], lat, L - b, width, _height_fn(secs), rng)
    return w


# keeps walls, floors and ceilings off cell boundaries of a unit grid
GRID_OFFSET = (0.31, 0.43, 0.17)


def square_loop_spec(side: float = 40.0, laps_extra: float = 20.0, step: float = 1.0,
                     width: float = 6.0, height: float = 3.0, seed: int = 7,
                     offset=GRID_OFFSET, roughness_deg: float = 1.5) -> WorldSpec:
    """Square-loop world with a trajectory of one lap plus ``laps_extra`` metres.

    The run starts half-way along the south corridor so the revisit begins
    exactly where the first keyframe began.
    """
    w = square_loop_world(side, width, height, seed)
    z = w.sensor.height
    half = 0.5 * side
    pts = [[half, 0, z], [side, 0, z], [side, side, z], [0, side, z], [0, 0, z], [half, 0, z],
           [half + laps_extra, 0, z]]
    w.waypoints = np.array(pts, dtype=float)
    w.step = step
    if roughness_deg > 0.0:
        w = roughen(w, np.random.default_rng([seed, 99]), sigma_deg=roughness_deg)
    return w.translated(offset)


def straight_corridor_spec(length: float = 60.0, width: float = 6.0, height: float = 3.0,
                           step: float = 1.0, seed: int = 11, offset=GRID_OFFSET) -> WorldSpec:
    """One long decorated corridor driven once end to end (no revisits)."""
    rng = np.random.default_rng(seed)
    w = box_room([-5.0, -0.5 * width, 0.0], [length + 5.0, 0.5 * width, height])
    _decorate(w, [0, 0, 0], [1, 0, 0], [0, 1, 0], length, width, height, rng)
    z = w.sensor.height
    w.waypoints = np.array([[0, 0, z], [length, 0, z]], dtype=float)
    w.step = step
    return w.translated(offset)
