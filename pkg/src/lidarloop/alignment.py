"""Feature-cell registration of a query keyframe against a matched map region.

Residuals are point-to-plane distances for plane cells and point-to-line
offsets for line cells, evaluated on cell means.  The pose is refined by
damped Gauss-Newton with a right perturbation ``T <- T * exp(xi)`` and a Huber
loss.  Every iteration re-seeks correspondences with an octree box query
around each transformed source mean.

To keep the objective comparable between iterations with different
correspondence sets, a source cell without a partner is charged the loss of a
residual at the search radius.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell_map import CellMap
from .core_math import InvalidInputError, RigidTransform, se3_exp
from .descriptor import LINE, PLANE, FeatureSet, Keyframe, extract_features
from .octree import Octree


class AlignmentError(RuntimeError):
    """No correspondences were found from any initial guess."""


@dataclass
class AlignmentParams:
    search_radius: float | None = None  # default 2 * max cell size
    huber_delta: float = 0.5
    max_iterations: int = 50
    damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    step_tolerance: float = 1e-6
    accept_distance: float = 0.1
    min_features: int = 10
    normal_agreement: float = 0.8  # |cos| between matched directions
    max_sharpness: float | None = 0.1  # drop features whose minor/major eigenvalue ratio exceeds this


@dataclass
class Correspondence:
    source_mean: np.ndarray
    source_direction: np.ndarray
    target_mean: np.ndarray
    target_direction: np.ndarray
    shape: int
    residual: float


@dataclass
class AlignmentResult:
    relative_pose: RigidTransform
    mean_residual: float
    iterations: int
    converged: bool
    accepted: bool
    cost: float = float("inf")
    guess_index: int = -1
    num_correspondences: int = 0
    cost_history: list[float] = field(default_factory=list)


@dataclass
class _Target:
    feats: FeatureSet
    tree: Octree

    @classmethod
    def build(cls, feats: FeatureSet) -> "_Target":
        tree = Octree(leaf_capacity=32)
        for m in feats.means:
            tree.insert(m)
        return cls(feats, tree)


@dataclass
class _Match:
    src: np.ndarray  # source row ids
    tgt: np.ndarray  # target row ids
    unmatched: int


def huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def _find_matches(source: FeatureSet, target: _Target, pose: RigidTransform, radius: float,
                  agreement: float) -> _Match:
    p = pose.apply(source.means)
    d = source.directions @ pose.rotation.T
    box, ids = target.tree.query_boxes_flat(p - radius, p + radius)
    tf = target.feats
    ok = (tf.shapes[ids] == source.shapes[box]) & (np.abs(np.einsum("ij,ij->i", tf.directions[ids], d[box])) >= agreement)
    box, ids = box[ok], ids[ok]
    dist2 = np.sum((tf.means[ids] - p[box]) ** 2, axis=1)
    # nearest candidate per source row; lowest target id wins ties
    order = np.lexsort((ids, dist2, box))
    box, ids = box[order], ids[order]
    first = np.ones(box.size, dtype=bool)
    first[1:] = box[1:] != box[:-1]
    src = box[first]
    return _Match(src, ids[first], len(source) - len(src))


def residuals(source: FeatureSet, target: FeatureSet, pose: RigidTransform, src: np.ndarray,
              tgt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual blocks for the given pairs.

    Returns ``(r, J, owner)``: plane pairs give one row ``(R mu_s + t - mu_t) . n_t``,
    line pairs give three rows ``(R mu_s + t - mu_t) x d_t``.  ``J`` is the
    derivative with respect to a right perturbation ``(rho, omega)`` and
    ``owner`` maps each row to its pair.
    """
    rot = pose.rotation
    mu = source.means[src]
    diff = mu @ rot.T + pose.translation - target.means[tgt]
    # d(R (mu + rho + omega x mu) + t)/d(rho, omega) = [R, -R [mu]x]
    dp = np.concatenate([np.broadcast_to(rot, (len(src), 3, 3)), -rot @ _skew_batch(mu)], axis=2)
    shapes = source.shapes[src]
    n = target.directions[tgt]

    plane = np.flatnonzero(shapes == PLANE)
    line = np.flatnonzero(shapes == LINE)
    r_p = np.einsum("ij,ij->i", diff[plane], n[plane])
    j_p = np.einsum("ij,ijk->ik", n[plane], dp[plane])
    # a x d = -[d]x a
    sk = _skew_batch(n[line])
    r_l = -np.einsum("ijk,ik->ij", sk, diff[line]).reshape(-1)
    j_l = -(sk @ dp[line]).reshape(-1, 6)
    r = np.concatenate([r_p, r_l])
    jac = np.concatenate([j_p, j_l]).reshape(-1, 6)
    owner = np.concatenate([plane, np.repeat(line, 3)])
    return r, jac, owner


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _pair_distances(r: np.ndarray, owner: np.ndarray, npairs: int) -> np.ndarray:
    """Per-pair distance: |r| for planes, norm of the 3-row block for lines."""
    sq = np.zeros(npairs)
    np.add.at(sq, owner, r * r)
    return np.sqrt(sq)


@dataclass
class _Eval:
    cost: float
    match: _Match
    dist: np.ndarray
    r: np.ndarray
    jac: np.ndarray
    owner: np.ndarray


def _evaluate(source, target, pose, params: AlignmentParams, radius: float) -> _Eval:
    m = _find_matches(source, target, pose, radius, params.normal_agreement)
    r, jac, owner = residuals(source, target.feats, pose, m.src, m.tgt)
    dist = _pair_distances(r, owner, len(m.src))
    cost = float(np.sum(huber(dist, params.huber_delta)))
    cost += m.unmatched * float(huber(np.array(radius), params.huber_delta))
    return _Eval(cost, m, dist, r, jac, owner)


def _refine(source: FeatureSet, target: _Target, guess: RigidTransform, params: AlignmentParams,
            radius: float) -> tuple[RigidTransform, _Eval, int, bool, list[float]]:
    pose = guess
    cur = _evaluate(source, target, pose, params, radius)
    history = [cur.cost]
    lam = params.damping
    it = 0
    while it < params.max_iterations:
        it += 1
        if cur.match.src.size == 0:
            return pose, cur, it, False, history
        # Huber as iteratively reweighted least squares on the pair distance
        w_pair = np.where(cur.dist <= params.huber_delta, 1.0,
                          params.huber_delta / np.maximum(cur.dist, 1e-300))
        w = w_pair[cur.owner]
        jw = cur.jac * w[:, None]
        h = jw.T @ cur.jac
        g = jw.T @ cur.r
        step = None
        while lam < 1e12:
            a = h + lam * np.diag(np.diag(h) + 1e-12)
            try:
                step = -np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                lam *= params.damping_up
                continue
            cand_pose = pose @ se3_exp(step)
            cand = _evaluate(source, target, cand_pose, params, radius)
            if cand.cost < cur.cost:
                pose, cur = cand_pose, cand
                lam = max(lam * params.damping_down, 1e-12)
                history.append(cur.cost)
                break
            if np.linalg.norm(step) < params.step_tolerance:
                break
            lam *= params.damping_up
        if step is None or np.linalg.norm(step) < params.step_tolerance or lam >= 1e12:
            break
    # a small step, a stalled damping loop and the iteration cap all count as convergence
    return pose, cur, it, True, history


def _sharp(f: FeatureSet, limit: float) -> FeatureSet:
    s = f.sharpness()
    keep = ~(s > limit)  # unknown sharpness (NaN) is kept
    return f if keep.all() else f.subset(keep)


def default_radius(cell_size) -> float:
    return 2.0 * float(np.max(np.broadcast_to(np.asarray(cell_size, dtype=float), (3,))))


def align(source: FeatureSet, target, initial_guesses, params: AlignmentParams | None = None,
          cell_size=1.0) -> AlignmentResult:
    """Register ``source`` features onto ``target`` (a FeatureSet or a CellMap region).

    The best-cost result over all guesses wins; ties go to the lower guess index.
    """
    params = params or AlignmentParams()
    if isinstance(target, CellMap):
        cell_size = target.cell_size
        target = extract_features(target)
    if len(source) < params.min_features:
        raise InvalidInputError(f"source has {len(source)} feature cells, need {params.min_features}")
    if len(target) == 0:
        raise InvalidInputError("target region has no feature cells")
    if params.max_sharpness is not None:
        source = _sharp(source, params.max_sharpness)
        target = _sharp(target, params.max_sharpness)
        if len(source) == 0 or len(target) == 0:
            raise AlignmentError("no sharp feature cells left")
    guesses = list(initial_guesses) or [RigidTransform.identity()]
    radius = params.search_radius if params.search_radius is not None else default_radius(cell_size)
    tgt = _Target.build(target)

    best = None
    for gi, guess in enumerate(guesses):
        pose, ev, it, conv, hist = _refine(source, tgt, guess, params, radius)
        if ev.match.src.size == 0:
            continue
        if best is None or ev.cost < best[1].cost:
            best = (gi, ev, pose, it, conv, hist)
    if best is None:
        raise AlignmentError("no correspondences from any initial guess")
    gi, ev, pose, it, conv, hist = best
    mean_res = float(np.mean(ev.dist))
    accepted = bool(mean_res < params.accept_distance)
    return AlignmentResult(pose, mean_res, it, conv, accepted, ev.cost, gi, int(ev.match.src.size), hist)


def align_keyframes(query: Keyframe, match: Keyframe, target_region, params: AlignmentParams | None = None,
                    cell_size=1.0, extra_guesses=()) -> AlignmentResult:
    guesses = [*extra_guesses, *initial_guesses_from_histograms(query, match)]
    return align(query.features, target_region, guesses, params, cell_size)


_SIGN_GROUP = tuple(np.diag(s) for s in ((1.0, 1.0, 1.0), (-1.0, -1.0, 1.0), (-1.0, 1.0, -1.0), (1.0, -1.0, -1.0)))


def initial_guesses_from_histograms(source_kf: Keyframe, target_kf: Keyframe) -> list[RigidTransform]:
    """Identity plus one guess per sign flip of the canonical frames.

    A weakly invariant keyframe (no trustworthy canonical frame) yields the
    identity and a pure centroid translation only.
    """
    out = [RigidTransform.identity()]
    cs = _centroid(source_kf.features)
    ct = _centroid(target_kf.features)
    if source_kf.weakly_invariant or target_kf.weakly_invariant:
        if cs is not None and ct is not None:
            out.append(RigidTransform(np.eye(3), ct - cs))
        return out
    rs = np.asarray(source_kf.canonical_rotation)
    rt = np.asarray(target_kf.canonical_rotation)
    for s in _SIGN_GROUP:
        rot = rt.T @ s @ rs
        t = np.zeros(3) if cs is None or ct is None else ct - rot @ cs
        out.append(RigidTransform(rot, t))
    return out


def _centroid(f: FeatureSet) -> np.ndarray | None:
    return None if len(f) == 0 else f.means.mean(axis=0)


def correspondences(source: FeatureSet, target: FeatureSet, pose: RigidTransform,
                    params: AlignmentParams | None = None, cell_size=1.0) -> list[Correspondence]:
    """Matched pairs at ``pose`` with their distances."""
    params = params or AlignmentParams()
    radius = params.search_radius if params.search_radius is not None else default_radius(cell_size)
    tgt = _Target.build(target)
    ev = _evaluate(source, tgt, pose, params, radius)
    out = []
    for k, (i, j) in enumerate(zip(ev.match.src, ev.match.tgt)):
        out.append(Correspondence(source.means[i], source.directions[i], target.means[j],
                                  target.directions[j], int(source.shapes[i]), float(ev.dist[k])))
    return out


def write_correspondences_csv(path, pairs: list[Correspondence]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shape", "sx", "sy", "sz", "sdx", "sdy", "sdz", "tx", "ty", "tz", "tdx", "tdy", "tdz", "residual"])
        for c in pairs:
            w.writerow(["plane" if c.shape == PLANE else "line", *map(repr, map(float, c.source_mean)),
                        *map(repr, map(float, c.source_direction)), *map(repr, map(float, c.target_mean)),
                        *map(repr, map(float, c.target_direction)), repr(c.residual)])
