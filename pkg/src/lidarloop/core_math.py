"""Rigid-body transforms and 3x3 symmetric eigen-decompositions.

Twists are ordered ``(rho, omega)``: translation part first, rotation
part second.  Poses are perturbed on the right, ``T * exp(xi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TWO_PI_3 = 2.0 * math.pi / 3.0
_SMALL_ANGLE = 1e-4
_DEGENERATE_GAP = 1e-10


class InvalidInputError(ValueError):
    """Raised on malformed numeric input (non-finite, wrong shape, not symmetric...)."""


class SingularityError(ValueError):
    """Raised when a logarithm is requested too close to a rotation by pi."""


# ---------------------------------------------------------------------------
# eigen-decomposition


@dataclass(frozen=True)
class SymmetricEigen3:
    eigenvalues: np.ndarray  # (3,), descending
    eigenvectors: np.ndarray  # (3, 3), column i pairs with eigenvalue i


def canonicalize_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude component is positive.

    Ties go to the first component reaching the maximum.  Works on a single
    (3, 3) matrix or a stack (..., 3, 3).
    """
    v = np.array(vectors, dtype=float, copy=True)
    idx = np.argmax(np.abs(v), axis=-2)  # first max on ties
    pivot = np.take_along_axis(v, idx[..., None, :], axis=-2)
    sign = np.where(pivot < 0.0, -1.0, 1.0)
    return v * sign


def _check_symmetric(matrix) -> np.ndarray:
    a = np.asarray(matrix, dtype=float)
    if a.shape != (3, 3):
        raise InvalidInputError(f"expected a 3x3 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains non-finite entries")
    if np.max(np.abs(a - a.T)) > 1e-12:
        raise InvalidInputError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def _trig_eigenvalues(b: np.ndarray) -> tuple[float, float, float]:
    q = (b[0, 0] + b[1, 1] + b[2, 2]) / 3.0
    p1 = b[0, 1] ** 2 + b[0, 2] ** 2 + b[1, 2] ** 2
    p2 = (b[0, 0] - q) ** 2 + (b[1, 1] - q) ** 2 + (b[2, 2] - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    if p == 0.0:
        return q, q, q
    c = (b - q * np.eye(3)) / p
    r = 0.5 * (
        c[0, 0] * (c[1, 1] * c[2, 2] - c[1, 2] * c[2, 1])
        - c[0, 1] * (c[1, 0] * c[2, 2] - c[1, 2] * c[2, 0])
        + c[0, 2] * (c[1, 0] * c[2, 1] - c[1, 1] * c[2, 0])
    )
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0
    l1 = q + 2.0 * p * math.cos(phi)
    l3 = q + 2.0 * p * math.cos(phi + _TWO_PI_3)
    l2 = 3.0 * q - l1 - l3
    return l1, l2, l3


def _isolated_eigenvector(b: np.ndarray, lam: float) -> np.ndarray:
    m = b - lam * np.eye(3)
    candidates = (
        np.cross(m[0], m[1]),
        np.cross(m[0], m[2]),
        np.cross(m[1], m[2]),
    )
    norms = [float(c @ c) for c in candidates]
    best = int(np.argmax(norms))
    return candidates[best] / math.sqrt(norms[best])


def _orthonormal_complement(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if abs(w[0]) > abs(w[1]):
        inv = 1.0 / math.sqrt(w[0] ** 2 + w[2] ** 2)
        u = np.array([-w[2] * inv, 0.0, w[0] * inv])
    else:
        inv = 1.0 / math.sqrt(w[1] ** 2 + w[2] ** 2)
        u = np.array([0.0, w[2] * inv, -w[1] * inv])
    return u, np.cross(w, u)


def _second_eigenvector(b: np.ndarray, first: np.ndarray, lam: float) -> np.ndarray:
    # null vector of the 2x2 restriction of (B - lam I) to span(u, v)
    u, v = _orthonormal_complement(first)
    bu, bv = b @ u, b @ v
    m00 = u @ bu - lam
    m01 = u @ bv
    m11 = v @ bv - lam
    a00, a01, a11 = abs(m00), abs(m01), abs(m11)
    if a00 >= a11:
        if max(a00, a01) == 0.0:
            return u
        if a00 >= a01:
            m01 /= m00
            m00 = 1.0 / math.sqrt(1.0 + m01 * m01)
            m01 *= m00
        else:
            m00 /= m01
            m01 = 1.0 / math.sqrt(1.0 + m00 * m00)
            m00 *= m01
        out = m01 * u - m00 * v
    else:
        if max(a11, a01) == 0.0:
            return u
        if a11 >= a01:
            m01 /= m11
            m11 = 1.0 / math.sqrt(1.0 + m01 * m01)
            m01 *= m11
        else:
            m11 /= m01
            m01 = 1.0 / math.sqrt(1.0 + m11 * m11)
            m11 *= m01
        out = m11 * u - m01 * v
    return out / np.linalg.norm(out)


def jacobi_eig_sym3(a: np.ndarray, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations; returns unsorted (eigenvalues, eigenvectors)."""
    a = np.array(a, dtype=float, copy=True)
    v = np.eye(3)
    scale = max(np.max(np.abs(a)), 1e-300)
    for _ in range(max_sweeps):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= (1e-18 * scale) ** 2:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def eig_sym3(matrix) -> SymmetricEigen3:
    """Eigen-decomposition of a real symmetric 3x3 matrix.

    Closed-form eigenvalues (trigonometric solution of the characteristic
    cubic) with eigenvectors from cross products; falls back to Jacobi
    sweeps when two eigenvalues are within 1e-10 * ||A|| of each other.
    Eigenvalues come back descending and eigenvector signs canonicalized.
    """
    a = _check_symmetric(matrix)
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        return SymmetricEigen3(np.zeros(3), np.eye(3))
    b = a / scale
    l1, l2, l3 = _trig_eigenvalues(b)
    norm = float(np.linalg.norm(b))
    if min(l1 - l2, l2 - l3) <= _DEGENERATE_GAP * norm:
        w, v = jacobi_eig_sym3(b)
    else:
        if l1 - l2 >= l2 - l3:
            v1 = _isolated_eigenvector(b, l1)
            v2 = _second_eigenvector(b, v1, l2)
            v3 = np.cross(v1, v2)
        else:
            v3 = _isolated_eigenvector(b, l3)
            v2 = _second_eigenvector(b, v3, l2)
            v1 = np.cross(v2, v3)
        v = np.column_stack([v1, v2, v3])
        # Rayleigh quotients are accurate to O(|dv|^2)
        w = np.einsum("ij,ik,kj->j", v, b, v)
    order = np.argsort(-w, kind="stable")
    w = w[order] * scale
    v = canonicalize_signs(v[:, order])
    return SymmetricEigen3(w, v)


def eig_sym3_batch(matrices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized closed-form decomposition of a stack of symmetric 3x3 matrices.

    Returns ``(eigenvalues (N, 3) descending, eigenvectors (N, 3, 3))`` with
    canonicalized signs.  Rows with near-degenerate spectra are routed through
    :func:`eig_sym3`.
    """
    a = np.asarray(matrices, dtype=float)
    n = a.shape[0]
    vals = np.zeros((n, 3))
    vecs = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if n == 0:
        return vals, vecs
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    scale = np.max(np.abs(a), axis=(1, 2))
    nz = scale > 0.0
    b = a / np.where(nz, scale, 1.0)[:, None, None]

    q = np.trace(b, axis1=1, axis2=2) / 3.0
    p1 = b[:, 0, 1] ** 2 + b[:, 0, 2] ** 2 + b[:, 1, 2] ** 2
    d = b[:, [0, 1, 2], [0, 1, 2]] - q[:, None]
    p = np.sqrt((np.sum(d * d, axis=1) + 2.0 * p1) / 6.0)
    safe_p = np.where(p > 0.0, p, 1.0)
    c = (b - q[:, None, None] * np.eye(3)) / safe_p[:, None, None]
    r = np.clip(0.5 * np.linalg.det(c), -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + _TWO_PI_3)
    l2 = 3.0 * q - l1 - l3

    fro = np.sqrt(np.sum(b * b, axis=(1, 2)))
    degenerate = nz & (np.minimum(l1 - l2, l2 - l3) <= _DEGENERATE_GAP * fro)
    ok = nz & ~degenerate

    first_is_top = (l1 - l2) >= (l2 - l3)
    lam = np.where(first_is_top, l1, l3)
    m = b - lam[:, None, None] * np.eye(3)
    cands = np.stack(
        [np.cross(m[:, 0], m[:, 1]), np.cross(m[:, 0], m[:, 2]), np.cross(m[:, 1], m[:, 2])],
        axis=1,
    )
    cn = np.sum(cands * cands, axis=2)
    best = np.argmax(cn, axis=1)
    e0 = cands[np.arange(n), best] / np.sqrt(np.maximum(cn[np.arange(n), best], 1e-300))[:, None]

    # second eigenvector inside the orthogonal complement of e0
    use_x = np.abs(e0[:, 0]) > np.abs(e0[:, 1])
    ux = np.stack([-e0[:, 2], np.zeros(n), e0[:, 0]], axis=1)
    uy = np.stack([np.zeros(n), e0[:, 2], -e0[:, 1]], axis=1)
    u = np.where(use_x[:, None], ux, uy)
    u /= np.linalg.norm(u, axis=1, keepdims=True).clip(1e-300)
    v = np.cross(e0, u)
    bu = np.einsum("nij,nj->ni", b, u)
    bv = np.einsum("nij,nj->ni", b, v)
    m00 = np.sum(u * bu, axis=1) - l2
    m01 = np.sum(u * bv, axis=1)
    m11 = np.sum(v * bv, axis=1) - l2
    row0 = np.abs(m00) >= np.abs(m11)
    x = np.where(row0, m01, m11)
    y = np.where(row0, -m00, -m01)
    norm_xy = np.hypot(x, y)
    zero = norm_xy == 0.0
    x = np.where(zero, 1.0, x / np.where(zero, 1.0, norm_xy))
    y = np.where(zero, 0.0, y / np.where(zero, 1.0, norm_xy))
    v2 = x[:, None] * u + y[:, None] * v

    top = first_is_top[:, None]
    v1 = np.where(top, e0, np.cross(v2, e0))
    v3 = np.where(top, np.cross(e0, v2), e0)
    stack = np.stack([v1, v2, v3], axis=2)
    w = np.einsum("nij,nik,nkj->nj", stack, b, stack)
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    stack = np.take_along_axis(stack, order[:, None, :], axis=2)

    vals[ok] = w[ok] * scale[ok, None]
    vecs[ok] = canonicalize_signs(stack[ok])
    for i in np.flatnonzero(degenerate):
        res = eig_sym3(a[i])
        vals[i] = res.eigenvalues
        vecs[i] = res.eigenvectors
    return vals, vecs


# ---------------------------------------------------------------------------
# SO(3) / SE(3)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with Taylor limits."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    t2 = theta * theta
    return s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta)


def so3_exp(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(w))
    a, b, _ = _so3_coeffs(theta)
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=float)
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_t = 0.5 * float(np.linalg.norm(vee))
    cos_t = 0.5 * (float(np.trace(r)) - 1.0)
    theta = math.atan2(sin_t, cos_t)
    if theta > math.pi - 1e-6:
        raise SingularityError(f"rotation angle {theta:.9f} rad too close to pi")
    if theta < _SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * vee
    return (theta / (2.0 * sin_t)) * vee


def so3_left_jacobian(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    _, b, c = _so3_coeffs(float(np.linalg.norm(w)))
    k = skew(w)
    return np.eye(3) + b * k + c * (k @ k)


def so3_left_jacobian_inv(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < _SMALL_ANGLE:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        d = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)
    k = skew(w)
    return np.eye(3) - 0.5 * k + d * (k @ k)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x_world = rotation @ x_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r, t = self.rotation, self.translation
        if r.shape != (3, 3) or not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            return False
        return bool(
            np.max(np.abs(r @ r.T - np.eye(3))) <= tol and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def validate_transform(t: RigidTransform, tol: float = 1e-9) -> RigidTransform:
    if not isinstance(t, RigidTransform) or not t.is_valid(tol):
        raise InvalidInputError("invalid rigid transform")
    return t


def orthonormalize(rotation) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


def _se3_q(rho: np.ndarray, omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    rx, wx = skew(rho), skew(omega)
    wr = wx @ rx
    rw = rx @ wx
    wrw = wr @ wx
    if theta < 0.05:  # the closed forms cancel catastrophically near zero
        t2 = theta * theta
        t4 = t2 * t2
        c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        t2 = theta * theta
        c1 = (theta - s) / (t2 * theta)
        c2 = (0.5 * t2 + c - 1.0) / (t2 * t2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (
        0.5 * rx
        + c1 * (wr + rw + wrw)
        + c2 * (wx @ wr + rw @ wx - 3.0 * wrw)
        + c3 * (wrw @ wx + wx @ wrw)
    )


def se3_exp(xi) -> RigidTransform:
    v = np.asarray(xi, dtype=float).reshape(6)
    rho, omega = v[:3], v[3:]
    return RigidTransform(so3_exp(omega), so3_left_jacobian(omega) @ rho)


def se3_log(t: RigidTransform) -> np.ndarray:
    omega = so3_log(t.rotation)
    rho = so3_left_jacobian_inv(omega) @ t.translation
    return np.concatenate([rho, omega])


def se3_left_jacobian(xi) -> np.ndarray:
    v = np.asarray(xi, dtype=float).reshape(6)
    rho, omega = v[:3], v[3:]
    j = so3_left_jacobian(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[:3, 3:] = _se3_q(rho, omega)
    return out


def se3_left_jacobian_inv(xi) -> np.ndarray:
    v = np.asarray(xi, dtype=float).reshape(6)
    rho, omega = v[:3], v[3:]
    ji = so3_left_jacobian_inv(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = ji
    out[3:, 3:] = ji
    out[:3, 3:] = -ji @ _se3_q(rho, omega) @ ji
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def adjoint(t: RigidTransform) -> np.ndarray:
    """6x6 adjoint for ``(rho, omega)`` ordering: Ad(T) exp(xi) = T exp(xi) T^-1."""
    out = np.zeros((6, 6))
    out[:3, :3] = t.rotation
    out[3:, 3:] = t.rotation
    out[:3, 3:] = skew(t.translation) @ t.rotation
    return out


def rotation_angle(rotation) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    r = np.asarray(rotation, dtype=float)
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return math.atan2(0.5 * float(np.linalg.norm(vee)), 0.5 * (float(np.trace(r)) - 1.0))


def random_rotation(rng: np.random.Generator, angle: float | None = None) -> np.ndarray:
    """Uniform random rotation, or one of the given angle about a uniform axis."""
    if angle is None:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        return quat_to_rotation(q)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * angle)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation from a quaternion in ``(x, y, z, w)`` order."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(r) -> np.ndarray:
    """Quaternion ``(x, y, z, w)`` with w >= 0 (Shepperd's method)."""
    m = np.asarray(r, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0.0 else q
