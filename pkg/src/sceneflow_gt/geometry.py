"""Exact geometric primitives: rigid transforms, rays and ray/triangle hits.

Points and vectors are plain ``float64`` numpy arrays of shape ``(3,)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

# Minimum accepted hit distance along a ray (meters); rejects self-hits.
EPS_T = 1e-7
# Barycentric weights down to -EPS_W are accepted and clamped to 0 so
# that rays through shared edges never fall between two triangles.
EPS_W = 1e-9
# |det| below this fraction of the doubled triangle area counts as parallel.
EPS_PARALLEL = 1e-12

_ORTHO_TOL = 1e-9


def vec3(x, y=None, z=None) -> np.ndarray:
    """Build a finite float64 3-vector from three scalars or one sequence."""
    if y is None and z is None:
        v = np.array(x, dtype=np.float64).reshape(3)
    else:
        v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> rotation @ p + translation``.

    The rotation is checked to be orthonormal with determinant +1 on
    construction; the arrays are stored read-only.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # Quaternion the rotation was built from, kept so documents re-serialize
    # to the same digits.
    source_quaternion: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("rigid transform has non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_translation(cls, x, y=None, z=None) -> RigidTransform:
        return cls(np.eye(3), vec3(x, y, z))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        """Rotation by ``angle`` radians about ``axis`` (Rodrigues)."""
        k = normalize(axis)
        kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        r = np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)
        return cls(r, translation)

    @classmethod
    def from_quaternion(cls, q, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        """From a (w, x, y, z) quaternion; the quaternion is normalized first."""
        source = tuple(float(c) for c in q)
        w, x, y, z = normalize(q)
        r = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(r, translation, source)

    def quaternion(self) -> np.ndarray:
        """(w, x, y, z) quaternion of the rotation.

        Returns the quaternion the transform was built from when there is one,
        otherwise a unit quaternion with w >= 0.
        """
        if self.source_quaternion is not None:
            return np.array(self.source_quaternion)
        m = self.rotation
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = normalize(q)
        return -q if q[0] < 0 else q

    def apply(self, points) -> np.ndarray:
        """Transform a single point ``(3,)`` or a batch ``(N, 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return self.compose(other)

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_row_major(self) -> list[float]:
        """Twelve numbers: the rotation row by row, then the translation."""
        return [float(v) for v in self.rotation.ravel()] + [float(v) for v in self.translation]

    @classmethod
    def from_row_major(cls, values) -> RigidTransform:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ValueError("expected 12 numbers")
        return cls(values[:9].reshape(3, 3), values[9:])

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def transform_point(transform: RigidTransform, p) -> np.ndarray:
    return transform.apply(p)


def rigid_inverse(transform: RigidTransform) -> RigidTransform:
    return transform.inverse()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = vec3(self.origin)
        d = vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@njit(nogil=True, cache=True)
def intersect_triangle(ox, oy, oz, dx, dy, dz, v0, v1, v2):
    """Möller-Trumbore ray/triangle test on scalar ray components.

    Returns ``(t, w0, w1, w2)``; ``t`` is ``inf`` on a miss. Weights within
    ``EPS_W`` below zero are clamped and renormalized.
    """
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x
    area2 = np.sqrt(nx * nx + ny * ny + nz * nz)
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) <= EPS_PARALLEL * area2:
        return np.inf, 0.0, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - v0[0]
    sy = oy - v0[1]
    sz = oz - v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < -EPS_W or u > 1.0 + EPS_W:
        return np.inf, 0.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -EPS_W or u + v > 1.0 + EPS_W:
        return np.inf, 0.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if not t > EPS_T:
        return np.inf, 0.0, 0.0, 0.0
    w0 = 1.0 - u - v
    w1 = u
    w2 = v
    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
        w0 = max(w0, 0.0)
        w1 = max(w1, 0.0)
        w2 = max(w2, 0.0)
        s = w0 + w1 + w2
        w0 /= s
        w1 /= s
        w2 /= s
    return t, w0, w1, w2


def ray_triangle_intersect(ray: Ray, v0, v1, v2):
    """Nearest forward hit of ``ray`` on one triangle.

    Returns ``(t, bary)`` with ``bary`` a length-3 weight array, or ``None``
    for a miss (including parallel rays and degenerate triangles).
    """
    o, d = ray.origin, ray.direction
    t, w0, w1, w2 = intersect_triangle(
        o[0], o[1], o[2], d[0], d[1], d[2],
        np.asarray(v0, dtype=np.float64), np.asarray(v1, dtype=np.float64), np.asarray(v2, dtype=np.float64),
    )
    if not np.isfinite(t):
        return None
    return float(t), np.array([w0, w1, w2])


def barycentric_point(v0, v1, v2, bary) -> np.ndarray:
    """``w0*v0 + w1*v1 + w2*v2``."""
    w0, w1, w2 = bary
    return (
        w0 * np.asarray(v0, dtype=np.float64)
        + w1 * np.asarray(v1, dtype=np.float64)
        + w2 * np.asarray(v2, dtype=np.float64)
    )


def face_normal(v0, v1, v2) -> np.ndarray:
    """Unit geometric normal following the vertex winding (right-hand rule)."""
    v0 = np.asarray(v0, dtype=np.float64)
    return normalize(np.cross(np.asarray(v1) - v0, np.asarray(v2) - v0))
