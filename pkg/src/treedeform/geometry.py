"""Quaternion, SE(3), and dual-quaternion algebra.

Quaternions use the (w, x, y, z) convention. Rigid transforms are stored
as a unit quaternion plus a translation vector; composition renormalizes
the rotation so drift stays bounded. Blending of rigid transforms is done
in dual-quaternion space: convert, sign-align the real parts to the first
element, take the weighted sum, renormalize, convert back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllZeroWeights, EmptyBlendSet

_UNIT_TOL = 1e-9


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two wxyz quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n < 1e-15:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion (sandwich product)."""
    p = np.array([0.0, v[0], v[1], v[2]])
    return quat_mul(quat_mul(q, p), quat_conj(q))[1:]


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle in radians between two unit quaternions.

    Collapses the double cover, so antipodal representations of the same
    rotation give zero.
    """
    dot = float(np.dot(a, b))
    s = min(max(1.0 - dot * dot, 0.0), 1.0)
    return 2.0 * float(np.arcsin(np.sqrt(s)))


@dataclass
class Quaternion:
    """Rotation quaternion, kept unit-norm after construction."""

    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q: np.ndarray) -> "Quaternion":
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n < 1e-15:
            return cls.identity()
        half = 0.5 * angle
        s = np.sin(half) / n
        return cls(float(np.cos(half)), float(axis[0] * s), float(axis[1] * s), float(axis[2] * s))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def normalized(self) -> "Quaternion":
        return Quaternion.from_array(quat_normalize(self.as_array()))

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def mul(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_mul(self.as_array(), other.as_array()))

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.as_array(), np.asarray(v, dtype=float))


@dataclass
class SE3Transform:
    """Rigid transform: unit rotation quaternion plus translation.

    The rotation is renormalized at construction, so any transform built
    through the public constructors satisfies the unit invariant.
    """

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3).copy()
        n = self.rotation.norm()
        if abs(n - 1.0) > _UNIT_TOL:
            self.rotation = self.rotation.normalized()

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls()

    @classmethod
    def from_translation(cls, t: np.ndarray) -> "SE3Transform":
        return cls(Quaternion.identity(), np.asarray(t, dtype=float))

    @classmethod
    def from_arrays(cls, q: np.ndarray, t: np.ndarray) -> "SE3Transform":
        return cls(Quaternion.from_array(quat_normalize(np.asarray(q, dtype=float))),
                   np.asarray(t, dtype=float))

    def clone(self) -> "SE3Transform":
        return SE3Transform(Quaternion(self.rotation.w, self.rotation.x,
                                       self.rotation.y, self.rotation.z),
                            self.translation.copy())


def se3_compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """a after b: rotation a.rot*b.rot, translation a.rot(b.trans) + a.trans."""
    rot = quat_normalize(quat_mul(a.rotation.as_array(), b.rotation.as_array()))
    trans = a.rotation.rotate(b.translation) + a.translation
    return SE3Transform(Quaternion.from_array(rot), trans)


def se3_inverse(m: SE3Transform) -> SE3Transform:
    rot = m.rotation.conjugate()
    trans = -rot.rotate(m.translation)
    return SE3Transform(rot, trans)


def se3_apply(m: SE3Transform, p: np.ndarray) -> np.ndarray:
    return m.rotation.rotate(np.asarray(p, dtype=float)) + m.translation


@dataclass
class DualQuaternion:
    """Dual quaternion: real (rotation) part plus dual (translation) part."""

    real: np.ndarray  # (4,)
    dual: np.ndarray  # (4,)

    @classmethod
    def from_se3(cls, m: SE3Transform) -> "DualQuaternion":
        q = m.rotation.as_array()
        t = np.array([0.0, m.translation[0], m.translation[1], m.translation[2]])
        return cls(q.copy(), 0.5 * quat_mul(t, q))

    def to_se3(self) -> SE3Transform:
        n = np.linalg.norm(self.real)
        real = self.real / n
        dual = self.dual / n
        t = 2.0 * quat_mul(dual, quat_conj(real))[1:]
        return SE3Transform(Quaternion.from_array(real), t)


def dqb_blend(transforms: list[SE3Transform], weights: list[float]) -> SE3Transform:
    """Dual Quaternion Blending of rigid transforms.

    Weights are normalized to sum 1 internally (an unnormalized sum followed
    by renormalization yields the same rigid transform, so callers can pass
    raw skinning weights). Each element's real part is sign-aligned to the
    first element so antipodal quaternion representations blend correctly.
    """
    if len(transforms) == 0 or len(weights) == 0:
        raise EmptyBlendSet("dqb_blend needs at least one transform")
    if len(transforms) != len(weights):
        raise ValueError("transforms and weights must have equal length")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0.0:
        raise AllZeroWeights("all blend weights are zero")
    w = w / total

    ref = transforms[0].rotation.as_array()
    real_sum = np.zeros(4)
    dual_sum = np.zeros(4)
    for m, wi in zip(transforms, w):
        dq = DualQuaternion.from_se3(m)
        sign = -1.0 if float(np.dot(dq.real, ref)) < 0.0 else 1.0
        real_sum += wi * sign * dq.real
        dual_sum += wi * sign * dq.dual
    return DualQuaternion(real_sum, dual_sum).to_se3()
