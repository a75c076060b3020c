"""Independent reference implementations used as test oracles.

Everything here is deliberately written on a different representation
than the library (flat 8-number dual quaternion arrays, explicit Python
loops) so agreement is meaningful. Conventions that are part of the
contract (wxyz order, sign alignment to the first element, weight
normalization) are mirrored; the arithmetic is not shared.
"""

from __future__ import annotations

import math

import numpy as np

from treedeform.geometry import SE3Transform
from treedeform.scaffold import MotionBasis, ScaffoldGraph, build_knn_graph


# ---------------------------------------------------------------------------
# dual quaternion arithmetic on flat 8-vectors [rw rx ry rz dw dx dy dz]

def qmul8(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def se3_to_dq8(m: SE3Transform) -> np.ndarray:
    q = m.rotation.as_array()
    t = np.array([0.0, *m.translation])
    dual = 0.5 * qmul8(t, q)
    return np.concatenate([q, dual])


def dq8_to_se3(dq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (unit rotation quaternion, translation)."""
    real, dual = dq[:4], dq[4:]
    n = math.sqrt(float(np.dot(real, real)))
    real = real / n
    dual = dual / n
    conj = real * np.array([1.0, -1.0, -1.0, -1.0])
    trans = 2.0 * qmul8(dual, conj)[1:]
    return real, trans


def dqb_oracle(transforms: list[SE3Transform], weights) -> tuple[np.ndarray, np.ndarray]:
    """Blend via flat dual-quaternion sums; returns (rotation quat, translation)."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    dqs = [se3_to_dq8(m) for m in transforms]
    ref = dqs[0][:4]
    acc = np.zeros(8)
    for dq, wi in zip(dqs, w):
        sign = -1.0 if float(np.dot(dq[:4], ref)) < 0 else 1.0
        acc += wi * sign * dq
    return dq8_to_se3(acc)


# ---------------------------------------------------------------------------
# random instance generators

def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_se3(rng: np.random.Generator, trans_scale: float = 1.0) -> SE3Transform:
    return SE3Transform.from_arrays(random_quat(rng), rng.normal(size=3) * trans_scale)


def random_scaffold(rng: np.random.Generator, n_bases: int, n_frames: int,
                    k: int, t0: int = 1, smooth: bool = True) -> ScaffoldGraph:
    """Random smooth trajectories with moderate per-frame rotation steps."""
    bases = []
    for _ in range(n_bases):
        start = rng.uniform(-1.0, 1.0, 3)
        drift = rng.normal(size=(n_frames, 3)) * (0.05 if smooth else 0.5)
        trans = start + np.cumsum(drift, axis=0)
        q = random_quat(rng)
        rots = [q]
        for _ in range(n_frames - 1):
            stepq = np.array([1.0, *rng.normal(size=3) * 0.05])
            stepq /= np.linalg.norm(stepq)
            qn = qmul8(rots[-1], stepq)
            rots.append(qn / np.linalg.norm(qn))
        bases.append(MotionBasis(t0, trans, np.stack(rots)))
    return build_knn_graph(bases, k)


# ---------------------------------------------------------------------------
# loop-based loss oracles (operate on a scaffold's raw arrays)

def rot_apply(q, v):
    w, x, y, z = q
    qv = np.array([x, y, z])
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def angle_between(q1, q2) -> float:
    q1 = q1 / np.linalg.norm(q1)
    q2 = q2 / np.linalg.norm(q2)
    dot = abs(float(np.dot(q1, q2)))
    return 2.0 * math.acos(min(dot, 1.0))


def loop_arap(graph: ScaffoldGraph, frame_pairs) -> float:
    lo = graph.frame_range[0]
    n, k = graph.edges.shape
    total = 0.0
    count = 0
    for psi in range(n):
        for eta in graph.edges[psi]:
            for (a, b) in frame_pairs:
                count += 1
                if eta == psi:
                    continue
                bp, be = graph.bases[psi], graph.bases[int(eta)]
                ia, ib = a - lo, b - lo
                rel_s = be.translations[ia] - bp.translations[ia]
                rel_d = be.translations[ib] - bp.translations[ib]
                dist = (np.linalg.norm(rel_d) - np.linalg.norm(rel_s)) ** 2
                qs = bp.rotations[ia] / np.linalg.norm(bp.rotations[ia])
                qd = bp.rotations[ib] / np.linalg.norm(bp.rotations[ib])
                conj_s = qs * np.array([1, -1, -1, -1.0])
                conj_d = qd * np.array([1, -1, -1, -1.0])
                loc = np.linalg.norm(rot_apply(conj_d, rel_d) - rot_apply(conj_s, rel_s)) ** 2
                total += dist + loc
    return total / count


def loop_vel(graph: ScaffoldGraph) -> float:
    total = 0.0
    count = 0
    for b in graph.bases:
        for i in range(b.n_frames - 1):
            total += float(np.sum((b.translations[i + 1] - b.translations[i]) ** 2))
            total += angle_between(b.rotations[i + 1], b.rotations[i]) ** 2
            count += 1
    return total / count


def loop_acc(graph: ScaffoldGraph) -> float:
    total = 0.0
    count = 0
    for b in graph.bases:
        q = b.rotations / np.linalg.norm(b.rotations, axis=1, keepdims=True)
        for i in range(1, b.n_frames - 1):
            dd = b.translations[i + 1] - 2 * b.translations[i] + b.translations[i - 1]
            total += float(np.sum(dd ** 2))
            conj = q[i - 1] * np.array([1, -1, -1, -1.0])
            rel1 = qmul8(conj, q[i])
            conj = q[i] * np.array([1, -1, -1, -1.0])
            rel2 = qmul8(conj, q[i + 1])
            total += angle_between(rel1, rel2) ** 2
            count += 1
    return total / count


def loop_track(graph: ScaffoldGraph, points, tracks, interval) -> float:
    """Mean squared prediction error via the library's scalar deform path.

    Uses scaffold.deform_point (geometry route) rather than the array
    kernels, so it cross-checks the vectorized implementation.
    """
    from treedeform.scaffold import deform_point

    total = 0.0
    count = 0
    for p in points:
        tr = tracks.by_id(p.id)
        for tau in range(interval.left, interval.right + 1):
            i = tau - tracks.frame_range.left
            if not tr.visibility[i]:
                continue
            moved = deform_point(p, graph, tau)
            total += float(np.sum((moved.position - tr.positions[i]) ** 2))
            count += 1
    return total / count
