"""Motion bases, the scaffold graph, and the deformation field.

A motion basis is a per-frame rigid trajectory with a scalar support
radius. The scaffold graph connects each basis to its K nearest neighbors
under the maximum-over-time distance between their translation tracks.
A query point is deformed from a source frame to a target frame by
blending the relative rigid motions of the nearest basis's neighbors,
weighted by a Gaussian falloff of distance at the source frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DisjointFrameRanges,
    FrameOutOfRange,
    KTooLarge,
    NonPositiveRadius,
)
from .geometry import (
    Quaternion,
    SE3Transform,
    dqb_blend,
    quat_mul,
    quat_normalize,
    se3_apply,
    se3_compose,
    se3_inverse,
)

# Radius floor when neighbor distances degenerate to zero; with a single
# basis the normalized blend weight is 1 regardless of radius.
_RADIUS_FLOOR = 1e-6


@dataclass
class MotionBasis:
    """Per-frame rigid trajectory over a contiguous frame range.

    translations: (F, 3); rotations: (F, 4) unit quaternions, wxyz.
    radius carries squared-distance units: the skinning weight is
    exp(-d^2 / (2 * radius)).
    """

    t0: int
    translations: np.ndarray
    rotations: np.ndarray
    radius: float = 1.0

    def __post_init__(self):
        self.translations = np.asarray(self.translations, dtype=float)
        self.rotations = np.asarray(self.rotations, dtype=float)
        if self.translations.ndim != 2 or self.translations.shape[1] != 3:
            raise ValueError("translations must be (F, 3)")
        if self.rotations.shape != (self.translations.shape[0], 4):
            raise ValueError("rotations must be (F, 4)")
        if self.radius <= 0:
            raise NonPositiveRadius(f"radius must be > 0, got {self.radius}")

    @classmethod
    def static_at(cls, pos: np.ndarray, t0: int, n_frames: int, radius: float = 1.0) -> "MotionBasis":
        pos = np.asarray(pos, dtype=float)
        trans = np.tile(pos, (n_frames, 1))
        rots = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n_frames, 1))
        return cls(t0, trans, rots, radius)

    @property
    def n_frames(self) -> int:
        return self.translations.shape[0]

    @property
    def frame_range(self) -> tuple[int, int]:
        return (self.t0, self.t0 + self.n_frames - 1)

    def index(self, t: int) -> int:
        lo, hi = self.frame_range
        if t < lo or t > hi:
            raise FrameOutOfRange(f"frame {t} outside [{lo}, {hi}]")
        return t - self.t0

    def pose_at(self, t: int) -> SE3Transform:
        i = self.index(t)
        return SE3Transform.from_arrays(self.rotations[i], self.translations[i])

    def clone(self) -> "MotionBasis":
        return MotionBasis(self.t0, self.translations.copy(), self.rotations.copy(), self.radius)


@dataclass
class ScenePoint:
    """Point proxy for a scene primitive.

    Carries position/rotation plus scale, opacity, color, and the canonical
    frame its pose is defined at. Only position and canonical_time take part
    in fitting; the rest ride along for export.
    """

    id: int
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale: np.ndarray = field(default_factory=lambda: np.full(3, 0.01))
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    canonical_time: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(4)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must be in [0, 1], got {self.opacity}")

    def clone(self) -> "ScenePoint":
        return ScenePoint(self.id, self.position.copy(), self.rotation.copy(),
                          self.scale.copy(), self.opacity, self.color.copy(),
                          self.canonical_time)


@dataclass
class ScaffoldGraph:
    """Motion bases plus their KNN edge lists.

    Each edge row is ordered by (distance, index) and contains the basis's
    own index (self distance is 0). All bases share one frame range.
    """

    bases: list[MotionBasis]
    edges: np.ndarray  # (N, K) int
    k: int

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=int)
        ranges = {b.frame_range for b in self.bases}
        if len(ranges) > 1:
            raise ValueError("all bases must share one frame range")

    @property
    def n_bases(self) -> int:
        return len(self.bases)

    @property
    def frame_range(self) -> tuple[int, int]:
        return self.bases[0].frame_range

    def check_frame(self, t: int) -> None:
        lo, hi = self.frame_range
        if t < lo or t > hi:
            raise FrameOutOfRange(f"frame {t} outside [{lo}, {hi}]")

    def translations_at(self, t: int) -> np.ndarray:
        """(N, 3) basis translations at frame t."""
        self.check_frame(t)
        i = t - self.frame_range[0]
        return np.stack([b.translations[i] for b in self.bases])

    def radii(self) -> np.ndarray:
        return np.array([b.radius for b in self.bases])

    def clone(self) -> "ScaffoldGraph":
        return ScaffoldGraph([b.clone() for b in self.bases], self.edges.copy(), self.k)


def pairwise_max_distance(a: MotionBasis, b: MotionBasis) -> float:
    """Maximum translation distance between two bases over shared frames."""
    lo = max(a.frame_range[0], b.frame_range[0])
    hi = min(a.frame_range[1], b.frame_range[1])
    if lo > hi:
        raise DisjointFrameRanges(
            f"ranges {a.frame_range} and {b.frame_range} share no frames")
    ta = a.translations[lo - a.t0: hi - a.t0 + 1]
    tb = b.translations[lo - b.t0: hi - b.t0 + 1]
    return float(np.linalg.norm(ta - tb, axis=1).max())


def _distance_matrix(bases: list[MotionBasis]) -> np.ndarray:
    trans = np.stack([b.translations for b in bases])  # (N, F, 3)
    diff = trans[:, None] - trans[None, :]              # (N, N, F, 3)
    return np.linalg.norm(diff, axis=-1).max(axis=-1)


def build_knn_graph(bases: list[MotionBasis], k: int) -> ScaffoldGraph:
    """Connect each basis to its k nearest under the max-over-time metric.

    Ties break toward the smaller index. Also initializes each basis radius
    to the median squared distance of its non-self neighbors (scale-adaptive
    support); radii are fixed afterwards.
    """
    n = len(bases)
    if k > n:
        raise KTooLarge(f"k={k} exceeds number of bases {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = _distance_matrix(bases)
    idx = np.arange(n)
    edges = np.empty((n, k), dtype=int)
    for psi in range(n):
        order = np.lexsort((idx, dist[psi]))
        edges[psi] = order[:k]
    for psi in range(n):
        neigh = edges[psi][edges[psi] != psi]
        if neigh.size:
            r = float(np.median(dist[psi, neigh] ** 2))
        else:
            r = 0.0
        bases[psi].radius = max(r, _RADIUS_FLOOR)
    return ScaffoldGraph(bases, edges, k)


def skin_weight(query_pos: np.ndarray, basis_pos: np.ndarray, radius: float) -> float:
    """Gaussian falloff exp(-d^2 / (2 * radius)); strictly positive."""
    if radius <= 0:
        raise NonPositiveRadius(f"radius must be > 0, got {radius}")
    d2 = float(np.sum((np.asarray(query_pos, dtype=float) - np.asarray(basis_pos, dtype=float)) ** 2))
    return float(np.exp(-d2 / (2.0 * radius)))


def nearest_basis(pos: np.ndarray, graph: ScaffoldGraph, t: int) -> int:
    """Index of the basis whose translation at frame t is closest to pos.

    Ties break toward the smaller index.
    """
    trans = graph.translations_at(t)
    d = np.linalg.norm(trans - np.asarray(pos, dtype=float), axis=1)
    return int(np.argmin(d))


def deform_query(pos: np.ndarray, graph: ScaffoldGraph, t_s: int, t_d: int) -> SE3Transform:
    """Blended rigid motion carrying a point at pos from frame t_s to t_d.

    Anchors at the nearest basis at t_s, then blends the neighbors' relative
    motions with Gaussian skinning weights via dual quaternion blending.
    """
    graph.check_frame(t_s)
    graph.check_frame(t_d)
    pos = np.asarray(pos, dtype=float)
    psi = nearest_basis(pos, graph, t_s)
    deltas: list[SE3Transform] = []
    exponents: list[float] = []
    for eta in graph.edges[psi]:
        basis = graph.bases[int(eta)]
        m_s = basis.pose_at(t_s)
        m_d = basis.pose_at(t_d)
        deltas.append(se3_compose(m_d, se3_inverse(m_s)))
        exponents.append(float(np.sum((pos - m_s.translation) ** 2)) / (2.0 * basis.radius))
    # blend weights are exp(-exponent); shifting by the minimum leaves the
    # normalized blend unchanged but avoids underflowing every weight to 0
    lo = min(exponents)
    weights = [float(np.exp(lo - e)) for e in exponents]
    return dqb_blend(deltas, weights)


def deform_point(p: ScenePoint, graph: ScaffoldGraph, tau: int) -> ScenePoint:
    """Deform a scene point from its canonical frame to frame tau.

    Position and rotation move with the blended field; scale, opacity, and
    color are carried unchanged; canonical_time becomes tau.
    """
    w = deform_query(p.position, graph, p.canonical_time, tau)
    new_pos = se3_apply(w, p.position)
    new_rot = quat_normalize(quat_mul(w.rotation.as_array(), quat_normalize(p.rotation)))
    return ScenePoint(p.id, new_pos, new_rot, p.scale.copy(), p.opacity,
                      p.color.copy(), tau)
