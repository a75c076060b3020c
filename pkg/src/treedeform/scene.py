"""Track data, synthetic scenes, initialization, persistence, evaluation.

Tracks are the supervision signal: observed 3D trajectories with per-frame
visibility. Positions are stored densely over the set's frame range;
invisible frames are filled by linear interpolation (held constant past
the ends) so scaffold initialization always has contiguous trajectories,
but filled frames never contribute to any loss.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    FrameOutOfRange,
    InvalidSpec,
    MissingHeader,
    NonContiguousFrames,
    ParseError,
    TooFewDynamicTracks,
)
from .geometry import Quaternion, SE3Transform, se3_apply
from .scaffold import MotionBasis, ScaffoldGraph, ScenePoint, build_knn_graph, deform_query
from .tree import PartitionTree, TimeInterval


def _fill_invisible(positions: np.ndarray, visibility: np.ndarray) -> np.ndarray:
    """Linearly interpolate positions at invisible frames, hold at the ends."""
    out = positions.copy()
    vis_idx = np.flatnonzero(visibility)
    if vis_idx.size == 0:
        return out
    f = len(visibility)
    grid = np.arange(f)
    for axis in range(3):
        out[:, axis] = np.interp(grid, vis_idx, positions[vis_idx, axis])
    return out


@dataclass
class Track:
    id: int
    positions: np.ndarray    # (F, 3) dense over the owning set's frame range
    visibility: np.ndarray   # (F,) bool
    dynamic: Optional[bool] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.positions.shape != (len(self.visibility), 3):
            raise ValueError("positions and visibility disagree on frame count")
        if not np.all(np.isfinite(self.positions[self.visibility])):
            raise ValueError(f"track {self.id} has non-finite visible positions")

    def first_visible(self) -> int:
        idx = np.flatnonzero(self.visibility)
        if idx.size == 0:
            raise ValueError(f"track {self.id} is never visible")
        return int(idx[0])

    def last_visible(self) -> int:
        return int(np.flatnonzero(self.visibility)[-1])


@dataclass
class TrackSet:
    tracks: list[Track]
    frame_range: TimeInterval

    def __post_init__(self):
        ids = [t.id for t in self.tracks]
        if len(ids) != len(set(ids)):
            raise ValueError("track ids must be unique")
        self._by_id = {t.id: t for t in self.tracks}

    def __len__(self) -> int:
        return len(self.tracks)

    def by_id(self, track_id: int) -> Track:
        return self._by_id[track_id]

    def ids(self) -> list[int]:
        return [t.id for t in self.tracks]

    def _offset(self, t: int) -> int:
        if not self.frame_range.contains(t):
            raise FrameOutOfRange(f"frame {t} outside {self.frame_range}")
        return t - self.frame_range.left

    def block(self, ids: list[int], lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        """Positions (P, Fi, 3) and visibility (P, Fi) over frames [lo, hi]."""
        a, b = self._offset(lo), self._offset(hi)
        pos = np.stack([self._by_id[i].positions[a:b + 1] for i in ids])
        vis = np.stack([self._by_id[i].visibility[a:b + 1] for i in ids])
        return pos, vis

    def frame_displacements(self, lo: int, hi: int) -> np.ndarray:
        """Mean step magnitude between consecutive frames in [lo, hi].

        Entry i covers the step from frame lo+i to lo+i+1, averaged over
        tracks visible at both frames; 0 when none are.
        """
        a, b = self._offset(lo), self._offset(hi)
        out = np.zeros(b - a)
        for i in range(a, b):
            steps = []
            for tr in self.tracks:
                if tr.visibility[i] and tr.visibility[i + 1]:
                    steps.append(np.linalg.norm(tr.positions[i + 1] - tr.positions[i]))
            if steps:
                out[i - a] = float(np.mean(steps))
        return out

    def subset(self, ids: list[int]) -> "TrackSet":
        return TrackSet([self._by_id[i] for i in ids], self.frame_range)

    def dynamic_subset(self) -> "TrackSet":
        return TrackSet([t for t in self.tracks if t.dynamic], self.frame_range)

    def static_subset(self) -> "TrackSet":
        return TrackSet([t for t in self.tracks if t.dynamic is False], self.frame_range)


# ---------------------------------------------------------------------------
# synthetic scenes

VALID_KINDS = ("rigid", "articulated_chain", "phase_switch")


@dataclass
class SyntheticSpec:
    kind: str
    n_tracks: int = 60
    n_frames: int = 40
    noise_sigma: float = 0.0
    phase_boundary: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise InvalidSpec(f"unknown kind {self.kind!r}")
        if self.n_frames < 4:
            raise InvalidSpec(f"n_frames must be >= 4, got {self.n_frames}")
        if self.n_tracks < 2:
            raise InvalidSpec(f"n_tracks must be >= 2, got {self.n_tracks}")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.kind == "phase_switch":
            pb = 0.5 if self.phase_boundary is None else self.phase_boundary
            if not 0.0 < pb < 1.0:
                raise InvalidSpec("phase_boundary must be in (0, 1)")
            self.phase_boundary = pb

    @property
    def boundary_frame(self) -> int:
        """First frame of the second motion phase (phase_switch only)."""
        if self.kind != "phase_switch":
            raise InvalidSpec("boundary_frame only defined for phase_switch")
        return int(math.floor(self.phase_boundary * self.n_frames))


def _chain_positions(attach: np.ndarray, base: np.ndarray, angles: np.ndarray,
                     lengths: np.ndarray) -> np.ndarray:
    """Forward kinematics of a planar 3-segment chain in the xz plane.

    attach rows are (segment index, fraction along it, in-plane perpendicular
    offset, constant y offset); angles are per-joint, accumulated along the
    chain. Returns one 3D point per attachment.
    """
    out = np.zeros((len(attach), 3))
    joint = base.copy()
    cum = 0.0
    dirs = []
    joints = [joint.copy()]
    for k in range(len(lengths)):
        cum += angles[k]
        d = np.array([math.cos(cum), 0.0, math.sin(cum)])
        dirs.append(d)
        joint = joint + lengths[k] * d
        joints.append(joint.copy())
    for i, (seg, frac, perp, yoff) in enumerate(attach):
        k = int(seg)
        d = dirs[k]
        n = np.array([-d[2], 0.0, d[0]])
        out[i] = joints[k] + frac * lengths[k] * d + perp * n + np.array([0.0, yoff, 0.0])
    return out


def generate_synthetic(spec: SyntheticSpec) -> TrackSet:
    """Deterministic synthetic track sets; 20% of tracks are static background.

    rigid: one rigid motion (rotation plus translation) over a point cloud.
    articulated_chain: points attached to a 3-segment chain with sinusoidal
    joint angles. phase_switch: rigid translation up to the boundary frame,
    then the chain bends while the base holds still.
    """
    rng = np.random.default_rng(spec.seed)
    n_static = int(round(0.2 * spec.n_tracks))
    n_dyn = spec.n_tracks - n_static
    if n_dyn < 1:
        raise InvalidSpec("need at least one dynamic track")
    t_count = spec.n_frames
    frames = np.arange(t_count)
    s = frames / (t_count - 1)

    dyn = np.zeros((n_dyn, t_count, 3))
    if spec.kind == "rigid":
        local = rng.uniform(-0.5, 0.5, (n_dyn, 3))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        theta_total = 1.0
        v_total = rng.normal(size=3)
        v_total *= 1.0 / np.linalg.norm(v_total)
        center = np.array([0.0, 0.0, 0.0])
        for f in range(t_count):
            q = Quaternion.from_axis_angle(axis, s[f] * theta_total)
            m = SE3Transform(q, center + s[f] * v_total)
            for i in range(n_dyn):
                dyn[i, f] = se3_apply(m, local[i])
    elif spec.kind == "articulated_chain":
        lengths = np.array([0.5, 0.45, 0.4])
        base = np.array([0.0, 0.0, 0.0])
        attach = np.column_stack([
            rng.integers(0, 3, n_dyn),
            rng.uniform(0.0, 1.0, n_dyn),
            rng.uniform(-0.08, 0.08, n_dyn),
            rng.uniform(-0.08, 0.08, n_dyn),
        ])
        amp = np.array([0.7, 0.6, 0.5]) * rng.uniform(0.8, 1.2, 3)
        phase = rng.uniform(0.0, 2.0 * math.pi, 3)
        for f in range(t_count):
            angles = amp * np.sin(2.0 * math.pi * s[f] + phase) - amp * np.sin(phase)
            dyn[:, f] = _chain_positions(attach, base, angles, lengths)
    else:  # phase_switch
        boundary = spec.boundary_frame
        lengths = np.array([0.5, 0.45, 0.4])
        attach = np.column_stack([
            rng.integers(0, 3, n_dyn),
            rng.uniform(0.0, 1.0, n_dyn),
            rng.uniform(-0.08, 0.08, n_dyn),
            rng.uniform(-0.08, 0.08, n_dyn),
        ])
        v_a = rng.normal(size=3)
        v_a *= 0.045 / np.linalg.norm(v_a)
        amp = np.array([0.9, 0.75, 0.6])
        base0 = np.array([0.0, 0.0, 0.0])
        # the joints bend in staggered windows (root joint first, outer two
        # after), so the deformation pattern keeps changing within phase B
        half = max((t_count - boundary) // 2, 1)
        for f in range(t_count):
            t = f + 1
            if t < boundary:
                base = base0 + (t - 1) * v_a
                angles = np.zeros(3)
            else:
                base = base0 + (boundary - 1) * v_a
                bend1 = min(max((t - boundary) / half, 0.0), 1.0)
                bend2 = min(max((t - boundary - half) / max(t_count - boundary - half, 1), 0.0), 1.0)
                angles = amp * np.array([bend1, bend2, bend2])
            dyn[:, f] = _chain_positions(attach, base, angles, lengths)

    static_pos = rng.uniform(-1.5, 1.5, (n_static, 3))
    noise = rng.normal(0.0, spec.noise_sigma, (spec.n_tracks, t_count, 3)) \
        if spec.noise_sigma > 0 else np.zeros((spec.n_tracks, t_count, 3))

    tracks = []
    vis = np.ones(t_count, dtype=bool)
    for i in range(n_dyn):
        tracks.append(Track(i, dyn[i] + noise[i], vis.copy()))
    for j in range(n_static):
        pos = np.tile(static_pos[j], (t_count, 1)) + noise[n_dyn + j]
        tracks.append(Track(n_dyn + j, pos, vis.copy()))
    return TrackSet(tracks, TimeInterval(1, t_count))


# ---------------------------------------------------------------------------
# classification, initialization, holdout

def classify_static(tracks: TrackSet, eps: float) -> TrackSet:
    """Label each track static iff it never strays eps from its first pose."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    for tr in tracks.tracks:
        idx = np.flatnonzero(tr.visibility)
        ref = tr.positions[idx[0]]
        disp = np.linalg.norm(tr.positions[idx] - ref, axis=1)
        tr.dynamic = bool(disp.max() >= eps)
    return tracks


def init_scaffold(tracks: TrackSet, n_bases: int, k: int) -> ScaffoldGraph:
    """Scaffold whose bases follow a farthest-point sample of the tracks.

    Selection runs on first-frame positions starting from the lowest id,
    ties to the lower id. Basis translations copy the track positions,
    rotations start at identity; radii follow the graph policy.
    """
    if len(tracks) < n_bases:
        raise TooFewDynamicTracks(f"need {n_bases} tracks, have {len(tracks)}")
    order = sorted(tracks.tracks, key=lambda t: t.id)
    first = np.stack([t.positions[0] for t in order])
    chosen = [0]
    min_d = np.linalg.norm(first - first[0], axis=1)
    while len(chosen) < n_bases:
        best = int(np.argmax(min_d))
        if min_d[best] <= 0 and len(chosen) < n_bases:
            # coincident leftovers: fall back to id order
            remaining = [i for i in range(len(order)) if i not in chosen]
            best = remaining[0]
        chosen.append(best)
        min_d = np.minimum(min_d, np.linalg.norm(first - first[best], axis=1))
        min_d[chosen] = -1.0
    bases = []
    t0 = tracks.frame_range.left
    f = tracks.frame_range.length
    ident = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (f, 1))
    for i in chosen:
        bases.append(MotionBasis(t0, order[i].positions.copy(), ident.copy()))
    return build_knn_graph(bases, k)


def init_points(tracks: TrackSet) -> list[ScenePoint]:
    """One scene point per track, anchored at its first visible observation."""
    points = []
    for tr in sorted(tracks.tracks, key=lambda t: t.id):
        fv = tr.first_visible()
        frame = tracks.frame_range.left + fv
        points.append(ScenePoint(
            id=tr.id,
            position=tr.positions[fv].copy(),
            opacity=1.0,
            color=_palette_color(tr.id),
            canonical_time=frame,
        ))
    return points


def _palette_color(i: int) -> np.ndarray:
    """Deterministic distinct color per id (golden-angle hue walk)."""
    h = (i * 0.6180339887498949) % 1.0
    sat, val = 0.75, 0.95
    k = int(h * 6.0) % 6
    frac = h * 6.0 - int(h * 6.0)
    p = val * (1 - sat)
    q = val * (1 - sat * frac)
    t = val * (1 - sat * (1 - frac))
    rgb = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][k]
    return np.array(rgb)


def holdout_split(tracks: TrackSet, stride: int) -> tuple[TrackSet, TrackSet]:
    """Withhold every stride-th dynamic track (by id rank) for evaluation.

    Static tracks always stay on the training side.
    """
    if stride < 2:
        raise ValueError("holdout stride must be >= 2")
    dyn_ids = sorted(t.id for t in tracks.tracks if t.dynamic)
    held = {tid for rank, tid in enumerate(dyn_ids) if (rank + 1) % stride == 0}
    train = [t for t in tracks.tracks if t.id not in held]
    heldout = [t for t in tracks.tracks if t.id in held]
    return (TrackSet(train, tracks.frame_range),
            TrackSet(heldout, tracks.frame_range))


# ---------------------------------------------------------------------------
# persistence

TRACK_HEADER = "track_id,frame,x,y,z,visible"


def save_tracks(tracks: TrackSet, path: str) -> None:
    """Track CSV with full-precision (round-trippable) decimal positions."""
    lines = [TRACK_HEADER]
    lo = tracks.frame_range.left
    for tr in sorted(tracks.tracks, key=lambda t: t.id):
        for i in range(tracks.frame_range.length):
            x, y, z = (float(v) for v in tr.positions[i])
            v = 1 if tr.visibility[i] else 0
            lines.append(f"{tr.id},{lo + i},{x!r},{y!r},{z!r},{v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tracks(path: str) -> TrackSet:
    """Parse a track CSV; gaps become invisible, interpolated frames."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != TRACK_HEADER:
        raise MissingHeader(f"expected header {TRACK_HEADER!r}")
    rows: dict[int, list[tuple[int, np.ndarray, bool]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ParseError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            tid = int(parts[0])
            frame = int(parts[1])
            pos = np.array([float(parts[2]), float(parts[3]), float(parts[4])])
            visible = int(parts[5])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        if visible not in (0, 1):
            raise ParseError(f"line {lineno}: visible must be 0 or 1")
        rows.setdefault(tid, []).append((frame, pos, bool(visible)))

    if not rows:
        raise ParseError("file contains no track rows")
    for tid, entries in rows.items():
        frames = [e[0] for e in entries]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise NonContiguousFrames(f"track {tid}: frames must be ascending")

    lo = min(e[0] for entries in rows.values() for e in entries)
    hi = max(e[0] for entries in rows.values() for e in entries)
    f = hi - lo + 1
    tracks = []
    for tid in sorted(rows):
        positions = np.zeros((f, 3))
        visibility = np.zeros(f, dtype=bool)
        seen = np.zeros(f, dtype=bool)
        for frame, pos, visible in rows[tid]:
            positions[frame - lo] = pos
            visibility[frame - lo] = visible
            seen[frame - lo] = True
        # frames with rows but visible=0 keep their stated position; frames
        # with no row at all are filled from visible neighbors
        fill_from = visibility | (seen & ~visibility)
        if not np.any(visibility):
            raise ParseError(f"track {tid} has no visible frames")
        filled = _fill_invisible(positions, fill_from)
        tracks.append(Track(tid, filled, visibility))
    return TrackSet(tracks, TimeInterval(lo, hi))


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    per_track_rmse: dict[int, float]
    mean_rmse: float
    endpoint_error: float
    per_interval_rmse: dict[int, float]

    def __post_init__(self):
        vals = [self.mean_rmse, self.endpoint_error,
                *self.per_track_rmse.values(), *self.per_interval_rmse.values()]
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("evaluation metrics must be finite and >= 0")


def _component_for(node, t_n: int):
    """Most specialized scaffold in a node covering canonical frame t_n."""
    for source, scaffold, _ in node.components():
        lo, hi = scaffold.frame_range
        if lo <= t_n <= hi:
            return source, scaffold
    raise FrameOutOfRange(f"no component of node {node.index} covers frame {t_n}")


def predict_track(tree: PartitionTree, anchor_pos: np.ndarray, t_n: int,
                  tau: int) -> np.ndarray:
    """Predicted position at tau of a probe anchored at (anchor_pos, t_n).

    Prediction uses the deepest leaf containing tau; within it, the most
    specialized component whose frame range covers the anchor frame (the
    root copy always does).
    """
    leaf = tree.leaf_for(tau)
    _, scaffold = _component_for(leaf, t_n)
    w = deform_query(anchor_pos, scaffold, t_n, tau)
    return se3_apply(w, anchor_pos)


def evaluate(tree: PartitionTree, heldout: TrackSet) -> EvalReport:
    """Track-space error report for held-out trajectories.

    Each held-out track is probed at its first visible observation and
    deformed to every visible frame. mean_rmse pools squared errors over
    all (track, frame) pairs so the per-leaf-interval decomposition
    recombines exactly.
    """
    root = tree.get(1).interval
    if heldout.frame_range.left < root.left or heldout.frame_range.right > root.right:
        raise FrameOutOfRange("held-out frames outside the fitted interval")
    per_track: dict[int, float] = {}
    per_interval_sq: dict[int, list[float]] = {}
    all_sq: list[float] = []
    endpoint: list[float] = []
    for tr in heldout.tracks:
        fv = tr.first_visible()
        t_n = heldout.frame_range.left + fv
        anchor = tr.positions[fv]
        sq = []
        last_err = 0.0
        for i in np.flatnonzero(tr.visibility):
            tau = heldout.frame_range.left + int(i)
            pred = predict_track(tree, anchor, t_n, tau)
            e2 = float(np.sum((pred - tr.positions[i]) ** 2))
            sq.append(e2)
            leaf = tree.leaf_for(tau)
            per_interval_sq.setdefault(leaf.index, []).append(e2)
            last_err = math.sqrt(e2)
        per_track[tr.id] = math.sqrt(float(np.mean(sq)))
        all_sq.extend(sq)
        endpoint.append(last_err)
    return EvalReport(
        per_track_rmse=per_track,
        mean_rmse=math.sqrt(float(np.mean(all_sq))),
        endpoint_error=float(np.mean(endpoint)),
        per_interval_rmse={j: math.sqrt(float(np.mean(v)))
                           for j, v in sorted(per_interval_sq.items())},
    )


# ---------------------------------------------------------------------------
# point-cloud export

def export_pointclouds(tree: PartitionTree, out_dir: str,
                       background: Optional[list[ScenePoint]] = None) -> list[str]:
    """Per-frame CSV of assembled deformed points plus frozen background.

    source_node is the index of the tree node whose scaffold deformed the
    point; background points carry source_node 0.
    """
    from .tree import assemble_points

    os.makedirs(out_dir, exist_ok=True)
    root = tree.get(1).interval
    paths = []
    def row(p: ScenePoint, source: int) -> str:
        x, y, z = (float(v) for v in p.position)
        r, g, b = (float(v) for v in p.color)
        return (f"{p.id},{x!r},{y!r},{z!r},{float(p.opacity)!r},"
                f"{r!r},{g!r},{b!r},{source}")

    for tau in range(root.left, root.right + 1):
        leaf = tree.leaf_for(tau)
        rows = ["id,x,y,z,opacity,r,g,b,source_node"]
        for source, p in assemble_points(tree, leaf.index, tau):
            rows.append(row(p, source))
        for p in background or []:
            rows.append(row(p, 0))
        path = os.path.join(out_dir, f"frame_{tau:05d}.csv")
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")
        paths.append(path)
    return paths
