"""Losses, gradients, per-node descent, layer scheduling, and splits.

Each tree node is trained by plain gradient descent on the pose
trajectories of its own scaffold and (unless frozen) its chain copies,
with rotations renormalized after every step. Descent is deterministic:
nothing here draws randomness, so a fixed seed argument exists purely to
honor the per-node seeding contract and to keep room for stochastic
variants.

Losses are pooled across a node's components: squared track errors, edge
rigidity terms, and smoothness terms are summed over every component and
divided by the total term count, so the recorded curves match what the
gradient actually minimizes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import jax.numpy as jnp

from . import objective as obj
from .errors import (
    FrameOutOfRange,
    IntervalTooShort,
    NonFiniteComponent,
    NoVisibleObservations,
)
from .scaffold import ScaffoldGraph, ScenePoint
from .tree import PartitionTree, TimeInterval, TreeNode, partition_point_binary


@dataclass
class LossWeights:
    track: float = 1.0
    arap: float = 0.3
    acc: float = 0.05
    vel: float = 0.05

    def __post_init__(self):
        for name in ("track", "arap", "acc", "vel"):
            if getattr(self, name) < 0:
                raise ValueError(f"lambda_{name} must be >= 0")


@dataclass
class OptimConfig:
    steps_per_layer: list[int] = field(default_factory=lambda: [4000, 2000, 2000])
    learning_rate: float = 0.02
    seed: int = 0
    gradient_mode: str = "finite_difference"
    fd_epsilon: float = 1e-5
    freeze_chains: bool = False
    child_track_loss: bool = True
    parallel: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.gradient_mode not in ("finite_difference", "provided"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.fd_epsilon <= 0:
            raise ValueError("fd_epsilon must be > 0")
        if any(s < 0 for s in self.steps_per_layer):
            raise ValueError("steps_per_layer entries must be >= 0")


# ---------------------------------------------------------------------------
# scaffold <-> array views

def scaffold_arrays(graph: ScaffoldGraph) -> tuple[np.ndarray, np.ndarray]:
    """(N, F, 4) rotations and (N, F, 3) translations of a scaffold."""
    q = np.stack([b.rotations for b in graph.bases])
    t = np.stack([b.translations for b in graph.bases])
    return q, t


def write_scaffold_arrays(graph: ScaffoldGraph, q: np.ndarray, t: np.ndarray) -> None:
    for i, basis in enumerate(graph.bases):
        basis.rotations = q[i].copy()
        basis.translations = t[i].copy()


# ---------------------------------------------------------------------------
# loss surface

def _component_spec(scaffold: ScaffoldGraph, points: list[ScenePoint],
                    tracks, interval: TimeInterval) -> obj.ComponentSpec:
    """Build the array view of one scaffold component for the kernels."""
    lo, hi = scaffold.frame_range
    if interval.left < lo or interval.right > hi:
        raise FrameOutOfRange(
            f"node interval [{interval.left}, {interval.right}] outside "
            f"scaffold range [{lo}, {hi}]")
    q0, t0 = scaffold_arrays(scaffold)
    anchors = np.array([p.position for p in points]).reshape(len(points), 3)
    anchor_fidx = np.array([p.canonical_time - lo for p in points], dtype=int)
    ids = [p.id for p in points]
    fi = interval.length
    if points:
        pos, vis = tracks.block(ids, interval.left, interval.right)
    else:
        pos = np.zeros((0, fi, 3))
        vis = np.zeros((0, fi), dtype=bool)
    tau_fidx = np.arange(interval.left - lo, interval.right - lo + 1, dtype=int)
    return obj.ComponentSpec(q0, t0, scaffold.edges, scaffold.radii(),
                             anchors, anchor_fidx, pos, vis, tau_fidx)


def loss_track(scaffold: ScaffoldGraph, points: list[ScenePoint],
               tracks, interval: TimeInterval) -> float:
    """Mean squared distance between deformed anchors and observations.

    Every point is deformed from its canonical frame to every interval
    frame where its track is visible.
    """
    spec = _component_spec(scaffold, points, tracks, interval)
    count = float(np.sum(spec.vis))
    if count == 0:
        raise NoVisibleObservations("no visible (track, frame) pairs in interval")
    sse = float(obj._track_kernel(jnp.asarray(spec.q0), jnp.asarray(spec.t0),
                                  spec.static_arrays()))
    return sse / count


def loss_arap(scaffold: ScaffoldGraph, frame_pairs: list[tuple[int, int]]) -> float:
    """Rigidity loss: distance changes plus local-coordinate changes.

    Mean over all graph edges (self edges count but contribute zero) and
    the given (source, target) frame pairs.
    """
    lo, hi = scaffold.frame_range
    for (a, b) in frame_pairs:
        if not (lo <= a <= hi and lo <= b <= hi):
            raise FrameOutOfRange(f"frame pair ({a}, {b}) outside [{lo}, {hi}]")
    if not frame_pairs:
        return 0.0
    q0, t0 = scaffold_arrays(scaffold)
    n, k = scaffold.edges.shape
    psi = np.repeat(np.arange(n), k)
    eta = scaffold.edges.ravel()
    keep = psi != eta
    s_off = np.array([a - lo for a, _ in frame_pairs], dtype=int)
    d_off = np.array([b - lo for _, b in frame_pairs], dtype=int)
    sse = float(obj._arap_kernel(jnp.asarray(q0), jnp.asarray(t0),
                                 jnp.asarray(psi[keep]), jnp.asarray(eta[keep]),
                                 jnp.asarray(s_off), jnp.asarray(d_off)))
    return sse / float(n * k * len(frame_pairs))


def loss_vel(scaffold: ScaffoldGraph) -> float:
    """Mean squared frame-to-frame translation step plus rotation angle."""
    q0, t0 = scaffold_arrays(scaffold)
    n, f = t0.shape[0], t0.shape[1]
    if f < 2:
        raise IntervalTooShort("velocity loss needs at least 2 frames")
    sse = float(obj._vel_kernel(jnp.asarray(q0), jnp.asarray(t0)))
    return sse / float(n * (f - 1))


def loss_acc(scaffold: ScaffoldGraph) -> float:
    """Mean squared second difference of translations and rotations."""
    q0, t0 = scaffold_arrays(scaffold)
    n, f = t0.shape[0], t0.shape[1]
    if f < 3:
        raise IntervalTooShort("acceleration loss needs at least 3 frames")
    sse = float(obj._acc_kernel(jnp.asarray(q0), jnp.asarray(t0)))
    return sse / float(n * (f - 2))


def total_loss(weights: LossWeights, *, track: float = 0.0, arap: float = 0.0,
               acc: float = 0.0, vel: float = 0.0) -> float:
    for name, v in (("track", track), ("arap", arap), ("acc", acc), ("vel", vel)):
        if not math.isfinite(v):
            raise NonFiniteComponent(f"loss component {name} is not finite: {v}")
    return (weights.track * track + weights.arap * arap
            + weights.acc * acc + weights.vel * vel)


def gradient(objective: obj.NodeObjective, flat: np.ndarray,
             mode: str = "finite_difference", fd_epsilon: float = 1e-5) -> np.ndarray:
    """Gradient of a node objective at flat parameters.

    'provided' uses reverse-mode differentiation of the same evaluation;
    'finite_difference' uses central differences with step fd_epsilon.
    """
    if mode == "provided":
        return objective.value_and_grad(flat)[2]
    if mode == "finite_difference":
        return objective.fd_gradient(flat, fd_epsilon)
    raise ValueError(f"unknown gradient mode {mode!r}")


# ---------------------------------------------------------------------------
# per-node optimization

def node_objective(node: TreeNode, tracks, weights: LossWeights,
                   config: OptimConfig) -> obj.NodeObjective:
    """Objective over a node's trainable components.

    The chain copies join both the parameter vector and the loss unless
    config.freeze_chains is set, in which case only the node's own scaffold
    and points are used. The track weight is dropped for child nodes when
    config.child_track_loss is off.
    """
    lam_track = weights.track
    if node.index > 1 and not config.child_track_loss:
        lam_track = 0.0
    comps = []
    for source, scaffold, points in node.components():
        if source != node.index and config.freeze_chains:
            continue
        comps.append(_component_spec(scaffold, points, tracks, node.interval))
    return obj.NodeObjective(comps, lam_track, weights.arap, weights.acc, weights.vel)


def optimize_node(node: TreeNode, tracks, weights: LossWeights,
                  config: OptimConfig, steps: int, seed: int) -> TreeNode:
    """Gradient descent on a node's scaffold parameters, in place.

    Deterministic given its inputs; the seed is recorded for the layer
    contract but plain descent never consumes it. Records the loss curve,
    per-frame gradient magnitudes of the own scaffold, and the final loss.
    """
    del seed
    objective = node_objective(node, tracks, weights, config)
    flat = objective.initial_flat()
    frame_mags = np.zeros(node.interval.length)
    rows = []
    for step in range(steps):
        if config.gradient_mode == "provided":
            total, parts, grad = objective.value_and_grad(flat)
        else:
            total, parts = objective.value(flat)
            grad = objective.fd_gradient(flat, config.fd_epsilon)
        rows.append((step, node.index, total, parts["track"], parts["arap"],
                     parts["acc"], parts["vel"]))
        frame_mags += objective.own_frame_norms(grad)
        flat = objective.renormalized(flat - config.learning_rate * grad)

    if steps > 0:
        node.final_loss = objective.value(flat)[0]
        written = 0
        for source, scaffold, _ in node.components():
            if source != node.index and config.freeze_chains:
                continue
            q, t = objective.unpack(flat)[written]
            write_scaffold_arrays(scaffold, q, t)
            written += 1
    node.frame_grad_mags = frame_mags
    node.loss_history.extend(rows)
    return node


def optimize_layer(tree: PartitionTree, depth: int, tracks,
                   weights: LossWeights, config: OptimConfig) -> PartitionTree:
    """Optimize every node at one depth, sequentially or in threads.

    Per-node seeds are config.seed XOR node index. Nodes are independent,
    so the result is identical regardless of schedule.
    """
    nodes = tree.at_depth(depth)
    steps = config.steps_per_layer[depth]
    if config.parallel and len(nodes) > 1:
        with ThreadPoolExecutor(max_workers=len(nodes)) as pool:
            futures = [pool.submit(optimize_node, node, tracks, weights, config,
                                   steps, config.seed ^ node.index)
                       for node in nodes]
            for fut in futures:
                fut.result()
    else:
        for node in nodes:
            optimize_node(node, tracks, weights, config, steps, config.seed ^ node.index)
    return tree


# ---------------------------------------------------------------------------
# split strategies

def _balance_split(interval: TimeInterval, mags: np.ndarray, first_frame: int) -> int:
    """Partition point equalizing the magnitude mass on both sides.

    mags[i] belongs to frame first_frame + i. Candidates are
    (interval.left, interval.right]; ties go to the smaller frame.
    """
    frames = first_frame + np.arange(len(mags))
    best_tp = interval.left + 1
    best_score = math.inf
    for t_p in range(interval.left + 1, interval.right + 1):
        left = float(mags[frames < t_p].sum())
        right = float(mags[frames >= t_p].sum())
        score = abs(left - right)
        if score < best_score:
            best_score = score
            best_tp = t_p
    return best_tp


def split_binary(node: TreeNode, tracks=None) -> int:
    del tracks
    return partition_point_binary(node.interval)


def split_flow(node: TreeNode, tracks) -> int:
    """Balance observed per-frame displacement mass across the split.

    Displacement at frame t is the mean step magnitude of the given tracks
    between t and t+1, counting only tracks visible at both frames.
    """
    iv = node.interval
    if iv.length < 2:
        raise IntervalTooShort(f"cannot split interval of length {iv.length}")
    mags = tracks.frame_displacements(iv.left, iv.right)
    return _balance_split(iv, mags, iv.left)


def split_gradient(node: TreeNode, tracks=None) -> int:
    """Balance the gradient magnitude recorded during the node's training."""
    del tracks
    iv = node.interval
    if iv.length < 2:
        raise IntervalTooShort(f"cannot split interval of length {iv.length}")
    if node.frame_grad_mags is None or len(node.frame_grad_mags) != iv.length:
        raise ValueError(f"node {node.index} has no recorded per-frame gradients")
    return _balance_split(iv, np.asarray(node.frame_grad_mags), iv.left)


SPLIT_KINDS = ("binary", "flow", "gradient")


def make_split_fn(kind: str, tracks=None):
    """Bind a split strategy to the track statistics it may need."""
    if kind == "binary":
        return split_binary
    if kind == "flow":
        if tracks is None:
            raise ValueError("flow split needs tracks")
        return lambda node: split_flow(node, tracks)
    if kind == "gradient":
        return split_gradient
    raise ValueError(f"unknown split kind {kind!r}")


def schedule_cost(depth: int, mode: str) -> int:
    """Independent optimization stages for a full tree of the given depth."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if mode == "parallel":
        return depth + 1
    if mode == "sequential":
        return 2 ** (depth + 1) - 1
    raise ValueError(f"unknown mode {mode!r}")
