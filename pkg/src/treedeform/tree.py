"""Binary partition tree over frame intervals with ancestor chains.

Nodes use implicit heap addressing: root is 1, children of j are 2j and
2j+1, so depth(j) = floor(log2 j) and the ancestors of j are j//2, j//4,
..., 1. Each node owns the motion bases and points whose frames fall in
its interval, plus an ordered chain of independently mutable copies of its
ancestors' state. Assembly at a frame unions the node's own deformed
points with every chain entry's, each deformed by its own scaffold.

The tree is built breadth-first: optimize one layer, split each node's
interval, partition bases and points into the children, cap and
opacity-reset the inherited points, and hand each child a fresh copy of
the parent's chain plus the parent itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import IntervalTooShort, MissingAncestor, PartitionOutOfRange
from .scaffold import MotionBasis, ScaffoldGraph, ScenePoint, build_knn_graph, deform_point


@dataclass(frozen=True)
class TimeInterval:
    """Inclusive integer frame interval."""

    left: int
    right: int

    def __post_init__(self):
        if self.left > self.right:
            raise ValueError(f"empty interval [{self.left}, {self.right}]")

    @property
    def length(self) -> int:
        return self.right - self.left + 1

    def contains(self, t: int) -> bool:
        return self.left <= t <= self.right


@dataclass
class AncestorCopy:
    """Independently optimizable copy of an ancestor's scaffold and points."""

    source_index: int
    scaffold: ScaffoldGraph
    points: list[ScenePoint]

    def clone(self) -> "AncestorCopy":
        return AncestorCopy(self.source_index, self.scaffold.clone(),
                            [p.clone() for p in self.points])


@dataclass
class TreeNode:
    """One tree node: interval, scaffold, points, and ancestor chain."""

    index: int
    interval: TimeInterval
    scaffold: ScaffoldGraph
    points: list[ScenePoint]
    chain: list[AncestorCopy] = field(default_factory=list)
    early_leaf: bool = False
    final_loss: Optional[float] = None
    # L2 norm of the gradient restricted to each own-scaffold frame,
    # summed over optimization steps; feeds the gradient split strategy.
    frame_grad_mags: Optional[np.ndarray] = None
    # (step, node, total, track, arap, acc, vel) rows recorded per step
    loss_history: list[tuple] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return int(math.floor(math.log2(self.index)))

    def components(self) -> list[tuple[int, ScaffoldGraph, list[ScenePoint]]]:
        """Own state plus chain entries, own first then nearest-first."""
        out = [(self.index, self.scaffold, self.points)]
        for copy in self.chain:
            out.append((copy.source_index, copy.scaffold, copy.points))
        return out


class PartitionTree:
    """Index-addressed binary tree of TreeNodes."""

    def __init__(self, max_depth: int):
        self.max_depth = max_depth
        self.nodes: dict[int, TreeNode] = {}

    def set(self, node: TreeNode) -> None:
        self.nodes[node.index] = node

    def get(self, j: int) -> TreeNode:
        return self.nodes[j]

    def has(self, j: int) -> bool:
        return j in self.nodes

    def at_depth(self, d: int) -> list[TreeNode]:
        lo, hi = 2 ** d, 2 ** (d + 1)
        return [self.nodes[j] for j in range(lo, hi) if j in self.nodes]

    def leaf_for(self, t: int) -> TreeNode:
        """Deepest node whose interval contains frame t."""
        node = self.nodes[1]
        if not node.interval.contains(t):
            raise PartitionOutOfRange(f"frame {t} outside root interval")
        while True:
            nxt = None
            for c in (2 * node.index, 2 * node.index + 1):
                if c in self.nodes and self.nodes[c].interval.contains(t):
                    nxt = self.nodes[c]
                    break
            if nxt is None:
                return node
            node = nxt

    def inspect(self) -> str:
        """One line per node, ascending index."""
        lines = []
        for j in sorted(self.nodes):
            n = self.nodes[j]
            chain = ",".join(str(c.source_index) for c in n.chain)
            lines.append(
                f"node={j} depth={n.depth} interval={n.interval.left},{n.interval.right} "
                f"bases={n.scaffold.n_bases} points={len(n.points)} chain={chain}")
        return "\n".join(lines)


def partition_point_binary(interval: TimeInterval) -> int:
    """Midpoint split, guarded so both children are non-empty."""
    if interval.length < 2:
        raise IntervalTooShort(f"cannot split interval of length {interval.length}")
    mid = (interval.left + interval.right) // 2
    return max(mid, interval.left + 1)


def partition_bases(scaffold: ScaffoldGraph, t_p: int) -> tuple[ScaffoldGraph, ScaffoldGraph]:
    """Split every basis's poses at t_p: left keeps t < t_p, right t >= t_p.

    Radii are copied from the parent; the KNN edges are rebuilt per child
    from the restricted trajectories (then radii restored, since radius
    initialization is a one-time root policy).
    """
    lo, hi = scaffold.frame_range
    if not (lo < t_p <= hi):
        raise PartitionOutOfRange(f"partition point {t_p} not inside ({lo}, {hi}]")
    radii = scaffold.radii()

    def restricted(a: int, b: int) -> ScaffoldGraph:
        bases = []
        for basis in scaffold.bases:
            i0, i1 = a - basis.t0, b - basis.t0
            bases.append(MotionBasis(a, basis.translations[i0:i1 + 1].copy(),
                                     basis.rotations[i0:i1 + 1].copy(), basis.radius))
        child = build_knn_graph(bases, scaffold.k)
        for basis, r in zip(child.bases, radii):
            basis.radius = float(r)
        return child

    return restricted(lo, t_p - 1), restricted(t_p, hi)


def partition_points(points: list[ScenePoint], t_p: int) -> tuple[list[ScenePoint], list[ScenePoint]]:
    """Split points by canonical time: left t_n < t_p, right t_n >= t_p."""
    left = [p for p in points if p.canonical_time < t_p]
    right = [p for p in points if p.canonical_time >= t_p]
    return left, right


def inherit_points(points: list[ScenePoint], cap: int, opacity_reset: float) -> list[ScenePoint]:
    """Cap an inherited point set and reset opacities.

    Subsampling is deterministic and stratified over canonical time: every
    frame gets an equal base quota, leftover slots go to frames by
    descending population (ties to the smaller frame), and within a frame
    the lowest ids win. Output points are fresh copies with opacity set to
    opacity_reset.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    if not 0.0 < opacity_reset <= 1.0:
        raise ValueError("opacity_reset must be in (0, 1]")

    selected: list[ScenePoint]
    if len(points) <= cap:
        selected = sorted(points, key=lambda p: (p.canonical_time, p.id))
    else:
        groups: dict[int, list[ScenePoint]] = {}
        for p in points:
            groups.setdefault(p.canonical_time, []).append(p)
        for g in groups.values():
            g.sort(key=lambda p: p.id)
        frames = sorted(groups)
        base = cap // len(frames)
        take = {f: min(base, len(groups[f])) for f in frames}
        leftover = cap - sum(take.values())
        priority = sorted(frames, key=lambda f: (-len(groups[f]), f))
        while leftover > 0:
            progressed = False
            for f in priority:
                if leftover == 0:
                    break
                if take[f] < len(groups[f]):
                    take[f] += 1
                    leftover -= 1
                    progressed = True
            if not progressed:
                break
        selected = []
        for f in frames:
            selected.extend(groups[f][:take[f]])

    out = []
    for p in selected:
        q = p.clone()
        q.opacity = opacity_reset
        out.append(q)
    return out


def ancestor_indices(j: int) -> list[int]:
    """Ancestor indices of heap node j, nearest first: j//2, j//4, ..., 1."""
    if j < 1:
        raise ValueError("node index must be >= 1")
    out = []
    while j > 1:
        j //= 2
        out.append(j)
    return out


def specialize_chain(tree: PartitionTree, j: int) -> list[AncestorCopy]:
    """Fresh, independently mutable ancestor chain for node j.

    The chain is inherited through the parent: the parent's own optimized
    state is prepended to copies of the parent's chain entries, so the
    copies carry whatever per-interval training their lineage received.
    Both children of a node call this separately and therefore never share
    storage.
    """
    if j == 1:
        return []
    parent_idx = j // 2
    if not tree.has(parent_idx):
        raise MissingAncestor(f"node {j} lacks ancestor {parent_idx}")
    parent = tree.get(parent_idx)
    chain = [AncestorCopy(parent.index, parent.scaffold.clone(),
                          [p.clone() for p in parent.points])]
    chain.extend(c.clone() for c in parent.chain)
    return chain


def assemble_points(tree: PartitionTree, j: int, tau: int) -> list[tuple[int, ScenePoint]]:
    """Union of node j's own and chain points, all deformed to frame tau.

    Returns (source_index, deformed point) pairs: own points deformed by
    the node's scaffold, each chain entry's by that copy's scaffold (whose
    wider frame range contains tau by construction).
    """
    node = tree.get(j)
    if not node.interval.contains(tau):
        raise PartitionOutOfRange(f"frame {tau} outside node {j} interval")
    out: list[tuple[int, ScenePoint]] = []
    for source, scaffold, points in node.components():
        for p in points:
            out.append((source, deform_point(p, scaffold, tau)))
    return out


def build_tree(
    scaffold: ScaffoldGraph,
    points: list[ScenePoint],
    max_depth: int,
    split_fn: Callable[[TreeNode], int],
    layer_optimizer: Callable[[PartitionTree, int], None],
    caps: list[float],
    opacity_reset: float,
) -> PartitionTree:
    """Breadth-first construction with per-layer optimization.

    caps[d] bounds the points a node at depth d inherits (math.inf leaves
    the set alone at the root and anywhere no cap is wanted). A node whose
    interval cannot be split becomes a leaf early; the tree then simply has
    fewer than 2^(max_depth+1) - 1 nodes.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if len(caps) != max_depth + 1:
        raise ValueError("caps must have one entry per layer")

    lo, hi = scaffold.frame_range
    tree = PartitionTree(max_depth)
    tree.set(TreeNode(1, TimeInterval(lo, hi), scaffold, list(points)))

    for d in range(max_depth + 1):
        layer_optimizer(tree, d)
        if d == max_depth:
            break
        for node in tree.at_depth(d):
            if node.interval.length < 2:
                node.early_leaf = True
                continue
            t_p = split_fn(node)
            left_sc, right_sc = partition_bases(node.scaffold, t_p)
            left_pts, right_pts = partition_points(node.points, t_p)
            cap = caps[d + 1]

            def inherited(pts: list[ScenePoint]) -> list[ScenePoint]:
                eff = int(cap) if cap != math.inf else max(len(pts), 1)
                return inherit_points(pts, eff, opacity_reset)

            left_pts = inherited(left_pts)
            right_pts = inherited(right_pts)
            j = node.index
            for child_idx, child_sc, child_pts, (a, b) in (
                (2 * j, left_sc, left_pts, (node.interval.left, t_p - 1)),
                (2 * j + 1, right_sc, right_pts, (t_p, node.interval.right)),
            ):
                tree.set(TreeNode(child_idx, TimeInterval(a, b), child_sc, child_pts,
                                  chain=specialize_chain(tree, child_idx)))
    return tree


# ---------------------------------------------------------------------------
# serialization (JSON-compatible dicts; floats survive text round trips)

def _scaffold_to_dict(s: ScaffoldGraph) -> dict:
    return {
        "k": s.k,
        "edges": s.edges.tolist(),
        "bases": [{
            "t0": b.t0,
            "radius": b.radius,
            "translations": b.translations.tolist(),
            "rotations": b.rotations.tolist(),
        } for b in s.bases],
    }


def _scaffold_from_dict(d: dict) -> ScaffoldGraph:
    bases = [MotionBasis(b["t0"], np.array(b["translations"]),
                         np.array(b["rotations"]), b["radius"])
             for b in d["bases"]]
    return ScaffoldGraph(bases, np.array(d["edges"], dtype=int), d["k"])


def _point_to_dict(p: ScenePoint) -> dict:
    return {
        "id": p.id,
        "position": p.position.tolist(),
        "rotation": p.rotation.tolist(),
        "scale": p.scale.tolist(),
        "opacity": p.opacity,
        "color": p.color.tolist(),
        "canonical_time": p.canonical_time,
    }


def _point_from_dict(d: dict) -> ScenePoint:
    return ScenePoint(d["id"], np.array(d["position"]), np.array(d["rotation"]),
                      np.array(d["scale"]), d["opacity"], np.array(d["color"]),
                      d["canonical_time"])


def tree_to_dict(tree: PartitionTree) -> dict:
    nodes = {}
    for j in sorted(tree.nodes):
        n = tree.nodes[j]
        nodes[str(j)] = {
            "index": n.index,
            "interval": [n.interval.left, n.interval.right],
            "early_leaf": n.early_leaf,
            "final_loss": n.final_loss,
            "scaffold": _scaffold_to_dict(n.scaffold),
            "points": [_point_to_dict(p) for p in n.points],
            "chain": [{
                "source_index": c.source_index,
                "scaffold": _scaffold_to_dict(c.scaffold),
                "points": [_point_to_dict(p) for p in c.points],
            } for c in n.chain],
            "frame_grad_mags": None if n.frame_grad_mags is None
            else np.asarray(n.frame_grad_mags).tolist(),
        }
    return {"max_depth": tree.max_depth, "nodes": nodes}


def tree_from_dict(d: dict) -> PartitionTree:
    tree = PartitionTree(d["max_depth"])
    for key in sorted(d["nodes"], key=int):
        nd = d["nodes"][key]
        node = TreeNode(
            index=nd["index"],
            interval=TimeInterval(nd["interval"][0], nd["interval"][1]),
            scaffold=_scaffold_from_dict(nd["scaffold"]),
            points=[_point_from_dict(p) for p in nd["points"]],
            chain=[AncestorCopy(c["source_index"], _scaffold_from_dict(c["scaffold"]),
                                [_point_from_dict(p) for p in c["points"]])
                   for c in nd["chain"]],
            early_leaf=nd["early_leaf"],
            final_loss=nd["final_loss"],
            frame_grad_mags=None if nd["frame_grad_mags"] is None
            else np.array(nd["frame_grad_mags"]),
        )
        tree.set(node)
    return tree
