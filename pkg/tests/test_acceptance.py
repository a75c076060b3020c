"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The heavy criteria (hierarchy benefit, depth sweep, split robustness) fit
full trees on the bundled phase_switch scene with the shipped desk
config; fits are memoized so shared variants run once. Run with -s to see
the PASS lines stream.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from treedeform.cli import main as cli_main
from treedeform.config import load_config
from treedeform.geometry import SE3Transform, dqb_blend
from treedeform.objective import central_difference
from treedeform.optimize import (
    LossWeights,
    OptimConfig,
    loss_acc,
    loss_arap,
    loss_track,
    loss_vel,
    node_objective,
    schedule_cost,
)
from treedeform.pipeline import fit_tracks, variant_config
from treedeform.scaffold import MotionBasis, ScenePoint, build_knn_graph, deform_point
from treedeform.scene import (
    SyntheticSpec,
    Track,
    TrackSet,
    evaluate,
    generate_synthetic,
    load_tracks,
    save_tracks,
)
from treedeform.tree import (
    TimeInterval,
    TreeNode,
    ancestor_indices,
    assemble_points,
    build_tree,
    inherit_points,
    partition_bases,
    partition_point_binary,
    partition_points,
    specialize_chain,
    tree_to_dict,
)

from oracles import dqb_oracle, random_scaffold, random_se3

CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "desk_phase_switch.cfg"


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    print(line)
    assert ok, line


def bundled_scene(seed: int) -> TrackSet:
    return generate_synthetic(SyntheticSpec(
        "phase_switch", n_tracks=75, n_frames=40, noise_sigma=0.005, seed=seed))


def desk_config(seed: int = 7):
    cfg = load_config(str(CONFIG_PATH))
    cfg.seed = seed
    return cfg.validate()


_FIT_CACHE: dict = {}


def fitted_rmse(seed: int, depth: int = 2, freeze: bool = False,
                split: str = "binary") -> float:
    key = (seed, depth, freeze, split)
    if key not in _FIT_CACHE:
        cfg = desk_config(seed)
        cfg.split = split
        vcfg = variant_config(cfg, depth=depth, freeze_chains=freeze)
        res = fit_tracks(bundled_scene(seed), vcfg)
        _FIT_CACHE[key] = evaluate(res.tree, res.heldout).mean_rmse
    return _FIT_CACHE[key]


class TestCriterion1StructuralFidelity:
    def test_cmd_fit_depth2_structure(self, tmp_path):
        tracks = str(tmp_path / "scene.csv")
        assert cli_main(["synth", "--kind", "phase_switch", "--tracks", "40",
                         "--frames", "32", "--noise", "0.003", "--seed", "7",
                         "--out", tracks]) == 0
        out = str(tmp_path / "fit")
        rc = cli_main(["fit", "--config", str(CONFIG_PATH), "--tracks", tracks,
                       "--out", out, "--num_bases", "8", "--knn", "4",
                       "--steps_per_layer", "2,1,1", "--seed", "7"])
        assert rc == 0
        t0 = time.time()
        tree = json.load(open(tmp_path / "fit" / "tree.json"))
        nodes = {int(k): v for k, v in tree["nodes"].items()}
        ok = sorted(nodes) == list(range(1, 8))
        depths = {j: int(math.floor(math.log2(j))) for j in nodes}
        ok &= sorted(set(depths.values())) == [0, 1, 2]
        for j, nd in nodes.items():
            ok &= len(nd["chain"]) == depths[j]
            ok &= [c["source_index"] for c in nd["chain"]] == ancestor_indices(j)
        root = nodes[1]["interval"]
        for d in (0, 1, 2):
            frames = []
            for j, nd in nodes.items():
                if depths[j] == d:
                    frames.extend(range(nd["interval"][0], nd["interval"][1] + 1))
            ok &= sorted(frames) == list(range(root[0], root[1] + 1))
        elapsed = time.time() - t0
        ok &= elapsed < 1.0
        report("criterion-1 structural-fidelity", ok,
               f"7 nodes, 3 layers, chains 0/1/2, exact disjoint cover "
               f"(checks {elapsed * 1000:.0f} ms)")


class TestCriterion2ScheduleAccounting:
    def test_schedule_cost_exact(self):
        ok = all(schedule_cost(d, "parallel") == d + 1 and
                 schedule_cost(d, "sequential") == 2 ** (d + 1) - 1
                 for d in range(11))
        par, seq = schedule_cost(2, "parallel"), schedule_cost(2, "sequential")
        ratio = (seq - par) / seq
        ok &= (par, seq) == (3, 7)
        ok &= abs(ratio - 0.5714) <= 0.0001 + 3e-5
        report("criterion-2 schedule-accounting", ok,
               f"parallel/sequential exact for depth 0..10; depth-2 ratio {ratio:.4%}")


class TestCriterion3ParallelDeterminism:
    def test_sequential_vs_parallel_bitwise(self):
        t0 = time.time()
        blobs = []
        for parallel in (False, True):
            cfg = desk_config(7)
            # determinism is independent of step count; short runs keep this
            # criterion well inside its 2 minute budget
            cfg.steps_per_layer = [40, 25, 25]
            cfg.parallel = parallel
            res = fit_tracks(bundled_scene(7), cfg)
            blobs.append(json.dumps(tree_to_dict(res.tree), sort_keys=True))
        elapsed = time.time() - t0
        ok = blobs[0] == blobs[1] and elapsed < 120
        report("criterion-3 parallel-determinism", ok,
               f"sequential and threaded layer optimization bitwise identical "
               f"({elapsed:.0f} s)")


class TestCriterion4DqbCorrectness:
    def test_randomized_blends_match_oracle(self):
        rng = np.random.default_rng(1234)
        worst = 0.0
        for _ in range(10_000):
            n = int(rng.integers(1, 6))
            ms = [random_se3(rng) for _ in range(n)]
            w = rng.uniform(0.05, 1.0, n)
            out = dqb_blend(ms, list(w))
            q_ref, t_ref = dqb_oracle(ms, w)
            q = out.rotation.as_array()
            if np.dot(q, q_ref) < 0:
                q = -q
            err = max(np.abs(q - q_ref).max(), np.abs(out.translation - t_ref).max())
            worst = max(worst, err)
        ok = worst < 1e-9

        worst_t = 0.0
        for _ in range(2000):
            n = int(rng.integers(2, 6))
            ts = [rng.normal(size=3) for _ in range(n)]
            w = rng.uniform(0.05, 1.0, n)
            out = dqb_blend([SE3Transform.from_translation(t) for t in ts], list(w))
            expect = np.average(ts, axis=0, weights=w)
            worst_t = max(worst_t, float(np.abs(out.translation - expect).max()))
        ok &= worst_t < 1e-12
        report("criterion-4 dqb-correctness", ok,
               f"1e4 blends vs independent oracle, max err {worst:.2e}; "
               f"pure translations max err {worst_t:.2e}")


class TestCriterion5GradientCorrectness:
    def test_hundred_random_scaffolds(self):
        rng = np.random.default_rng(4321)
        weights = LossWeights()
        worst = 0.0
        for trial in range(100):
            n_bases = 2 + trial % 3            # 2..4
            n_frames = 3 + (trial // 3) % 4    # 3..6
            g = random_scaffold(rng, n_bases, n_frames, 2)
            obs = np.cumsum(rng.normal(scale=0.05, size=(4, n_frames, 3)), axis=1) \
                + rng.normal(size=(4, 1, 3))
            vis = np.ones(n_frames, dtype=bool)
            tracks = TrackSet([Track(i, obs[i], vis.copy()) for i in range(4)],
                              TimeInterval(1, n_frames))
            points = [ScenePoint(id=i, position=obs[i, 0] + rng.normal(scale=0.03, size=3),
                                 canonical_time=1) for i in range(4)]
            node = TreeNode(1, TimeInterval(1, n_frames), g, points)
            obj = node_objective(node, tracks, weights, OptimConfig())
            flat = obj.initial_flat()
            _, _, g_auto = obj.value_and_grad(flat)
            g_fd = obj.fd_gradient(flat, 1e-5)
            mask = np.abs(g_auto) > 1e-8
            if mask.any():
                rel = np.abs(g_auto[mask] - g_fd[mask]) / np.abs(g_auto[mask])
                worst = max(worst, float(rel.max()))
        ok = worst < 1e-4
        report("criterion-5 gradient-correctness", ok,
               f"100 scaffolds (2-4 bases, 3-6 frames), worst rel err vs "
               f"central differences {worst:.2e}")


class TestCriterion6LossZeroCases:
    def test_zero_cases(self):
        from test_optimize import rigid_motion_scaffold, tracks_from_positions

        g = rigid_motion_scaffold()
        arap = loss_arap(g, [(1, 3), (2, 6)])

        static = build_knn_graph(
            [MotionBasis.static_at(np.array([float(i), 0, 0]), 1, 6) for i in range(3)], 2)
        vel = loss_vel(static)

        v = np.array([0.0625, -0.03125, 0.015625])
        bases = []
        for i in range(3):
            trans = np.stack([np.array([float(i), 0, 0]) + f * v for f in range(6)])
            bases.append(MotionBasis(1, trans, np.tile([1.0, 0, 0, 0], (6, 1))))
        acc = loss_acc(build_knn_graph(bases, 2))

        shift = np.array([0.0, 0.0, 0.25])
        bases = []
        for x in (0.0, 1.0, 2.0):
            trans = np.stack([np.array([x, 0, 0]) + f * shift for f in range(5)])
            bases.append(MotionBasis(1, trans, np.tile([1.0, 0, 0, 0], (5, 1))))
        g2 = build_knn_graph(bases, 3)
        anchors = np.array([[0.5, 0.25, 0.0], [1.5, -0.25, 0.5]])
        obs = np.stack([np.stack([a + f * shift for f in range(5)]) for a in anchors])
        tracks = tracks_from_positions(obs)
        points = [ScenePoint(id=i, position=anchors[i], canonical_time=1) for i in range(2)]
        track = loss_track(g2, points, tracks, TimeInterval(1, 5))

        ok = arap < 1e-12 and vel == 0.0 and acc == 0.0 and track < 1e-12
        report("criterion-6 loss-zero-cases", ok,
               f"arap={arap:.1e} vel={vel} acc={acc} track={track:.1e}")


class TestCriterion7HierarchyBenefit:
    def test_tpt_sac_beats_flat_and_frozen(self):
        t0 = time.time()
        flat = fitted_rmse(7, depth=0)
        frozen = fitted_rmse(7, depth=2, freeze=True)
        sac = fitted_rmse(7, depth=2, freeze=False)
        elapsed = time.time() - t0
        ok = sac <= 0.85 * flat and sac <= frozen and elapsed < 600
        report("criterion-7 hierarchy-benefit", ok,
               f"flat={flat:.5f} frozen={frozen:.5f} sac={sac:.5f} "
               f"ratio={sac / flat:.3f} (<=0.85) ({elapsed:.0f} s)")


class TestCriterion8DepthSweep:
    def test_rmse_non_increasing_within_sigma(self):
        t0 = time.time()
        seeds = (7, 101, 102, 103, 104)
        table = {d: np.array([fitted_rmse(s, depth=d) for s in seeds])
                 for d in (0, 1, 2)}
        ok = True
        details = []
        for d in (0, 1):
            diffs = table[d + 1] - table[d]
            sigma = float(np.std(diffs, ddof=1))
            ok &= float(np.mean(diffs)) <= sigma
            details.append(f"d{d}->d{d + 1}: mean diff {np.mean(diffs):+.5f} "
                           f"(sigma {sigma:.5f})")
        elapsed = time.time() - t0
        ok &= elapsed < 1800
        means = [float(np.mean(table[d])) for d in (0, 1, 2)]
        report("criterion-8 depth-sweep", ok,
               f"mean rmse by depth {means[0]:.5f}/{means[1]:.5f}/{means[2]:.5f}; "
               + "; ".join(details) + f" ({elapsed:.0f} s)")


class TestCriterion9SplitRobustness:
    def test_splits_complete_and_agree(self):
        t0 = time.time()
        rmses = {split: fitted_rmse(7, depth=2, split=split)
                 for split in ("binary", "flow", "gradient")}
        spread = max(rmses.values()) / min(rmses.values())
        elapsed = time.time() - t0
        ok = spread <= 1.15 and elapsed < 1800
        report("criterion-9 split-robustness", ok,
               " ".join(f"{k}={v:.5f}" for k, v in rmses.items())
               + f" spread={spread:.3f} (<=1.15) ({elapsed:.0f} s)")


class TestCriterion10InvariantSuite:
    def test_property_suite(self):
        t0 = time.time()
        rng = np.random.default_rng(999)
        checks = 0

        # partition conservation (bases and points), 100 cases
        for _ in range(100):
            g = random_scaffold(rng, int(rng.integers(2, 5)), int(rng.integers(4, 10)), 2)
            lo, hi = g.frame_range
            pts = [ScenePoint(id=i, position=rng.normal(size=3),
                              canonical_time=int(rng.integers(lo, hi + 1)))
                   for i in range(int(rng.integers(5, 30)))]
            tp = int(rng.integers(lo + 1, hi + 1))
            left_g, right_g = partition_bases(g, tp)
            for i in range(g.n_bases):
                assert (left_g.bases[i].n_frames + right_g.bases[i].n_frames
                        == g.bases[i].n_frames)
            lp, rp = partition_points(pts, tp)
            assert sorted(p.id for p in lp + rp) == sorted(p.id for p in pts)
            checks += 1

        # chain index formula, arithmetic + built trees
        for j in rng.integers(1, 1_000_000, size=200):
            j = int(j)
            expect = [j // 2 ** a for a in range(1, j.bit_length())]
            assert ancestor_indices(j) == expect
            checks += 1

        # inheritance cap + opacity reset, 100 cases
        for _ in range(100):
            pts = [ScenePoint(id=i, position=rng.normal(size=3),
                              canonical_time=int(rng.integers(1, 7)))
                   for i in range(int(rng.integers(5, 60)))]
            cap = int(rng.integers(1, 70))
            reset = float(rng.uniform(0.1, 1.0))
            out = inherit_points(pts, cap, reset)
            assert len(out) == min(cap, len(pts))
            assert all(p.opacity == reset for p in out)
            checks += 1

        # built trees: specialization non-aliasing, assemble cardinality,
        # chain sources
        mutations = 0
        assemblies = 0
        while mutations < 100 or assemblies < 100:
            g = random_scaffold(rng, 3, int(rng.integers(8, 14)), 2)
            lo, hi = g.frame_range
            pts = [ScenePoint(id=i, position=rng.normal(size=3),
                              canonical_time=int(rng.integers(lo, hi + 1)))
                   for i in range(12)]
            tree = build_tree(g, pts, 2, lambda n: partition_point_binary(n.interval),
                              lambda t, d: None, caps=[math.inf] * 3, opacity_reset=0.5)
            for j, node in tree.nodes.items():
                assert [c.source_index for c in node.chain] == ancestor_indices(j)
            for (a, b) in ((4, 5), (6, 7), (2, 3)):
                if a not in tree.nodes or b not in tree.nodes:
                    continue
                ca = tree.get(a).chain[-1]  # root copy
                cb = tree.get(b).chain[-1]
                before = cb.scaffold.bases[0].translations.copy()
                ca.scaffold.bases[0].translations += rng.normal(size=3)
                assert np.array_equal(cb.scaffold.bases[0].translations, before)
                mutations += 1
            for node in tree.nodes.values():
                tau = int(rng.integers(node.interval.left, node.interval.right + 1))
                out = assemble_points(tree, node.index, tau)
                assert len(out) == len(node.points) + sum(len(c.points) for c in node.chain)
                assemblies += 1
        checks += mutations + assemblies

        # self-deformation identity, 100 cases
        for trial in range(100):
            g = random_scaffold(rng, int(rng.integers(2, 5)), 5, 2)
            p = ScenePoint(id=trial, position=rng.normal(size=3),
                           canonical_time=int(rng.integers(1, 6)))
            moved = deform_point(p, g, p.canonical_time)
            assert np.allclose(moved.position, p.position, atol=1e-9)
            checks += 1

        # save/load round trip, 100 cases
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            for i in range(100):
                f = int(rng.integers(4, 9))
                n = int(rng.integers(2, 8))
                tracks = []
                for tid in range(n):
                    vis = rng.uniform(size=f) > 0.2
                    if not vis.any():
                        vis[0] = True
                    tracks.append(Track(tid, rng.normal(size=(f, 3)), vis))
                ts = TrackSet(tracks, TimeInterval(1, f))
                path = f"{tmp}/t{i}.csv"
                save_tracks(ts, path)
                back = load_tracks(path)
                for a, b in zip(ts.tracks, back.tracks):
                    assert np.array_equal(a.positions, b.positions)
                    assert np.array_equal(a.visibility, b.visibility)
                checks += 1

        elapsed = time.time() - t0
        ok = checks >= 700 and elapsed < 120
        report("criterion-10 invariant-suite", ok,
               f"{checks} randomized invariant checks ({elapsed:.0f} s)")
