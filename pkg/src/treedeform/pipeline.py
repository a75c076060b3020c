"""End-to-end fitting: tracks in, optimized tree plus reports out.

This is the glue the CLI and the ablation harness share: classify tracks,
withhold the evaluation subset, initialize the scaffold and points from
the dynamic training tracks, then build the tree layer by layer with the
configured optimizer and split strategy.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .config import RunConfig
from .errors import ConfigError
from .optimize import LossWeights, OptimConfig, make_split_fn, optimize_layer
from .scaffold import ScenePoint
from .scene import (
    EvalReport,
    TrackSet,
    classify_static,
    evaluate,
    holdout_split,
    init_points,
    init_scaffold,
)
from .tree import PartitionTree, build_tree, tree_from_dict, tree_to_dict

TREE_FILE = "tree.json"
LOSSES_FILE = "losses.csv"
SUMMARY_FILE = "summary.txt"
HELDOUT_FILE = "heldout.csv"
CONFIG_FILE = "config_used.cfg"


@dataclass
class FitResult:
    tree: PartitionTree
    train: TrackSet
    heldout: TrackSet
    dynamic_train: TrackSet
    static_points: list[ScenePoint]
    config: RunConfig


def optim_config_from(cfg: RunConfig) -> OptimConfig:
    return OptimConfig(
        steps_per_layer=list(cfg.steps_per_layer),
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        gradient_mode=cfg.gradient_mode,
        fd_epsilon=cfg.fd_epsilon,
        freeze_chains=cfg.freeze_chains,
        child_track_loss=cfg.child_track_loss,
        parallel=cfg.parallel,
    )


def fit_tracks(tracks: TrackSet, cfg: RunConfig) -> FitResult:
    """Classify, split, initialize, and build the optimized tree."""
    cfg.validate()
    classify_static(tracks, cfg.static_eps)
    train, heldout = holdout_split(tracks, cfg.holdout_stride)
    dynamic = train.dynamic_subset()
    scaffold = init_scaffold(dynamic, cfg.num_bases, cfg.knn)
    points = init_points(dynamic)
    static_points = init_points(train.static_subset()) if len(train.static_subset()) else []

    weights = LossWeights(cfg.lambda_track, cfg.lambda_arap, cfg.lambda_acc, cfg.lambda_vel)
    ocfg = optim_config_from(cfg)
    split_fn = make_split_fn(cfg.split, dynamic)

    def layer_opt(tree, depth):
        optimize_layer(tree, depth, dynamic, weights, ocfg)

    tree = build_tree(scaffold, points, cfg.depth, split_fn, layer_opt,
                      caps=list(cfg.caps), opacity_reset=cfg.opacity_reset)
    return FitResult(tree, train, heldout, dynamic, static_points, cfg)


def variant_config(cfg: RunConfig, depth: int | None = None,
                   freeze_chains: bool | None = None) -> RunConfig:
    """Derived config for an ablation variant, sharing the seed.

    Shrinking the depth truncates the per-layer lists; growing it is a
    configuration error.
    """
    out = dataclasses.replace(cfg, caps=list(cfg.caps),
                              steps_per_layer=list(cfg.steps_per_layer))
    if freeze_chains is not None:
        out.freeze_chains = freeze_chains
    if depth is not None:
        if depth + 1 > len(cfg.steps_per_layer):
            raise ConfigError(
                f"variant depth {depth} needs {depth + 1} steps_per_layer entries")
        out.depth = depth
        out.steps_per_layer = list(cfg.steps_per_layer[:depth + 1])
        out.caps = list(cfg.caps[:depth + 1])
    return out.validate()


ABLATION_VARIANTS = ("flat", "tpt_frozen", "tpt_sac")


def run_ablations(tracks_factory, cfg: RunConfig) -> dict[str, float]:
    """Mechanism and depth-sweep comparison; returns variant -> mean RMSE.

    tracks_factory() must return a fresh TrackSet per call (fitting labels
    and consumes it). All variants share cfg.seed.
    """
    results: dict[str, float] = {}

    def run(name: str, vcfg: RunConfig):
        res = fit_tracks(tracks_factory(), vcfg)
        results[name] = evaluate(res.tree, res.heldout).mean_rmse

    run("flat", variant_config(cfg, depth=0))
    run("tpt_frozen", variant_config(cfg, freeze_chains=True))
    run("tpt_sac", variant_config(cfg, freeze_chains=False))
    for d in (0, 1, 2):
        run(f"depth_{d}", variant_config(cfg, depth=d))
    return results


# ---------------------------------------------------------------------------
# fit directory layout

def write_fit_outputs(result: FitResult, out_dir: str) -> None:
    from .config import config_to_text
    from .scene import save_tracks

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, TREE_FILE), "w") as fh:
        json.dump(tree_to_dict(result.tree), fh, sort_keys=True)
    rows = ["step,node,loss_total,loss_track,loss_arap,loss_acc,loss_vel"]
    history = []
    for j in sorted(result.tree.nodes):
        history.extend(result.tree.nodes[j].loss_history)
    for step, node, total, track, arap, acc, vel in sorted(history, key=lambda r: (r[1], r[0])):
        rows.append(f"{step},{node},{total!r},{track!r},{arap!r},{acc!r},{vel!r}")
    with open(os.path.join(out_dir, LOSSES_FILE), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    with open(os.path.join(out_dir, SUMMARY_FILE), "w") as fh:
        fh.write(result.tree.inspect() + "\n")
    save_tracks(result.heldout, os.path.join(out_dir, HELDOUT_FILE))
    with open(os.path.join(out_dir, CONFIG_FILE), "w") as fh:
        fh.write(config_to_text(result.config))


def load_tree_dir(out_dir: str) -> PartitionTree:
    path = os.path.join(out_dir, TREE_FILE)
    with open(path) as fh:
        return tree_from_dict(json.load(fh))


def report_to_csv(report: EvalReport) -> str:
    rows = ["kind,key,value"]
    for tid in sorted(report.per_track_rmse):
        rows.append(f"track,{tid},{report.per_track_rmse[tid]!r}")
    for j in sorted(report.per_interval_rmse):
        rows.append(f"interval,{j},{report.per_interval_rmse[j]!r}")
    rows.append(f"summary,mean_rmse,{report.mean_rmse!r}")
    rows.append(f"summary,endpoint,{report.endpoint_error!r}")
    return "\n".join(rows) + "\n"
