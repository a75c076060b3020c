"""Command-line entry point.

Subcommands: synth (generate a synthetic track file), fit (build and
optimize a tree from tracks), eval (score a fitted tree on held-out
tracks), ablate (mechanism and depth-sweep comparison). Batch-style:
every command is deterministic given its flags and seed.

Exit codes: 0 success, 2 input or configuration error, 3 numerical
failure. The error class name is printed on standard error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ALL_KEYS, RunConfig, apply_overrides, load_config
from .errors import (
    ConfigError,
    NonFiniteComponent,
    NonFiniteObjective,
    TreedeformError,
)
from .pipeline import (
    fit_tracks,
    load_tree_dir,
    report_to_csv,
    run_ablations,
    write_fit_outputs,
)
from .scene import SyntheticSpec, evaluate, generate_synthetic, load_tracks, save_tracks

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _fail(exc: Exception, code: int) -> int:
    print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
    return code


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for key in sorted(ALL_KEYS):
        if key == "seed":
            continue
        parser.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="V")
    parser.add_argument("--seed", dest="cfg_seed", metavar="V", required=True)


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for key in ALL_KEYS:
        val = getattr(args, f"cfg_{key}", None)
        if val is not None:
            overrides[key] = val
    apply_overrides(cfg, overrides)
    return cfg.validate()


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        spec = SyntheticSpec(kind=args.kind, n_tracks=args.tracks,
                             n_frames=args.frames, noise_sigma=args.noise,
                             phase_boundary=args.phase_boundary, seed=args.seed)
        tracks = generate_synthetic(spec)
        save_tracks(tracks, args.out)
    except TreedeformError as exc:
        return _fail(exc, EXIT_INPUT)
    print(f"wrote {len(tracks)} tracks x {tracks.frame_range.length} frames to {args.out}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    try:
        cfg = _build_config(args)
        tracks = load_tracks(args.tracks)
    except TreedeformError as exc:
        return _fail(exc, EXIT_INPUT)
    try:
        result = fit_tracks(tracks, cfg)
        write_fit_outputs(result, args.out)
    except (NonFiniteObjective, NonFiniteComponent) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except TreedeformError as exc:
        return _fail(exc, EXIT_INPUT)
    print(f"fitted tree with {len(result.tree.nodes)} nodes -> {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        if not os.path.isdir(args.tree):
            raise ConfigError(f"no fit directory at {args.tree}")
        tree = load_tree_dir(args.tree)
        heldout = load_tracks(args.heldout)
        report = evaluate(tree, heldout)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_INPUT)
    except TreedeformError as exc:
        return _fail(exc, EXIT_INPUT)
    out_path = args.out or os.path.join(args.tree, "report.csv")
    with open(out_path, "w") as fh:
        fh.write(report_to_csv(report))
    print(f"mean_rmse={report.mean_rmse!r} endpoint={report.endpoint_error!r}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    try:
        cfg = _build_config(args)
        if len(cfg.steps_per_layer) < 3:
            raise ConfigError("ablate's depth sweep needs 3 steps_per_layer entries")
        path = args.tracks

        def factory():
            return load_tracks(path)

        factory()  # validate the file before any fitting
    except TreedeformError as exc:
        return _fail(exc, EXIT_INPUT)
    try:
        results = run_ablations(factory, cfg)
    except (NonFiniteObjective, NonFiniteComponent) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except TreedeformError as exc:
        return _fail(exc, EXIT_INPUT)
    rows = ["variant,mean_rmse"]
    rows.extend(f"{name},{rmse!r}" for name, rmse in results.items())
    text = "\n".join(rows) + "\n"
    with open(args.out, "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treedeform",
        description="Fit hierarchical deformation fields to 3D point tracks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic track file")
    p.add_argument("--kind", required=True,
                   choices=("rigid", "articulated_chain", "phase_switch"))
    p.add_argument("--tracks", type=int, default=60)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--phase-boundary", type=float, default=None, dest="phase_boundary")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a tree to a track file")
    p.add_argument("--config", default=None)
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a fitted tree on held-out tracks")
    p.add_argument("--tree", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run mechanism and depth-sweep comparisons")
    p.add_argument("--config", default=None)
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
