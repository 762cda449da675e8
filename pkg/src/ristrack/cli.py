"""Command-line interface.

Two subcommands:

``ristrack run``
    Execute a seeded tracking experiment from a YAML configuration and
    write the aggregated metrics as CSV; optionally also render the
    summary figures next to the table.

``ristrack report``
    Render the summary figures from an existing results CSV.

Exit status is 0 on success and nonzero with a message on stderr for
configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import re
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .harness import (
    MODES,
    ExperimentSpec,
    run_baseline,
    run_experiment,
    write_csv,
)
from .signal import SceneConfig
from .tracker import TrackerConfig

__all__ = ["main", "load_config"]

_TRACKER_KEYS = (
    "model_cov",
    "damping",
    "gdm_step",
    "gdm_max_iter",
    "gdm_grad_tol",
    "inner_max_iter",
    "inner_tol",
    "hessian_floor",
    "cov_floor",
    "matching_grid_pitch",
)


def load_config(path: str | Path) -> tuple[SceneConfig, TrackerConfig]:
    """Read a YAML experiment configuration.

    The file is either a flat scene mapping (see
    :meth:`ristrack.signal.SceneConfig.from_dict` for the keys) or a
    mapping with a ``scene:`` section and an optional ``tracker:``
    section overriding estimator knobs.  The tracker's motion-model
    covariance defaults to the scene's.
    """
    with open(path, "r") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    scene = SceneConfig.from_dict(raw.get("scene", raw))
    tracker_cfg = dict(raw.get("tracker", {}))
    unknown = sorted(set(tracker_cfg) - set(_TRACKER_KEYS))
    if unknown:
        raise ValueError(f"{path}: unknown tracker keys {unknown}")
    tracker_cfg.setdefault("model_cov", scene.model_cov)
    return scene, TrackerConfig(**tracker_cfg)


def _parse_powers(tokens: list[str]) -> list[float]:
    """Flatten space- or comma-separated dBm values."""
    out = []
    for tok in tokens:
        for part in tok.replace(",", " ").split():
            out.append(float(part))
    if not out:
        raise ValueError("at least one power value required")
    return out


def _allow_negative_lists(parser: argparse.ArgumentParser) -> None:
    """Let bare negative values and comma lists (-10,-5) reach --power.

    argparse only recognizes plain negative numbers as positional-looking
    tokens; widen its matcher so dBm lists need no ``--power=`` escape.
    Best-effort: on Python versions without the private attribute, the
    ``--power=-10,-5`` form still works.
    """
    matcher = re.compile(r"^-\d+(\.\d+)?(,-?\d+(\.\d+)?)*$")
    try:
        parser._negative_number_matcher = matcher
    except AttributeError:
        pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ristrack",
        description="Tracking experiments over RIS reflection paths",
    )
    _allow_negative_lists(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a seeded experiment sweep")
    _allow_negative_lists(run)
    run.add_argument("--config", required=True, help="YAML scene/tracker file")
    run.add_argument("--mode", choices=MODES, default="directional",
                     help="beam planning method (default: directional)")
    run.add_argument("--baseline", action="store_true",
                     help="also run the slot-independent baseline")
    run.add_argument("--power", nargs="+", default=["0"], metavar="DBM",
                     help="transmit power sweep, dBm (space or comma separated)")
    run.add_argument("--trials", type=int, default=1,
                     help="independent trajectories per sweep point")
    run.add_argument("--slots", type=int, default=None,
                     help="override the slot count of the configuration")
    run.add_argument("--seed", type=int, default=0, help="master seed")
    run.add_argument("--out", required=True, help="output CSV path")
    run.add_argument("--workers", type=int, default=1,
                     help="parallel trial processes (default 1)")
    run.add_argument("--n-ris", type=int, default=None,
                     help="override RIS elements per surface")
    run.add_argument("--no-runtime-column", action="store_true",
                     help="omit runtime_ms so equal results give equal bytes")
    run.add_argument("--figures", action="store_true",
                     help="also render summary figures next to the CSV")

    rep = sub.add_parser("report", help="render figures from a results CSV")
    rep.add_argument("--in", dest="in_path", required=True,
                     help="results CSV written by `ristrack run`")
    rep.add_argument("--out-dir", default=None,
                     help="figure directory (default: CSV's directory)")
    rep.add_argument("--stem", default=None,
                     help="figure filename stem (default: CSV stem)")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    scene, tracker = load_config(args.config)
    if args.slots is not None:
        scene = replace(scene, n_slots=int(args.slots))
    if args.n_ris is not None:
        scene = replace(scene, n_ris=int(args.n_ris))
    spec = ExperimentSpec(
        scene=scene,
        tracker=tracker,
        mode=args.mode,
        baseline=args.baseline,
        power_dbm=_parse_powers(args.power),
        trials=args.trials,
        seed=args.seed,
        out_path=args.out,
        workers=args.workers,
        include_runtime=not args.no_runtime_column,
    )
    rows = run_experiment(spec)
    if spec.baseline:
        rows += run_baseline(spec)
    write_csv(rows, spec.out_path, include_runtime=spec.include_runtime)
    print(f"wrote {len(rows)} rows to {spec.out_path}")
    if args.figures:
        from .reporting import render_figures

        out = Path(spec.out_path)
        created = render_figures(rows, out.parent, stem=out.stem)
        for f in created:
            print(f"wrote {f}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    from .reporting import load_rows, render_figures

    in_path = Path(args.in_path)
    rows = load_rows(in_path)
    out_dir = Path(args.out_dir) if args.out_dir else in_path.parent
    stem = args.stem if args.stem else in_path.stem
    for f in render_figures(rows, out_dir, stem=stem):
        print(f"wrote {f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_report(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
