"""Command-line entry point: ``viewdistill <command> [flags]``.

Exit codes: 0 success, 2 bad input or configuration, 3 numeric failure.
Every command also accepts ``--config FILE`` with flat ``key=value`` lines;
keys are flag names without the leading dashes and explicit flags win.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calib_io import (
    TakeFiles,
    load_take,
    parse_calibration,
    parse_ego_trajectory,
    parse_spans,
    save_take,
    write_atomic,
)
from .curriculum import build_schedule
from .distill.train import DistillConfig, train_distill
from .errors import NumericError, ViewDistillError
from .ground_eval import DEFAULT_THRESHOLDS, ViewResult, evaluate
from .ranking import (
    GazeAxis,
    HoiConfig,
    rank_frequencies,
    rank_views,
    reverse_timeline,
    shuffle_timeline,
    timeline_from_cache,
    timeline_to_cache,
)
from .scene_sim import EgoPath, SceneConfig, generate_scene, parse_visibility_csv, table_correlation

log = logging.getLogger("viewdistill")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad flags or config file; reported with exit code 2."""


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as err:
        raise UsageError(f"cannot read config {path}: {err}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("_", "-")] = value.strip()
    return out


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Fill flags left unset (``None``) from ``--config``, then from ``defaults``."""
    actions = {a.dest: a for a in parser._actions if a.option_strings and a.dest not in ("help", "config")}
    by_key = {a.option_strings[-1].lstrip("-"): a for a in actions.values()}
    if args.config:
        for key, value in read_config(args.config).items():
            action = by_key.get(key)
            if action is None:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if getattr(args, action.dest) is not None:
                continue
            try:
                if isinstance(action, argparse._StoreConstAction):
                    parsed = action.const if _bool(value) else None
                else:
                    parsed = (action.type or str)(value)
            except (ValueError, argparse.ArgumentTypeError) as err:
                raise UsageError(f"config key {key}: {err}") from None
            if action.choices is not None and parsed not in action.choices:
                raise UsageError(f"config key {key}: {value!r} not in {sorted(action.choices)}")
            setattr(args, action.dest, parsed)
    for dest, value in defaults.items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    return args


def _thresholds(text: str) -> tuple:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not vals or any(not (0.0 < v <= 1.0) for v in vals):
        raise argparse.ArgumentTypeError("thresholds must lie in (0, 1]")
    return vals


# ---------------------------------------------------------------------------
# commands


def _hoi_config(args) -> HoiConfig:
    return HoiConfig(d_ego_hand=args.d_ego_hand, gaze_axis=GazeAxis(args.gaze_axis))


def cmd_rank(args) -> int:
    exo = parse_calibration(Path(args.calib).read_text(encoding="utf-8"))
    track = parse_ego_trajectory(Path(args.traj).read_text(encoding="utf-8"))
    cfg = _hoi_config(args)
    timeline = [rank_views(p, exo, cfg, int(t)) for t, p in zip(track.timestamps, track.poses)]
    if args.reverse and args.random:
        raise UsageError("--reverse and --random are mutually exclusive")
    if args.reverse:
        timeline = reverse_timeline(timeline)
    elif args.random:
        timeline = shuffle_timeline(timeline, args.seed)
    write_atomic(args.out, timeline_to_cache(timeline))
    counts = rank_frequencies(timeline)
    print("view " + " ".join(f"r{i}" for i in range(len(timeline[0].order))))
    for vid in sorted(counts):
        print(f"{vid} " + " ".join(str(c) for c in counts[vid]))
    return EXIT_OK


def cmd_schedule(args) -> int:
    M = args.epochs_pos if args.epochs_pos is not None else args.epochs
    P = args.phases_pos if args.phases_pos is not None else args.phases
    frac = args.fraction_pos if args.fraction_pos is not None else args.final_frac
    sched = build_schedule(M, P, frac)
    print("[" + ",".join(str(n) for n in sched.lengths) + "]")
    print("boundaries " + " ".join(str(b) for b in sched.boundaries))
    if args.out:
        write_atomic(args.out, sched.to_json() + "\n")
    return EXIT_OK


def _load_rankings(path) -> list:
    return timeline_from_cache(Path(path).read_text(encoding="utf-8"))


def cmd_train_distill(args) -> int:
    takes, timelines = [], []
    for d in args.takes:
        take = load_take(d)
        takes.append(take)
        cache = Path(args.rankings) if args.rankings and len(args.takes) == 1 else Path(d) / TakeFiles(Path(d)).rankings
        timelines.append(_load_rankings(cache))
    eval_takes = eval_timelines = None
    if args.eval_take:
        eval_takes = [load_take(d) for d in args.eval_take]
        eval_timelines = [_load_rankings(Path(d) / TakeFiles(Path(d)).rankings) for d in args.eval_take]
    config = DistillConfig(
        gamma=args.gamma,
        seed=args.seed,
        learning_rate=args.lr,
        epochs=args.epochs,
        head_dims=tuple(int(x) for x in args.head_dims.split(",")) if args.head_dims else None,
    )
    schedule = build_schedule(args.epochs, args.phases, args.final_frac)
    result = train_distill(takes, timelines, schedule, config, eval_takes, eval_timelines)
    out = Path(args.out)
    write_atomic(out / "head.vdph", result.head.to_bytes())
    write_atomic(out / "metrics.csv", result.metrics_csv())
    first, last = result.metrics[0], result.metrics[-1]
    print(
        f"epochs {len(result.metrics)} first_infonce {first.mean_infonce:.6f} last_infonce {last.mean_infonce:.6f} "
        f"first_train {first.train_infonce:.6f} last_train {last.train_infonce:.6f}"
    )
    return EXIT_OK


_VIEW_PREFIX = re.compile(r"^(\d+):(.+)$")
_VIEW_NAME = re.compile(r"view_(\d+)")


def _prediction_source(spec: str) -> tuple[int | None, Path]:
    m = _VIEW_PREFIX.match(spec)
    if m:
        return int(m.group(1)), Path(m.group(2))
    m = _VIEW_NAME.search(Path(spec).name)
    return (int(m.group(1)) if m else None), Path(spec)


def cmd_eval_ground(args) -> int:
    gts = {k: (v[0].start, v[0].end) for k, v in parse_spans(Path(args.keysteps).read_text(encoding="utf-8")).items()}
    timelines = {"take": _load_rankings(args.rankings)} if args.rankings else None
    results = []
    for spec in args.predictions:
        vid, path = _prediction_source(spec)
        if timelines is not None and vid is None:
            raise UsageError(f"{path}: cannot tell which view it belongs to (use VIEW:PATH or a view_<id> name)")
        preds = parse_spans(path.read_text(encoding="utf-8"), with_confidence=True)
        results.append(ViewResult("take", -1 if vid is None else vid, preds, gts))
    report = evaluate(results, timelines, args.thresholds, args.k)
    out = Path(args.out)
    write_atomic(out / "report.json", report.to_json())
    write_atomic(out / "report.csv", report.to_csv())
    for t in report.thresholds:
        print(f"R@{args.k} IoU>={t:g} {report.recall[t]:.4f}")
    print(f"mIoU {report.miou:.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = SceneConfig(
        n_exo=args.n_exo,
        duration_s=args.duration,
        ego_path=EgoPath(args.ego_path),
        seed=args.seed,
        feature_dim=args.dim,
        noise_sigma=args.sigma,
    )
    scene = generate_scene(cfg)
    files = save_take(scene.take, args.out)
    write_atomic(files.root / files.visibility, scene.visibility_csv())
    print(f"wrote take {scene.take.take_id}: {cfg.n_exo} exo views, {cfg.duration_s} s, to {files.root}")
    return EXIT_OK


def cmd_correlate(args) -> int:
    timeline = _load_rankings(args.rankings)
    exo_ids, table = parse_visibility_csv(Path(args.visibility).read_bytes())
    rho = table_correlation(timeline, table, exo_ids)
    print(f"spearman {rho:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


DEFAULTS = {
    "rank": dict(d_ego_hand=0.6, gaze_axis=GazeAxis.PLUS_Z.value, seed=0, reverse=False, random=False),
    "schedule": dict(epochs=None, phases=None, final_frac=0.5),
    "train-distill": dict(gamma=0.1, epochs=200, phases=5, final_frac=0.5, lr=0.1, seed=0, head_dims=None),
    "eval-ground": dict(thresholds=DEFAULT_THRESHOLDS, k=1),
    "simulate": dict(n_exo=4, duration=30, ego_path=EgoPath.RANDOM_WALK.value, seed=0, dim=16, sigma=0.1),
    "correlate": dict(),
}
REQUIRED = {
    "rank": ("calib", "traj", "out"),
    "train-distill": ("out",),
    "eval-ground": ("keysteps", "out"),
    "simulate": ("out",),
    "correlate": ("rankings", "visibility"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewdistill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="key=value file; explicit flags take precedence")
        return sp

    sp = command("rank", "rank views per second and write a ranking cache")
    sp.add_argument("--calib", help="exo calibration file")
    sp.add_argument("--traj", help="ego trajectory file")
    sp.add_argument("--out", help="ranking cache to write")
    sp.add_argument("--d-ego-hand", type=float, help="ego-to-hands distance in meters (default 0.6)")
    sp.add_argument("--gaze-axis", choices=[g.value for g in GazeAxis], help="camera axis that is the gaze")
    sp.add_argument("--reverse", action="store_const", const=True, help="reverse every exo order (ablation)")
    sp.add_argument("--random", action="store_const", const=True, help="shuffle every exo order (ablation)")
    sp.add_argument("--seed", type=int, help="seed for --random")

    sp = command("schedule", "print curriculum phase lengths")
    sp.add_argument("epochs_pos", nargs="?", type=int, metavar="M")
    sp.add_argument("phases_pos", nargs="?", type=int, metavar="P")
    sp.add_argument("fraction_pos", nargs="?", type=float, metavar="FRACTION")
    sp.add_argument("--epochs", type=int, help="total epochs M")
    sp.add_argument("--phases", type=int, help="number of phases P")
    sp.add_argument("--final-frac", type=float, help="share of epochs in the last phase (default 0.5)")
    sp.add_argument("--out", help="also write the schedule as JSON")

    sp = command("train-distill", "train a projection head with curriculum distillation")
    sp.add_argument("takes", nargs="+", help="take directories")
    sp.add_argument("--rankings", help="ranking cache (single take only; default <take>/rankings.txt)")
    sp.add_argument("--eval-take", action="append", help="held-out take directory (repeatable)")
    sp.add_argument("--out", help="output directory for head.vdph and metrics.csv")
    sp.add_argument("--gamma", type=float, help="InfoNCE temperature (default 0.1)")
    sp.add_argument("--epochs", type=int, help="training epochs (default 200)")
    sp.add_argument("--phases", type=int, help="curriculum phases (default 5)")
    sp.add_argument("--final-frac", type=float, help="share of epochs in the last phase (default 0.5)")
    sp.add_argument("--lr", type=float, help="learning rate (default 0.1)")
    sp.add_argument("--head-dims", help="comma-separated layer widths after the input (default D,D)")
    sp.add_argument("--seed", type=int, help="master seed (default 0)")

    sp = command("eval-ground", "Recall@K and mIoU of grounding predictions, stratified by view")
    sp.add_argument("predictions", nargs="+", help="prediction files, optionally as VIEW:PATH")
    sp.add_argument("--keysteps", help="ground-truth keystep file")
    sp.add_argument("--rankings", help="ranking cache for B/M/W buckets")
    sp.add_argument("--thresholds", type=_thresholds, help="comma-separated IoU thresholds (default 0.1,0.3,0.5,0.7)")
    sp.add_argument("--k", type=int, help="top-K predictions per keystep (default 1)")
    sp.add_argument("--out", help="output directory for report.json and report.csv")

    sp = command("simulate", "generate a synthetic take with visibility ground truth")
    sp.add_argument("--out", help="take directory to write")
    sp.add_argument("--n-exo", type=int, help="number of exo cameras (default 4)")
    sp.add_argument("--duration", type=int, help="seconds (default 30)")
    sp.add_argument("--ego-path", choices=[e.value for e in EgoPath], help="camera wearer motion")
    sp.add_argument("--dim", type=int, help="feature dimension (default 16)")
    sp.add_argument("--sigma", type=float, help="feature noise (default 0.1)")
    sp.add_argument("--seed", type=int, help="scene seed (default 0)")

    sp = command("correlate", "Spearman agreement between a ranking cache and a visibility CSV")
    sp.add_argument("--rankings", help="ranking cache")
    sp.add_argument("--visibility", help="visibility CSV")
    return p


COMMANDS = {
    "rank": cmd_rank,
    "schedule": cmd_schedule,
    "train-distill": cmd_train_distill,
    "eval-ground": cmd_eval_ground,
    "simulate": cmd_simulate,
    "correlate": cmd_correlate,
}


def _setup_logging() -> None:
    level = os.environ.get("VIEWDISTILL_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        apply_config(sub, args, DEFAULTS[args.command])
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED.get(args.command, ()) if getattr(args, k) is None]
        if missing:
            raise UsageError(f"{args.command}: missing {', '.join(missing)}")
        if args.command == "schedule" and None in (
            args.epochs_pos if args.epochs_pos is not None else args.epochs,
            args.phases_pos if args.phases_pos is not None else args.phases,
        ):
            raise UsageError("schedule: give M and P positionally or via --epochs/--phases")
        return COMMANDS[args.command](args)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ViewDistillError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
