"""Command-line entry points: simulate, train, track, eval.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import io, metrics, simgen
from .core import (NumericError, ParseError, SpecError, TrackerConfig,
                   TrainConfig, ValidationError, config_replace)
from .interaction import AffinityModel
from .tracker import run_sequence
from .training import (load_training_checkpoint, save_training_checkpoint,
                       train)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _scenario_spec_from_file(path: str) -> simgen.ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        items = io.parse_config_text(fh.read())
    field_map = {f.name: f for f in dataclasses.fields(simgen.ScenarioSpec)}
    kwargs = {}
    for key, raw in items.items():
        if key not in field_map:
            raise ParseError(f"unknown scenario key {key!r}")
        ftype = field_map[key].type
        if "tuple" in str(ftype):
            kwargs[key] = tuple(int(tok) for tok in raw.replace(",", " ").split())
        elif ftype in ("int", int):
            kwargs[key] = int(raw)
        elif ftype in ("float", float):
            kwargs[key] = float(raw)
        elif ftype in ("bool", bool):
            kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            kwargs[key] = raw
    return simgen.ScenarioSpec(**kwargs)


def cmd_simulate(args) -> int:
    if bool(args.preset) == bool(args.spec):
        print("simulate: exactly one of --preset / --spec is required", file=sys.stderr)
        return USAGE_ERROR
    if args.preset:
        specs = simgen.preset_specs()
        if args.preset not in specs:
            print(f"simulate: unknown preset {args.preset!r}; available: "
                  f"{', '.join(sorted(specs))}", file=sys.stderr)
            return USAGE_ERROR
        spec, default_seed = specs[args.preset]
        seed = args.seed if args.seed is not None else default_seed
        name = args.name or args.preset
    else:
        spec = _scenario_spec_from_file(args.spec)
        seed = args.seed if args.seed is not None else 0
        name = args.name or "scenario"
    seq = simgen.generate(spec, seed)
    manifest = io.save_sequence(seq, args.out, name=name)
    print(manifest)
    return 0


def _tracker_cfg_from_args(args) -> TrackerConfig:
    cfg = io.load_tracker_config(args.tracker_cfg)
    overrides = {}
    for flag in ("affinity", "matcher", "motion"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if getattr(args, "no_rejection", False):
        overrides["rejection"] = False
    if overrides:
        cfg = config_replace(cfg, **overrides)
    return cfg


def _load_model(args, cfg: TrackerConfig):
    needs_model = cfg.affinity in ("learned", "cosine", "inner_product")
    if not needs_model:
        return None
    if not args.checkpoint:
        raise SpecError(f"affinity mode {cfg.affinity!r} requires --checkpoint")
    model, _, _ = AffinityModel.load(args.checkpoint)
    return model


def _track_one(manifest: str, out_path: str, cfg: TrackerConfig,
               checkpoint: str | None, dump_affinity: str | None,
               dump_matches: str | None) -> str:
    seq = io.load_sequence(manifest)
    model = None
    if cfg.affinity in ("learned", "cosine", "inner_product"):
        model, _, _ = AffinityModel.load(checkpoint)
    need_trace = bool(dump_affinity or dump_matches)
    if need_trace:
        frames, traces = run_sequence(seq, cfg, model, trace=True)
    else:
        frames = run_sequence(seq, cfg, model)
        traces = None
    io.save_tracks(out_path, frames)
    if dump_affinity and traces is not None:
        with open(dump_affinity, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "row", "col", "affinity"])
            for tr in traces:
                if tr.affinity is None:
                    continue
                for m in range(tr.affinity.shape[0]):
                    for n in range(tr.affinity.shape[1]):
                        writer.writerow([tr.frame, m, n, repr(tr.affinity[m, n])])
    if dump_matches and traces is not None:
        with open(dump_matches, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "stage", "row", "col", "score"])
            for tr in traces:
                for i, j in tr.fusion_pairs:
                    writer.writerow([tr.frame, "fusion", i, j, ""])
                for i, j, s in tr.stage1:
                    writer.writerow([tr.frame, "stage1", i, j, repr(s)])
                for tid, j, s in tr.stage2:
                    writer.writerow([tr.frame, "stage2", tid, j, repr(s)])
    return out_path


def cmd_track(args) -> int:
    cfg = _tracker_cfg_from_args(args)
    if cfg.affinity in ("learned", "cosine", "inner_product") and not args.checkpoint:
        print(f"track: affinity mode {cfg.affinity!r} requires --checkpoint",
              file=sys.stderr)
        return USAGE_ERROR
    manifests = args.manifest
    if len(manifests) > 1:
        os.makedirs(args.out, exist_ok=True)
        outs = [os.path.join(args.out, f"tracks_{i:03d}.txt") for i in range(len(manifests))]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = [pool.submit(_track_one, m, o, cfg, args.checkpoint, None, None)
                           for m, o in zip(manifests, outs)]
                for fut in futures:
                    fut.result()
        else:
            for m, o in zip(manifests, outs):
                _track_one(m, o, cfg, args.checkpoint, None, None)
        for o in outs:
            print(o)
    else:
        _track_one(manifests[0], args.out, cfg, args.checkpoint,
                   args.dump_affinity, args.dump_matches)
        print(args.out)
    return 0


def cmd_train(args) -> int:
    train_cfg = io.load_train_config(args.train_cfg)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.no_interaction:
        overrides["interaction"] = False
    if overrides:
        train_cfg = config_replace(train_cfg, **overrides)
    tracker_cfg = io.load_tracker_config(args.tracker_cfg)
    sequences = [io.load_sequence(m) for m in args.manifest]

    model = optimizer = None
    start_epoch = 0
    curve: list[float] = []
    total_steps = None
    if args.resume:
        model, optimizer, meta, curve = load_training_checkpoint(args.resume)
        start_epoch = int(meta.get("epochs_done", 0))
        if meta.get("epochs_planned") == train_cfg.epochs:
            total_steps = int(meta["total_steps"])
    result = train(sequences, train_cfg, tracker_cfg, model=model,
                   optimizer=optimizer, start_epoch=start_epoch,
                   total_steps=total_steps)
    full_curve = curve + result.epoch_losses
    save_training_checkpoint(args.out, result, train_cfg, full_curve)
    loss_csv = args.loss_csv or args.out + ".loss.csv"
    with open(loss_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(full_curve):
            writer.writerow([epoch, repr(loss)])
    print(args.out)
    return 0


ABLATION_GRID = [
    # (label, matcher, rejection, affinity, motion)
    ("1a", "greedy", False, "heuristic", "kalman"),
    ("2a", "greedy", True, "heuristic", "kalman"),
    ("3a", "greedy", True, "learned", "kalman"),
    ("4a", "greedy", True, "learned", "velocity"),
    ("1b", "hungarian", False, "heuristic", "kalman"),
    ("2b", "hungarian", True, "heuristic", "kalman"),
    ("3b", "hungarian", True, "learned", "kalman"),
    ("4b", "hungarian", True, "learned", "velocity"),
]


def cmd_eval(args) -> int:
    if len(args.manifest) != len(args.tracks) and args.tracks:
        print("eval: --manifest and --tracks must pair up", file=sys.stderr)
        return USAGE_ERROR
    sequences = [io.load_sequence(m) for m in args.manifest]
    gts = [[frame.gt for frame in seq.frames] for seq in sequences]

    if args.ablation:
        if not args.checkpoint:
            print("eval: --ablation requires --checkpoint for the learned rows",
                  file=sys.stderr)
            return USAGE_ERROR
        model, _, _ = AffinityModel.load(args.checkpoint)
        base = io.load_tracker_config(args.tracker_cfg)
        print("exp matcher   rej affinity  motion   AMOTA   AMOTP")
        for label, matcher, rejection, affinity, motion in ABLATION_GRID:
            cfg = config_replace(base, matcher=matcher, rejection=rejection,
                                 affinity=affinity, motion=motion)
            preds = [run_sequence(seq, cfg, model if affinity == "learned" else None)
                     for seq in sequences]
            pred_frames = [[[(t.track_id, t.state) for t in frame] for frame in seq_preds]
                           for seq_preds in preds]
            amota, amotp = metrics.amota_amotp(gts, pred_frames)
            print(f"{label:3s} {matcher:9s} {'on ' if rejection else 'off'} "
                  f"{affinity:9s} {motion:8s} {amota:.4f}  {amotp:.4f}")
        return 0

    if args.discrimination:
        if not args.checkpoint:
            print("eval: --discrimination requires --checkpoint", file=sys.stderr)
            return USAGE_ERROR
        model, _, _ = AffinityModel.load(args.checkpoint)
        base = io.load_tracker_config(args.tracker_cfg)
        report = metrics.discrimination_report(model, sequences, base.tau_gt)
        for line in report.lines():
            print(line)
        if args.csv:
            with open(args.csv, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["population", "bin_lo", "bin_hi", "count"])
                for name, (same_counts, diff_counts, edges) in (
                        ("cosine", report.cos_hist), ("affinity", report.aff_hist)):
                    for i in range(len(same_counts)):
                        writer.writerow([f"{name}_same", repr(edges[i]), repr(edges[i + 1]),
                                         int(same_counts[i])])
                        writer.writerow([f"{name}_diff", repr(edges[i]), repr(edges[i + 1]),
                                         int(diff_counts[i])])
        return 0

    preds = [io.load_tracks(t) for t in args.tracks]
    report = metrics.evaluate(gts, preds)
    for line in report.lines():
        print(line)
    if args.ids_at_threshold is not None:
        ids = metrics.ids_at_threshold(gts, preds, args.ids_at_threshold)
        print(f"IDS@{args.ids_at_threshold:g} {ids}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh).writerows(report.csv_rows())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mot3d",
                                     description="3D multi-object tracking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic scenario")
    p_sim.add_argument("--preset")
    p_sim.add_argument("--spec", help="scenario spec file (key = value)")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--name")
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="train the affinity network")
    p_train.add_argument("manifest", nargs="+")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--train-cfg")
    p_train.add_argument("--tracker-cfg")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--no-interaction", action="store_true",
                         help="bypass the attention stack (ablation baseline)")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--loss-csv")
    p_train.set_defaults(func=cmd_train)

    p_track = sub.add_parser("track", help="run the tracker over a scenario")
    p_track.add_argument("--manifest", action="append", required=True)
    p_track.add_argument("--out", required=True)
    p_track.add_argument("--tracker-cfg")
    p_track.add_argument("--checkpoint")
    p_track.add_argument("--affinity", choices=("learned", "heuristic", "cosine", "inner_product"))
    p_track.add_argument("--matcher", choices=("hungarian", "greedy"))
    p_track.add_argument("--motion", choices=("velocity", "kalman"))
    p_track.add_argument("--no-rejection", action="store_true")
    p_track.add_argument("--jobs", type=int, default=1)
    p_track.add_argument("--dump-affinity")
    p_track.add_argument("--dump-matches")
    p_track.set_defaults(func=cmd_track)

    p_eval = sub.add_parser("eval", help="evaluate tracks against ground truth")
    p_eval.add_argument("--manifest", action="append", required=True)
    p_eval.add_argument("--tracks", action="append", default=[])
    p_eval.add_argument("--tracker-cfg")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--csv")
    p_eval.add_argument("--discrimination", action="store_true")
    p_eval.add_argument("--ablation", action="store_true")
    p_eval.add_argument("--ids-at-threshold", type=float)
    p_eval.add_argument("--jobs", type=int, default=1)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (NumericError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
