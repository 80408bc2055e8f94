"""Command-line interface: optimize, prune, evaluate, schedule, synth,
consistency. Every run writes a self-describing artifact directory."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import engine as E
from .audio_io import load_session, write_wav
from .common import SAMPLE_RATE, seconds_to_samples
from .console import SessionManifest, build_console, init_params
from .graph import load as load_graph
from .graph import save as save_graph
from .losses import mrstft
from .metrics import FEATURES, mir_distance, si_sdr
from .optimizer import Session, TrainConfig, train
from .pruning import PruneConfig, prune_song, build_eval_set, eval_loss
from .scheduler import plan_indices, schedule_console, schedule_greedy, execute_batched
from .synth import SynthSpec, synth_session

LOSS_FIELDS = ["step", "L_a", "L_g", "L_p", "loss", "wall_s"]
LEDGER_FIELDS = ["iteration", "mode", "candidates", "loss", "la_min_before", "accepted"]
METRIC_FIELDS = ["name", "L_a", "si_sdr", "d_rms", "d_cf", "d_sw", "d_si", "d_bs"]


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _render(graph, params, session):
    sched = plan_indices(graph, _best_schedule(graph))
    y, _ = execute_batched(graph, params, session.stems, sched)
    return np.asarray(E.value_of(y))


def _best_schedule(graph):
    try:
        return schedule_console(graph)
    except Exception:
        return schedule_greedy(graph)


def _song_metrics(name, session, match, warmup_len):
    la = float(E.value_of(mrstft(match[:, warmup_len:], session.target[:, warmup_len:])))
    row = {"name": name, "L_a": la, "si_sdr": si_sdr(session.target, match)}
    for feat in FEATURES:
        try:
            row[f"d_{feat}"] = mir_distance(session.target, match, feat)
        except Exception:
            row[f"d_{feat}"] = ""
    return row


def _train_config(args):
    return TrainConfig(
        lr=args.lr,
        steps=args.steps,
        segment_seconds=args.segment_seconds,
        warmup_seconds=args.warmup_seconds,
        seed=args.seed,
    )


def _prune_config(args):
    return PruneConfig(
        tolerance=args.tolerance,
        tolerance_relative=args.tolerance_relative,
        mode=args.mode,
        iterations=args.iters,
        seed=args.seed,
        console_steps=args.console_steps,
        finetune_steps=args.finetune_steps,
        eval_segments=args.eval_segments,
        eval_segment_seconds=args.eval_segment_seconds,
        train=TrainConfig(
            lr=args.lr,
            steps=1,
            segment_seconds=args.segment_seconds,
            warmup_seconds=args.warmup_seconds,
            seed=args.seed,
        ),
    )


def _snapshot(out_dir, args, extra=None):
    doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc.update(extra or {})
    (out_dir / "config.json").write_text(json.dumps(doc, indent=1, default=str))


def _load_manifest(path):
    path = Path(path)
    manifest = SessionManifest.from_json(path.read_text())
    return manifest, load_session(manifest, path.parent)


def cmd_optimize_one(path, args):
    manifest, session = _load_manifest(path)
    out = Path(args.out) / Path(path).stem
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, args, {"manifest": str(path)})

    graph, params = build_console(manifest)
    params = init_params(params, args.seed)
    cfg = _train_config(args)
    history = train(graph, params, session, cfg)
    save_graph(graph, params, out / "console.mixgraph.json")
    _write_csv(out / "loss_history.csv", LOSS_FIELDS, history)
    match = _render(graph, params, session)
    write_wav(out / "match.wav", match, SAMPLE_RATE)
    _write_csv(out / "metrics.csv", METRIC_FIELDS,
               [_song_metrics(session.name, session, match, cfg.warmup_len)])
    return str(out)


def cmd_prune_one(path, args, target_override=None, tag=""):
    manifest, session = _load_manifest(path)
    if target_override is not None:
        session = Session(session.stems, target_override, name=session.name)
    out = Path(args.out) / (Path(path).stem + tag)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, args, {"manifest": str(path)})

    graph, params = build_console(manifest)
    params = init_params(params, args.seed)
    cfg = _prune_config(args)

    def snapshot_hook(iteration, g, p):
        name = "console" if iteration == 0 else f"iter{iteration:02d}"
        save_graph(g, p, out / f"{name}.mixgraph.json")

    g_p, p_p, state, report, history = prune_song(
        graph, params, session, cfg, snapshot_hook=snapshot_hook)

    final_path = out / "final.mixgraph.json"
    save_graph(g_p, p_p, final_path)
    if args.out_graph:
        save_graph(g_p, p_p, args.out_graph)
    _write_csv(out / "loss_history.csv", LOSS_FIELDS, history)
    ledger_rows = [
        {
            "iteration": r.iteration,
            "mode": r.mode,
            "candidates": ";".join(map(str, r.candidates)),
            "loss": r.loss,
            "la_min_before": r.la_min_before,
            "accepted": int(r.accepted),
        }
        for r in state.ledger
    ]
    _write_csv(out / "trial_ledger.csv", LEDGER_FIELDS, ledger_rows)
    if args.report_csv:
        _write_csv(args.report_csv, LEDGER_FIELDS, ledger_rows)

    match = _render(g_p, p_p, session)
    write_wav(out / "match.wav", match, SAMPLE_RATE)
    _write_csv(out / "metrics.csv", METRIC_FIELDS,
               [_song_metrics(session.name, session, match, cfg.train.warmup_len)])
    (out / "report.json").write_text(json.dumps({
        "console_loss": report.console_loss,
        "final_loss": report.final_loss,
        "la_min": report.la_min,
        "tolerance": report.tolerance,
        "mode": report.mode,
        "pruning_ratio": report.pruning_ratio,
        "per_type_ratio": {t: report.ratio_of(t) for t in report.console_counts},
        "trial_count": report.trial_count,
        "wall_seconds": report.wall_seconds,
    }, indent=1))
    return str(out)


def _run_many(fn, paths, args):
    if args.threads > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            return list(pool.map(fn, paths, [args] * len(paths)))
    return [fn(p, args) for p in paths]


def cmd_optimize(args):
    for out in _run_many(cmd_optimize_one, args.manifest, args):
        print(out)
    return 0


def cmd_prune(args):
    for out in _run_many(cmd_prune_one, args.manifest, args):
        print(out)
    return 0


def cmd_evaluate(args):
    rows = []
    warmup = seconds_to_samples(args.warmup_seconds)
    for path in args.manifest:
        manifest, session = _load_manifest(path)
        graph, params = load_graph(args.graph)
        match = _render(graph, params, session)
        rows.append(_song_metrics(Path(path).stem, session, match, warmup))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
    for row in rows:
        print(",".join(str(row[f]) for f in METRIC_FIELDS))
    return 0


def cmd_schedule(args):
    graph, _ = load_graph(args.graph)
    sched = _best_schedule(graph)
    print(sched.type_sequence)
    print(" ".join(str(len(s)) for s in sched.subsets))
    return 0


def cmd_synth(args):
    spec = SynthSpec(
        tracks=args.tracks,
        subgroups=args.subgroups,
        duration_seconds=args.duration,
        planted_fraction=args.planted_fraction,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth_session(spec, args.seed, out_dir=out)
    _snapshot(out, args)
    print(out / "session.json")
    return 0


def cmd_consistency(args):
    from .metrics import consistency_score

    path = args.manifest[0]
    first = Path(cmd_prune_one(path, args, tag="-pass1"))
    g1, p1 = load_graph(first / "final.mixgraph.json")
    manifest, session = _load_manifest(path)
    match = _render(g1, p1, session)

    args2 = argparse.Namespace(**vars(args))
    args2.seed = args.seed + 1  # the re-run must make its own stochastic choices
    second = Path(cmd_prune_one(path, args2, target_override=match, tag="-pass2"))
    g2, _ = load_graph(second / "final.mixgraph.json")

    score = consistency_score(g1, g2)
    print("type accuracy precision recall f1")
    for tag, row in score["per_type"].items():
        print(f"{tag}    {row['accuracy']:.3f}    {row['precision']:.3f}"
              f"    {row['recall']:.3f}    {row['f1']:.3f}")
    m = score["micro"]
    print(f"micro {m['accuracy']:.3f}    {m['precision']:.3f}"
          f"    {m['recall']:.3f}    {m['f1']:.3f}")
    (Path(args.out) / "consistency.json").write_text(json.dumps(score, indent=1))
    return 0


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="runs")


def _add_train_flags(p, steps):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--segment-seconds", type=float, default=3.8)
    p.add_argument("--warmup-seconds", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="mixgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="train a full console against a target mix")
    p.add_argument("--manifest", nargs="+", required=True)
    _add_train_flags(p, steps=12_000)
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("prune", help="search a sparse mixing graph by iterative pruning")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--tolerance", type=float, default=0.01)
    p.add_argument("--tolerance-relative", type=float, default=None)
    p.add_argument("--mode", choices=("bruteforce", "drywet", "hybrid"), default="hybrid")
    p.add_argument("--iters", type=int, default=12)
    p.add_argument("--console-steps", type=int, default=6_000)
    p.add_argument("--finetune-steps", type=int, default=500)
    p.add_argument("--eval-segments", type=int, default=8)
    p.add_argument("--eval-segment-seconds", type=float, default=3.8)
    p.add_argument("--out-graph", default=None)
    p.add_argument("--report-csv", default=None)
    _add_train_flags(p, steps=1)
    _add_common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("evaluate", help="render a graph and report metrics")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--warmup-seconds", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("schedule", help="print the batched schedule of a graph file")
    p.add_argument("--graph", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("synth", help="generate a synthetic session with a planted graph")
    p.add_argument("--tracks", type=int, default=4)
    p.add_argument("--subgroups", type=int, default=2)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--planted-fraction", type=float, default=0.4)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("consistency",
                       help="prune, re-target on the match, re-prune, and score")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--tolerance", type=float, default=0.01)
    p.add_argument("--tolerance-relative", type=float, default=None)
    p.add_argument("--mode", choices=("bruteforce", "drywet", "hybrid"), default="hybrid")
    p.add_argument("--iters", type=int, default=12)
    p.add_argument("--console-steps", type=int, default=6_000)
    p.add_argument("--finetune-steps", type=int, default=500)
    p.add_argument("--eval-segments", type=int, default=8)
    p.add_argument("--eval-segment-seconds", type=float, default=3.8)
    p.add_argument("--out-graph", default=None)
    p.add_argument("--report-csv", default=None)
    _add_train_flags(p, steps=1)
    _add_common(p)
    p.set_defaults(func=cmd_consistency)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
