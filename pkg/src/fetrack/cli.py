"""``fetrack`` command line: simulate, aggregate, train, track, eval, gradcheck, ablate, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .aggregation import LATEST, METHODS, aggregate_interframe, throughput
from .errors import ConfigError, DataError, FetrackError, NotFound
from .events import load_sequence, write_pgm
from .metrics import evaluate, evaluate_sequence, write_curves_csv, write_report

logger = logging.getLogger("fetrack")

# Ablation rows: label -> (description, CdfiConfig overrides)
ABLATION_ROWS = {
    "A": ("frame only", {"input_mode": "frame_only"}),
    "B": ("event only", {"input_mode": "event_only"}),
    "C": ("event to frame", {"input_mode": "concat_to_frame"}),
    "D": ("frame to event", {"input_mode": "concat_to_event"}),
    "E": ("w/o EAB", {"use_eab": False}),
    "F": ("w/o CDMS", {"use_cdms": False}),
    "G": ("CDMS w/o SA", {"use_self_attention": False}),
    "H": ("CDMS w/o CA", {"use_cross_attention": False}),
    "I": ("CDMS w/o AW", {"use_adaptive_weighting": False}),
    "J": ("TSLTD", {"aggregation": "tsltd"}),
    "K": ("time surfaces", {"aggregation": "time_surface"}),
    "L": ("event count", {"aggregation": "event_count"}),
    "M": ("event frame", {"aggregation": "event_frame"}),
    "N": ("Zhu et al. voxel grid", {"aggregation": "zhu_voxel"}),
    "O": ("all w = 1", {"fixed_branch_weights": True}),
    "P": ("full model", {}),
}
DEFAULT_ROWS = "A,B,C,D,E,F,G,H,I,O,P"


class UsageError(FetrackError):
    exit_code = 1


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging():
    level = os.environ.get("FETRACK_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"FETRACK_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _read_json(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise NotFound(f"config {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def is_sequence_dir(path) -> bool:
    return (Path(path) / "meta.json").exists()


def load_dataset(path):
    """A sequence directory, or a directory of them (sorted by name)."""
    d = Path(path)
    if not d.is_dir():
        raise NotFound(f"data directory {d} not found")
    if is_sequence_dir(d):
        return [load_sequence(d)]
    seqs = [load_sequence(s) for s in sorted(d.iterdir()) if s.is_dir() and is_sequence_dir(s)]
    if not seqs:
        raise DataError(f"{d} holds no sequence directories")
    return seqs


# ---------------------------------------------------------------- configs


def model_config(data: dict, args):
    from .model import ModelConfig

    cfg = ModelConfig.from_dict(data) if data else ModelConfig()
    if getattr(args, "toy", False):
        cfg.cdfi = replace(cfg.cdfi, low_channels=16, high_channels=32)
    overrides = {}
    for flag, key in (("n_bins", "n_bins"), ("input_mode", "input_mode"), ("aggregation", "aggregation")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg.cdfi = replace(cfg.cdfi, **overrides)
    return cfg


def train_config(data: dict, args):
    from .training import TrainConfig

    try:
        cfg = TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"train config: {exc}") from None
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "steps_per_epoch", "beta", "seed")
                 if getattr(args, k, None) is not None}
    return replace(cfg, **overrides) if overrides else cfg


def tracker_config(data: dict, args):
    from .tracker import TrackerConfig

    try:
        cfg = TrackerConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"tracker config: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _split_config(data):
    unknown = set(data) - {"model", "train", "tracker"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; expected model, train, tracker")
    return data.get("model", {}), data.get("train", {}), data.get("tracker", {})


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    from .simulator import default_specs, fast_motion_specs, load_spec, make_dataset

    if args.spec:
        specs = load_spec(args.spec)
    else:
        specs = default_specs(args.count, args.seed or 0, args.width, args.height, args.frames)
        if args.fast:
            specs += fast_motion_specs(args.fast, args.seed or 0, args.width, args.height, args.frames)
    if args.seed is not None and args.spec:
        specs = [replace(s, seed=args.seed + i) for i, s in enumerate(specs)]
    logger.info("simulating %d scenes into %s", len(specs), args.out)
    dirs = make_dataset(specs, args.out, args.event_format)
    for d in dirs:
        seq = load_sequence(d)
        print(f"{d.name}: {len(seq.frames)} frames, {len(seq.stream)} events")
    return 0


def cmd_aggregate(args):
    seq = load_sequence(args.seq)
    frames = range(len(seq.frames)) if args.frame is None else [args.frame]
    out = Path(args.dump_dir) if args.dump_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rates = []
    for j in frames:
        if not 0 <= j < len(seq.frames):
            raise DataError(f"frame {j} out of range (sequence has {len(seq.frames)})")
        t0, t1 = seq.interval(j)
        agg = aggregate_interframe(seq.stream, t0, t1, args.n, args.method)
        rates.append(throughput(seq.stream, t0, t1, args.n, args.method))
        if out:
            for i in range(agg.n):
                for c in range(agg.channels):
                    write_pgm(out / f"frame{j:06d}_bin{i}_c{c}.pgm", agg.frames[i, c])
    finite = [r for r in rates if np.isfinite(r)]
    print(f"method={args.method} n={args.n} frames={len(rates)} "
          f"events_per_s={np.median(finite) if finite else float('nan'):.3e}")
    return 0


def cmd_train(args):
    from .model import TrackerNet
    from .training import calibrate_beta, train

    data = _read_json(args.config)
    m_data, t_data, _ = _split_config(data)
    mcfg = model_config(m_data, args)
    tcfg = train_config(t_data, args)
    dataset = load_dataset(args.data)
    logger.info("model config %s", json.dumps(mcfg.to_dict(), sort_keys=True))
    logger.info("train config %s", json.dumps(asdict(tcfg), sort_keys=True))
    model = TrackerNet(mcfg)
    if args.calibrate_beta:
        tcfg = replace(tcfg, beta=calibrate_beta(model, dataset, tcfg))
        logger.info("calibrated beta %g", tcfg.beta)
    result = train(model, dataset, tcfg, args.out,
                   progress=lambda step, r: logger.info("step %d L_total %.5f", step, r.L_total))
    if result.losses:
        print(f"trained {len(result.losses)} steps; final L_total {result.losses[-1].L_total:.5f}")
    print(f"model written to {Path(args.out) / 'model.fetw'}")
    return 0


def _track_one(model, seq, tcfg):
    from .tracker import track_sequence

    return track_sequence(model, seq, tcfg)


def cmd_track(args):
    from .model import load_model
    from .tracker import dump_visualisation

    model = load_model(args.model)
    tcfg = tracker_config(_read_json(args.tracker_config), args)
    logger.info("tracker config %s", json.dumps(asdict(tcfg), sort_keys=True))
    seq = load_sequence(args.seq)
    result = _track_one(model, seq, tcfg)
    result.write(args.out)
    if args.dump_vis:
        dump_visualisation(seq, result, args.dump_vis)
    print(f"{len(result.boxes)} boxes written to {args.out} ({result.fps:.1f} frames/s)")
    return 0


def _pred_boxes(path):
    from .tracker import read_predictions

    return read_predictions(path)


def cmd_eval(args):
    gt_dir = Path(args.gt)
    pred = Path(args.pred)
    evals = []
    if is_sequence_dir(gt_dir):
        seq = load_sequence(gt_dir)
        pred_file = pred / f"{seq.name}.txt" if pred.is_dir() else pred
        evals.append(evaluate_sequence(_pred_boxes(pred_file), seq.gt, seq.name, seq.attributes))
    else:
        for seq in load_dataset(gt_dir):
            if not pred.is_dir():
                raise DataError("--gt is a dataset directory, so --pred must be a directory of <name>.txt files")
            pf = pred / f"{seq.name}.txt"
            if not pf.exists():
                raise NotFound(f"no predictions for {seq.name} ({pf})")
            evals.append(evaluate_sequence(_pred_boxes(pf), seq.gt, seq.name, seq.attributes))
    report = evaluate(evals, {"seed": args.seed})
    if args.report:
        write_report(args.report, report)
    if args.plot_csv:
        write_curves_csv(args.plot_csv, evals)
    print(f"rsr={report['rsr']:.4f} rpr={report['rpr']:.4f} op50={report['op50']:.4f} op75={report['op75']:.4f}")
    return 0


def cmd_gradcheck(args):
    from .checks import run_suite, summary_table

    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    results = run_suite(seeds, args.tolerance, composite=not args.no_composite,
                        progress=lambda s, b: logger.info("seed %d: worst %.3e", s, max(r.max_error for r in b)))
    print(summary_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} checks above tolerance {args.tolerance:g}", file=sys.stderr)
        return 3
    return 0


def _train_and_eval(mcfg, tcfg, trcfg, train_set, test_set, out_dir, threads=1):
    from .model import TrackerNet
    from .training import train

    model = TrackerNet(mcfg)
    result = train(model, train_set, tcfg, out_dir)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        tracks = list(pool.map(lambda s: _track_one(model, s, trcfg), test_set))
    evals = []
    for seq, tr in zip(test_set, tracks):
        tr.write(Path(out_dir) / f"{seq.name}.txt")
        evals.append(evaluate_sequence(dict(enumerate(tr.boxes)), seq.gt, seq.name, seq.attributes))
    return model, result, tracks, evals


def _parse_rows(text):
    rows = [r.strip().upper() for r in text.split(",") if r.strip()]
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {','.join(ABLATION_ROWS)}")
    return rows


def cmd_ablate(args):
    data = _read_json(args.config)
    m_data, t_data, tr_data = _split_config(data)
    base = model_config(m_data, args)
    tcfg = train_config(t_data, args)
    trcfg = tracker_config(tr_data, args)
    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test) if args.test else train_set
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"seed": args.seed, "train": asdict(tcfg), "tracker": asdict(trcfg), "rows": {}}
    keys = {}
    for row in _parse_rows(args.rows):
        label, overrides = ABLATION_ROWS[row]
        mcfg = replace(base, cdfi=replace(base.cdfi, **overrides))
        logger.info("row %s (%s): %s", row, label, json.dumps(mcfg.to_dict(), sort_keys=True))
        row_dir = out / f"row_{row}"
        model, result, _, evals = _train_and_eval(mcfg, tcfg, trcfg, train_set, test_set, row_dir, args.threads)
        report = evaluate(evals, {"row": row, "label": label, "model": mcfg.to_dict(), "seed": args.seed})
        write_report(row_dir / "report.json", report)
        keys[row] = set(model.state_dict())
        summary["rows"][row] = {"label": label, "rsr": report["rsr"], "rpr": report["rpr"], "op50": report["op50"],
                                "op75": report["op75"], "parameters": int(sum(p.size for p in model.parameters())),
                                "checkpoint": str(row_dir / "model.fetw")}
        print(f"{row} {label:<22} rsr={report['rsr']:.4f} rpr={report['rpr']:.4f} "
              f"op50={report['op50']:.4f} op75={report['op75']:.4f}")
    if "P" in keys:
        for row, k in keys.items():
            summary["rows"][row]["keys_missing_vs_P"] = sorted(keys["P"] - k)
            summary["rows"][row]["keys_extra_vs_P"] = sorted(k - keys["P"])
    write_report(out / "ablation.json", summary)
    return 0


def bench_fps(models, seq, trcfg, repeats=3):
    """Frames per second of tracking ``seq`` with each model, best of ``repeats``.

    The models advance frame by frame in a rotating order, so slow drifts in
    machine speed hit every model alike instead of whichever ran last.
    Returns ({key: fps}, {key: TrackResult}).
    """
    from .tracker import TrackResult, iter_track

    keys = list(models)
    best = dict.fromkeys(keys, float("inf"))
    results = {}
    for _ in range(repeats):
        runs = {k: iter_track(models[k], seq, trcfg) for k in keys}
        res = {}
        for k, it in runs.items():
            first = next(it)
            res[k] = TrackResult([first.box], [first.confidence], [first.w_f], [first.w_e])
        elapsed = dict.fromkeys(keys, 0.0)
        for j in range(1, len(seq.frames)):
            for k in keys[j % len(keys):] + keys[:j % len(keys)]:
                start = time.perf_counter()
                step = next(runs[k])
                elapsed[k] += time.perf_counter() - start
                res[k].append(step)
        for k in keys:
            res[k].seconds = elapsed[k]
            best[k] = min(best[k], elapsed[k])
        results = res
    frames = len(seq.frames) - 1
    return {k: frames / best[k] for k in keys}, results


def cmd_bench(args):
    from .model import TrackerNet
    from .training import train

    data = _read_json(args.config)
    m_data, t_data, tr_data = _split_config(data)
    base = model_config(m_data, args)
    tcfg = train_config(t_data, args)
    trcfg = tracker_config(tr_data, args)
    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test) if args.test else train_set
    ns = [int(v) for v in args.ns.split(",")]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models, configs = {}, {}
    for n in ns:
        configs[n] = replace(base, cdfi=replace(base.cdfi, n_bins=n))
        models[n] = TrackerNet(configs[n])
        if tcfg.epochs:
            train(models[n], train_set, tcfg, out.parent / f"bench_n{n}")
    fps, evals = {n: [] for n in ns}, {n: [] for n in ns}
    for seq in test_set:
        seq_fps, tracks = bench_fps(models, seq, trcfg, args.repeats)
        for n in ns:
            fps[n].append(seq_fps[n])
            evals[n].append(evaluate_sequence(dict(enumerate(tracks[n].boxes)), seq.gt, seq.name, seq.attributes))
    rows = ["n,rsr,rpr,fps,agg_events_per_s"]
    for n in ns:
        rates = [throughput(seq.stream, *seq.interval(j), n, configs[n].cdfi.aggregation)
                 for seq in test_set for j in range(1, len(seq.frames))]
        report = evaluate(evals[n])
        finite = [r for r in rates if np.isfinite(r)]
        rate = float(np.median(finite)) if finite else float("nan")
        rows.append(f"{n},{report['rsr']!r},{report['rpr']!r},{float(np.mean(fps[n]))!r},{rate!r}")
        print(f"n={n} rsr={report['rsr']:.4f} rpr={report['rpr']:.4f} fps={np.mean(fps[n]):.2f} events/s={rate:.3e}")
    out.write_text("\n".join(rows) + "\n")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    p = Parser(prog="fetrack", description="Frame-event fusion single-object tracking toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="seed for every random choice")
        sp.add_argument("--threads", type=int, default=1, help="worker threads across sequences (1 = bit-exact)")
        return sp

    def model_flags(sp):
        sp.add_argument("--config", help="JSON config with optional sections model, train, tracker")
        sp.add_argument("--toy", action="store_true", help="toy channel widths (16/32)")
        sp.add_argument("--n-bins", dest="n_bins", type=int)
        sp.add_argument("--input-mode", dest="input_mode")
        sp.add_argument("--aggregation", choices=METHODS)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
        sp.add_argument("--beta", type=float)

    s = common(sub.add_parser("simulate", help="write synthetic sequences"))
    s.add_argument("--spec", help="scene spec JSON (object, list, or {\"scenes\": [...]})")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8, help="default scenes when no --spec is given")
    s.add_argument("--fast", type=int, default=0, help="extra fast-motion blurred scenes when no --spec is given")
    s.add_argument("--width", type=int, default=346)
    s.add_argument("--height", type=int, default=260)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--event-format", choices=("evt", "csv"), default="evt")
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("aggregate", help="aggregate inter-frame events into frames"))
    s.add_argument("--seq", required=True)
    s.add_argument("--frame", type=int)
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--method", choices=METHODS, default=LATEST)
    s.add_argument("--dump-dir", dest="dump_dir")
    s.set_defaults(func=cmd_aggregate)

    s = common(sub.add_parser("train", help="train a model"))
    model_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--calibrate-beta", action="store_true",
                   help="set beta to the power of ten nearest mean(L_b)/mean(L_cls) at initialisation")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("track", help="track one sequence"))
    s.add_argument("--model", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tracker-config", dest="tracker_config")
    s.add_argument("--dump-vis", dest="dump_vis")
    s.set_defaults(func=cmd_track)

    s = common(sub.add_parser("eval", help="score predictions against ground truth"))
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report")
    s.add_argument("--plot-csv", dest="plot_csv")
    s.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"))
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--no-composite", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = common(sub.add_parser("ablate", help="train and evaluate ablation rows"))
    model_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--test")
    s.add_argument("--out", required=True)
    s.add_argument("--rows", default=DEFAULT_ROWS, help=f"comma-separated rows from {''.join(ABLATION_ROWS)}")
    s.set_defaults(func=cmd_ablate)

    s = common(sub.add_parser("bench", help="accuracy and speed versus bin count"))
    model_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--test")
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--ns", default="1,2,3,4,5,6")
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        logger.info("fetrack %s %s", args.command,
                    json.dumps({k: v for k, v in vars(args).items() if k != "func"}, sort_keys=True, default=str))
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)  # already prefixed with the program name
        return exc.exit_code
    except FetrackError as exc:
        print(f"fetrack: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"fetrack: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
