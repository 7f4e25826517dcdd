"""``kdauth`` command line: ingest, synth, featurize, train, eval, gridsearch, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import kdf, report
from .evaluate import (GRIDS, assemble, cross_validate, compute_metrics, default_train_config,
                       grid_search, make_schedule, stratified_folds)
from .features import CutoutSpec, NormalizationConfig, featurize, kds_width
from .ingest import (AdapterConfig, FormatMismatchError, InputFormat, format_events, pair_events,
                     read_events, stream_events, synthesize)
from .models import CnnConfig, CnnRnnConfig, ConfigError
from .nnengine import (OptimizerSpec, TrainConfig, TrainingAborted, dump_checkpoint,
                       load_checkpoint)

log = logging.getLogger("kdauth")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
MIN_KEYSTROKES = 20000


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _need_file(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _need_out_dir(path):
    p = Path(path)
    if not p.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {p.parent}")
    return p


def _model_config(args):
    if args.model == "cnn":
        return CnnConfig(kernel=args.kernel or 3)
    return CnnRnnConfig(conv_kernel=(args.kernel or 2, 8), rnn_kind=args.rnn)


def _train_config(args, model_cfg) -> TrainConfig:
    base = default_train_config(model_cfg, epochs=args.epochs, batch_size=args.batch_size)
    lr = args.lr if args.lr is not None else base.optimizer.learning_rate
    return TrainConfig(args.epochs, args.batch_size,
                       OptimizerSpec(args.optimizer, lr, schedule=make_schedule(args.schedule, args.epochs)))


def _load_features(args, model_cfg):
    fs = kdf.load(_need_file(args.features, "feature file"))
    if isinstance(model_cfg, CnnRnnConfig) and fs.layout != "kds":
        raise UsageError(f"model cnn-rnn needs a kds feature file; {args.features} has layout {fs.layout}")
    if isinstance(model_cfg, CnnConfig) and fs.layout != "kdi":
        raise UsageError(f"model cnn needs a kdi feature file; {args.features} has layout {fs.layout}")
    users = fs.by_user()
    wanted = args.user or list(users)
    missing = [u for u in wanted if u not in users]
    if missing:
        raise UsageError(f"users not in feature file: {', '.join(missing)}")
    return fs, users, wanted


def _cutout(args):
    return CutoutSpec(enabled=args.cutout == "on", rng_seed=args.seed)


def _run_meta(args, fs, model_cfg, cfg):
    encoding = ""
    if fs.layout == "kds":
        encoding = "onehot" if fs.data.shape[-1] == kds_width("onehot") else "index"
    return {
        "model": args.model, "layout": fs.layout, "encoding": encoding,
        "rnn": getattr(model_cfg, "rnn_kind", ""), "cutout": args.cutout, "epochs": cfg.epochs,
        "lr": cfg.optimizer.learning_rate, "optimizer": cfg.optimizer.kind,
        "schedule": args.schedule, "seed": args.seed,
    }


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    out = _need_out_dir(args.out)
    events = synthesize(args.seed, args.users, args.keystrokes)
    kdf.atomic_write(out, format_events(events).encode("utf-8"))
    print(f"wrote {len(events)} events for {args.users} users to {out}")
    return EXIT_OK


def cmd_ingest(args):
    src = _need_file(args.input)
    out = _need_out_dir(args.out)
    adapter = AdapterConfig.from_json(_need_file(args.adapter).read_text()) if args.adapter else None
    files = sorted(p for p in src.iterdir() if p.is_file() and not p.name.startswith(".")) if src.is_dir() else [src]
    events, malformed = [], 0
    for path in files:
        try:
            res = read_events(path, args.format, adapter)
        except FormatMismatchError as exc:
            raise FormatMismatchError(f"{path}: {exc}", exc.first_bad_line) from exc
        events += res.events
        malformed += res.malformed_count
    paired = pair_events(events)
    if not events:
        log.warning("no events found in %s", src)
    ordered = [ev for s in paired.streams.values() for ev in stream_events(s)]
    kdf.atomic_write(out, format_events(ordered).encode("utf-8"))
    summary = {
        "files": len(files), "events": len(events), "malformed": malformed,
        "dropped_downs": paired.dropped_downs, "orphan_ups": paired.orphan_ups,
        "untracked_keys": paired.untracked,
        "keystrokes": {u: len(s) for u, s in paired.streams.items()},
    }
    if args.report:
        report.write_json(_need_out_dir(args.report), summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_featurize(args):
    if args.length < 2:
        raise UsageError(f"--length must be >= 2, got {args.length}")
    src = _need_file(args.input)
    out = _need_out_dir(args.out)
    res = read_events(src, "canonical")
    paired = pair_events(res.events)
    keep = []
    for uid, stream in paired.streams.items():
        if len(stream) < args.min_keystrokes:
            print(f"excluding {uid}: {len(stream)} keystrokes < --min-keystrokes {args.min_keystrokes}",
                  file=sys.stderr)
            continue
        keep.append(stream)
    fs = featurize(keep, args.mode, args.length, args.encoding, NormalizationConfig(args.clip_ms))
    kdf.save(out, fs)
    counts = {u: fs.user_ids.count(u) for u in dict.fromkeys(fs.user_ids)}
    print(json.dumps({"layout": fs.layout, "shape": list(fs.data.shape), "subsequences": counts},
                     sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    model_cfg = _model_config(args)
    cfg = _train_config(args, model_cfg)
    fs, users, wanted = _load_features(args, model_cfg)
    out_dir = _need_out_dir(args.out_dir)
    out_dir.mkdir(exist_ok=True)
    meta = _run_meta(args, fs, model_cfg, cfg)
    run = {"features": str(args.features), "model_config": model_cfg.to_dict(), "train_config": cfg.to_dict(),
           "folds": args.folds, "seed": args.seed, "users": wanted, "meta": meta,
           "cutout": args.cutout}
    rows, rocs = [], {}
    for user in wanted:
        ls = assemble(user, users, seed=args.seed)
        result = cross_validate(ls, model_cfg, cfg, seed=args.seed, cutout=_cutout(args),
                                k=args.folds, jobs=args.jobs)
        ck_dir = out_dir / "checkpoints" / user
        ck_dir.mkdir(parents=True, exist_ok=True)
        for f in result.folds:
            m = f.metrics
            text = dump_checkpoint(f.network, meta["model"], args.seed, cfg.epochs,
                                   {"accuracy": m.accuracy, "eer": m.eer, "threshold": m.eer_threshold},
                                   model_cfg.to_dict())
            kdf.atomic_write(ck_dir / f"fold{f.fold}.json", text.encode("utf-8"))
        rows += report.fold_rows(result, meta)
        rocs[user] = report.roc_record(result)
        print(f"{user}: mean accuracy {result.mean_accuracy:.4f} mean EER {result.mean_eer:.4f}")
    report.write_json(out_dir / "run.json", run)
    report.write_csv(out_dir / "metrics.csv", rows, report.FOLD_FIELDS)
    report.write_json(out_dir / "metrics.json", {"folds": rows, "roc": rocs,
                                                 "summary": report.summarize(rows)})
    return EXIT_OK


def cmd_eval(args):
    run_dir = _need_file(args.run_dir, "run directory")
    run = json.loads(_need_file(run_dir / "run.json").read_text())
    features = args.features or run["features"]
    fs = kdf.load(_need_file(features, "feature file"))
    users = fs.by_user()
    rows, rocs = [], {}
    for user in run["users"]:
        if user not in users:
            raise UsageError(f"user {user} not in {features}")
        ls = assemble(user, users, seed=run["seed"])
        folds = stratified_folds(ls.y, run["folds"], run["seed"])
        per_fold = {}
        for k in range(run["folds"]):
            net, _ = load_checkpoint(_need_file(run_dir / "checkpoints" / user / f"fold{k}.json").read_text())
            test = folds == k
            m = compute_metrics(net.predict(ls.x[test]).reshape(-1), ls.y[test])
            rows.append({**run["meta"], "user": user, "fold": k, "accuracy": m.accuracy, "eer": m.eer,
                         "threshold": m.eer_threshold})
            per_fold[str(k)] = [list(p) for p in m.roc]
        rocs[user] = per_fold
    out = _need_out_dir(args.out or run_dir / "eval_metrics.csv")
    report.write_csv(out, rows, report.FOLD_FIELDS)
    report.write_json(out.with_suffix(".json"), {"folds": rows, "roc": rocs, "summary": report.summarize(rows)})
    for s in report.summarize(rows):
        print(f"{s['user']}: accuracy {s['accuracy']:.4f} EER {s['eer']:.4f}")
    return EXIT_OK


def cmd_gridsearch(args):
    grid = GRIDS[args.grid]
    cells = grid.cells()
    if args.dry_run:
        for epochs, lr, opt, sched in cells:
            print(f"epochs={epochs} lr={lr} optimizer={opt} schedule={sched}")
        print(f"{len(cells)} configurations")
        return EXIT_OK
    model_cfg = _model_config(args)
    fs, users, wanted = _load_features(args, model_cfg)
    out = _need_out_dir(args.out)
    rows = []
    for user in wanted:
        ls = assemble(user, users, seed=args.seed)
        ranked = grid_search(ls, model_cfg, grid, repeats=args.repeats, seed=args.seed,
                             cutout=_cutout(args), batch_size=args.batch_size, jobs=args.jobs)
        rows += report.grid_rows(user, ranked)
        best = ranked[0]
        print(f"{user}: best epochs={best.epochs} lr={best.lr} {best.optimizer} {best.schedule} "
              f"EER {best.mean_eer:.4f}")
    report.write_csv(out, rows, report.GRID_FIELDS)
    print(f"evaluated {len(cells)} configurations per user")
    return EXIT_OK


def cmd_report(args):
    metrics = _need_file(args.metrics)
    roc = args.roc
    if roc is None and metrics.with_suffix(".json").exists():
        roc = metrics.with_suffix(".json")
    for p in report.render_report(metrics, args.out_dir, roc):
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _model_args(p):
    p.add_argument("--features", required=True, help="KDF feature file")
    p.add_argument("--model", choices=["cnn", "cnn-rnn"], default="cnn")
    p.add_argument("--user", action="append", help="user id to evaluate (repeatable; default all)")
    p.add_argument("--cutout", choices=["on", "off"], default="on")
    p.add_argument("--rnn", choices=["rnn", "gru", "lstm"], default="gru")
    p.add_argument("--kernel", type=int, help="CNN kernel side, or CNN-RNN kernel height")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="kdauth", description="Free-text keystroke dynamics authentication.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option values; command-line flags win")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("synth", cmd_synth, "generate synthetic typists as canonical events")
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--keystrokes", type=int, default=20000)
    p.add_argument("--out", required=True)

    p = add("ingest", cmd_ingest, "convert raw logs into canonical events")
    p.add_argument("--format", choices=[f.value for f in InputFormat], default="canonical")
    p.add_argument("--adapter", help="JSON column map overriding the format preset")
    p.add_argument("--in", dest="input", required=True, help="file or directory of files")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the ingest summary here as JSON")

    p = add("featurize", cmd_featurize, "window canonical events into KDI or KDS tensors")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["kdi", "kds"], default="kdi")
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--encoding", choices=["onehot", "index"], default="onehot")
    p.add_argument("--min-keystrokes", type=int, default=MIN_KEYSTROKES)
    p.add_argument("--clip-ms", type=float, default=5000.0)

    p = add("train", cmd_train, "cross-validate per-user models and save fold checkpoints")
    _model_args(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, help="default 0.01, or 0.001 for --rnn rnn")
    p.add_argument("--optimizer", choices=["Adam", "SGD", "SGDMomentum"], default="Adam")
    p.add_argument("--schedule", default="StepLR(0.1)", help="StepLR(gamma) or Plateau")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out-dir", required=True)

    p = add("eval", cmd_eval, "score saved fold checkpoints on their held-out folds")
    p.add_argument("--run-dir", required=True, help="directory written by train")
    p.add_argument("--features", help="feature file (default: the one recorded by train)")
    p.add_argument("--out", help="metrics CSV (default RUN_DIR/eval_metrics.csv)")

    p = add("gridsearch", cmd_gridsearch, "rank hyper-parameter grid cells by cross-validated EER")
    _model_args(p)
    p._option_string_actions["--features"].required = False
    p.add_argument("--grid", choices=sorted(GRIDS), default="quick")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--dry-run", action="store_true", help="list the grid cells and exit")
    p.add_argument("--out", default="grid.csv")

    p = add("report", cmd_report, "summary CSV and figures from a metrics file")
    p.add_argument("--metrics", required=True)
    p.add_argument("--roc", help="metrics JSON with ROC points (default: alongside the CSV)")
    p.add_argument("--out-dir", required=True)
    return parser, subs


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, sp, path):
    """Install config-file values as defaults of subparser ``sp``."""
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError:
        parser.exit(EXIT_IO, f"kdauth: config file not found: {path}\n")
    except json.JSONDecodeError as exc:
        parser.exit(EXIT_USAGE, f"kdauth: bad config file {path}: {exc}\n")
    if not isinstance(values, dict):
        sp.error("config file must hold a JSON object")
    known = {a.dest: a for a in sp._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - set(known) - {"config"})
    if unknown:
        sp.error(f"unknown config keys: {', '.join(unknown)}")
    for k, v in values.items():
        action = known.get(k)
        if action is None:
            continue
        if action.choices is not None and v not in action.choices:
            sp.error(f"config {k}={v!r} not one of {list(action.choices)}")
        action.required = False
    sp.set_defaults(**values)


def parse_args(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    command = next((tok for tok in argv if tok in subs), None)
    path = _config_path(argv)
    if command and path:
        _apply_config(parser, subs[command], path)
    args = parser.parse_args(argv)
    if args.command == "gridsearch" and not args.dry_run and not args.features:
        subs["gridsearch"].error("--features is required unless --dry-run is given")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"kdauth: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (UsageError, ConfigError, FormatMismatchError, kdf.KDFError, ValueError) as exc:
        print(f"kdauth: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"kdauth: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
