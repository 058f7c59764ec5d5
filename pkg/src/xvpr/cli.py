"""Command-line entry point: ``xvpr <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .events import (DataError, SampleRecord, interpolate_geotag, make_splits, parse_events,
                     parse_geotags, read_manifest, slice_windows, write_manifest)
from .evaluation import MODES, evaluate, report
from .frames import event_frame
from .imageio import ImageError, load_sample, write_pgm, write_sidecar
from .model import CrossModalNet
from .retrieval import FingerprintError, PlaceDatabase, build_db, query, results_csv
from .synth import SCENARIOS, synth_generate
from .training import format_log, train

log = logging.getLogger("xvpr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text):
    return tuple(v for v in text.split(",") if v)


def _select(records, modality=None, split=None, scenario=None):
    return [r for r in records
            if (modality is None or r.modality == modality)
            and (split is None or r.split == split)
            and (scenario is None or r.scenario == scenario)]


# -------------------------------------------------------------------- commands


def cmd_convert(args, cfg: RunConfig):
    """Event stream + geotag track -> one frame (sidecar + PGM) per complete window."""
    stream = parse_events(args.events)
    track = parse_geotags(args.geotags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Path(args.manifest) if args.manifest else out / "manifest.csv"
    dt = args.dt or cfg.window_us
    windows = slice_windows(stream, dt)
    if not windows:
        log.warning("%s: no complete %d us window; nothing converted", args.events, dt)
    stem = Path(args.events).stem
    rows = []
    for k, win in enumerate(windows):
        wid = f"{stem}/w{k:05d}"
        frame = event_frame(win, d_max=cfg.d_max, window_id=wid)
        name = f"{stem}_w{k:05d}"
        write_sidecar(out / f"{name}.f64", frame.intensity)
        write_pgm(out / f"{name}.pgm", frame.intensity)
        tag = interpolate_geotag(track, (win.t_start + win.t_end) / 2)
        rel = os.path.relpath((out / f"{name}.f64").resolve(), manifest.resolve().parent)
        rows.append(SampleRecord(wid, "event", Path(rel).as_posix(), tag, "", args.scenario))
    # rerunning replaces the rows it wrote before instead of duplicating them
    new_ids = {r.id for r in rows}
    kept = [r for r in read_manifest(manifest) if r.id not in new_ids] if manifest.exists() else []
    if rows or not manifest.exists():
        write_manifest(manifest, kept + rows)
    print(f"converted {len(rows)} windows -> {manifest}")
    return EXIT_OK


def cmd_split(args, cfg):
    records = read_manifest(args.manifest)
    tagged = make_splits(records, args.fractions, buffer_m=args.buffer_m)
    out = args.out or args.manifest
    write_manifest(out, tagged)
    counts = {s: sum(r.split == s for r in tagged) for s in ("train", "val", "test")}
    print(f"split {len(records)} records -> {counts} ({len(records) - len(tagged)} dropped in buffers)")
    return EXIT_OK


def cmd_train(args, cfg):
    records = read_manifest(args.manifest)
    model, rows = train(records, args.manifest, cfg.train_config(), cfg.model_config())
    model.save(args.out)
    log_path = args.log or str(Path(args.out).with_suffix(".loss.csv"))
    Path(log_path).write_text(format_log(rows), encoding="utf-8")
    print(f"checkpoint {args.out} fingerprint {model.fingerprint().hex()}")
    return EXIT_OK


def cmd_build_db(args, cfg):
    model, fp = CrossModalNet.load(args.checkpoint)
    records = _select(read_manifest(args.manifest), "image", args.split, args.scenario)
    if not records:
        raise DataError("no image records match the requested split/scenario")
    db = build_db(records, args.manifest, model, fp)
    db.save(args.out)
    print(f"database {args.out}: {len(db)} entries")
    return EXIT_OK


def cmd_query(args, cfg):
    model, fp = CrossModalNet.load(args.checkpoint)
    db = PlaceDatabase.load(args.db)
    c = model.config
    channels = 1 if args.modality == "event" else 3
    frame = load_sample(args.frame, channels, c.input_width, c.input_height)
    top_n = args.top_n or cfg.top_n
    res = query(db, frame, model, fp, top_n, query_id=args.query_id or Path(args.frame).stem,
                modality=args.modality)
    sys.stdout.write(results_csv([res]))
    return EXIT_OK


def cmd_eval(args, cfg):
    model, fp = CrossModalNet.load(args.checkpoint)
    db = PlaceDatabase.load(args.db)
    queries = _select(read_manifest(args.manifest), args.modality, args.split, args.scenario)
    if not queries:
        raise DataError("no query records match the requested split/scenario")
    table = evaluate(db, queries, args.manifest, model, args.mode, fp, top_n=args.top_n or cfg.top_n)
    text = report(table, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args, cfg):
    records = synth_generate(args.out, seed=cfg.seed, places=args.places, scenarios=args.scenarios,
                             width=cfg.input_width, height=cfg.input_height,
                             window_us=cfg.window_us, d_max=args.d_max)
    if args.holdout:
        if args.holdout not in args.scenarios:
            raise UsageError(f"--holdout {args.holdout!r} is not among the generated scenarios")
        records = [replace(r, split="test" if r.scenario == args.holdout else "train")
                   for r in records]
        write_manifest(Path(args.out) / "manifest.csv", records)
    print(f"synthetic dataset {args.out}: {args.places} places x {len(args.scenarios)} scenarios")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import GRADCHECK_TOLERANCE, layer_checks
    ok = True
    for name, err in layer_checks(cfg.seed):
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{name:<26} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_DATA


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xvpr", description="Event-to-image visual place recognition.")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", type=int, help="override the seed key")
    p.add_argument("--threads", type=int, help="cap on worker/BLAS threads")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("convert", help="event stream -> distance-surface frames + manifest rows")
    s.add_argument("--events", required=True)
    s.add_argument("--geotags", required=True)
    s.add_argument("--out", required=True, help="output directory for frames")
    s.add_argument("--manifest", help="manifest to update (default <out>/manifest.csv)")
    s.add_argument("--dt", type=int, help="window length in microseconds (default window_us)")
    s.add_argument("--scenario", default="default")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("split", help="tag manifest records train/val/test with 35 m buffers")
    s.add_argument("--manifest", required=True)
    s.add_argument("--fractions", type=_floats, default=(0.8, 0.1, 0.1))
    s.add_argument("--buffer-m", type=float, default=35.0)
    s.add_argument("--out", help="output manifest (default: rewrite in place)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a checkpoint from a split manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss log CSV (default <out>.loss.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-db", help="encode image records into a place database")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", help="only records of this split")
    s.add_argument("--scenario", help="only records of this scenario")
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("query", help="retrieve and re-rank one frame; CSV on stdout")
    s.add_argument("--db", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", required=True, help=".f64 sidecar or PGM/PPM file")
    s.add_argument("--top-n", type=int)
    s.add_argument("--modality", choices=("event", "image"), default="event")
    s.add_argument("--query-id")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="Recall@N of manifest queries against a database")
    s.add_argument("--db", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", choices=MODES, default="hybrid")
    s.add_argument("--split", help="only queries of this split")
    s.add_argument("--scenario", help="only queries of this scenario")
    s.add_argument("--modality", choices=("event", "image"), default="event")
    s.add_argument("--format", choices=("csv", "markdown"), default="csv")
    s.add_argument("--top-n", type=int)
    s.add_argument("--out", help="also write the table here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic cross-modal dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--places", type=int, default=50)
    s.add_argument("--scenarios", type=_names, default=("daytime",),
                   help=f"comma-separated, from {','.join(SCENARIOS)}")
    s.add_argument("--holdout", help="tag this scenario test and all others train")
    s.add_argument("--d-max", type=float, default=4.0, help="frame d_max in pixels")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    return out


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, _overrides(args))
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cfg.threads):
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImageError, CheckpointError, FingerprintError, OSError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining ValueErrors come from argument values (fractions, sizes, scenario names)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
