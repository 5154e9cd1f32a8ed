"""``fit`` command line: process, watch, serve, bench, export, make-fixtures."""

from __future__ import annotations

import argparse
import logging
import sys
import threading
from pathlib import Path
from typing import List, Optional

from . import bench
from .config import ConfigRejected, load_config
from .fixtures import write_bench_fixtures
from .gateway import Gateway, GatewayError, process_file
from .ingest import ProcessedLedger, compute_file_id, InboxEvent, utcnow
from .store import RecordStore

log = logging.getLogger("fitgate")


def _config(args):
    overrides = {
        "inbox_dir": args.inbox,
        "data_dir": args.data_dir,
        "cloud_url": args.cloud_url,
    }
    return load_config(args.config, overrides=overrides)


def cmd_process(paths: List[str], config, out=sys.stdout, err=sys.stderr) -> int:
    """Process files in filename order; exit status 0 only if none was rejected."""
    if not paths:
        print("error: no input files", file=err)
        return 2
    store = RecordStore(config.data_dir)
    ledger = ProcessedLedger(Path(config.data_dir) / "processed.txt")
    status = 0
    for p in sorted(Path(p) for p in paths):
        if not p.is_file():
            print(f"{p.name}: no such file", file=err)
            status = 1
            continue
        data = p.read_bytes()
        event = InboxEvent(p, compute_file_id(data), utcnow(), len(data))
        try:
            rec = process_file(event, config, store, ledger)
        except GatewayError as exc:
            print(f"{p.name}: rejected ({exc})", file=err)
            status = 1
            continue
        s = rec.summary
        print(
            f"{p.name}: {rec.duration_s:.2f} s, {rec.size_bytes / 1000:.0f} kB, "
            f"{rec.processing_time_s:.3f} s processing | zcr {s.mean_zcr:.4f} "
            f"sc {s.mean_sc_hz:.1f} Hz ste {s.mean_ste:.3e} loudness {s.mean_loudness_phon:.1f} phon",
            file=out,
        )
    return status


def _run_daemon(config, admin: bool) -> int:
    gw = Gateway(config)
    try:
        gw.start(admin=admin)
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if admin:
        log.info("admin endpoint on %s", gw.admin_url)
    log.info("watching %s", config.inbox_dir)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        gw.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fit", description="Fog gateway for clinical speech features")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--inbox", help="inbox directory")
    parser.add_argument("--data-dir", help="record store directory")
    parser.add_argument("--cloud-url", help="cloud sync endpoint")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("process", help="process WAV files once")
    p.add_argument("paths", nargs="*")

    sub.add_parser("watch", help="watch the inbox and sync records")
    sub.add_parser("serve", help="watch + sync + admin endpoint")

    p = sub.add_parser("bench", help="benchmark table for WAV files")
    p.add_argument("paths", nargs="+")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="machine-readable JSON output (default: <data-dir>/bench.json)")

    p = sub.add_parser("export", help="plot-ready CSV of features")
    p.add_argument("sources", nargs="+", help="record ids or WAV paths")
    p.add_argument("--mode", choices=("series", "summary"), default="series")
    p.add_argument("--out", help="write CSV here instead of stdout")

    p = sub.add_parser("make-fixtures", help="write synthetic S1..S5 WAVs")
    p.add_argument("out_dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "make-fixtures":
        for path in write_bench_fixtures(args.out_dir):
            print(path)
        return 0

    try:
        config = _config(args)
    except (ConfigRejected, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "process":
        if not args.paths:
            parser.error("process needs at least one file")
        return cmd_process(args.paths, config)
    if args.command == "watch":
        return _run_daemon(config, admin=False)
    if args.command == "serve":
        return _run_daemon(config, admin=True)
    if args.command == "bench":
        try:
            rows = bench.cmd_bench(args.paths, config, args.repeats)
        except bench.BenchError as exc:
            print(f"bench error: {exc}", file=sys.stderr)
            return 1
        print(bench.format_table(rows))
        out = bench.write_bench_json(rows, args.out or Path(config.data_dir) / "bench.json", args.repeats)
        print(f"\nwrote {out}")
        return 0
    if args.command == "export":
        store = RecordStore(config.data_dir) if Path(config.data_dir).exists() else None
        try:
            text = bench.cmd_export_plot_data(args.sources, args.mode, config, store)
        except bench.ExportError as exc:
            print(f"export error: {exc}", file=sys.stderr)
            return 1
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    parser.error(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
