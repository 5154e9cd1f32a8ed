"""Per-file timing table and plot-ready feature exports."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from .config import GatewayConfig, merge_config
from .dsp import DspError, FeatureSeries, FeatureSummary
from .gateway import analyze
from .ingest import WavDecodeError

log = logging.getLogger(__name__)

BENCH_COLUMNS = ("Speech Tasks", "Processing Time(s)", "File Duration(s)", "Size (kB)")
SERIES_COLUMNS = ("time_s", "loudness_phon", "sc_hz", "zcr", "ste")
SUMMARY_COLUMNS = (
    "file", "mean_zcr", "mean_sc_hz", "mean_ste", "mean_loudness_phon", "frame_count", "duration_s",
)


class BenchError(Exception):
    pass


class ExportError(Exception):
    pass


@dataclass(frozen=True)
class BenchRow:
    task_label: str
    processing_time_s: float
    file_duration_s: float
    size_bytes: int
    timings_s: Sequence[float] = ()

    @property
    def size_kb(self) -> float:
        return self.size_bytes / 1000.0

    @property
    def size_kib(self) -> float:
        return self.size_bytes / 1024.0

    @property
    def realtime_factor(self) -> float:
        return self.processing_time_s / self.file_duration_s

    def to_dict(self) -> dict:
        return {
            "task_label": self.task_label,
            "processing_time_s": self.processing_time_s,
            "file_duration_s": self.file_duration_s,
            "size_kb": self.size_kb,
            "size_kib": self.size_kib,
            "realtime_factor": self.realtime_factor,
            "timings_s": list(self.timings_s),
        }


def bench_file(path: Path, config: GatewayConfig, repeats: int = 3, label: Optional[str] = None) -> BenchRow:
    data = Path(path).read_bytes()
    timings = []
    clip = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        clip, *_ = analyze(data, config)
        timings.append(time.perf_counter() - t0)
    return BenchRow(
        task_label=label or Path(path).stem,
        processing_time_s=statistics.median(timings),
        file_duration_s=clip.duration_s,
        size_bytes=len(data),
        timings_s=tuple(timings),
    )


def cmd_bench(paths: Iterable, config: GatewayConfig, repeats: int = 3) -> List[BenchRow]:
    """Median-of-``repeats`` timing for each decodable file, in the given order."""
    if repeats < 1:
        raise BenchError("repeats must be >= 1")
    rows = []
    for path in paths:
        try:
            rows.append(bench_file(Path(path), config, repeats))
        except (WavDecodeError, DspError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
    if not rows:
        raise BenchError("no valid files to benchmark")
    return rows


def format_table(rows: Sequence[BenchRow]) -> str:
    cells = [BENCH_COLUMNS] + [
        (r.task_label, f"{r.processing_time_s:.2f}", f"{r.file_duration_s:.2f}", f"{r.size_kb:.0f}")
        for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(BENCH_COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    return "\n".join(lines)


def bench_document(rows: Sequence[BenchRow], repeats: int) -> dict:
    return {
        "columns": list(BENCH_COLUMNS) + ["realtime_factor"],
        "size_unit": "kB = 1000 bytes; size_kib gives 1024-byte units",
        "repeats": repeats,
        "rows": [
            [r.task_label, r.processing_time_s, r.file_duration_s, r.size_kb, r.realtime_factor]
            for r in rows
        ],
        "details": [r.to_dict() for r in rows],
    }


def write_bench_json(rows: Sequence[BenchRow], path, repeats: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(bench_document(rows, repeats), indent=2) + "\n")
    return path


# -- plot data ---------------------------------------------------------


def series_rows(series: FeatureSeries) -> List[tuple]:
    return [
        (float(t), float(l), float(s), float(z), float(e))
        for t, l, s, z, e in zip(
            series.frame_times_s, series.loudness_phon, series.sc_hz, series.zcr, series.ste
        )
    ]


def summary_row(name: str, summary: FeatureSummary) -> tuple:
    return (
        name, summary.mean_zcr, summary.mean_sc_hz, summary.mean_ste,
        summary.mean_loudness_phon, summary.frame_count, summary.duration_s,
    )


def to_csv(columns: Sequence[str], rows: Iterable[tuple]) -> str:
    """CSV with floats written via repr, so values parse back bit-for-bit."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def load_series(source, config: GatewayConfig, store=None) -> FeatureSeries:
    """Series for a record id (from the store) or a WAV path (extracted now)."""
    if store is not None and source in store:
        record = store.get(source)
        if record.series is not None:
            return record.series
        raw = Path(config.inbox_dir) / record.source_name
        if not raw.exists():
            raise ExportError(f"record {source} was stored without series and {raw} is gone")
        # re-extract with the settings the record was made with
        config = merge_config(config, record.config_snapshot)
        source = raw
    path = Path(source)
    if not path.exists():
        raise ExportError(f"no record or file named {source}")
    _, series, _, _ = analyze(path.read_bytes(), config)
    return series


def cmd_export_plot_data(sources: Sequence, mode: str, config: GatewayConfig, store=None) -> str:
    if mode == "series":
        if len(sources) != 1:
            raise ExportError("series export takes exactly one record or file")
        return to_csv(SERIES_COLUMNS, series_rows(load_series(sources[0], config, store)))
    if mode == "summary":
        rows = []
        for src in sources:
            if store is not None and src in store:
                rec = store.get(src)
                rows.append(summary_row(rec.task_label or rec.source_name, rec.summary))
            else:
                path = Path(src)
                if not path.exists():
                    raise ExportError(f"no record or file named {src}")
                _, _, summary, _ = analyze(path.read_bytes(), config)
                rows.append(summary_row(path.stem, summary))
        return to_csv(SUMMARY_COLUMNS, rows)
    raise ExportError(f"unknown export mode {mode!r}")
