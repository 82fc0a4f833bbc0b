"""Percentiles and the pattern comparison report."""

from __future__ import annotations

import io
import math
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

if TYPE_CHECKING:
    from chunkstore.replication_sim import SimMetrics

CSV_COLUMNS = ["pattern", "p50", "p95", "p99", "max", "probes", "errors", "error_rate"]
PATTERN_LABELS = {"chunked": "Chunked Object", "pointer": "Pointer Pattern"}
NOT_AVAILABLE = "n/a"


class EmptySamples(ValueError):
    pass


def _rank(q: float, n: int) -> int:
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    # round first so 0.29 * 100 does not become rank 30
    return max(1, math.ceil(round(q * n, 9)))


def percentiles(samples: Sequence | np.ndarray, qs: Iterable[float]) -> list:
    """Nearest-rank quantiles: the ceil(q*N)-th smallest sample (1-based)."""
    values = np.sort(np.asarray(samples))
    if values.size == 0:
        raise EmptySamples("cannot take a percentile of no samples")
    return [values[_rank(q, values.size) - 1].item() for q in qs]


def percentile(samples: Sequence | np.ndarray, q: float):
    return percentiles(samples, [q])[0]


def seconds_text(micros: int) -> str:
    """Exact fixed-point seconds with microsecond resolution."""
    sign = "-" if micros < 0 else ""
    micros = abs(int(micros))
    return f"{sign}{micros // 1_000_000}.{micros % 1_000_000:06d}"


def _mean_seconds(micros: Sequence[int]) -> str:
    if not micros:
        return NOT_AVAILABLE
    return f"{sum(micros) / len(micros) / 1_000_000:.6f}"


def _percentile_text(micros: Sequence[int], q: float) -> str:
    if not micros:
        return NOT_AVAILABLE
    return seconds_text(percentile(micros, q))


def summary_row(metrics: "SimMetrics") -> dict:
    ttc = metrics.ttc_samples_us
    return {
        "pattern": metrics.pattern,
        "p50": _percentile_text(ttc, 0.50),
        "p95": _percentile_text(ttc, 0.95),
        "p99": _percentile_text(ttc, 0.99),
        "max": seconds_text(max(ttc)) if ttc else NOT_AVAILABLE,
        "probes": metrics.probe_total,
        "errors": metrics.probe_404,
        "error_rate": repr(metrics.error_rate),
    }


def comparison_table(
    metrics_chunked: Optional["SimMetrics"], metrics_pointer: Optional["SimMetrics"]
) -> pd.DataFrame:
    rows = [
        "p50 TTC (s)",
        "p95 TTC (s)",
        "p99 TTC (s)",
        "Max TTC (s)",
        "Avg Lag Delta (s)",
        "Avg Lag Delta, clamped (s)",
        "p99 Lag Delta (s)",
        "404 Error Rate",
        "Probes",
        "Writes",
    ]
    table = pd.DataFrame(index=rows)
    for pattern, metrics in (("chunked", metrics_chunked), ("pointer", metrics_pointer)):
        label = PATTERN_LABELS[pattern]
        if metrics is None:
            table[label] = NOT_AVAILABLE
            continue
        deltas = metrics.lag_delta_samples_us
        row = summary_row(metrics)
        table[label] = [
            row["p50"],
            row["p95"],
            row["p99"],
            row["max"],
            _mean_seconds(deltas),
            _mean_seconds([max(d, 0) for d in deltas]),
            _percentile_text(deltas, 0.99),
            f"{metrics.error_rate:.4%}",
            str(metrics.probe_total),
            str(metrics.writes_total),
        ]
    return table


def render_report(
    metrics_chunked: Optional["SimMetrics"],
    metrics_pointer: Optional["SimMetrics"],
    header: Sequence[str] = (),
) -> tuple[str, str]:
    """Return (report text, CSV text) comparing the two patterns."""
    table = comparison_table(metrics_chunked, metrics_pointer)
    lines = ["Secondary Region Read Failures (Dangling Pointer Errors)", ""]
    lines.extend(header)
    if header:
        lines.append("")
    lines.append(table.to_string())
    report = "\n".join(lines) + "\n"

    present = [m for m in (metrics_chunked, metrics_pointer) if m is not None]
    frame = pd.DataFrame([summary_row(m) for m in present], columns=CSV_COLUMNS)
    csv_text = frame.to_csv(index=False, lineterminator="\n")
    return report, csv_text


def parse_metrics_csv(text: str) -> pd.DataFrame:
    """Read a metrics CSV back; time columns are float seconds."""
    frame = pd.read_csv(
        io.StringIO(text),
        dtype={"pattern": str, "probes": "int64", "errors": "int64"},
        na_values=[NOT_AVAILABLE],
        keep_default_na=False,
    )
    return frame
