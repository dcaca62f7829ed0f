"""Reproducibility statistics over repeated runs.

Per-run measures: ``last_1`` (final-epoch error), ``last_k`` (mean of the last
k epoch errors) and ``best_epoch`` (minimum over all epochs; it peeks at test
data and is reported for reference only). Standard deviations use the
population convention (divide by n). Means and variances are computed with
exact rational arithmetic, so hand-worked values are reproduced bit for bit.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass
from typing import Optional, Sequence


from .harness import RunLog

KINDS = ("last_1", "last_k", "best_epoch")
SD_CONVENTION = "population"
COLUMNS = ("kind", "k", "runs", "min", "median", "max", "mean", "sd", "rms_sd")


@dataclass
class RunSummary:
    kind: str
    k: int
    runs: int
    min: float
    median: float
    max: float
    mean: float
    sd: float
    rms_sd: Optional[float] = None
    sd_convention: str = SD_CONVENTION

    def row(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}


def _errors(run) -> list:
    return run.test_errors if isinstance(run, RunLog) else list(run)


def run_measure(errors: Sequence[float], kind: str, k: int = 10) -> float:
    if not errors:
        raise ValueError("run has no epochs")
    if kind == "last_1":
        return float(errors[-1])
    if kind == "last_k":
        if len(errors) < k:
            raise ValueError(f"last_k needs {k} epochs, run has {len(errors)}")
        return float(statistics.mean(errors[-k:]))
    if kind == "best_epoch":
        return float(min(errors))
    raise ValueError(f"unknown measure kind {kind!r}; expected one of {KINDS}")


def summarize(runlogs: Sequence, kind: str = "last_k", k: int = 10) -> RunSummary:
    """Summary statistics of one measure across runs.

    ``runlogs`` holds :class:`RunLog` objects or plain per-epoch error lists.
    ``rms_sd`` (last_k only) is the square root of the mean, over runs, of the
    variance of each run's last-k errors.
    """
    if not runlogs:
        raise ValueError("no runs to summarize")
    series = [_errors(r) for r in runlogs]
    values = [run_measure(s, kind, k) for s in series]
    rms_sd = None
    if kind == "last_k":
        rms_sd = math.sqrt(statistics.mean([statistics.pvariance(s[-k:]) for s in series]))
    return RunSummary(
        kind=kind,
        k=k if kind == "last_k" else (1 if kind == "last_1" else 0),
        runs=len(values),
        min=float(min(values)),
        median=float(statistics.median(values)),
        max=float(max(values)),
        mean=float(statistics.mean(values)),
        sd=float(statistics.pstdev(values)),
        rms_sd=rms_sd,
    )


def _last_label(s: RunSummary) -> str:
    return {"last_1": "1", "last_k": str(s.k), "best_epoch": "best"}[s.kind]


def format_table(summaries: Sequence[RunSummary], digits: int = 2) -> str:
    """Aligned text table with columns Last, Runs, Min., Med., Max., Mean±SD, RMS(SD)."""
    head = ["Last", "Runs", "Min.", "Med.", "Max.", "Mean±SD", "RMS(SD)"]
    rows = []
    for s in summaries:
        f = f"{{:.{digits}f}}".format
        rows.append(
            [
                _last_label(s),
                str(s.runs),
                f(s.min),
                f(s.median),
                f(s.max),
                f"{f(s.mean)}±{f(s.sd)}",
                f(s.rms_sd) if s.rms_sd is not None else "n/a",
            ]
        )
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in [head] + rows]
    return "\n".join(lines) + "\n"


def to_csv(summaries: Sequence[RunSummary]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(COLUMNS) + ["sd_convention"], lineterminator="\n")
    writer.writeheader()
    for s in summaries:
        row = s.row()
        row["rms_sd"] = "" if s.rms_sd is None else s.rms_sd
        row["sd_convention"] = s.sd_convention
        writer.writerow(row)
    return buf.getvalue()
