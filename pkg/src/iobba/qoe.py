"""Session QoE metrics and their aggregation with normal-approximation confidence intervals."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import EmptyGroup, MalformedLog
from .simulator import EventKind, SessionLog, SessionTag

Z95 = 1.96
METRICS = ("mean_bitrate_bps", "rebuf_per_s", "adapt_per_s")
TAG_FIELDS = ("trace_id", "policy", "k_users", "b_max")


@dataclass(frozen=True)
class QoeReport:
    tag: SessionTag
    mean_video_bitrate: float  # bit/s
    rebuffering_frequency: float  # stalls per second of video
    adaptation_frequency: float  # quality changes per second of video
    stall_time: float = 0.0  # supplementary: total stalled seconds
    segments: int = 0
    capped: bool = False

    def metric(self, name: str) -> float:
        return {
            "mean_bitrate_bps": self.mean_video_bitrate,
            "rebuf_per_s": self.rebuffering_frequency,
            "adapt_per_s": self.adaptation_frequency,
        }[name]


def qoe_from_log(log: SessionLog) -> QoeReport:
    """The three QoE factors of one session, normalized by the nominal video duration.

    The mean bitrate averages the encoding rate over downloaded segments; for
    a complete session this is the rate-weighted sum over the video duration.
    """
    try:
        video_duration = float(log.config["video_duration_s"])
        rates = [float(r) for r in log.config["ladder_rates_bps"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedLog(f"log config lacks {exc}") from None
    if not log.events or log.events[-1].kind is not EventKind.SESSION_ENDED:
        raise MalformedLog("log does not end with SessionEnded")
    times = [e.wall_time for e in log.events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise MalformedLog("event wall times decrease")

    try:
        qualities = log.qualities
    except KeyError as exc:
        raise MalformedLog(f"segment {exc} completed without a request") from None
    if not qualities:
        raise MalformedLog("no segment was downloaded")

    stall_time = 0.0
    open_stall = None
    stalls = 0
    for e in log.events:
        if e.kind is EventKind.STALL_STARTED:
            if open_stall is not None:
                raise MalformedLog("StallStarted while a stall is open")
            open_stall = e.wall_time
            stalls += 1
        elif e.kind is EventKind.STALL_ENDED:
            if open_stall is None:
                raise MalformedLog("StallEnded without StallStarted")
            stall_time += e.wall_time - open_stall
            open_stall = None
    if open_stall is not None:
        stall_time += log.events[-1].wall_time - open_stall

    changes = len(log.of_kind(EventKind.QUALITY_CHANGED))
    # Equals sum(rate * seg) / video_duration when every segment was downloaded.
    mean_rate = math.fsum(rates[q - 1] for q in qualities) / len(qualities)
    return QoeReport(
        log.tag,
        mean_rate,
        stalls / video_duration,
        changes / video_duration,
        stall_time,
        len(qualities),
        log.capped,
    )


@dataclass(frozen=True)
class AggregateStat:
    metric: str
    mean: float
    standard_error: float
    ci95_halfwidth: float
    n: int
    single: bool = False  # n == 1: the half-width is 0 by convention, not by evidence


def summarize(values: Sequence[float], metric: str = "") -> AggregateStat:
    n = len(values)
    if n == 0:
        raise EmptyGroup(f"no values for {metric or 'metric'}")
    mean = math.fsum(values) / n
    if n == 1:
        return AggregateStat(metric, mean, 0.0, 0.0, 1, single=True)
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    se = math.sqrt(var / n)
    return AggregateStat(metric, mean, se, Z95 * se, n)


def aggregate(
    reports: Iterable[QoeReport], group_by: Sequence[str] = ("policy", "k_users", "b_max")
) -> dict[tuple, dict[str, AggregateStat]]:
    """Per-group statistics of every metric, keyed by the ``group_by`` tag values (sorted)."""
    for name in group_by:
        if name not in TAG_FIELDS:
            raise ValueError(f"unknown tag field {name!r}")
    groups: dict[tuple, list[QoeReport]] = defaultdict(list)
    for r in reports:
        groups[tuple(getattr(r.tag, f) for f in group_by)].append(r)
    if not groups:
        raise EmptyGroup("no reports to aggregate")
    return {
        key: {m: summarize([r.metric(m) for r in members], m) for m in METRICS}
        for key, members in sorted(groups.items())
    }


REPORT_COLUMNS = ("trace_id", "policy", "k_users", "bmax_s", "mean_bitrate_bps", "rebuf_per_s",
                  "adapt_per_s", "stall_time_s", "segments", "capped")


def reports_to_csv(reports: Iterable[QoeReport]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in sorted(reports, key=lambda r: r.tag):
        w.writerow([r.tag.trace_id, r.tag.policy, r.tag.k_users, f"{r.tag.b_max:g}",
                    repr(r.mean_video_bitrate), repr(r.rebuffering_frequency),
                    repr(r.adaptation_frequency), repr(r.stall_time), r.segments, int(r.capped)])
    return out.getvalue()


def aggregates_to_csv(stats: dict[tuple, dict[str, AggregateStat]], group_by: Sequence[str]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([("bmax_s" if f == "b_max" else f) for f in group_by] + ["metric", "mean", "se", "ci95", "n"])
    for key, per_metric in stats.items():
        cells = [f"{v:g}" if isinstance(v, float) else v for v in key]
        for m in METRICS:
            s = per_metric[m]
            w.writerow(cells + [m, repr(s.mean), repr(s.standard_error), repr(s.ci95_halfwidth), s.n])
    return out.getvalue()
