"""Trace-driven playback simulation of one streaming client.

One segment is in flight at a time. Downloads integrate the piecewise
constant per-user rate exactly, so every event time is a closed-form
function of the trace and no time step is involved.

Playback model:

* the buffer fills by one segment duration per completed download and
  drains at 1 s/s while playing;
* playback starts (and resumes after a stall) once the buffer holds
  ``startup_threshold`` seconds, or when it cannot take another segment;
* a request is only issued when the buffer can take the segment without
  exceeding ``B_max``; otherwise the client idles while playback drains it;
* the session ends once every segment is downloaded and the buffer has
  played out, or at the wall-time cap.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .detector import DetectorModel, map_classify
from .errors import ConfigInvalid, MalformedLog
from .policy import (
    DEFAULT_LADDER,
    DEFAULT_M,
    INDOOR_R_LOWER_FRACTION,
    R_UPPER_FRACTION,
    Ladder,
    MapShape,
    PolicyMode,
    PolicyState,
    next_quality,
    session_maps,
)
from .radio import MAX_USERS, NetworkParams, ThroughputSeries, throughput_series
from .trace import CoverageState, NetworkType, Trace

VIDEO_DURATION_S = 596.0
EPS = 1e-9


class PolicyKind(Enum):
    BASELINE = "baseline"
    IOBBA_TRUE = "iobba-true"
    IOBBA_DETECTED = "iobba-detected"


@dataclass(frozen=True)
class SessionConfig:
    b_max: float = 150.0
    k_users: int = 1
    policy: PolicyKind = PolicyKind.BASELINE
    ladder: Ladder = DEFAULT_LADDER
    video_duration: float = VIDEO_DURATION_S
    startup_threshold: float = 8.0
    m: int = DEFAULT_M
    indoor_shape: MapShape = MapShape.EXPONENTIAL
    indoor_r_lower_fraction: Optional[float] = INDOOR_R_LOWER_FRACTION
    r_upper_fraction: float = R_UPPER_FRACTION
    wall_time_cap_factor: float = 5.0
    network_params: Optional[Mapping[NetworkType, NetworkParams]] = field(default=None, compare=False)

    @property
    def segment_count(self) -> int:
        return int(round(self.video_duration / self.ladder.segment_duration))

    @property
    def wall_time_cap(self) -> float:
        return self.wall_time_cap_factor * self.video_duration

    def validate(self) -> None:
        seg = self.ladder.segment_duration
        if not self.b_max > seg:
            raise ConfigInvalid("b_max", f"must exceed the segment duration ({seg} s), got {self.b_max}")
        if not 0 < self.startup_threshold <= self.b_max:
            raise ConfigInvalid("startup_threshold", f"must be in (0, b_max], got {self.startup_threshold}")
        if not (isinstance(self.k_users, int) and 1 <= self.k_users <= MAX_USERS):
            raise ConfigInvalid("k_users", f"must be an integer in [1, {MAX_USERS}], got {self.k_users}")
        n = self.video_duration / seg
        if not (self.video_duration > 0 and abs(n - round(n)) < 1e-9):
            raise ConfigInvalid(
                "video_duration", f"must be a positive multiple of {seg} s, got {self.video_duration}"
            )
        if self.m < 1:
            raise ConfigInvalid("m", "must be a positive integer")
        if not self.wall_time_cap_factor >= 1:
            raise ConfigInvalid("wall_time_cap_factor", "must be at least 1")
        if self.indoor_r_lower_fraction is not None and not (
            0 < self.indoor_r_lower_fraction < self.r_upper_fraction
        ):
            raise ConfigInvalid("indoor_r_lower_fraction", "must be in (0, r_upper_fraction)")
        if not 0.3 < self.r_upper_fraction <= 1.0:
            raise ConfigInvalid("r_upper_fraction", "must be in (0.3, 1]")

    def snapshot(self) -> dict:
        return {
            "b_max_s": self.b_max,
            "k_users": self.k_users,
            "policy": self.policy.value,
            "ladder_rates_bps": list(self.ladder.rates),
            "segment_duration_s": self.ladder.segment_duration,
            "video_duration_s": self.video_duration,
            "startup_threshold_s": self.startup_threshold,
            "m": self.m,
            "indoor_shape": self.indoor_shape.value,
            "indoor_r_lower_fraction": self.indoor_r_lower_fraction,
            "r_upper_fraction": self.r_upper_fraction,
            "wall_time_cap_s": self.wall_time_cap,
        }


class EventKind(Enum):
    SEGMENT_REQUESTED = "SegmentRequested"
    SEGMENT_COMPLETED = "SegmentCompleted"
    QUALITY_CHANGED = "QualityChanged"
    PLAYBACK_STARTED = "PlaybackStarted"
    STALL_STARTED = "StallStarted"
    STALL_ENDED = "StallEnded"
    SESSION_ENDED = "SessionEnded"


@dataclass(frozen=True)
class SessionEvent:
    kind: EventKind
    wall_time: float
    segment: Optional[int] = None
    quality: Optional[int] = None
    bits: Optional[float] = None
    download_s: Optional[float] = None
    from_quality: Optional[int] = None
    to_quality: Optional[int] = None


@dataclass(frozen=True)
class BufferSample:
    wall_time: float
    buffer: float
    playing: bool  # playback state from this sample until the next one


@dataclass(frozen=True, order=True)
class SessionTag:
    trace_id: str
    policy: str
    k_users: int
    b_max: float


@dataclass
class SessionLog:
    tag: SessionTag
    config: dict
    events: list[SessionEvent]
    buffer: list[BufferSample]
    trace_exhausted: bool = False
    capped: bool = False

    def of_kind(self, kind: EventKind) -> list[SessionEvent]:
        return [e for e in self.events if e.kind is kind]

    @property
    def qualities(self) -> list[int]:
        """Quality of every completed segment, in download order."""
        requested = {e.segment: e.quality for e in self.of_kind(EventKind.SEGMENT_REQUESTED)}
        return [requested[e.segment] for e in self.of_kind(EventKind.SEGMENT_COMPLETED)]

    @property
    def stall_count(self) -> int:
        return len(self.of_kind(EventKind.STALL_STARTED))

    @property
    def end_time(self) -> float:
        return self.events[-1].wall_time


class _Session:
    def __init__(self, trace: Trace, config: SessionConfig, series: ThroughputSeries,
                 detector: Optional[DetectorModel]):
        self.trace = trace
        self.cfg = config
        self.series = series
        self.detector = detector
        self.t = 0.0
        self.buf = 0.0
        self.playing = False
        self.stalled = False
        self.events: list[SessionEvent] = []
        self.samples: list[BufferSample] = []
        self.detections: dict[int, CoverageState] = {}
        self.exhausted = False

    def emit(self, kind: EventKind, **kw) -> None:
        self.events.append(SessionEvent(kind, self.t, **kw))

    def record(self) -> None:
        self.samples.append(BufferSample(self.t, self.buf, self.playing))

    def start_playback(self) -> None:
        self.emit(EventKind.STALL_ENDED if self.stalled else EventKind.PLAYBACK_STARTED)
        self.playing = True
        self.stalled = False
        self.record()

    def advance(self, until: float) -> None:
        """Move the clock to ``until`` with no download completing; may start a stall."""
        if self.playing and self.buf < until - self.t:
            self.t += self.buf
            self.buf = 0.0
            self.playing = False
            self.stalled = True
            self.emit(EventKind.STALL_STARTED)
            self.record()
        if self.playing:
            self.buf -= until - self.t
        self.t = until

    def detect(self) -> CoverageState:
        idx = self.trace.index_at(self.t)
        state = self.detections.get(idx)
        if state is None:
            sample = self.trace.samples[idx]
            if self.cfg.policy is PolicyKind.IOBBA_DETECTED:
                state = map_classify(self.detector, sample.received_power, sample.confidence_radius)[0]
            else:
                state = sample.truth
            self.detections[idx] = state
        return state

    def finish(self, capped: bool) -> SessionLog:
        self.record()
        self.emit(EventKind.SESSION_ENDED)
        cfg = self.cfg
        return SessionLog(
            SessionTag(self.trace.id, cfg.policy.value, cfg.k_users, cfg.b_max),
            cfg.snapshot(),
            self.events,
            self.samples,
            trace_exhausted=self.exhausted,
            capped=capped,
        )

    def run(self) -> SessionLog:
        cfg = self.cfg
        ladder = cfg.ladder
        seg = ladder.segment_duration
        cap = cfg.wall_time_cap
        mode = PolicyMode.BASELINE if cfg.policy is PolicyKind.BASELINE else PolicyMode.IOBBA
        state = PolicyState(mode, m=cfg.m)
        recent = self.series.rate_at(0.0)
        prev_q = None
        self.record()

        for j in range(1, cfg.segment_count + 1):
            headroom = cfg.b_max - seg
            if self.buf > headroom + EPS:
                if not self.playing:
                    self.start_playback()
                wake = self.t + (self.buf - headroom)
                if wake > cap:
                    self.advance(cap)
                    return self.finish(capped=True)
                self.t = wake
                self.buf = headroom
                self.record()

            detection = self.detect() if mode is PolicyMode.IOBBA else CoverageState.OUTDOOR
            maps = session_maps(
                ladder, cfg.b_max, recent, cfg.indoor_shape, cfg.indoor_r_lower_fraction,
                cfg.r_upper_fraction,
            )
            q, state = next_quality(state, min(self.buf, cfg.b_max), detection, maps)
            self.emit(EventKind.SEGMENT_REQUESTED, segment=j, quality=q)
            if prev_q is not None and q != prev_q:
                self.emit(EventKind.QUALITY_CHANGED, from_quality=prev_q, to_quality=q)
            self.record()
            prev_q = q

            bits = ladder[q].mean_segment_size
            start = self.t
            done = self.series.time_to_download(bits, start)
            self.exhausted |= min(done, cap) > self.series.end
            if done > cap:
                self.advance(cap)
                return self.finish(capped=True)
            self.advance(done)
            self.buf += seg
            self.emit(EventKind.SEGMENT_COMPLETED, segment=j, bits=bits, download_s=done - start)
            self.record()
            if done > start:
                recent = bits / (done - start)
            if not self.playing and self.buf >= cfg.startup_threshold - EPS:
                self.start_playback()

        if not self.playing:
            self.start_playback()
        end = self.t + self.buf
        if end > cap:
            self.advance(cap)
            return self.finish(capped=True)
        self.t = end
        self.buf = 0.0
        return self.finish(capped=False)


def simulate_session(
    trace: Trace,
    config: SessionConfig,
    detector: Optional[DetectorModel] = None,
    throughput: Optional[ThroughputSeries] = None,
) -> SessionLog:
    """Simulate one playback session.

    ``throughput`` overrides the rate derived from the trace's received
    power; the trace is still used for coverage labels and detection.
    """
    config.validate()
    if config.policy is PolicyKind.IOBBA_DETECTED and detector is None:
        raise ConfigInvalid("detector", "iobba-detected needs a detector model")
    series = throughput if throughput is not None else throughput_series(
        trace, config.k_users, config.network_params
    )
    return _Session(trace, config, series, detector).run()


def _run_one(args) -> SessionLog:
    trace, config, detector = args
    return simulate_session(trace, config, detector)


def run_experiment(
    traces: Sequence[Trace],
    k_values: Iterable[int],
    b_max_values: Iterable[float],
    policies: Iterable[PolicyKind],
    base: SessionConfig = SessionConfig(),
    detector: Optional[DetectorModel] = None,
    workers: int = 1,
) -> list[SessionLog]:
    """Simulate every trace x K x B_max x policy combination; logs sorted by tag."""
    k_values, b_max_values, policies = list(k_values), list(b_max_values), list(policies)
    if not (traces and k_values and b_max_values and policies):
        raise ConfigInvalid("grid", "traces, k_users, b_max and policies must all be non-empty")
    jobs = [
        (trace, replace(base, k_users=k, b_max=b, policy=p), detector)
        for trace, k, b, p in itertools.product(traces, k_values, b_max_values, policies)
    ]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(_run_one, jobs, chunksize=4))
    else:
        logs = [_run_one(job) for job in jobs]
    return sorted(logs, key=lambda log: log.tag)


# ---------------------------------------------------------------------------
# Log file format: one JSON summary line prefixed with "# ", then CSV rows.
# Event rows come first in emission order, followed by the buffer trajectory
# (kind "buffer").

LOG_COLUMNS = ("kind", "wall_time_s", "segment", "quality", "from_quality", "to_quality",
               "bits", "download_s", "buffer_s", "playing")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps_log(log: SessionLog) -> str:
    header = {
        "format": "iobba-session-log",
        "version": 1,
        "tag": {"trace_id": log.tag.trace_id, "policy": log.tag.policy,
                "k_users": log.tag.k_users, "b_max_s": log.tag.b_max},
        "config": log.config,
        "trace_exhausted": log.trace_exhausted,
        "capped": log.capped,
    }
    out = io.StringIO()
    out.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for e in log.events:
        w.writerow([_fmt(x) for x in (e.kind.value, e.wall_time, e.segment, e.quality, e.from_quality,
                                      e.to_quality, e.bits, e.download_s, None, None)])
    for s in log.buffer:
        w.writerow([_fmt(x) for x in ("buffer", s.wall_time, None, None, None, None, None, None,
                                      s.buffer, s.playing)])
    return out.getvalue()


def loads_log(text: str) -> SessionLog:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise MalformedLog("missing JSON summary line")
    try:
        header = json.loads(lines[0][2:])
        tag = SessionTag(header["tag"]["trace_id"], header["tag"]["policy"],
                         int(header["tag"]["k_users"]), float(header["tag"]["b_max_s"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedLog(f"bad summary line: {exc}") from None
    reader = csv.reader(lines[1:])
    if tuple(next(reader, ())) != LOG_COLUMNS:
        raise MalformedLog("unexpected column header")

    def opt(cast, v):
        return None if v == "" else cast(v)

    events, samples = [], []
    for row in reader:
        if len(row) != len(LOG_COLUMNS):
            raise MalformedLog(f"row has {len(row)} fields")
        try:
            if row[0] == "buffer":
                samples.append(BufferSample(float(row[1]), float(row[8]), row[9] == "1"))
            else:
                events.append(SessionEvent(
                    EventKind(row[0]), float(row[1]), opt(int, row[2]), opt(int, row[3]),
                    opt(float, row[6]), opt(float, row[7]), opt(int, row[4]), opt(int, row[5]),
                ))
        except ValueError as exc:
            raise MalformedLog(str(exc)) from None
    return SessionLog(tag, header.get("config", {}), events, samples,
                      bool(header.get("trace_exhausted")), bool(header.get("capped")))


def log_filename(tag: SessionTag) -> str:
    return f"{tag.trace_id}__{tag.policy}__k{tag.k_users}__bmax{tag.b_max:g}.csv"
