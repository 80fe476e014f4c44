"""Measurement traces: CSV ingestion, serialization and seeded synthesis.

A trace is an ordered list of timestamped readings taken on one phone:
the radio access technology in use, the received power, the confidence
radius reported by the positioning subsystem, and the ground-truth
indoor/outdoor label.

CSV layout (header mandatory)::

    timestamp_s,network,power_dbm,confidence_radius_m,truth
    0.0,4G,-85.0,8.0,outdoor
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import IO, Iterable, Sequence, Union

import numpy as np

from .errors import InvalidSpec, MalformedRow, NonMonotonicTimestamp, OutOfRangeValue

POWER_MIN_DBM = -140.0
POWER_MAX_DBM = -20.0

CSV_HEADER = ("timestamp_s", "network", "power_dbm", "confidence_radius_m", "truth")


class CoverageState(IntEnum):
    """Coverage class. The integer order (Indoor < Outdoor) is the tie-break order."""

    INDOOR = 0
    OUTDOOR = 1

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "CoverageState":
        return cls[text.strip().upper()]


class NetworkType(Enum):
    G2 = "2G"
    G3 = "3G"
    G4 = "4G"

    @classmethod
    def parse(cls, text: str) -> "NetworkType":
        return cls(text.strip().upper())


@dataclass(frozen=True)
class TraceSample:
    timestamp: float
    network: NetworkType
    received_power: float
    confidence_radius: float
    truth: CoverageState

    def validate(self, line: int = 0) -> None:
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0.0):
            raise OutOfRangeValue(line, f"timestamp must be finite and >= 0, got {self.timestamp}")
        if not (POWER_MIN_DBM <= self.received_power <= POWER_MAX_DBM):
            raise OutOfRangeValue(
                line, f"power {self.received_power} dBm outside [{POWER_MIN_DBM}, {POWER_MAX_DBM}]"
            )
        if not (math.isfinite(self.confidence_radius) and self.confidence_radius > 0.0):
            raise OutOfRangeValue(line, f"confidence radius must be > 0, got {self.confidence_radius}")


@dataclass(frozen=True)
class Trace:
    id: str
    samples: tuple[TraceSample, ...]
    _times: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.samples:
            raise InvalidSpec(f"trace {self.id!r} has no samples")
        object.__setattr__(self, "samples", tuple(self.samples))
        prev = None
        for i, s in enumerate(self.samples):
            s.validate(i + 2)
            if prev is not None and s.timestamp <= prev:
                raise NonMonotonicTimestamp(
                    i + 2, f"timestamp {s.timestamp} not greater than previous {prev}"
                )
            prev = s.timestamp
        object.__setattr__(self, "_times", tuple(s.timestamp for s in self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def timestamps(self) -> tuple[float, ...]:
        return self._times

    @property
    def duration(self) -> float:
        return self._times[-1] - self._times[0]

    def index_at(self, t: float) -> int:
        """Index of the sample in effect at time ``t`` (most recent sample, first if before start)."""
        return max(bisect.bisect_right(self._times, t) - 1, 0)

    def sample_at(self, t: float) -> TraceSample:
        return self.samples[self.index_at(t)]


def _parse_float(text: str, line: int, name: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MalformedRow(line, f"{name} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise OutOfRangeValue(line, f"{name} is not finite: {text!r}")
    return value


def parse_trace(source: Union[str, bytes, IO], trace_id: str = "trace") -> Trace:
    """Parse the CSV trace format.

    ``source`` may be text, bytes, or a binary/text file object. Errors carry
    the 1-based line number of the offending row (the header is line 1).
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedRow(0, f"not UTF-8: {exc}") from None

    reader = csv.reader(io.StringIO(source))
    samples: list[TraceSample] = []
    header_seen = False
    prev_t = None
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if not header_seen:
            if tuple(c.strip() for c in row) != CSV_HEADER:
                raise MalformedRow(line, f"expected header {','.join(CSV_HEADER)}")
            header_seen = True
            continue
        if len(row) != len(CSV_HEADER):
            raise MalformedRow(line, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
        t = _parse_float(row[0], line, "timestamp_s")
        try:
            network = NetworkType.parse(row[1])
        except ValueError:
            raise MalformedRow(line, f"unknown network {row[1]!r}") from None
        power = _parse_float(row[2], line, "power_dbm")
        radius = _parse_float(row[3], line, "confidence_radius_m")
        try:
            truth = CoverageState.parse(row[4])
        except KeyError:
            raise MalformedRow(line, f"unknown truth label {row[4]!r}") from None
        sample = TraceSample(t, network, power, radius, truth)
        sample.validate(line)
        if prev_t is not None and t <= prev_t:
            raise NonMonotonicTimestamp(line, f"timestamp {t} not greater than previous {prev_t}")
        prev_t = t
        samples.append(sample)

    if not header_seen:
        raise MalformedRow(1, "missing header")
    if not samples:
        raise MalformedRow(2, "trace has no samples")
    return Trace(trace_id, tuple(samples))


def serialize_trace(trace: Trace) -> str:
    """Inverse of :func:`parse_trace`; floats are written with ``repr`` so they round-trip."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in trace.samples:
        writer.writerow(
            [repr(s.timestamp), s.network.value, repr(s.received_power),
             repr(s.confidence_radius), s.truth.label]
        )
    return out.getvalue()


def read_trace(path) -> Trace:
    from pathlib import Path

    path = Path(path)
    with open(path, "rb") as fh:
        return parse_trace(fh, trace_id=path.stem)


def write_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(serialize_trace(trace))


# ---------------------------------------------------------------------------
# Synthesis


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, self.std, n)


@dataclass(frozen=True)
class LogNormal:
    """``loc + sign * exp(N(mu, sigma))``; ``sign=-1`` gives a left-skewed dBm distribution."""

    mu: float
    sigma: float
    loc: float = 0.0
    sign: float = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.loc + self.sign * rng.lognormal(self.mu, self.sigma, n)


@dataclass(frozen=True)
class QuantizedLogNormal:
    """Log-normal rounded to a multiple of ``step`` (never below one step)."""

    mu: float
    sigma: float
    step: float = 1.0

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = rng.lognormal(self.mu, self.sigma, n)
        return np.maximum(np.round(x / self.step), 1.0) * self.step


@dataclass(frozen=True)
class Discrete:
    support: tuple[float, ...]
    weights: tuple[float, ...]

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = np.asarray(self.weights, dtype=float)
        return rng.choice(np.asarray(self.support, dtype=float), size=n, p=p / p.sum())


Distribution = Union[Normal, LogNormal, QuantizedLogNormal, Discrete]


@dataclass(frozen=True)
class SynthesisSpec:
    """Recipe for a synthetic trace.

    ``timeline`` is a sequence of ``(duration_s, CoverageState)`` phases
    played back to back from t=0. ``power_correlation`` is the lag-one
    correlation of the power noise (0 gives i.i.d. samples); it only
    applies to :class:`Normal` power distributions.
    """

    timeline: tuple[tuple[float, CoverageState], ...]
    power: dict
    radius: dict
    period: float = 1.0
    network: NetworkType = NetworkType.G4
    power_correlation: float = 0.0
    trace_id: str = "synthetic"

    def validate(self) -> None:
        if not self.timeline:
            raise InvalidSpec("timeline is empty")
        if not (self.period > 0 and math.isfinite(self.period)):
            raise InvalidSpec(f"sample period must be positive, got {self.period}")
        for duration, state in self.timeline:
            if not duration > 0:
                raise InvalidSpec(f"phase duration must be positive, got {duration}")
            if state not in self.power or state not in self.radius:
                raise InvalidSpec(f"no distribution configured for {CoverageState(state).label}")
        if not (0.0 <= self.power_correlation < 1.0):
            raise InvalidSpec("power_correlation must be in [0, 1)")

    def labels(self, times: np.ndarray) -> list[CoverageState]:
        bounds = np.cumsum([d for d, _ in self.timeline])
        idx = np.searchsorted(bounds, times, side="right")
        return [CoverageState(self.timeline[min(i, len(self.timeline) - 1)][1]) for i in idx]


def _draw_power(spec: SynthesisSpec, labels: Sequence[CoverageState], rng) -> np.ndarray:
    n = len(labels)
    out = np.empty(n)
    rho = spec.power_correlation
    # One shared standard-normal innovation sequence keeps correlated noise continuous across phases.
    z = rng.standard_normal(n)
    if rho > 0:
        ar = np.empty(n)
        ar[0] = z[0]
        scale = math.sqrt(1.0 - rho * rho)
        for i in range(1, n):
            ar[i] = rho * ar[i - 1] + scale * z[i]
        z = ar
    labels_arr = np.fromiter((int(s) for s in labels), dtype=int, count=n)
    for state in CoverageState:
        mask = labels_arr == int(state)
        if not mask.any():
            continue
        dist = spec.power[state]
        if isinstance(dist, Normal):
            out[mask] = dist.mean + dist.std * z[mask]
        else:
            out[mask] = dist.draw(rng, int(mask.sum()))
    return np.clip(out, POWER_MIN_DBM, POWER_MAX_DBM)


def synthesize_trace(spec: SynthesisSpec, seed: int) -> Trace:
    """Draw a trace from ``spec``. Pure function of ``(spec, seed)`` (numpy PCG64)."""
    spec.validate()
    total = float(sum(d for d, _ in spec.timeline))
    n = int(math.ceil(total / spec.period - 1e-9))
    times = np.arange(n) * spec.period
    labels = spec.labels(times)
    rng = np.random.default_rng(seed)
    power = _draw_power(spec, labels, rng)
    radius = np.empty(n)
    labels_arr = np.fromiter((int(s) for s in labels), dtype=int, count=n)
    for state in CoverageState:
        mask = labels_arr == int(state)
        if mask.any():
            radius[mask] = spec.radius[state].draw(rng, int(mask.sum()))
    radius = np.maximum(radius, 1e-3)
    samples = tuple(
        TraceSample(float(t), spec.network, float(p), float(r), s)
        for t, p, r, s in zip(times, power, radius, labels)
    )
    return Trace(spec.trace_id, samples)


def labels_of(trace: Trace) -> list[CoverageState]:
    return [s.truth for s in trace.samples]


def concat_samples(traces: Iterable[Trace]) -> list[TraceSample]:
    return [s for tr in traces for s in tr.samples]


# ---------------------------------------------------------------------------
# Corpus presets

TRANSITION_DEFAULTS = dict(
    total=1500.0,
    outdoor_dbm=-98.0,
    indoor_dbm=-114.0,
    power_std=6.0,
    correlation=0.9,
    first_outdoor=(30.0, 120.0),
    indoor_stay=(100.0, 250.0),
    outdoor_stay=(30.0, 90.0),
    outdoor_radius=QuantizedLogNormal(1.5, 0.5),
    indoor_radius=QuantizedLogNormal(3.0, 0.6),
)


def transition_spec(rng: np.random.Generator, trace_id: str, **overrides) -> SynthesisSpec:
    """A walk that starts outdoors and alternates indoor stays with short outdoor spells.

    Phase lengths are drawn uniformly from the configured ranges. Power is
    AR(1)-correlated normal noise around a per-class mean (slow shadowing);
    radius is a quantized log-normal per class.
    """
    p = {**TRANSITION_DEFAULTS, **overrides}
    timeline = [(float(rng.uniform(*p["first_outdoor"])), CoverageState.OUTDOOR)]
    t = timeline[0][0]
    while t < p["total"]:
        for state, rng_range in ((CoverageState.INDOOR, p["indoor_stay"]),
                                 (CoverageState.OUTDOOR, p["outdoor_stay"])):
            d = float(rng.uniform(*rng_range))
            timeline.append((d, state))
            t += d
    return SynthesisSpec(
        timeline=tuple(timeline),
        power={CoverageState.OUTDOOR: Normal(p["outdoor_dbm"], p["power_std"]),
               CoverageState.INDOOR: Normal(p["indoor_dbm"], p["power_std"])},
        radius={CoverageState.OUTDOOR: p["outdoor_radius"], CoverageState.INDOOR: p["indoor_radius"]},
        power_correlation=p["correlation"],
        trace_id=trace_id,
    )


def transition_corpus(count: int, seed: int, prefix: str = "transition", **overrides) -> list[Trace]:
    """``count`` outdoor-to-indoor traces; a pure function of its arguments."""
    if count < 1:
        raise InvalidSpec("count must be positive")
    rng = np.random.default_rng(seed)
    width = max(2, len(str(count - 1)))
    traces = []
    for i in range(count):
        spec = transition_spec(rng, f"{prefix}{i:0{width}d}", **overrides)
        traces.append(synthesize_trace(spec, int(rng.integers(2**31))))
    return traces
