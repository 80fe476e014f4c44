"""Buffer-based quality selection: segment maps, quantization and the IOBBA decision rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

from .errors import DegenerateLadder, InvalidThresholds
from .trace import CoverageState

QUANTIZE_RTOL = 1e-9
R_UPPER_FRACTION = 0.9
INDOOR_R_LOWER_FRACTION = 0.3
OUTDOOR_R_LOWER_BOUNDS = (0.1, 0.3)
DEFAULT_M = 3


@dataclass(frozen=True)
class Representation:
    index: int  # 1-based
    resolution: str
    max_encoding_rate: float  # bit/s
    mean_segment_size: float  # bits


@dataclass(frozen=True)
class Ladder:
    representations: tuple[Representation, ...]
    segment_duration: float = 4.0

    def __post_init__(self):
        reps = self.representations
        if len(reps) < 2:
            raise DegenerateLadder("a ladder needs at least two representations")
        if not self.segment_duration > 0:
            raise DegenerateLadder("segment duration must be positive")
        for i, r in enumerate(reps, start=1):
            if r.index != i:
                raise DegenerateLadder(f"representation {i} has index {r.index}")
            if not r.max_encoding_rate > 0:
                raise DegenerateLadder(f"representation {i} has non-positive rate")
        if any(b.max_encoding_rate <= a.max_encoding_rate for a, b in zip(reps, reps[1:])):
            raise DegenerateLadder("rates must be strictly increasing with index")

    @classmethod
    def from_rates(
        cls,
        rates_bps: Sequence[float],
        segment_duration: float = 4.0,
        resolutions: Optional[Sequence[str]] = None,
    ) -> "Ladder":
        resolutions = resolutions or [""] * len(rates_bps)
        return cls(
            tuple(
                Representation(i, res, float(rate), float(rate) * segment_duration)
                for i, (rate, res) in enumerate(zip(rates_bps, resolutions), start=1)
            ),
            segment_duration,
        )

    def __len__(self) -> int:
        return len(self.representations)

    def __getitem__(self, quality: int) -> Representation:
        if not 1 <= quality <= len(self.representations):
            raise IndexError(f"quality {quality} outside 1..{len(self.representations)}")
        return self.representations[quality - 1]

    @property
    def max_quality(self) -> int:
        return len(self.representations)

    @property
    def min_size(self) -> float:
        return self.representations[0].mean_segment_size

    @property
    def max_size(self) -> float:
        return self.representations[-1].mean_segment_size

    @property
    def rates(self) -> tuple[float, ...]:
        return tuple(r.max_encoding_rate for r in self.representations)


DEFAULT_LADDER = Ladder.from_rates(
    [129e3, 378e3, 578e3, 1536e3, 3993e3],
    4.0,
    ["320x240", "480x360", "854x480", "1280x720", "1920x1080"],
)


class MapShape(Enum):
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class SegmentMap:
    """Buffer occupancy (s) -> target mean segment size (bits).

    Flat at the smallest size below ``r_lower`` and at the largest size above
    ``r_upper``. In between it is affine (LINEAR) or ``alpha * beta**B``
    (EXPONENTIAL).
    """

    shape: MapShape
    r_lower: float
    r_upper: float
    b_max: float
    ladder: Ladder
    alpha: float = math.nan
    beta: float = math.nan

    def __call__(self, buffer: float) -> float:
        lo, hi = self.ladder.min_size, self.ladder.max_size
        if buffer <= self.r_lower:
            return lo
        if buffer >= self.r_upper:
            return hi
        frac = (buffer - self.r_lower) / (self.r_upper - self.r_lower)
        if self.shape is MapShape.LINEAR:
            return lo + (hi - lo) * frac
        # Same curve as alpha * beta**buffer, anchored at r_lower for accuracy.
        return lo * (hi / lo) ** frac


def _check_thresholds(r_lower: float, r_upper: float, b_max: float) -> None:
    if not (0 < r_lower < r_upper <= b_max):
        raise InvalidThresholds(
            f"need 0 < r_lower < r_upper <= B_max, got {r_lower}, {r_upper}, {b_max}"
        )


def build_linear_map(ladder: Ladder, r_lower: float, r_upper: float, b_max: float) -> SegmentMap:
    _check_thresholds(r_lower, r_upper, b_max)
    return SegmentMap(MapShape.LINEAR, r_lower, r_upper, b_max, ladder)


def build_exponential_map(ladder: Ladder, r_lower: float, r_upper: float, b_max: float) -> SegmentMap:
    _check_thresholds(r_lower, r_upper, b_max)
    lo, hi = ladder.min_size, ladder.max_size
    if not hi > lo > 0:
        raise DegenerateLadder("exponential map needs 0 < smallest size < largest size")
    beta = (hi / lo) ** (1.0 / (r_upper - r_lower))
    alpha = lo * beta ** (-r_lower)
    return SegmentMap(MapShape.EXPONENTIAL, r_lower, r_upper, b_max, ladder, alpha, beta)


def build_map(shape: MapShape, ladder: Ladder, r_lower: float, r_upper: float, b_max: float) -> SegmentMap:
    if shape is MapShape.LINEAR:
        return build_linear_map(ladder, r_lower, r_upper, b_max)
    return build_exponential_map(ladder, r_lower, r_upper, b_max)


def quantize_to_quality(map_value: float, ladder: Ladder) -> int:
    """Highest quality whose mean segment size does not exceed ``map_value`` (1 if none)."""
    limit = map_value * (1.0 + QUANTIZE_RTOL)
    quality = 1
    for rep in ladder.representations:
        if rep.mean_segment_size <= limit:
            quality = rep.index
        else:
            break
    return quality


def outdoor_r_lower(ladder: Ladder, recent_throughput: float, b_max: float) -> float:
    """Dynamic reservoir: time to fetch one top-quality segment, clamped to [0.1, 0.3] x B_max.

    A non-positive throughput estimate yields the upper clamp.
    """
    lo, hi = OUTDOOR_R_LOWER_BOUNDS[0] * b_max, OUTDOOR_R_LOWER_BOUNDS[1] * b_max
    if not recent_throughput > 0:
        return hi
    return min(max(ladder.max_size / recent_throughput, lo), hi)


@dataclass(frozen=True)
class SegmentMaps:
    indoor: SegmentMap
    outdoor: SegmentMap

    def for_state(self, state: CoverageState) -> SegmentMap:
        return self.indoor if state is CoverageState.INDOOR else self.outdoor


def session_maps(
    ladder: Ladder,
    b_max: float,
    recent_throughput: float,
    indoor_shape: MapShape = MapShape.EXPONENTIAL,
    indoor_r_lower_fraction: Optional[float] = INDOOR_R_LOWER_FRACTION,
    r_upper_fraction: float = R_UPPER_FRACTION,
) -> SegmentMaps:
    """Maps used at one request: linear outdoor map with the dynamic reservoir, plus the indoor map.

    ``indoor_r_lower_fraction=None`` gives the indoor map the dynamic reservoir as well.
    """
    r_upper = r_upper_fraction * b_max
    r_out = outdoor_r_lower(ladder, recent_throughput, b_max)
    r_in = r_out if indoor_r_lower_fraction is None else indoor_r_lower_fraction * b_max
    return SegmentMaps(
        indoor=build_map(indoor_shape, ladder, r_in, r_upper, b_max),
        outdoor=build_linear_map(ladder, r_out, r_upper, b_max),
    )


class PolicyMode(Enum):
    BASELINE = "baseline"
    IOBBA = "iobba"


@dataclass(frozen=True)
class PolicyState:
    mode: PolicyMode
    current_quality: int = 1
    upgrade_streak: int = 0
    m: int = DEFAULT_M
    last_detection: CoverageState = CoverageState.OUTDOOR

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be a positive integer")
        if not 0 <= self.upgrade_streak <= self.m:
            raise ValueError("upgrade_streak must be in [0, m]")
        if self.current_quality < 1:
            raise ValueError("quality indices are 1-based")


def next_quality(
    state: PolicyState, buffer: float, detection: CoverageState, maps: SegmentMaps
) -> tuple[int, PolicyState]:
    """Quality of the next segment and the updated policy state.

    Baseline ignores ``detection`` and always reads the outdoor (linear) map.
    IOBBA reads the map of the detected state; indoors, downgrades are
    immediate while an upgrade needs ``m`` consecutive upgrade indications
    and then raises the quality by one level. With ``m == 1`` there is no
    hysteresis and the indoor candidate is taken as is.
    """
    ladder = maps.outdoor.ladder
    if state.mode is PolicyMode.BASELINE:
        q = quantize_to_quality(maps.outdoor(buffer), ladder)
        return q, replace(state, current_quality=q, upgrade_streak=0, last_detection=detection)

    if detection is CoverageState.OUTDOOR:
        q = quantize_to_quality(maps.outdoor(buffer), ladder)
        return q, replace(state, current_quality=q, upgrade_streak=0, last_detection=detection)

    candidate = quantize_to_quality(maps.indoor(buffer), ladder)
    current = min(state.current_quality, ladder.max_quality)
    if candidate <= current or state.m == 1:
        return candidate, replace(
            state, current_quality=candidate, upgrade_streak=0, last_detection=detection
        )
    streak = state.upgrade_streak + 1
    if streak >= state.m:
        q = current + 1
        return q, replace(state, current_quality=q, upgrade_streak=0, last_detection=detection)
    return current, replace(state, upgrade_streak=streak, last_detection=detection)
