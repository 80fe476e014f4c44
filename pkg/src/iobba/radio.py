"""Received power to throughput: Shannon capacity with a capped SINR and round-robin sharing."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Mapping, Optional

from .errors import InvalidSpec, UserCountOutOfRange
from .trace import NetworkType, Trace

SINR_CAP_DB = 20.0
SINR_CAP = 10.0 ** (SINR_CAP_DB / 10.0)
MAX_USERS = 8


@dataclass(frozen=True)
class NetworkParams:
    measured_bandwidth: float  # Hz, bandwidth the power reading refers to
    data_bandwidth: float  # Hz
    sensitivity_threshold: float  # dBm per measured bandwidth

    def __post_init__(self):
        if not (self.measured_bandwidth > 0 and self.data_bandwidth > 0):
            raise InvalidSpec("bandwidths must be positive")
        if not (-140.0 <= self.sensitivity_threshold <= -20.0):
            raise InvalidSpec(f"threshold {self.sensitivity_threshold} dBm outside [-140, -20]")

    @property
    def max_cell_rate(self) -> float:
        return self.data_bandwidth * math.log2(1.0 + SINR_CAP)


DEFAULT_PARAMS: dict[NetworkType, NetworkParams] = {
    NetworkType.G2: NetworkParams(200e3, 200e3, -104.0),
    NetworkType.G3: NetworkParams(3.84e6, 5e6, -106.0),
    NetworkType.G4: NetworkParams(15e3, 18e6, -94.0),
}


def sinr_linear(power_dbm: float, params: NetworkParams) -> float:
    """Linear SINR, power over sensitivity threshold, capped at 20 dB."""
    return min(10.0 ** ((power_dbm - params.sensitivity_threshold) / 10.0), SINR_CAP)


def cell_throughput(power_dbm: float, params: NetworkParams) -> float:
    """Cell rate in bit/s."""
    return params.data_bandwidth * math.log2(1.0 + sinr_linear(power_dbm, params))


def per_user_throughput(cell_rate: float, k_users: int) -> float:
    if not (1 <= k_users <= MAX_USERS) or int(k_users) != k_users:
        raise UserCountOutOfRange(f"k_users must be an integer in [1, {MAX_USERS}], got {k_users}")
    return cell_rate / k_users


@dataclass(frozen=True)
class ThroughputSeries:
    """Piecewise-constant rate: ``rates[i]`` holds from ``times[i]`` until ``times[i+1]``.

    Before ``times[0]`` the first rate applies; after the last timestamp the
    last rate is held indefinitely.
    """

    times: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) != len(self.rates) or not self.times:
            raise InvalidSpec("times and rates must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise InvalidSpec("timestamps must be strictly increasing")
        if any(not (r >= 0.0) for r in self.rates):
            raise InvalidSpec("rates must be non-negative")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def end(self) -> float:
        return self.times[-1]

    def rate_at(self, t: float) -> float:
        i = max(bisect.bisect_right(self.times, t) - 1, 0)
        return self.rates[i]

    def time_to_download(self, bits: float, start: float) -> float:
        """Wall-clock completion time of ``bits`` starting at ``start`` (``inf`` if never)."""
        if bits <= 0:
            return start
        i = max(bisect.bisect_right(self.times, start) - 1, 0)
        t = start
        remaining = bits
        n = len(self.times)
        while True:
            rate = self.rates[i]
            seg_end = self.times[i + 1] if i + 1 < n else math.inf
            if rate > 0.0:
                capacity = rate * (seg_end - t)
                if capacity >= remaining:
                    return t + remaining / rate
                remaining -= capacity
            elif seg_end == math.inf:
                return math.inf
            t = seg_end
            i += 1

    def bits_between(self, start: float, end: float) -> float:
        """Integral of the rate over ``[start, end]``."""
        if end <= start:
            return 0.0
        i = max(bisect.bisect_right(self.times, start) - 1, 0)
        total = 0.0
        t = start
        n = len(self.times)
        while t < end:
            seg_end = min(self.times[i + 1] if i + 1 < n else math.inf, end)
            total += self.rates[i] * (seg_end - t)
            t = seg_end
            i += 1
        return total


def throughput_series(
    trace: Trace,
    k_users: int,
    params: Optional[Mapping[NetworkType, NetworkParams]] = None,
) -> ThroughputSeries:
    """Per-user rate at every trace sample, each using its own RAT's parameters."""
    params = DEFAULT_PARAMS if params is None else params
    rates = tuple(
        per_user_throughput(cell_throughput(s.received_power, params[s.network]), k_users)
        for s in trace.samples
    )
    return ThroughputSeries(trace.timestamps, rates)
