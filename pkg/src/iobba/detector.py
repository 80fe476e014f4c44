"""Indoor/outdoor MAP detection from received power and confidence radius.

Class-conditional densities are piecewise-constant over fixed bins. Power
densities come straight from histograms; the confidence radius is reported
by GNSS chip sets on a coarse grid, so its density is obtained by fitting a
log-normal CDF to the quantized empirical CDF and discretizing the fit.

Both observables are fused with equal class priors: the decision is the
argmax of ``obs_power(S) * obs_radius(S)``, ties going to Indoor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import optimize, special

from .errors import (
    DegenerateSupport,
    EmptyInput,
    FitDiverged,
    InsufficientData,
    LengthMismatch,
    ModelFormatError,
)
from .trace import CoverageState, Trace, TraceSample

DEFAULT_FLOOR = 1e-6
MIN_SAMPLES = 10
MAX_FIT_RMS = 0.1


class Observable(Enum):
    POWER = "power"
    RADIUS = "radius"


@dataclass(frozen=True)
class BinningPolicy:
    power_edges: tuple[float, ...] = tuple(float(x) for x in np.arange(-130.0, -39.0, 1.0))
    radius_edges: tuple[float, ...] = tuple(float(x) for x in np.geomspace(1.0, 200.0, 61))

    def edges_for(self, observable: Observable) -> tuple[float, ...]:
        return self.power_edges if observable is Observable.POWER else self.radius_edges


DEFAULT_BINNING = BinningPolicy()


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Piecewise-constant density over ``bin_edges``.

    ``fit`` holds ``(mu, sigma)`` of the log-normal the density was
    discretized from, when it came from :func:`fit_radius_model`.
    """

    bin_edges: tuple[float, ...]
    densities: tuple[float, ...]
    state: CoverageState
    observable: Observable
    smoothing_floor: float = DEFAULT_FLOOR
    fit: Optional[tuple[float, float]] = None
    _edges: np.ndarray = field(init=False, repr=False, compare=False)
    _dens: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        dens = np.asarray(self.densities, dtype=float)
        if len(edges) < 3 or len(dens) != len(edges) - 1:
            raise ModelFormatError("need at least 2 bins and len(densities) == len(edges) - 1")
        if np.any(np.diff(edges) <= 0):
            raise ModelFormatError("bin edges must be strictly increasing")
        if np.any(dens < 0) or not np.all(np.isfinite(dens)):
            raise ModelFormatError("densities must be finite and non-negative")
        total = float(np.sum(dens * np.diff(edges)))
        if abs(total - 1.0) > 1e-9:
            raise ModelFormatError(f"densities integrate to {total!r}, not 1")
        if not self.smoothing_floor > 0:
            raise ModelFormatError("smoothing_floor must be positive")
        object.__setattr__(self, "bin_edges", tuple(float(e) for e in edges))
        object.__setattr__(self, "densities", tuple(float(d) for d in dens))
        object.__setattr__(self, "_edges", edges)
        object.__setattr__(self, "_dens", dens)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self._edges)

    @property
    def masses(self) -> np.ndarray:
        return self._dens * self.widths

    def density(self, value: float) -> float:
        """Density at ``value``; the smoothing floor outside the support. Right edge is inclusive."""
        edges = self._edges
        if not (edges[0] <= value <= edges[-1]):
            return self.smoothing_floor
        i = min(int(np.searchsorted(edges, value, side="right")) - 1, len(self._dens) - 1)
        return float(self._dens[i])

    def densities_at(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        edges = self._edges
        idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(self._dens) - 1)
        out = self._dens[idx]
        inside = (values >= edges[0]) & (values <= edges[-1])
        return np.where(inside, out, self.smoothing_floor)

    def cdf(self, value: float) -> float:
        edges = self._edges
        if value <= edges[0]:
            return 0.0
        if value >= edges[-1]:
            return 1.0
        i = int(np.searchsorted(edges, value, side="right")) - 1
        return float(np.sum(self.masses[:i]) + self._dens[i] * (value - edges[i]))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` values: a bin by its mass, then uniformly inside it."""
        p = self.masses / self.masses.sum()
        idx = rng.choice(len(p), size=n, p=p)
        lo = self._edges[idx]
        return lo + rng.random(n) * (self._edges[idx + 1] - lo)


def _apply_floor(raw: np.ndarray, widths: np.ndarray, floor: float) -> np.ndarray:
    """Normalize ``raw`` to unit mass with every bin at least ``floor``.

    Floored bins sit exactly at ``floor``; the remaining mass is spread over
    the other bins in proportion to ``raw``.
    """
    if floor * widths.sum() >= 1.0:
        raise DegenerateSupport(f"smoothing floor {floor} too large for a support of width {widths.sum()}")
    floored = raw <= 0
    while True:
        free_mass = 1.0 - floor * widths[floored].sum()
        live = ~floored
        scale = free_mass / np.sum(raw[live] * widths[live])
        candidate = np.where(floored, floor, raw * scale)
        newly = live & (candidate < floor)
        if not newly.any():
            return candidate
        floored |= newly


def _check_samples(samples: Sequence[float]) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < MIN_SAMPLES:
        raise InsufficientData(f"need at least {MIN_SAMPLES} samples, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise InsufficientData("samples must be finite")
    return x


def fit_empirical_pdf(
    samples: Sequence[float],
    state: CoverageState,
    observable: Observable,
    edges: Optional[Sequence[float]] = None,
    smoothing_floor: float = DEFAULT_FLOOR,
) -> EmpiricalDistribution:
    """Histogram density over ``edges``. Samples outside the edges are dropped."""
    x = _check_samples(samples)
    if np.all(x == x[0]):
        raise DegenerateSupport(f"all {len(x)} samples equal {x[0]}")
    edges_arr = np.asarray(DEFAULT_BINNING.edges_for(observable) if edges is None else edges, dtype=float)
    inside = x[(x >= edges_arr[0]) & (x <= edges_arr[-1])]
    if len(inside) < MIN_SAMPLES:
        raise InsufficientData(
            f"only {len(inside)} of {len(x)} samples fall inside [{edges_arr[0]}, {edges_arr[-1]}]"
        )
    counts, _ = np.histogram(inside, bins=edges_arr)
    widths = np.diff(edges_arr)
    raw = counts / (len(inside) * widths)
    dens = _apply_floor(raw, widths, smoothing_floor)
    return EmpiricalDistribution(
        tuple(edges_arr), tuple(dens), state, observable, smoothing_floor
    )


def _lognormal_cdf(x, mu, sigma):
    return special.ndtr((np.log(x) - mu) / sigma)


def fit_lognormal_cdf(samples: Sequence[float]) -> tuple[float, float]:
    """Least-squares log-normal fit to the empirical CDF of (possibly quantized) samples.

    For values rounded to the nearest level, the fraction of samples at or
    below level ``v_k`` is the true CDF at the rounding boundary, the midpoint
    between ``v_k`` and the next level; the fit targets those midpoints.
    """
    x = _check_samples(samples)
    if np.any(x <= 0):
        raise InsufficientData(f"confidence radius samples must be positive ({int(np.sum(x <= 0))} are not)")
    levels, counts = np.unique(x, return_counts=True)
    if len(levels) < 2:
        raise DegenerateSupport(f"all {len(x)} samples equal {levels[0]}")
    logs = np.log(x)
    mu0 = float(np.mean(logs))
    sigma0 = max(float(np.std(logs)), 1e-3)
    ecdf = np.cumsum(counts)[:-1] / len(x)
    mids = 0.5 * (levels[:-1] + levels[1:])
    if len(mids) < 2:
        return mu0, sigma0

    def residuals(p):
        return _lognormal_cdf(mids, p[0], math.exp(p[1])) - ecdf

    try:
        res = optimize.least_squares(residuals, x0=[mu0, math.log(sigma0)], method="lm")
    except (ValueError, RuntimeError) as exc:
        raise FitDiverged(str(exc)) from None
    rms = float(np.sqrt(np.mean(res.fun ** 2)))
    mu, sigma = float(res.x[0]), float(math.exp(res.x[1]))
    if not (res.success and np.isfinite(mu) and np.isfinite(sigma)) or rms > MAX_FIT_RMS:
        raise FitDiverged(f"log-normal fit residual {rms:.3g} (limit {MAX_FIT_RMS})")
    return mu, sigma


def fit_radius_model(
    samples: Sequence[float],
    state: CoverageState,
    edges: Optional[Sequence[float]] = None,
    smoothing_floor: float = DEFAULT_FLOOR,
) -> EmpiricalDistribution:
    """Fitted log-normal radius density discretized onto the radius bins."""
    mu, sigma = fit_lognormal_cdf(samples)
    edges_arr = np.asarray(DEFAULT_BINNING.radius_edges if edges is None else edges, dtype=float)
    if edges_arr[0] <= 0:
        raise DegenerateSupport("radius bins must be positive")
    mass = np.diff(_lognormal_cdf(edges_arr, mu, sigma))
    total = mass.sum()
    if not total > 1e-12:
        raise FitDiverged(f"fitted log-normal (mu={mu:.3g}, sigma={sigma:.3g}) has no mass on the radius grid")
    widths = np.diff(edges_arr)
    dens = _apply_floor(mass / total / widths, widths, smoothing_floor)
    return EmpiricalDistribution(
        tuple(edges_arr), tuple(dens), state, Observable.RADIUS, smoothing_floor, fit=(mu, sigma)
    )


# ---------------------------------------------------------------------------
# Fusion


@dataclass(frozen=True)
class Observation:
    indoor: float
    outdoor: float

    def __getitem__(self, state: CoverageState) -> float:
        return self.indoor if state is CoverageState.INDOOR else self.outdoor


UNIFORM = Observation(0.5, 0.5)


def observe(dist_indoor: EmpiricalDistribution, dist_outdoor: EmpiricalDistribution, value: float) -> Observation:
    if dist_indoor.observable is not dist_outdoor.observable:
        raise ValueError("both distributions must describe the same observable")
    p_in = dist_indoor.density(value)
    p_out = dist_outdoor.density(value)
    total = p_in + p_out
    if total <= 0:
        return UNIFORM
    return Observation(p_in / total, p_out / total)


def fuse(obs_power: Observation, obs_radius: Observation) -> tuple[CoverageState, float]:
    """MAP decision and its normalized posterior weight."""
    a_in = obs_power.indoor * obs_radius.indoor
    a_out = obs_power.outdoor * obs_radius.outdoor
    total = a_in + a_out
    if total <= 0:
        return CoverageState.INDOOR, 0.5
    if a_in >= a_out:
        return CoverageState.INDOOR, a_in / total
    return CoverageState.OUTDOOR, a_out / total


@dataclass(frozen=True)
class DetectorModel:
    power_indoor: EmpiricalDistribution
    power_outdoor: EmpiricalDistribution
    radius_indoor: EmpiricalDistribution
    radius_outdoor: EmpiricalDistribution
    smoothing_floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if not self.smoothing_floor > 0:
            raise ModelFormatError("smoothing_floor must be positive")
        for name, obs, state in (
            ("power_indoor", Observable.POWER, CoverageState.INDOOR),
            ("power_outdoor", Observable.POWER, CoverageState.OUTDOOR),
            ("radius_indoor", Observable.RADIUS, CoverageState.INDOOR),
            ("radius_outdoor", Observable.RADIUS, CoverageState.OUTDOOR),
        ):
            d = getattr(self, name)
            if d.observable is not obs or d.state is not state:
                raise ModelFormatError(f"{name} holds {d.observable.value}/{d.state.label}")

    def observe_power(self, power: float) -> Observation:
        return observe(self.power_indoor, self.power_outdoor, power)

    def observe_radius(self, radius: float) -> Observation:
        return observe(self.radius_indoor, self.radius_outdoor, radius)


def map_classify(
    model: DetectorModel, power: float, radius: float, power_only: bool = False
) -> tuple[CoverageState, float]:
    """Classify one reading. ``power_only`` replaces the radius observation with a uniform one."""
    obs_z = UNIFORM if power_only else model.observe_radius(radius)
    return fuse(model.observe_power(power), obs_z)


def detect_series(
    model: DetectorModel, trace: Trace, power_only: bool = False
) -> list[tuple[float, CoverageState]]:
    return [
        (s.timestamp, map_classify(model, s.received_power, s.confidence_radius, power_only)[0])
        for s in trace.samples
    ]


def fit_detector(
    samples: Iterable[TraceSample],
    binning: BinningPolicy = DEFAULT_BINNING,
    smoothing_floor: float = DEFAULT_FLOOR,
) -> DetectorModel:
    """Fit all four class-conditional densities from labeled samples."""
    samples = list(samples)
    fitted = {}
    for state in CoverageState:
        own = [s for s in samples if s.truth is state]
        if len(own) < MIN_SAMPLES:
            raise InsufficientData(
                f"{state.label} class has {len(own)} labeled samples, need at least {MIN_SAMPLES}"
            )
        fitted[("power", state)] = fit_empirical_pdf(
            [s.received_power for s in own], state, Observable.POWER, binning.power_edges, smoothing_floor
        )
        fitted[("radius", state)] = fit_radius_model(
            [s.confidence_radius for s in own], state, binning.radius_edges, smoothing_floor
        )
    return DetectorModel(
        fitted[("power", CoverageState.INDOOR)],
        fitted[("power", CoverageState.OUTDOOR)],
        fitted[("radius", CoverageState.INDOOR)],
        fitted[("radius", CoverageState.OUTDOOR)],
        smoothing_floor,
    )


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[detected, true]`` with rows/columns in CoverageState order."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def probabilities(self) -> np.ndarray:
        """P(detected | true); a column with no true samples is NaN."""
        col = self.counts.sum(axis=0, keepdims=True).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.counts / col

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def recall(self, state: CoverageState) -> float:
        return float(self.probabilities[int(state), int(state)])

    def to_csv(self) -> str:
        p = self.probabilities
        lines = ["detected,true,count,probability"]
        for d in CoverageState:
            for t in CoverageState:
                lines.append(f"{d.label},{t.label},{int(self.counts[d, t])},{float(p[d, t])!r}")
        lines.append(f"accuracy,all,{self.total},{self.accuracy!r}")
        return "\n".join(lines) + "\n"


def confusion_matrix(predicted: Sequence[CoverageState], truth: Sequence[CoverageState]) -> ConfusionMatrix:
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(truth)} labels")
    if not predicted:
        raise EmptyInput("no predictions")
    counts = np.zeros((2, 2), dtype=np.int64)
    for d, t in zip(predicted, truth):
        counts[int(d), int(t)] += 1
    return ConfusionMatrix(counts)


def _refined_grid(a: EmpiricalDistribution, b: EmpiricalDistribution):
    edges = np.union1d(a._edges, b._edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    return np.diff(edges), a.densities_at(mids), b.densities_at(mids)


def bayes_accuracy(model: DetectorModel, power_only: bool = False) -> float:
    """Minimum-error accuracy for equal priors by integration over the joint bin grid.

    Assumes observations are drawn from the model's own densities, i.e.
    inside the supports.
    """
    wy, py_in, py_out = _refined_grid(model.power_indoor, model.power_outdoor)
    if power_only:
        return 0.5 * float(np.sum(wy * np.maximum(py_in, py_out)))
    wz, pz_in, pz_out = _refined_grid(model.radius_indoor, model.radius_outdoor)
    joint_in = np.outer(py_in * wy, pz_in * wz)
    joint_out = np.outer(py_out * wy, pz_out * wz)
    return 0.5 * float(np.sum(np.maximum(joint_in, joint_out)))


def sample_from_model(
    model: DetectorModel, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, list[CoverageState]]:
    """Draw ``n`` labeled (power, radius) pairs with equal class priors."""
    labels = rng.integers(0, 2, size=n)
    power = np.empty(n)
    radius = np.empty(n)
    for state in CoverageState:
        mask = labels == int(state)
        k = int(mask.sum())
        pd = model.power_indoor if state is CoverageState.INDOOR else model.power_outdoor
        rd = model.radius_indoor if state is CoverageState.INDOOR else model.radius_outdoor
        power[mask] = pd.sample(rng, k)
        radius[mask] = rd.sample(rng, k)
    return power, radius, [CoverageState(int(v)) for v in labels]


# ---------------------------------------------------------------------------
# Serialization
#
# Text format, one "key = value" per line, sections per distribution:
#
#   # iobba detector model
#   format_version = 1
#   smoothing_floor = 1e-06
#   [power.indoor]
#   fit = none            (or "mu sigma")
#   edges = e0 e1 ...
#   densities = d0 d1 ...
#
# Floats are written with repr(), which round-trips exactly.

FORMAT_VERSION = 1
_SECTIONS = (
    ("power_indoor", Observable.POWER, CoverageState.INDOOR),
    ("power_outdoor", Observable.POWER, CoverageState.OUTDOOR),
    ("radius_indoor", Observable.RADIUS, CoverageState.INDOOR),
    ("radius_outdoor", Observable.RADIUS, CoverageState.OUTDOOR),
)


def dumps_model(model: DetectorModel) -> str:
    lines = ["# iobba detector model", f"format_version = {FORMAT_VERSION}",
             f"smoothing_floor = {model.smoothing_floor!r}"]
    for attr, obs, state in _SECTIONS:
        d: EmpiricalDistribution = getattr(model, attr)
        lines.append(f"[{obs.value}.{state.label}]")
        lines.append(f"smoothing_floor = {d.smoothing_floor!r}")
        lines.append("fit = " + ("none" if d.fit is None else f"{d.fit[0]!r} {d.fit[1]!r}"))
        lines.append("edges = " + " ".join(repr(e) for e in d.bin_edges))
        lines.append("densities = " + " ".join(repr(v) for v in d.densities))
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> DetectorModel:
    header: dict[str, str] = {}
    sections: dict[str, dict[str, str]] = {}
    current = header
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], {})
            continue
        if "=" not in line:
            raise ModelFormatError(f"line {n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        current[key] = value
    try:
        if int(header["format_version"]) != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format_version {header['format_version']}")
        floor = float(header["smoothing_floor"])
        dists = {}
        for attr, obs, state in _SECTIONS:
            sec = sections[f"{obs.value}.{state.label}"]
            fit = None if sec["fit"] == "none" else tuple(float(v) for v in sec["fit"].split())
            dists[attr] = EmpiricalDistribution(
                tuple(float(v) for v in sec["edges"].split()),
                tuple(float(v) for v in sec["densities"].split()),
                state,
                obs,
                float(sec["smoothing_floor"]),
                fit=fit,
            )
    except KeyError as exc:
        raise ModelFormatError(f"missing key or section {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(str(exc)) from None
    return DetectorModel(smoothing_floor=floor, **dists)


def save_model(model: DetectorModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> DetectorModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
