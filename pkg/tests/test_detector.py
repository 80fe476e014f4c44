import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from iobba.detector import (
    UNIFORM,
    DetectorModel,
    EmpiricalDistribution,
    Observable,
    Observation,
    _apply_floor,
    bayes_accuracy,
    confusion_matrix,
    detect_series,
    dumps_model,
    fit_detector,
    fit_empirical_pdf,
    fit_lognormal_cdf,
    fit_radius_model,
    fuse,
    load_model,
    loads_model,
    map_classify,
    save_model,
)
from iobba.errors import (
    DegenerateSupport,
    EmptyInput,
    InsufficientData,
    LengthMismatch,
    ModelFormatError,
)
from iobba.trace import CoverageState, NetworkType, Normal, TraceSample

from conftest import INDOOR, OUTDOOR

POWER, RADIUS = Observable.POWER, Observable.RADIUS


def dist(edges, dens, state, obs, floor=1e-6):
    return EmpiricalDistribution(tuple(edges), tuple(dens), state, obs, floor)


def toy_model():
    """Two bins per observable, densities chosen for easy hand arithmetic."""
    return DetectorModel(
        dist([0, 1, 2], [0.8, 0.2], INDOOR, POWER),
        dist([0, 1, 2], [0.3, 0.7], OUTDOOR, POWER),
        dist([0, 1, 2], [0.4, 0.6], INDOOR, RADIUS),
        dist([0, 1, 2], [0.9, 0.1], OUTDOOR, RADIUS),
    )


class TestFloor:
    def test_hand_example(self):
        # Two empty bins are lifted to 0.01 each; the other 0.98 keeps the 3:1 ratio.
        got = _apply_floor(np.array([3.0, 1.0, 0.0, 0.0]), np.ones(4), 0.01)
        np.testing.assert_allclose(got, [0.735, 0.245, 0.01, 0.01], rtol=1e-14)

    def test_cascading_floor(self):
        # The 1-count bin drops under the floor after the empty bins are lifted.
        got = _apply_floor(np.array([1000.0, 1.0, 0.0]), np.ones(3), 0.01)
        np.testing.assert_allclose(got, [0.98, 0.01, 0.01], rtol=1e-14)

    def test_floor_too_large(self):
        with pytest.raises(DegenerateSupport):
            _apply_floor(np.ones(10), np.ones(10), 0.1)

    @settings(max_examples=100)
    @given(
        st.lists(st.integers(0, 50), min_size=2, max_size=40).filter(lambda c: sum(c) > 0),
        st.floats(1e-8, 1e-3),
    )
    def test_unit_mass_and_floor(self, counts, floor):
        widths = np.linspace(0.5, 2.0, len(counts))
        got = _apply_floor(np.asarray(counts, float), widths, floor)
        assert np.sum(got * widths) == pytest.approx(1.0, abs=1e-12)
        assert np.all(got >= floor * (1 - 1e-12))


class TestHistogram:
    def test_hand_histogram(self):
        x = [0.5] * 6 + [1.5] * 3 + [2.5] + [9.0] * 5  # last five fall outside
        d = fit_empirical_pdf(x, INDOOR, POWER, edges=[0, 1, 2, 3, 4], smoothing_floor=1e-3)
        # 10 in-range samples; bin 4 floored at 1e-3, the rest share 0.999 as 6:3:1.
        np.testing.assert_allclose(d.densities, [0.5994, 0.2997, 0.0999, 0.001], rtol=1e-12)
        assert d.cdf(1.0) == pytest.approx(0.5994)
        assert d.density(100.0) == 1e-3

    def test_default_power_bins(self, rng):
        d = fit_empirical_pdf(rng.normal(-100, 5, 500), OUTDOOR, POWER)
        assert d.bin_edges[0] == -130.0 and d.bin_edges[-1] == -40.0
        assert len(d.densities) == 90

    def test_errors(self):
        with pytest.raises(InsufficientData):
            fit_empirical_pdf([1.0] * 5, INDOOR, POWER)
        with pytest.raises(DegenerateSupport):
            fit_empirical_pdf([-90.0] * 20, INDOOR, POWER)
        with pytest.raises(InsufficientData):
            fit_empirical_pdf(list(np.linspace(0, 10, 20)), INDOOR, POWER)  # all above -40 dBm

    def test_density_edges(self):
        d = dist([0, 1, 2], [0.25, 0.75], INDOOR, POWER, floor=1e-4)
        assert d.density(0.0) == 0.25
        assert d.density(1.0) == 0.75
        assert d.density(2.0) == 0.75  # right edge inclusive
        assert d.density(2.0001) == 1e-4
        np.testing.assert_array_equal(d.densities_at(np.array([-1, 0.5, 1.5, 3])), [1e-4, 0.25, 0.75, 1e-4])

    def test_rejects_bad_mass(self):
        with pytest.raises(ModelFormatError):
            dist([0, 1, 2], [0.5, 0.6], INDOOR, POWER)


class TestLogNormalFit:
    @pytest.mark.parametrize("mu, sigma", [(1.5, 0.5), (3.0, 0.6), (2.0, 0.3)])
    def test_exact_staircase_recovered(self, mu, sigma):
        # Counts proportional to the true probability of each rounding cell, so the
        # ECDF matches the true CDF at every midpoint up to integer rounding.
        levels = np.arange(1.0, 400.0)
        upper = np.append(levels[:-1] + 0.5, np.inf)
        lower = np.insert(upper[:-1], 0, 0.0)
        p = stats.lognorm.cdf(upper, sigma, scale=math.exp(mu)) - stats.lognorm.cdf(lower, sigma, scale=math.exp(mu))
        counts = np.round(p * 1_000_000).astype(int)
        x = np.repeat(levels, counts)
        got_mu, got_sigma = fit_lognormal_cdf(x)
        assert got_mu == pytest.approx(mu, abs=2e-3)
        assert got_sigma == pytest.approx(sigma, abs=2e-3)

    def test_sampled_quantized(self, rng):
        x = np.maximum(np.round(rng.lognormal(3.0, 0.6, 20_000)), 1.0)
        mu, sigma = fit_lognormal_cdf(x)
        assert mu == pytest.approx(3.0, abs=0.03)
        assert sigma == pytest.approx(0.6, abs=0.03)

    def test_two_levels_uses_moments(self):
        x = [2.0] * 10 + [8.0] * 10
        mu, sigma = fit_lognormal_cdf(x)
        assert mu == pytest.approx(math.log(4.0))
        assert sigma == pytest.approx(math.log(2.0))

    def test_single_level(self):
        with pytest.raises(DegenerateSupport):
            fit_lognormal_cdf([5.0] * 30)

    def test_non_positive(self):
        with pytest.raises(InsufficientData):
            fit_lognormal_cdf([0.0] + [5.0] * 30)

    def test_radius_model_density(self, rng):
        x = np.maximum(np.round(rng.lognormal(1.5, 0.5, 5000)), 1.0)
        d = fit_radius_model(x, OUTDOOR)
        assert d.fit is not None and len(d.densities) == 60
        assert d.bin_edges[0] == 1.0 and d.bin_edges[-1] == pytest.approx(200.0)
        assert float(np.sum(d.masses)) == pytest.approx(1.0, abs=1e-12)
        # The discretized density is the fitted CDF difference over each bin.
        mu, sigma = d.fit
        cdf = stats.lognorm.cdf(np.array(d.bin_edges), sigma, scale=math.exp(mu))
        mass = np.diff(cdf) / (cdf[-1] - cdf[0])
        big = mass > 1e-4
        # Floored tail bins take at most floor * support width = 2e-4 of the mass.
        np.testing.assert_allclose(d.masses[big], mass[big], rtol=3e-4)


class TestFusion:
    def test_hand_fusion(self):
        state, w = fuse(Observation(0.8, 0.2), Observation(0.3, 0.7))
        assert state is INDOOR
        assert w == pytest.approx(0.24 / 0.38)
        state, w = fuse(Observation(0.6, 0.4), Observation(0.2, 0.8))
        assert state is OUTDOOR and w == pytest.approx(0.32 / 0.44)

    def test_tie_goes_indoor(self):
        assert fuse(UNIFORM, UNIFORM) == (INDOOR, 0.5)
        assert fuse(Observation(0.8, 0.2), Observation(0.2, 0.8))[0] is INDOOR

    def test_toy_model(self):
        m = toy_model()
        # power bin 0: (0.8, 0.3); radius bin 1: (0.6, 0.1)
        state, w = map_classify(m, 0.5, 1.5)
        assert state is INDOOR and w == pytest.approx((0.8 / 1.1 * 0.6 / 0.7) / (0.8 / 1.1 * 0.6 / 0.7 + 0.3 / 1.1 * 0.1 / 0.7))
        # power bin 1 favours outdoor 0.7:0.2, radius bin 0 favours outdoor 0.9:0.4
        assert map_classify(m, 1.5, 0.5)[0] is OUTDOOR
        # power bin 1 with radius bin 1: 0.2*0.6 = 0.12 vs 0.7*0.1 = 0.07, indoor
        assert map_classify(m, 1.5, 1.5)[0] is INDOOR
        assert map_classify(m, 1.5, 1.5, power_only=True)[0] is OUTDOOR

    @settings(max_examples=200)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_weight_at_least_half(self, a, b):
        _, w = fuse(Observation(a, 1 - a), Observation(b, 1 - b))
        assert 0.5 <= w <= 1.0

    def test_detect_series(self, model, labeled_traces):
        tr = labeled_traces[0]
        got = detect_series(model, tr)
        assert [t for t, _ in got] == list(tr.timestamps)
        acc = np.mean([d is s.truth for (_, d), s in zip(got, tr.samples)])
        assert acc > 0.95


class TestFitDetector:
    def test_missing_class(self):
        samples = [TraceSample(float(i), NetworkType.G4, -90.0 + i % 3, 5.0 + i % 4, OUTDOOR) for i in range(50)]
        with pytest.raises(InsufficientData, match="indoor"):
            fit_detector(samples)

    def test_fitted_supports(self, model):
        assert model.power_indoor.state is INDOOR and model.radius_outdoor.observable is RADIUS
        assert model.radius_indoor.fit[0] == pytest.approx(3.0, abs=0.1)


class TestEvaluation:
    def test_confusion_hand(self):
        pred = [INDOOR, INDOOR, OUTDOOR, OUTDOOR, OUTDOOR]
        true = [INDOOR, OUTDOOR, OUTDOOR, OUTDOOR, INDOOR]
        cm = confusion_matrix(pred, true)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [1, 2]])
        np.testing.assert_allclose(cm.probabilities, [[0.5, 1 / 3], [0.5, 2 / 3]])
        assert cm.accuracy == pytest.approx(0.6)
        assert cm.recall(INDOOR) == 0.5
        assert cm.to_csv().splitlines()[1] == "indoor,indoor,1,0.5"

    def test_confusion_empty_column(self):
        cm = confusion_matrix([INDOOR, OUTDOOR], [OUTDOOR, OUTDOOR])
        assert math.isnan(cm.recall(INDOOR))
        assert cm.recall(OUTDOOR) == 0.5

    def test_confusion_errors(self):
        with pytest.raises(LengthMismatch):
            confusion_matrix([INDOOR], [])
        with pytest.raises(EmptyInput):
            confusion_matrix([], [])

    def test_bayes_toy(self):
        m = toy_model()
        # Joint cell masses (in, out): (0,0) .32/.27 (0,1) .48/.03 (1,0) .08/.63 (1,1) .12/.07
        assert bayes_accuracy(m) == pytest.approx(0.5 * (0.32 + 0.48 + 0.63 + 0.12), abs=1e-15)
        assert bayes_accuracy(m, power_only=True) == pytest.approx(0.5 * (0.8 + 0.7), abs=1e-15)

    def test_bayes_mismatched_edges(self):
        # Outdoor density spans one wide bin; union-of-edges integration must split it.
        m = DetectorModel(
            dist([0, 1, 2], [0.9, 0.1], INDOOR, POWER),
            dist([0, 2, 3], [0.4, 0.2], OUTDOOR, POWER),
            dist([0, 1, 2], [0.5, 0.5], INDOOR, RADIUS),
            dist([0, 1, 2], [0.5, 0.5], OUTDOOR, RADIUS),
        )
        # cells [0,1]: .9 vs .4, [1,2]: .1 vs .4, [2,3]: 0 vs .2 (indoor floor 1e-6 outside its support)
        assert bayes_accuracy(m) == pytest.approx(0.5 * (0.9 + 0.4 + 0.2), abs=1e-6)


class TestSerialization:
    def test_round_trip_exact(self, model, tmp_path):
        assert loads_model(dumps_model(model)) == model
        path = tmp_path / "m.txt"
        save_model(model, path)
        assert load_model(path) == model
        assert dumps_model(load_model(path)) == dumps_model(model)

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda t: t.replace("format_version = 1", "format_version = 2"),
            lambda t: t.replace("[radius.outdoor]", "[radius.elsewhere]"),
            lambda t: t.replace("densities = ", "densities = 5 ", 1),
            lambda t: t + "garbage line\n",
        ],
    )
    def test_corrupt(self, model, mutate):
        with pytest.raises(ModelFormatError):
            loads_model(mutate(dumps_model(model)))


class TestWorkedExamples:
    def test_uniform_histogram(self, rng):
        # Binomial bound: each bin holds ~100 of 1000 samples, sd ~9.5, so 20% is > 2 sd.
        x = rng.uniform(-100.0, -90.0, 1000)
        d = fit_empirical_pdf(x, INDOOR, POWER, edges=np.linspace(-100.0, -90.0, 11))
        np.testing.assert_allclose(d.densities, 0.1, rtol=0.2)

    def test_empty_interior_bin_gets_floor(self, rng):
        x = np.concatenate([rng.uniform(0, 1, 50), rng.uniform(2, 3, 50)])
        d = fit_empirical_pdf(x, INDOOR, POWER, edges=[0, 1, 2, 3], smoothing_floor=1e-4)
        assert d.densities[1] == pytest.approx(1e-4, rel=1e-12)

    def test_lognormal_ks(self, rng):
        x = np.maximum(np.round(rng.lognormal(2.0, 0.5, 5000)), 1.0)
        mu, sigma = fit_lognormal_cdf(x)
        grid = np.linspace(1.0, 50.0, 2000)
        ks = np.max(np.abs(stats.lognorm.cdf(grid, sigma, scale=math.exp(mu))
                           - stats.lognorm.cdf(grid, 0.5, scale=math.exp(2.0))))
        assert ks <= 0.05

    def test_two_level_cdf_valid(self):
        d = fit_radius_model([3.0] * 20 + [4.0] * 20, INDOOR)
        cdf = [d.cdf(v) for v in np.linspace(0.5, 250, 200)]
        assert all(b >= a for a, b in zip(cdf, cdf[1:])) and cdf[-1] == 1.0

    def test_observe_examples(self):
        from iobba.detector import observe

        a = dist([0, 1, 2], [0.5, 0.5], INDOOR, POWER)
        b = dist([0, 1, 2], [0.5, 0.5], OUTDOOR, POWER)
        assert observe(a, b, 0.5) == Observation(0.5, 0.5)
        assert observe(a, b, 10.0) == Observation(0.5, 0.5)
        c = dist([0, 1, 2], [0.03, 0.97], INDOOR, POWER)
        d = dist([0, 1, 2], [0.01, 0.99], OUTDOOR, POWER)
        got = observe(c, d, 0.5)
        assert got.indoor == pytest.approx(0.75) and got.outdoor == pytest.approx(0.25)

    def test_fuse_examples(self):
        state, w = fuse(Observation(0.8, 0.2), Observation(0.6, 0.4))
        assert state is INDOOR and w == pytest.approx(0.48 / 0.56)
        assert fuse(Observation(0.1, 0.9), Observation(0.2, 0.8))[0] is OUTDOOR

    def test_all_indoor_series_and_purity(self, model):
        from iobba.trace import Trace

        tr = Trace("in", tuple(TraceSample(float(i), NetworkType.G4, -110.0, 30.0, INDOOR) for i in range(50)))
        assert {s for _, s in detect_series(model, tr)} == {INDOOR}
        assert detect_series(model, tr) == detect_series(model, tr)

    def test_confusion_examples(self):
        states = [INDOOR, OUTDOOR, OUTDOOR, INDOOR]
        cm = confusion_matrix(states, states)
        np.testing.assert_array_equal(cm.probabilities, np.eye(2))
        assert cm.accuracy == 1.0
        cm = confusion_matrix([INDOOR] * 4, [INDOOR, INDOOR, OUTDOOR, OUTDOOR])
        np.testing.assert_array_equal(cm.probabilities, [[1, 1], [0, 0]])
        assert cm.accuracy == 0.5

    def test_perfect_separation(self):
        from iobba.trace import Discrete, SynthesisSpec, synthesize_trace

        spec = SynthesisSpec(
            timeline=((300.0, OUTDOOR), (300.0, INDOOR)),
            power={OUTDOOR: Normal(-70.0, 1.0), INDOOR: Normal(-120.0, 1.0)},
            radius={OUTDOOR: Discrete((3.0, 4.0), (1.0, 1.0)), INDOOR: Discrete((60.0, 80.0), (1.0, 1.0))},
        )
        tr = synthesize_trace(spec, 0)
        m = fit_detector(tr.samples)
        pred = [s for _, s in detect_series(m, tr)]
        from iobba.trace import labels_of

        assert confusion_matrix(pred, labels_of(tr)).accuracy == 1.0
