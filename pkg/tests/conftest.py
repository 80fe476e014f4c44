import numpy as np
import pytest

from iobba.detector import fit_detector
from iobba.trace import (
    CoverageState,
    Normal,
    QuantizedLogNormal,
    SynthesisSpec,
    concat_samples,
    synthesize_trace,
    transition_corpus,
)

INDOOR = CoverageState.INDOOR
OUTDOOR = CoverageState.OUTDOOR


def two_phase_spec(outdoor_s=100.0, indoor_s=100.0, trace_id="two-phase", **kw):
    return SynthesisSpec(
        timeline=((outdoor_s, OUTDOOR), (indoor_s, INDOOR)),
        power={OUTDOOR: Normal(-85.0, 5.0), INDOOR: Normal(-105.0, 5.0)},
        radius={OUTDOOR: QuantizedLogNormal(1.5, 0.5), INDOOR: QuantizedLogNormal(3.0, 0.6)},
        trace_id=trace_id,
        **kw,
    )


@pytest.fixture(scope="session")
def labeled_traces():
    return [synthesize_trace(two_phase_spec(600.0, 600.0, trace_id=f"lab{i}"), seed=i) for i in range(3)]


@pytest.fixture(scope="session")
def model(labeled_traces):
    return fit_detector(concat_samples(labeled_traces))


@pytest.fixture(scope="session")
def small_corpus():
    return transition_corpus(4, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def const_trace(duration=3000.0, power=-90.0, truth=OUTDOOR, trace_id="const"):
    from iobba.trace import NetworkType, Trace, TraceSample

    n = int(duration)
    return Trace(trace_id, tuple(TraceSample(float(t), NetworkType.G4, power, 5.0, truth) for t in range(n)))


def buffer_violations(log, b_max, seg):
    """Check buffer bounds and conservation along a session log.

    Returns the largest absolute conservation error: downloaded seconds minus
    played seconds minus buffer level, at every buffer sample.
    """
    from iobba.simulator import EventKind

    completions = sorted(e.wall_time for e in log.of_kind(EventKind.SEGMENT_COMPLETED))
    worst = 0.0
    played = 0.0
    prev = None
    done = 0
    for s in log.buffer:
        assert -1e-9 <= s.buffer <= b_max + 1e-9, (s, b_max)
        if prev is not None:
            assert s.wall_time >= prev.wall_time
            if prev.playing:
                played += s.wall_time - prev.wall_time
        while done < len(completions) and completions[done] <= s.wall_time:
            done += 1
        worst = max(worst, abs(done * seg - played - s.buffer))
        prev = s
    return worst


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager factory recording one PASS/FAIL line per acceptance criterion."""
    import contextlib
    import time

    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    @contextlib.contextmanager
    def record(number, title, budget_s):
        details = []
        start = time.perf_counter()
        try:
            yield details
            elapsed = time.perf_counter() - start
            assert elapsed < budget_s, f"took {elapsed:.1f} s, budget {budget_s} s"
        except BaseException as exc:
            lines[number] = f"criterion {number:2d} FAIL  {title}: {exc!s:.300}"
            print(lines[number])
            raise
        extra = "; ".join(details)
        lines[number] = f"criterion {number:2d} PASS  {title} ({elapsed:.2f} s){': ' + extra if extra else ''}"
        print(lines[number])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
