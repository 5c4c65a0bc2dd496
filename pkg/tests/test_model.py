import math
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irrlab.model import (
    InteractionTimeline,
    LatencyBreakdown,
    NegativeResidualError,
    NoisyEstimateWarning,
    RoughEstimateInputs,
    UnmeasuredTimestampError,
    dl_residual,
    il_from_timeline,
    rough_il_estimate,
    sl_from_timestamps,
    sl_residual,
    synchronous_backlog_delay,
    total_il,
)

durations = st.floats(min_value=0, max_value=1e5, allow_nan=False, allow_infinity=False)


def test_total_il_examples():
    assert total_il(LatencyBreakdown()) == 0
    assert total_il(LatencyBreakdown(1, 2, 3, 4, 5, 6, 7)) == 28
    # 174 ms round trip split evenly, server time = 5.04 capture + 12.69 compression
    wan = LatencyBreakdown(0, 0, 87, 5.04 + 12.69, 87, 0, 0)
    assert total_il(wan) == pytest.approx(191.73, abs=1e-9)
    assert abs(total_il(wan) - 191.72) <= 0.01 + 1e-9


def test_breakdown_rejects_negative():
    with pytest.raises(ValueError):
        LatencyBreakdown(sl=-1)


def test_from_round_trip_splits_evenly():
    b = LatencyBreakdown.from_round_trip(174, sl=17.73)
    assert b.nl_up == b.nl_down == 87
    assert b.nl == 174
    assert total_il(b) == pytest.approx(191.73)


@pytest.mark.parametrize(
    "t0, t7, expected",
    [(0, 0, 0.0), (0, 15190, 15.19), (1000, 192720, 191.72), (555, 555, 0.0)],
)
def test_il_from_timeline(t0, t7, expected):
    assert il_from_timeline(InteractionTimeline(t0=t0, t7=t7)) == pytest.approx(expected)


def test_il_from_timeline_unmeasured():
    with pytest.raises(UnmeasuredTimestampError) as exc:
        il_from_timeline(InteractionTimeline(t2=10, t5=20, t7=30))
    assert exc.value.field == "t0"
    assert "t0" in str(exc.value)


def test_timeline_must_be_monotone():
    with pytest.raises(ValueError):
        InteractionTimeline(t0=10, t3=5)
    InteractionTimeline(t0=0, t3=5, t7=5)


def test_sl_residual_examples():
    assert sl_residual(28, idl=1, cl=2 + 6, nl=3 + 5, dl=7) == 4
    assert sl_residual(10) == 10
    with pytest.raises(NegativeResidualError):
        sl_residual(5, idl=10)


def test_dl_residual_examples():
    assert dl_residual(28, idl=1, cl=8, nl=8, sl=4) == 7
    assert dl_residual(16) == 16
    with pytest.raises(NegativeResidualError):
        dl_residual(0, sl=1)


def test_sl_from_timestamps_examples():
    assert sl_from_timestamps(0, 500, 500, 0) == 0
    assert sl_from_timestamps(0, 0, 191720, 174) == pytest.approx(17.72)
    with pytest.warns(NoisyEstimateWarning):
        assert sl_from_timestamps(0, 0, 100000, 174) == pytest.approx(-74)


def test_sl_from_timestamps_literal_form():
    # ((t5 - t0) - nl/2) - ((t2 - t0) + nl/2), evaluated term by term
    t0, t2, t5, nl = 1234, 5000, 250000, 174.0
    literal = ((t5 - t0) / 1000 - 0.5 * nl) - ((t2 - t0) / 1000 + 0.5 * nl)
    assert sl_from_timestamps(t0, t2, t5, nl) == pytest.approx(literal, abs=1e-9)


def test_sl_from_timestamps_requires_t2_t5():
    with pytest.raises(UnmeasuredTimestampError):
        sl_from_timestamps(0, None, 10, 0)
    with pytest.raises(UnmeasuredTimestampError):
        sl_from_timestamps(0, 10, None, 0)


@pytest.mark.parametrize(
    "nl, sd, i, expected",
    [(100, 100, 0, 100), (100, 100, 7, 100), (174, 100, 2, 322), (50, 100, 5, 50)],
)
def test_synchronous_backlog_delay(nl, sd, i, expected):
    assert synchronous_backlog_delay(nl, sd, i) == expected


def test_synchronous_backlog_matches_raw_formula_in_backlog_regime():
    for i in range(10):
        assert synchronous_backlog_delay(174, 100, i) == 174 + i * (174 - 100)


@pytest.mark.parametrize(
    "rtt, render, expected", [(0, 0, 0), (174, 17.73, 191.73), (32, 16, 48)]
)
def test_rough_il_estimate(rtt, render, expected):
    assert rough_il_estimate(RoughEstimateInputs(rtt, render)) == pytest.approx(expected)


def test_rough_inputs_validated():
    with pytest.raises(ValueError):
        RoughEstimateInputs(-1, 0)


breakdowns = st.builds(LatencyBreakdown, *([durations] * 7))


@settings(max_examples=300)
@given(breakdowns)
def test_sl_round_trip(b):
    il = total_il(b)
    assert sl_residual(il, b.idl, b.cl1 + b.cl2, b.nl_up + b.nl_down, b.dl) == b.sl


@settings(max_examples=300)
@given(breakdowns)
def test_dl_round_trip(b):
    il = total_il(b)
    assert dl_residual(il, b.idl, b.cl, b.nl, b.sl) == b.dl


@given(
    st.lists(st.integers(0, 10**9), min_size=8, max_size=8),
    st.integers(-(10**9), 10**9),
)
def test_il_translation_invariant(ts, offset):
    ts = sorted(ts)
    tl = InteractionTimeline(*ts)
    shifted = tl.shifted(offset)
    assert il_from_timeline(shifted) == il_from_timeline(tl)


@given(
    st.integers(0, 10**9), st.integers(0, 10**9), st.integers(0, 10**9),
    st.integers(0, 10**9), durations,
)
def test_sl_from_timestamps_independent_of_t0(t0a, t0b, t2, t5, nl):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoisyEstimateWarning)
        assert sl_from_timestamps(t0a, t2, t5, nl) == sl_from_timestamps(t0b, t2, t5, nl)
        assert sl_from_timestamps(None, t2, t5, nl) == sl_from_timestamps(t0a, t2, t5, nl)


@given(durations, durations, st.integers(0, 10_000))
def test_backlog_increment_law(nl, sd, i):
    step = synchronous_backlog_delay(nl, sd, i + 1) - synchronous_backlog_delay(nl, sd, i)
    assert math.isclose(step, max(0.0, nl - sd), abs_tol=2e-3)
