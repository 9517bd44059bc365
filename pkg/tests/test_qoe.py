import math

import pytest
from hypothesis import given, settings, strategies as st

from ngnsim.model import MediaType
from ngnsim.qoe import (
    EmptyWindow,
    QoeReport,
    Thresholds,
    UnknownSession,
    estimate_mos,
    mos_from_impairments,
    qoe_report,
    temporal_quality,
)
from ngnsim.transport.network import FlowMetrics

GAMMA = {"voice": 11, "video": 14, "streaming_audio": 9, "data_interactive": 6, "data_bulk": 2}


def oracle_mos(delay, loss, media):
    """Straight-line closed form, kept apart from the package code."""
    r = 93.2 - 0.024 * delay
    if delay > 177.3:
        r = r - 0.11 * (delay - 177.3)
    r = r - GAMMA[media] * math.log(1 + 15 * loss)
    if r <= 0:
        return 1.0
    if r >= 100:
        return 4.5
    m = 1 + 0.035 * r + 0.000007 * r * (r - 60) * (100 - r)
    return min(5.0, max(1.0, m))


def metrics(sent=100, delivered=100, delay=20.0, jitter=0.0, per_second=()):
    dropped = sent - delivered
    return FlowMetrics(
        "f", (0.0, 1000.0 * max(1, len(per_second))), sent, delivered, dropped, 0, 0.0,
        dropped / sent if sent else 0.0, delay if delivered else None, jitter if delivered else None,
        list(per_second),
    )


def second(loss, delay=20.0, sent=50):
    delivered = round(sent * (1 - loss))
    return metrics(sent, delivered, delay)


def test_lossless_zero_delay_value():
    # frozen from the oracle: 1 + 0.035*93.2 + 7e-6*93.2*33.2*6.8
    assert oracle_mos(0, 0, "voice") == pytest.approx(4.409285824, abs=1e-9)
    assert mos_from_impairments(0.0, 0.0, MediaType.VOICE) == pytest.approx(4.409285824, abs=1e-9)


def test_extreme_impairment_floors_at_one():
    assert mos_from_impairments(2000.0, 1.0, MediaType.VOICE) == 1.0


def test_voice_lossy_example_matches_oracle():
    # frozen oracle value for voice, 5 % loss, 150 ms
    expected = oracle_mos(150, 0.05, "voice")
    assert expected == pytest.approx(4.147263, abs=1e-6)
    assert mos_from_impairments(150.0, 0.05, MediaType.VOICE) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=1000, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1000), st.sampled_from(list(GAMMA)))
def test_matches_closed_form(loss, delay, media):
    assert mos_from_impairments(delay, loss, MediaType(media)) == pytest.approx(oracle_mos(delay, loss, media), abs=1e-9)


@pytest.mark.parametrize("media", list(MediaType))
def test_monotone_over_grid(media):
    losses = [i / 49 for i in range(50)]
    delays = [i * 20.0 for i in range(50)]
    grid = [[mos_from_impairments(d, l, media) for d in delays] for l in losses]
    for row in grid:
        assert all(a >= b for a, b in zip(row, row[1:]))
        assert all(1.0 <= v <= 5.0 for v in row)
    for col in zip(*grid):
        assert all(a >= b for a, b in zip(col, col[1:]))


def test_jitter_folds_into_delay():
    m = metrics(delay=100.0, jitter=40.0)
    assert estimate_mos(m, MediaType.VOICE) == pytest.approx(oracle_mos(180.0, 0.0, "voice"))


def test_empty_window_raises():
    with pytest.raises(EmptyWindow):
        estimate_mos(metrics(sent=0, delivered=0), MediaType.VOICE)


def test_temporal_examples():
    assert temporal_quality([second(0.0)] * 10) == (0, 0, 0)
    assert temporal_quality([second(1.0)]) == (0, 0, 1)
    series = [second(0.0), second(0.02), second(0.06), second(1.0)]
    assert temporal_quality(series, MediaType.VOICE) == (1, 1, 1)


def test_low_mos_second_is_degraded():
    assert temporal_quality([second(0.0, delay=400.0)]) == (1, 0, 0)


def test_thresholds_are_overridable():
    series = [second(0.02)]
    assert temporal_quality(series, MediaType.VOICE, Thresholds(degraded_loss=0.03)) == (0, 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.floats(0, 600)), max_size=30))
def test_buckets_partition_seconds(raw):
    series = [metrics(s, min(s, d), delay) if s else metrics(0, 0) for s, d, delay in raw]
    degraded, errored, unavailable = temporal_quality(series)
    assert degraded + errored + unavailable <= len(series)


def test_report_examples():
    good = metrics(per_second=[second(0.0, delay=15.0)] * 5, delay=15.0)
    rep = qoe_report("s", good, MediaType.VOICE)
    assert rep.mos == pytest.approx(oracle_mos(15.0, 0.0, "voice")) and rep.mos >= 4.0
    assert (rep.degraded_seconds, rep.errored_seconds, rep.unavailable_seconds, rep.total_seconds) == (0, 0, 0, 5)
    assert rep == qoe_report("s", good, MediaType.VOICE)

    dead = metrics(100, 0, per_second=[second(1.0)] * 3)
    rep = qoe_report("s", dead, MediaType.VOICE)
    assert rep.mos == 1.0 and rep.unavailable_seconds == rep.total_seconds == 3

    with pytest.raises(UnknownSession):
        qoe_report("s", None, MediaType.VOICE)


def test_report_validates_ranges():
    with pytest.raises(ValueError):
        QoeReport("s", 0.5, 0, 0, 0, 1)
    with pytest.raises(ValueError):
        QoeReport("s", 3.0, 1, 1, 0, 1)
