import csv
import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leostream.dash import SessionResult
from leostream.engine import seconds
from leostream.metrics import (
    aggregate,
    cdf_points,
    compute_session,
    jain_index,
    quartiles,
    write_run_csv,
    write_summary,
)


def brute_force_jain(xs):
    xs = np.asarray(xs, dtype=float)
    return float(xs.sum() ** 2 / (len(xs) * (xs ** 2).sum()))


def test_jain_equal_allocation_is_one():
    assert jain_index([5, 5, 5, 5]) == 1.0


def test_jain_hand_evaluated_example():
    # (1+2+3)^2 / (3 * (1+4+9)) = 36/42
    assert jain_index([1, 2, 3]) == pytest.approx(36 / 42, abs=1e-12)


def test_jain_single_user_is_one():
    for x in (0.1, 7, 1e9):
        assert jain_index([x]) == pytest.approx(1.0)


def test_jain_all_zero_rejected():
    with pytest.raises(ValueError):
        jain_index([0, 0, 0])
    with pytest.raises(ValueError):
        jain_index([])
    with pytest.raises(ValueError):
        jain_index([-1, 2])


def test_jain_oracle_equivalence_random_vectors():
    rnd = random.Random(123)
    for _ in range(1000):
        n = rnd.randint(1, 32)
        xs = [rnd.uniform(0, 100) for _ in range(n)]
        if sum(xs) == 0:
            xs[0] = 1.0
        got = jain_index(xs)
        want = brute_force_jain(xs)
        assert abs(got - want) <= 1e-9 * max(abs(want), 1e-30)
        assert 1 / n - 1e-12 <= got <= 1 + 1e-12


@given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=40)
       .filter(lambda xs: sum(xs) > 0))
@settings(max_examples=300, deadline=None)
def test_jain_bounds_property(xs):
    j = jain_index(xs)
    assert 1 / len(xs) - 1e-9 <= j <= 1 + 1e-9
    if len(set(xs)) == 1:
        assert j == pytest.approx(1.0)


@given(
    st.lists(st.floats(min_value=0.001, max_value=1e5), min_size=1, max_size=20),
    st.floats(min_value=1e-3, max_value=1e3),
)
@settings(max_examples=200, deadline=None)
def test_jain_scale_invariance(xs, c):
    assert jain_index([c * x for x in xs]) == pytest.approx(jain_index(xs), rel=1e-9)


def make_result(playback_s=60, prestart_s=1, stalls=(), rtts_ms=(),
                nbytes=10**7, reps=((1_000_000, 60),), elapsed_s=None):
    stall_ns = sum(seconds(e) - seconds(s) for s, e in stalls)
    if elapsed_s is None:
        elapsed_s = prestart_s + playback_s + stall_ns / 1e9
    return SessionResult(
        user_id=0,
        elapsed_ns=seconds(elapsed_s),
        playback_ns=seconds(playback_s),
        prestart_ns=seconds(prestart_s),
        stall_ns=stall_ns,
        stall_count=len(stalls),
        residual_ns=seconds(elapsed_s) - seconds(prestart_s)
        - seconds(playback_s) - stall_ns,
        bytes_delivered=nbytes,
        played_bitrate_ns=[(b, seconds(s)) for b, s in reps],
        rtt_samples_ns=[round(r * 1e6) for r in rtts_ms],
        rep_switches=0,
        completed=playback_s >= 60,
        close_reason="completed",
        log=[],
    )


def test_compute_session_clean_sixty_seconds():
    m = compute_session(make_result(rtts_ms=[100, 120, 80]))
    assert m.playback_duration_s == 60.0
    assert m.stall_duration_s == 0.0
    assert m.stall_count == 0
    assert m.latency_median_ms == pytest.approx(50.0)  # median RTT 100 / 2


def test_compute_session_scripted_stalls():
    m = compute_session(make_result(stalls=[(2, 3), (10, 11)]))
    assert m.stall_duration_s == pytest.approx(2.0)
    assert m.stall_count == 2
    assert m.interruption_duration_s == pytest.approx(3.0)  # plus 1 s prestart


def test_compute_session_time_weighted_bitrate():
    m = compute_session(
        make_result(reps=((1_000_000, 30), (3_000_000, 30)))
    )
    assert m.avg_playback_bitrate_bps == pytest.approx(2_000_000)


def test_compute_session_throughput_is_goodput_over_elapsed():
    m = compute_session(make_result(nbytes=15_000_000, elapsed_s=61))
    assert m.mean_throughput_bps == pytest.approx(15_000_000 * 8 / 61)


def test_cdf_points_non_decreasing_zero_to_one():
    pts = cdf_points([3.0, 1.0, 2.0, 2.0])
    values = [v for v, _ in pts]
    probs = [p for _, p in pts]
    assert values == sorted(values)
    assert probs == sorted(probs)
    assert probs[-1] == 1.0


def test_cdf_of_constant_list_steps_at_value():
    pts = cdf_points([7.0, 7.0, 7.0])
    assert all(v == 7.0 for v, _ in pts)
    assert pts[-1] == (7.0, 1.0)


def test_quartiles_median_odd_list():
    q = quartiles([3, 1, 2])
    assert q["median"] == 2
    assert q["min"] == 1 and q["max"] == 3


def run_of(*metrics_kwargs):
    return [compute_session(make_result(**kw)) for kw in metrics_kwargs]


def test_aggregate_reporting_conventions():
    runs = [
        run_of(dict(playback_s=60), dict(playback_s=50, stalls=[(5, 10)])),
        run_of(dict(playback_s=60), dict(playback_s=60)),
        run_of(dict(playback_s=40, stalls=[(5, 9), (20, 22)]), dict(playback_s=60)),
    ]
    agg = aggregate(runs)
    assert agg["n_runs"] == 3
    assert agg["n_sessions"] == 6
    assert agg["median_playback_duration_s"] == 60.0
    # mean of per-run stall totals: (1 + 0 + 2) / 3
    assert agg["mean_total_stalls"] == pytest.approx(1.0)
    assert agg["median_stall_duration_s"] == 0.0  # zeros dominate
    cdf = agg["cdf_throughput_bps"]
    assert cdf[-1][1] == 1.0
    assert 0 < agg["jain_playback_duration"] <= 1


def test_median_of_all_zero_interruptions_is_zero():
    runs = [run_of(dict(playback_s=60)) for _ in range(5)]
    agg = aggregate(runs)
    assert agg["median_stall_duration_s"] == 0.0


def test_writers_produce_parseable_files(tmp_path):
    runs = [run_of(dict(playback_s=60), dict(playback_s=55, stalls=[(1, 3)]))]
    agg = {"tcp-cubic": aggregate(runs), "quic-bbr": aggregate(runs)}
    write_run_csv(tmp_path / "runs_tcp-cubic.csv", runs)
    write_summary(tmp_path, agg)
    with open(tmp_path / "runs_tcp-cubic.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["playback_duration_s"] == "60.000000"
    with open(tmp_path / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert [r["scheme"] for r in summary] == ["quic-bbr", "tcp-cubic"]
    data = json.loads((tmp_path / "summary.json").read_text())
    assert set(data) == {"tcp-cubic", "quic-bbr"}
    for scheme in agg:
        for metric in ("bitrate", "throughput"):
            lines = (tmp_path / f"{metric}_{scheme}.csv").read_text().splitlines()
            assert lines[0] == "value_bps,cumulative_probability"
            assert len(lines) == 3
    box = (tmp_path / "playback_duration_boxplot.csv").read_text().splitlines()
    assert box[0] == "scheme,min,q1,median,q3,max"
