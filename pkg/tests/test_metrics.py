import json
import math

import numpy as np
import pytest

from rydberg_rnn.metrics import (TRACE_COLUMNS, EnergyTrace, TraceRow, convergence_time,
                                 density_difference, running_average, summarize, write_summary)


def make_trace(energies, start=1, phase="vmc"):
    trace = EnergyTrace()
    for k, e in enumerate(energies):
        trace.append(TraceRow(start + k, phase, start + k, float(e), float(e), 0.01))
    return trace


def test_running_average_small_example():
    assert running_average([1.0, 2.0, 3.0], window=2) == [(1, 1.5), (2, 2.5)]


def test_running_average_offsets():
    e = np.arange(100, dtype=float) ** 2
    out = dict(running_average(make_trace(e), 50))
    # iteration t averages rows t-24 .. t+25
    assert out[25] == pytest.approx(e[0:50].mean(), rel=1e-14)
    assert out[60] == pytest.approx(e[35:85].mean(), rel=1e-14)
    assert min(out) == 25 and max(out) == 75


def test_running_average_constant_is_exact():
    c = -7.254330739786091
    assert all(v == c for _, v in running_average(np.full(120, c), 50))


def test_running_average_commutes_with_shift():
    e = np.random.default_rng(0).normal(size=80)
    a = running_average(e, 10)
    b = running_average(e + 3.25, 10)
    for (ta, va), (tb, vb) in zip(a, b):
        assert ta == tb and vb == pytest.approx(va + 3.25, abs=1e-12)


def test_running_average_rejects_short_or_odd():
    with pytest.raises(ValueError):
        running_average(np.zeros(49), 50)
    with pytest.raises(ValueError):
        running_average(np.zeros(60), 7)


def test_convergence_time_constructed_crossing():
    ref, n = -10.0, 4
    # energy density gap 0.1 until iteration 150, 0 afterwards
    e = np.where(np.arange(1, 301) <= 150, ref + 0.4, ref)
    # smoothed gap at t covers rows t-24..t+25; it first drops to <= 0.015 once
    # at most 7 of those 50 rows are still 0.1: t + 25 - 150 >= 43
    assert convergence_time(make_trace(e), ref, n) == 168


def test_convergence_time_sentinel():
    ref = -1.0
    assert convergence_time(make_trace(np.full(200, 0.0)), ref, 1) is None
    assert convergence_time(make_trace(np.full(10, ref)), ref, 1) is None
    with pytest.raises(ValueError):
        convergence_time(EnergyTrace(), ref, 1)


def test_convergence_time_threshold_monotone():
    rng = np.random.default_rng(3)
    e = 2.0 * np.exp(-np.arange(500) / 80) + rng.normal(scale=0.05, size=500)
    trace = make_trace(e)
    times = [convergence_time(trace, 0.0, 1, threshold=th) for th in (0.5, 0.2, 0.1, 0.05)]
    assert all(t is not None for t in times)
    assert times == sorted(times)


def test_convergence_not_before_raw_crossing_minus_window():
    rng = np.random.default_rng(5)
    e = np.maximum(1.0 - np.arange(400) / 200, 0) + np.abs(rng.normal(scale=0.01, size=400))
    trace = make_trace(e)
    raw = next(i + 1 for i, v in enumerate(e) if v <= 0.015)
    t = convergence_time(trace, 0.0, 1)
    assert t is not None and t >= raw - 50


def test_trace_append_rules():
    trace = make_trace([1.0, 2.0])
    with pytest.raises(ValueError):
        trace.append(TraceRow(2, "vmc", 3, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        trace.append(TraceRow(3, "data", 3, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        trace.append(TraceRow(4, "other", 3, 0.0, 0.0, 0.0))


def test_csv_round_trip(tmp_path):
    trace = EnergyTrace()
    trace.append(TraceRow(1, "data", 10, 5.123456789012345, -3.1, 0.2))
    trace.append(TraceRow(2, "vmc", 11, -7.000000000000001, -7.25, 1e-17))
    trace.append(TraceRow(3, "vmc", 12, float("nan"), float("nan"), float("nan")))
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    back = EnergyTrace.from_csv(path)
    assert back.rows[:2] == trace.rows[:2]
    assert math.isnan(back.rows[2].energy_mean)
    arr = EnergyTrace.from_array(trace.to_array())
    assert arr.rows[:2] == trace.rows[:2]


def test_density_difference_window():
    trace = make_trace(np.arange(1, 11, dtype=float))
    mean, std = density_difference(trace, 0.0, 2, start=9)
    assert mean == pytest.approx(4.75) and std == pytest.approx(0.25)
    with pytest.raises(ValueError):
        density_difference(trace, 0.0, 2, start=20)


def test_summary_json(tmp_path):
    ref = -10.0
    runs = [summarize(make_trace(np.full(60, ref)), ref, 4, name="a", t_trans=0),
            summarize(make_trace(np.full(60, 0.0)), ref, 4, name="b", t_trans=100),
            summarize(make_trace(np.full(5, ref)), ref, 4, name="c", t_trans=100)]
    path = tmp_path / "summary.json"
    write_summary(path, runs)
    data = json.loads(path.read_text())
    assert data["t_conv_by_t_trans"] == {"0": [25], "100": [None, None]}
    assert [r["final_density_difference"] for r in data["runs"]] == [0.0, 2.5, 0.0]
    assert data["runs"][0]["threshold"] == 0.015
