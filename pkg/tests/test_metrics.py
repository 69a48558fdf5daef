import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stgscale import metrics as me
from stgscale.autoscaler import ExperimentRecord


def record(e2e, replicas=None, sla=100.0, period=30.0, segments=None, cores=(1.0,)):
    e2e = np.asarray(e2e, dtype=float)
    T = len(e2e)
    reps = np.ones((T, len(cores)), dtype=np.int64) if replicas is None else np.asarray(replicas).reshape(T, -1)
    n = reps.shape[1]
    return ExperimentRecord(
        policy="p",
        names=[f"s{i}" for i in range(n)],
        cores_per_replica=np.asarray(cores, dtype=float),
        sla_ms=sla,
        period_s=period,
        rps=np.ones(T),
        replicas=reps,
        actions=reps.copy(),
        provenance=[["rule"] * n for _ in range(T)],
        e2e_latency_ms=e2e,
        trust=np.ones(T),
        segments=segments or ["all"] * T,
    )


def test_violation_rate_counts():
    assert me.violation_rate(record([50.0] * 10)) == 0
    assert me.violation_rate(record([150.0] * 3 + [50.0] * 7)) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        me.violation_rate(record([]))


def test_cost_formula_example():
    assert me.cost_formula([[3], [3]], [2.0], 1.0) == pytest.approx(3.0)
    assert me.cost_formula(np.zeros((4, 2)), [1.0, 2.0], 30.0) == 0


@given(st.lists(st.integers(1, 20), min_size=1, max_size=10), st.integers(0, 9), st.integers(1, 5))
def test_cost_monotone_in_any_entry(ys, k, bump):
    y = np.array(ys)[:, None]
    k = k % len(ys)
    more = y.copy()
    more[k] += bump
    assert me.cost_formula(more, [1.5], 30.0) > me.cost_formula(y, [1.5], 30.0)
    assert me.cost_core_hours(more, [1.5], 30.0) > me.cost_core_hours(y, [1.5], 30.0)


def test_cost_core_hours():
    assert me.cost_core_hours([[2], [2]], [1.5], 1800.0) == pytest.approx(3.0)
    rec = record([10.0, 10.0], [[2], [2]], period=1800.0, cores=(1.5,))
    assert me.cost(rec) == pytest.approx(3.0)


def test_cae():
    assert me.cae(record([50.0, 60.0])) == 0
    assert me.cae(record([600.0, 50.0])) == pytest.approx(0.5)


@given(st.lists(st.floats(0, 1000), min_size=1, max_size=30))
def test_cae_zero_iff_no_violation(lat):
    rec = record(lat)
    assert me.cae(rec) >= 0
    assert (me.cae(rec) == 0) == (me.violation_rate(rec) == 0)


def test_forecast_errors_example():
    mae, rmse, mape = me.forecast_errors([2.0, 4.0], [1.0, 2.0])
    assert mae == pytest.approx(1.5) and rmse == pytest.approx(np.sqrt(2.5))
    # mean of |p - y| / |y| = mean(1/1, 2/2)
    assert mape == pytest.approx(100.0)
    assert me.forecast_errors([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0, 0.0)
    assert me.forecast_errors([1.0], [0.0])[2] is None


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=20))
def test_rmse_at_least_mae(pairs):
    p, y = zip(*pairs)
    mae, rmse, _ = me.forecast_errors(p, y)
    assert rmse >= mae - 1e-9


def test_segment_probability_and_clearance():
    rec = record([50, 150, 150, 50, 50, 150, 50], segments=["a", "a", "a", "b", "b", "b", "b"])
    probs = me.segment_violation_probability(rec)
    assert probs == {"a": pytest.approx(2 / 3), "b": pytest.approx(1 / 4)}
    assert me.clearance_time(rec, 1) == 5
    assert me.clearance_time(record([50, 50]), 0) == 0


def test_report_validates_against_schema(tmp_path):
    rec = record([50.0, 150.0, 80.0], [[2, 1], [3, 1], [3, 2]], cores=(1.0, 0.5))
    report = me.evaluate_record(rec, mae=0.5)
    me.write_report(tmp_path / "r.json", report)
    jsonschema.validate(json.loads((tmp_path / "r.json").read_text()), me.REPORT_SCHEMA)
    bad = report.to_dict() | {"violation_rate": 2.0}
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, me.REPORT_SCHEMA)


def test_cumulative_series_nondecreasing(tmp_path):
    rec = record([50, 150, 90, 300], [[1], [4], [2], [3]])
    series = me.cumulative_series(rec)
    for v in series.values():
        assert np.all(np.diff(v) >= 0)
    assert series["cum_violations"][-1] == 2
    me.write_cumulative_csv(tmp_path / "c.csv", rec)
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 5


def test_comparison_table():
    r1 = me.evaluate_record(record([50, 150], segments=["x", "y"]))
    rows = me.comparison_rows({"p": [r1, r1, r1]})
    assert len(rows) == 1 and rows[0]["violation_rate_pct"] == (50.0, 0.0)
    twin = me.comparison_rows({"a": [r1], "b": [r1]})
    assert {k: v for k, v in twin[0].items() if k != "policy"} == {k: v for k, v in twin[1].items() if k != "policy"}
    md = me.comparison_markdown(rows)
    assert "| p |" in md and "| x | y |" in md.replace("Policy | ", "")


def test_summarize_median_and_half_iqr():
    med, half = me.summarize([1.0, 2.0, 3.0, 4.0, 5.0])
    assert med == 3.0 and half == pytest.approx(1.0)
