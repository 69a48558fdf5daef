
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgscale.simcluster import telemetry as tm
from stgscale.simcluster.presets import PRESETS, get_preset
from stgscale.simcluster.simulator import (
    FEATURE_CHANNELS,
    ClusterSimulator,
    SimConfig,
    label_oracle,
    request_trace,
    snapshot_features,
)
from stgscale.simcluster.topology import EdgeSpec, ServiceGraphSpec, ServiceSpec, SpecError
from stgscale.simcluster.workload import PRIMITIVES, SHARP_HIGH, SHARP_LOW, generate_workload, surge_workload

QUIET = SimConfig(noise=0.0)


def chain(cpu=(0.01, 0.02), base=(10.0, 20.0), calls=1.0):
    services = [ServiceSpec("a", cpu[0], base[0]), ServiceSpec("b", cpu[1], base[1])]
    return ServiceGraphSpec("chain", services, [EdgeSpec("a", "b", calls)], "a", sla_ms=100.0)


# ---------------------------------------------------------------- topology

def test_presets_have_benchmark_sizes():
    assert [get_preset(p).n for p in ("bookinfo4", "boutique11", "trainticket41", "cascade3")] == [4, 11, 41, 3]
    with pytest.raises(KeyError):
        get_preset("nope")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_roundtrip(tmp_path, name):
    spec = get_preset(name)
    spec.save(tmp_path / "s.json")
    again = ServiceGraphSpec.load(tmp_path / "s.json")
    assert again.digest() == spec.digest()


def test_spec_errors_name_the_field():
    d = chain().to_dict()
    d["edges"][0]["dst"] = "zzz"
    with pytest.raises(SpecError) as exc:
        ServiceGraphSpec.from_dict(d)
    assert exc.value.path == "edges[0]"
    d = chain().to_dict()
    d["edges"].append({"src": "b", "dst": "a", "calls_per_request": 1.0})
    with pytest.raises(SpecError):
        ServiceGraphSpec.from_dict(d)
    d = chain().to_dict()
    del d["sla_ms"]
    with pytest.raises(SpecError) as exc:
        ServiceGraphSpec.from_dict(d)
    assert exc.value.path == "sla_ms"


# ---------------------------------------------------------------- simulator

def test_idle_latency_is_critical_path():
    spec = get_preset("boutique11")
    snap = ClusterSimulator(spec, QUIET).step(0.0)
    assert snap.e2e_latency_ms == pytest.approx(spec.idle_latency())


def test_doubling_replicas_halves_rho():
    spec = chain()
    one = ClusterSimulator(spec, QUIET, initial_replicas=[2, 2]).step(30.0)
    two = ClusterSimulator(spec, QUIET, initial_replicas=[4, 4]).step(30.0)
    np.testing.assert_allclose(two.utilization_offered, one.utilization_offered / 2)


def _tandem_des(lam, s1, s2, n, seed):
    """Mean sojourn through two FIFO single-server exponential queues."""
    rng = np.random.default_rng(seed)
    arr = np.cumsum(rng.exponential(1 / lam, n))
    d1 = np.empty(n)
    d2 = np.empty(n)
    prev1 = prev2 = 0.0
    x1 = rng.exponential(s1, n)
    x2 = rng.exponential(s2, n)
    for k in range(n):
        prev1 = d1[k] = max(arr[k], prev1) + x1[k]
        prev2 = d2[k] = max(d1[k], prev2) + x2[k]
    warm = n // 10
    return float(np.mean(d2[warm:] - arr[warm:]))


@pytest.mark.parametrize("lam", [20.0, 35.0])
def test_chain_matches_discrete_event_oracle(lam):
    s1, s2 = 0.010, 0.020
    spec = chain(cpu=(s1, s2), base=(s1 * 1000, s2 * 1000))
    snap = ClusterSimulator(spec, QUIET, initial_replicas=[1, 1]).step(lam)
    des_ms = np.mean([_tandem_des(lam, s1, s2, 10_000, seed) for seed in range(5)]) * 1000
    assert abs(snap.e2e_latency_ms - des_ms) / des_ms < 0.15


def test_determinism():
    spec = get_preset("boutique11")
    w = generate_workload("composite", 30, seed=3, base_rps=spec.base_rps)
    runs = []
    for _ in range(2):
        sim = ClusterSimulator(spec, SimConfig(seed=9))
        runs.append(np.stack([snapshot_features(sim.step(r, [3] * spec.n)) for r in w.rps]))
    assert np.array_equal(runs[0], runs[1])


@settings(max_examples=25, deadline=None)
@given(rps=st.floats(0, 400), reps=st.lists(st.integers(1, 20), min_size=11, max_size=11), seed=st.integers(0, 99))
def test_snapshot_invariants(rps, reps, seed):
    spec = get_preset("boutique11")
    sim = ClusterSimulator(spec, SimConfig(seed=seed), initial_replicas=reps)
    snap = sim.step(rps)
    base = np.array([s.base_latency for s in spec.services])
    assert np.all((snap.cpu_utilization >= 0) & (snap.cpu_utilization <= 1))
    assert np.all(snap.latency_mean_ms >= base)
    assert snap.e2e_latency_ms >= snap.latency_mean_ms.max() - 1e-9
    calls = spec.call_matrix()
    expected = snap.throughput[:, None] * calls * sim.config.period_s
    # request types may leave some edges idle; counts never exceed the served fan-out
    assert np.all(snap.edge_counts >= 0) and np.all(snap.edge_counts <= expected * (1 + 1e-9) + 1e-9)


def test_edge_counts_follow_calls_per_request():
    spec = chain(calls=2.0)
    snap = ClusterSimulator(spec, QUIET, initial_replicas=[5, 10]).step(10.0)
    assert snap.edge_counts[0, 1] == pytest.approx(2 * 10.0 * 30)


def test_request_trace_accumulates():
    spec = chain()
    sim = ClusterSimulator(spec, QUIET, initial_replicas=[5, 10])
    snaps = [sim.step(r) for r in (5.0, 10.0, 0.0)]
    tr = request_trace(snaps)
    assert tr.counts[0, 1] == pytest.approx((5 + 10) * 30) and tr.steps == 3
    zero = request_trace([ClusterSimulator(spec, QUIET).step(0.0)])
    assert not zero.counts.any()
    with pytest.raises(ValueError):
        request_trace([])


def test_saturated_entry_shields_downstream():
    # scaling only the bottlenecked entry raises downstream rho on the next step
    spec = get_preset("cascade3")
    sim = ClusterSimulator(spec, QUIET, initial_replicas=[1, 1, 1])
    before = sim.step(300.0)
    after = sim.step(300.0, [10, 1, 1])
    assert before.cpu_utilization[0] == pytest.approx(1.0)
    assert np.all(after.utilization_offered[1:] > before.utilization_offered[1:])


def test_provisioning_delay():
    spec = chain()
    sim = ClusterSimulator(spec, SimConfig(noise=0.0, provisioning_delay=2), initial_replicas=[1, 1])
    a = sim.step(1.0, [4, 4])
    b = sim.step(1.0)
    assert list(a.replicas) == [1, 1] and list(b.replicas) == [4, 4]


def test_replicas_clamped():
    spec = chain()
    snap = ClusterSimulator(spec, QUIET).step(1.0, [0, 99])
    assert list(snap.replicas) == [spec.min_replicas, spec.max_replicas]


# ---------------------------------------------------------------- label oracle

def test_label_oracle_example():
    services = [ServiceSpec("a", 0.021, 5.0, 1.0)]
    spec = ServiceGraphSpec("one", services, [], "a", sla_ms=50.0)
    labels = label_oracle(spec, [100.0, 100.0], rho_target=0.7)
    assert labels[0, 0] == 3  # ceil(2.1 / 0.7)
    assert label_oracle(spec, [0.0, 0.0])[0, 0] == spec.min_replicas


@given(st.floats(0, 300), st.floats(0, 300))
def test_label_oracle_monotone(a, b):
    spec = get_preset("bookinfo4")
    lo, hi = sorted((a, b))
    assert np.all(label_oracle(spec, [lo, lo]) <= label_oracle(spec, [hi, hi]))


# ---------------------------------------------------------------- workload

def test_workload_deterministic():
    a = generate_workload("composite", 100, seed=4)
    b = generate_workload("composite", 100, seed=4)
    assert np.array_equal(a.rps, b.rps)


def test_composite_segments_in_order():
    w = generate_workload("composite", 150, seed=0, base_rps=100.0)
    assert [s[0] for s in w.segments] == list(PRIMITIVES)
    # classify each segment from the trace alone
    for name, start, stop in w.segments:
        seg = w.rps[start:stop]
        half = len(seg) // 2
        first, second = seg[:half].mean(), seg[half:].mean()
        jump = seg[half] / seg[half - 1]
        if name == "sharp-increase":
            assert jump >= 2
        elif name == "sharp-decrease":
            assert jump <= 0.5
        elif name == "slight-increase":
            assert 1 < second / first < 1.5
        elif name == "slight-decrease":
            assert 1 < first / second < 1.5
        else:
            diffs = np.sign(np.diff(seg))
            assert (diffs[1:] != diffs[:-1]).sum() >= 4


def test_sharp_jump_definition():
    w = generate_workload("sharp-increase", 20, seed=1, base_rps=100.0)
    assert w.rps[10] >= 2 * w.rps[9]
    assert SHARP_HIGH / SHARP_LOW >= 2


def test_workload_errors():
    with pytest.raises(ValueError):
        generate_workload("sawtooth", 10, 0)
    with pytest.raises(ValueError):
        generate_workload("composite", 10, 0, request_mix=[0.5, 0.6])


def test_surge_workload():
    w = surge_workload(10.0, 50.0, 3, 2)
    assert list(w.rps) == [10, 10, 10, 50, 50] and w.segment_of(3) == "sharp-increase"


# ---------------------------------------------------------------- telemetry io

def test_telemetry_roundtrip(tmp_path):
    spec = get_preset("bookinfo4")
    sim = ClusterSimulator(spec, SimConfig(seed=2))
    snaps = [sim.step(r, [2, 3, 1, 2]) for r in (20.0, 40.0, 30.0)]
    tm.write_telemetry(tmp_path / "t.csv", snaps, spec.names, 30.0)
    tel = tm.read_telemetry(tmp_path / "t.csv")
    assert tel["names"] == spec.names
    np.testing.assert_array_equal(tel["frames"], np.stack([snapshot_features(s) for s in snaps]))
    np.testing.assert_array_equal(tel["e2e"], [s.e2e_latency_ms for s in snaps])
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert "istio_requests_total" in header and "container_cpu_usage_seconds_total" in header
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 1 + 3 * spec.n

    tm.write_edge_counts(tmp_path / "e.csv", snaps, spec.names)
    counts, steps = tm.read_edge_counts(tmp_path / "e.csv", spec.names)
    np.testing.assert_allclose(counts, request_trace(snaps).counts)
    assert steps == 3
    labels = label_oracle(spec, [20.0, 40.0, 30.0])
    tm.write_labels(tmp_path / "l.csv", labels, spec.names)
    back, names = tm.read_labels(tmp_path / "l.csv")
    np.testing.assert_array_equal(back, labels)
    assert names == spec.names


def test_feature_channels_order():
    assert FEATURE_CHANNELS[-1] == "replicas" and len(FEATURE_CHANNELS) == 7
