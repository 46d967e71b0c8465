from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from moe_cluster.weightfile import PRESTACKED, UNSTACKED, ResidentArray
from moe_cluster.wiring import (
    DEFAULT_T_WAITS_MS,
    WiringError,
    WiringParams,
    WiringState,
    bench_packing,
    knee_estimate,
)


def state(*arrays, theta=0.4):
    s = WiringState(WiringParams(wire_bandwidth=1e9, wire_base_latency=1e-3, inactivity_threshold=theta))
    s.register([ResidentArray(a, n) for a, n in arrays])
    return s


def test_wire_cost_formula():
    assert WiringParams().wire_cost(40e9) == pytest.approx(1.0001)
    assert WiringParams().wire_cost(0) == pytest.approx(1e-4)


@pytest.mark.parametrize("kwargs", [{"wire_bandwidth": 0}, {"inactivity_threshold": -1}, {"clock_mode": "x"}])
def test_params_validated(kwargs):
    with pytest.raises(ValueError):
        WiringParams(**kwargs)


def test_first_touch_pays_then_free():
    s = state(("a", 1_000_000))
    assert s.touch("a") == pytest.approx(2e-3)
    assert s.now == pytest.approx(2e-3)
    assert s.touch("a") == 0.0
    assert s.wire_events == 1


def test_idle_past_threshold_unwires():
    s = state(("a", 0))
    s.touch("a")
    s.advance(0.4)
    assert "a" in s.wired  # exactly theta is not beyond it
    s.advance(1e-6)
    assert "a" not in s.wired
    assert s.touch("a") == pytest.approx(1e-3)
    assert s.unwire_events == 1


def test_unknown_array():
    with pytest.raises(WiringError):
        state().touch("ghost")


def test_clock_cannot_go_back():
    with pytest.raises(ValueError):
        state().advance(-1)


def test_wire_batch_touches_all_at_commit_time():
    s = state(("a", 1e8), ("b", 1e8), ("c", 1e8), theta=0.15)
    cost = s.wire_batch()
    assert cost == pytest.approx(3 * 0.101)
    assert s.wired == {"a", "b", "c"}
    assert {r.last_touch for r in s.records.values()} == {s.now}


def test_rewire_can_cascade_when_cost_exceeds_threshold():
    # one-at-a-time wiring of arrays that each take longer than theta never settles
    s = state(("a", 5e8), ("b", 5e8), theta=0.4)
    s.touch("a")
    s.touch("b")
    assert "a" not in s.wired


def test_wall_clock_mode_moves_with_real_time():
    s = WiringState(WiringParams(clock_mode="wall"))
    s.register([ResidentArray("a", 0)])
    s.advance(0.01)
    assert s.now >= 0.01


@given(st.lists(st.tuples(st.sampled_from("abc"), st.floats(0, 0.6)), max_size=40))
def test_clock_and_touch_times_are_monotone(ops):
    s = state(("a", 10**6), ("b", 10**7), ("c", 10**5))
    last = {k: 0.0 for k in "abc"}
    prev_now = s.now
    for name, dt in ops:
        s.advance(dt)
        s.touch(name)
        assert s.now >= prev_now
        prev_now = s.now
        for k, rec in s.records.items():
            assert rec.last_touch >= last[k]
            last[k] = rec.last_touch
        # wired set agrees with the threshold rule
        for rec in s.records.values():
            if rec.wired:
                assert s.now - rec.last_touch <= s.params.inactivity_threshold


def curve(strategy, waits):
    return {r.t_wait_ms: r.mean_sample_time_ms for r in bench_packing(strategy, waits)}


def test_knee_estimates():
    assert knee_estimate(0.4, 40, UNSTACKED) == pytest.approx(0.01)
    assert knee_estimate(0.4, 40, PRESTACKED) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        knee_estimate(0.4, 40, "other")


def test_unstacked_knee_sits_near_threshold_over_layers():
    c = curve(UNSTACKED, [0, 8, 9, 10, 11, 16])
    assert c[8] == pytest.approx(c[0], rel=1e-9) and c[9] == pytest.approx(c[0], rel=1e-9)
    assert c[11] > 10 * c[0]
    assert c[16] > c[11]


def test_prestacked_flat_until_threshold():
    c = curve(PRESTACKED, DEFAULT_T_WAITS_MS)
    flat = [c[t] for t in DEFAULT_T_WAITS_MS if t <= 256]
    assert max(flat) - min(flat) < 1e-6 * min(flat)
    assert c[512] > 100 * c[256]


def test_bench_rejects_unknown_strategy():
    with pytest.raises(ValueError):
        bench_packing("zip", [0])


def test_sample_time_excludes_sleep():
    # with nothing ever unwiring, only the matmul charge remains
    r = bench_packing(PRESTACKED, [100], n_layers=2, n_mpl=1, n=1000, n_samples=2)[0]
    assert r.mean_sample_time_ms == pytest.approx(2 * 2 * 1000 * 1000 / 1e12 * 1e3)
    assert r.wire_time_per_sample_ms == 0
