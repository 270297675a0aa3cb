import pytest

from moe_locality.bounds import (
    check_step_bound,
    check_working_set_bound,
    run_campaign,
    run_counterexamples,
)
from moe_locality.cache_sim import CacheConfig, Policy, simulate
from moe_locality.trace import SynthConfig, TraceHeader, synth_trace

from test_trace import make_trace


def seq_trace(sets, k, n):
    header = TraceHeader(1, n, k, 1)
    return make_trace(header, [(0, t, 0, 0, tuple(s)) for t, s in enumerate(sets)])


class TestStepBound:
    def test_identical_sets_zero_fetch(self):
        trace = seq_trace([(0, 1, 2)] * 5, k=3, n=8)
        report = check_step_bound(trace, capacity=3)
        assert report.n_violations == 0
        assert all(r.n_fetch == 0 and r.overlap_bound == 0 for r in report.step_records)

    def test_disjoint_sets_bound_is_tight(self):
        # Alternating disjoint sets at C=K: every step fetches exactly K.
        sets = [(0, 1), (2, 3)] * 4
        trace = seq_trace(sets, k=2, n=4)
        report = check_step_bound(trace, capacity=2)
        assert report.n_violations == 0
        assert all(r.n_fetch == 2 and r.overlap_bound == 2 for r in report.step_records)

    def test_rejects_capacity_below_k(self):
        trace = seq_trace([(0, 1, 2)] * 3, k=3, n=8)
        with pytest.raises(ValueError, match="C >= K"):
            check_step_bound(trace, capacity=2)

    def test_small_random_campaign_zero_violations(self):
        summary = run_campaign(n_traces=60, seed=5)
        assert summary["violations"] == 0
        assert summary["checks"] > 0

    def test_campaign_threads_deterministic(self):
        a = run_campaign(n_traces=30, seed=9, threads=1)
        b = run_campaign(n_traces=30, seed=9, threads=4)
        assert a == b

    def test_multi_batch_reduced_per_batch(self):
        trace = synth_trace(
            SynthConfig(batch_size=3, independent_batches=True, seed=3, steps_per_segment=10)
        )
        report = check_step_bound(trace, capacity=trace.header.top_k)
        assert report.n_violations == 0
        assert {r.batch for r in report.step_records} == {0, 1, 2}


class TestWorkingSetBound:
    def test_reduces_to_step_bound_at_capacity_k(self):
        # At C = K the working set that fits can never exceed E_{t-1}, so the
        # bound value collapses to the one-step bound (the horizon may still
        # run deeper when consecutive sets repeat).
        trace = synth_trace(SynthConfig(seed=11, steps_per_segment=20, stickiness=0.5))
        k = trace.header.top_k
        report = check_working_set_bound(trace, capacity=k)
        assert report.n_violations == 0
        for r in report.step_records:
            assert r.ws_horizon >= 1
            assert r.ws_bound == r.overlap_bound

    def test_periodic_sets_tighter_than_step_bound(self):
        # A,B,A,B with |A ∪ B| <= C: zero fetches after warmup, though the
        # one-step bound says K.
        a, b = (0, 1), (2, 3)
        trace = seq_trace([a, b, a, b, a, b], k=2, n=8)
        report = check_working_set_bound(trace, capacity=4)
        assert report.n_violations == 0
        late = [r for r in report.step_records if r.step >= 2]
        assert all(r.n_fetch == 0 for r in late)
        assert all(r.ws_bound == 0 for r in late)
        assert all(r.overlap_bound == 2 for r in late)
        assert any(r.ws_bound < r.overlap_bound for r in late)

    def test_ws_bound_never_looser(self):
        trace = synth_trace(SynthConfig(seed=17, steps_per_segment=30, stickiness=0.6))
        report = check_working_set_bound(trace, capacity=2 * trace.header.top_k)
        assert report.n_violations == 0
        for r in report.step_records:
            assert r.ws_bound <= r.overlap_bound

    def test_small_random_campaign(self):
        summary = run_campaign(n_traces=40, seed=2, working_set=True)
        assert summary["violations"] == 0


class TestCounterexamples:
    def test_all_three_scenarios_violate(self):
        results = run_counterexamples()
        assert [r.name for r in results] == ["under_capacity", "interference", "prefetch"]
        for r in results:
            assert r.n_violations >= 1, r.name
            assert r.first_violation is not None
            assert r.first_violation.resident_before is not None

    def test_under_capacity_hand_numbers(self):
        # K=6, C=4, constant set: every post-warmup step misses exactly 2 > 0.
        results = {r.name: r for r in run_counterexamples()}
        v = results["under_capacity"].first_violation
        assert v.n_fetch == 2
        assert v.overlap_bound == 0

    def test_interference_and_prefetch_fetch_at_least_one(self):
        results = {r.name: r for r in run_counterexamples()}
        for name in ("interference", "prefetch"):
            v = results[name].first_violation
            assert v.n_fetch >= 1
            assert v.overlap_bound == 0

    def test_assumption_labels(self):
        results = {r.name: r for r in run_counterexamples()}
        assert "capacity" in results["under_capacity"].assumption_broken
        assert "isolation" in results["interference"].assumption_broken
        assert "insertion" in results["prefetch"].assumption_broken


class TestAdmissionProperty:
    def test_simulator_enforces_residency_lemma(self):
        # A clean run must never trip the internal admission check.
        for seed in range(5):
            trace = synth_trace(SynthConfig(seed=seed, n_segments=2, steps_per_segment=15))
            for policy in (Policy.LRU, Policy.LFU, Policy.FIFO):
                simulate(
                    trace,
                    CacheConfig(capacity=trace.header.top_k, policy=policy,
                                reset_each_segment=True),
                )

    def test_cross_layer_totals_are_sums(self):
        trace = synth_trace(SynthConfig(n_moe_layers=3, seed=7, steps_per_segment=12))
        report = simulate(trace, CacheConfig(4, Policy.LRU, True))
        assert report.overall.unique_misses == sum(
            lt.unique_misses for lt in report.per_layer
        )
        per_step = {}
        for st_ in report.step_stats:
            key = (st_.segment, st_.step)
            per_step[key] = per_step.get(key, 0) + st_.unique_misses
        for i, (s, t) in enumerate(trace.iter_steps()):
            assert report.step_unique_miss_series[i] == per_step[(s, t)]
