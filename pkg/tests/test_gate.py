import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moe_locality.gate import (
    GateParams,
    gate_forward,
    load_gate,
    pinsker_campaign,
    pinsker_check,
    probability_margin,
    sample_within_margin,
    save_gate,
    stability_campaign,
    stability_check,
    topk,
)


class TestGateForward:
    def test_zero_weights_give_uniform(self):
        p = gate_forward(np.ones(3), np.zeros((3, 5)))
        assert p == pytest.approx(np.full(5, 0.2))

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        h = rng.standard_normal(4)
        theta = rng.standard_normal((4, 6))
        shifted = theta + 0.0  # add a constant c to every logit via a rank-1 update
        c = 3.7
        # h @ (theta + outer) = h @ theta + c requires outer = c * h / |h|^2 per column
        outer = np.outer(h / (h @ h), np.full(6, c))
        assert gate_forward(h, theta + outer) == pytest.approx(gate_forward(h, shifted))

    def test_hand_softmax(self):
        # logits (2, 0, 0) -> [e^2, 1, 1] / (e^2 + 2)
        h = np.array([1.0, 0.0])
        theta = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        expected = np.array([math.e**2, 1.0, 1.0]) / (math.e**2 + 2.0)
        assert gate_forward(h, theta) == pytest.approx(expected, abs=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            gate_forward(np.array([np.inf, 0.0]), np.ones((2, 3)))

    def test_sums_to_one_for_extreme_logits(self):
        h = np.array([1.0])
        theta = np.array([[700.0, -700.0, 0.0]])
        p = gate_forward(h, theta)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0)


class TestTopk:
    def test_one_hot(self):
        p = np.zeros(6)
        p[4] = 1.0
        assert topk(p, 1) == (4,)

    def test_uniform_tie_rule(self):
        assert topk(np.full(4, 0.25), 2) == (0, 1)

    def test_hand_sort_with_tie(self):
        assert set(topk([0.1, 0.4, 0.4, 0.1], 2)) == {1, 2}
        assert topk([0.1, 0.4, 0.4, 0.1], 2) == (1, 2)

    def test_k_too_large(self):
        with pytest.raises(ValueError, match="exceeds"):
            topk([0.5, 0.5], 3)

    def test_order_preserving_transform_invariance(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(10))
        assert topk(p, 3) == topk(np.sqrt(p), 3)  # monotone transform


class TestMargin:
    def test_hand_value(self):
        assert probability_margin([0.5, 0.3, 0.15, 0.05], 2) == pytest.approx(0.15)

    def test_uniform_is_zero(self):
        assert probability_margin(np.full(5, 0.2), 2) == 0.0

    def test_one_hot_k1(self):
        p = np.zeros(4)
        p[2] = 1.0
        assert probability_margin(p, 1) == 1.0

    def test_requires_k_below_n(self):
        with pytest.raises(ValueError, match="K < N_r"):
            probability_margin([0.5, 0.5], 2)


class TestStability:
    def test_identical_distributions(self):
        q = np.array([0.5, 0.3, 0.15, 0.05])
        v = stability_check(q, q, 2)
        assert v.condition_met and v.sets_equal and v.holds

    def test_perturbation_inside_margin_keeps_top2(self):
        q = np.array([0.5, 0.3, 0.15, 0.05])
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = sample_within_margin(q, 0.999 * 0.15 / 2, rng)
            v = stability_check(q, p, 2)
            assert v.condition_met
            assert v.sets_equal

    def test_large_perturbation_is_vacuous(self):
        q = np.array([0.5, 0.3, 0.15, 0.05])
        p = np.array([0.05, 0.15, 0.3, 0.5])
        v = stability_check(q, p, 2)
        assert not v.condition_met
        assert v.holds  # no claim outside the margin condition

    def test_campaign_zero_failures(self):
        summary = stability_campaign(trials=2000, n_experts=12, k=3, seed=0)
        assert summary["failures"] == 0
        assert summary["checked"] > 1900


class TestPinsker:
    def test_equal_distributions(self):
        p = np.array([0.25, 0.75])
        r = pinsker_check(p, p)
        assert r.l1_distance == 0.0 and r.holds

    def test_hand_value(self):
        # KL = 0.9 ln 1.8 + 0.1 ln 0.2
        r = pinsker_check([0.9, 0.1], [0.5, 0.5])
        kl = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
        assert r.l1_distance == pytest.approx(0.8)
        assert r.kl_bound == pytest.approx(math.sqrt(2 * kl))
        assert r.kl_bound >= 0.8
        assert r.holds

    def test_campaign_zero_failures(self):
        summary = pinsker_campaign(trials=2000, n_experts=8, seed=1)
        assert summary["failures"] == 0


class TestGateParams:
    def test_snapshot_isolation(self):
        theta = np.ones((2, 3))
        params = GateParams.snapshot(theta)
        params.theta += 5.0
        assert np.all(params.theta0 == 1.0)
        with pytest.raises((ValueError, RuntimeError)):
            params.theta0 += 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            GateParams(theta=np.ones((2, 3)), theta0=np.ones((3, 2)))

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        params = GateParams.snapshot(rng.standard_normal((5, 7)))
        params.theta += rng.standard_normal((5, 7))
        path = tmp_path / "gate.bin"
        save_gate(params, path)
        back = load_gate(path)
        assert np.array_equal(back.theta, params.theta)
        assert np.array_equal(back.theta0, params.theta0)
        assert (tmp_path / "gate.bin.json").exists()

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_gate(path)


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    n=st.integers(2, 16),
    d=st.integers(1, 6),
)
def test_forward_always_a_distribution(seed, n, d):
    rng = np.random.default_rng(seed)
    p = gate_forward(rng.standard_normal(d) * 10, rng.standard_normal((d, n)) * 10)
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p >= 0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_topk1_is_argmax(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(8))
    assert topk(p, 1)[0] == int(np.argmax(p))
