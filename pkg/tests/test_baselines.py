import numpy as np
import pytest

from rlcc_lab.baselines import (
    DcqcnParams,
    DcqcnState,
    EcnMarker,
    FixedRateController,
    GreedyController,
    IncreaseStage,
    SwiftController,
    SwiftState,
    dcqcn_decide,
    ecn_mark,
    fair_share_factory,
    swift_decide,
)
from rlcc_lab.simcore import build_scenario, run
from rlcc_lab.structs import SimConfig, many_to_one


class TestEcn:
    def test_never_marks_below_k_min(self):
        marker = EcnMarker(p_max=1.0)
        assert not any(ecn_mark(marker, 99_999.0) for _ in range(1000))

    def test_always_marks_at_k_max(self):
        marker = EcnMarker(p_max=1.0)
        assert all(ecn_mark(marker, 400_000.0) for _ in range(1000))

    def test_midpoint_marking_rate(self):
        marker = EcnMarker(p_max=0.1, rng=np.random.default_rng(42))
        rate = np.mean([ecn_mark(marker, 250_000.0) for _ in range(10_000)])
        assert abs(rate - 0.05) <= 0.01

    def test_rejects_inverted_thresholds(self):
        with pytest.raises(ValueError):
            EcnMarker(k_min_bits=5.0, k_max_bits=1.0)

    def test_rejects_k_max_above_buffer(self):
        with pytest.raises(ValueError):
            EcnMarker(k_max_bits=400_000.0, buffer_bits=200_000.0)
        assert EcnMarker(k_max_bits=400_000.0, buffer_bits=400_000.0).buffer_bits == 400_000.0


class TestDcqcn:
    def test_mark_with_full_alpha_halves_rate(self):
        state = DcqcnState(current_rate=50.0, target_rate=50.0, alpha=1.0)
        assert dcqcn_decide(state, True, 0.0, 0.0) == 25.0
        assert state.target_rate == 50.0
        assert state.alpha == 1.0

    def test_mark_with_zero_alpha_keeps_rate(self):
        state = DcqcnState(current_rate=50.0, target_rate=50.0, alpha=0.0)
        assert dcqcn_decide(state, True, 0.0, 0.0) == 50.0
        assert state.alpha == pytest.approx(1 / 16)

    def test_fast_recovery_walks_halfway_to_target(self):
        """Verification: five timer events from (RC=50, RT=100) end at 98.4375."""
        state = DcqcnState(current_rate=50.0, target_rate=100.0)
        params = DcqcnParams()
        rates = [dcqcn_decide(state, False, 55.0, 0.0, params) for _ in range(5)]
        assert rates == [75.0, 87.5, 93.75, 96.875, 98.4375]
        assert state.target_rate == 100.0
        assert state.increase_stage == IncreaseStage.FAST_RECOVERY

    def test_fast_recovery_runs_all_five_steps(self):
        """Regression: the fifth increase event was additive and raised the target."""
        state = DcqcnState(current_rate=50.0, target_rate=80.0)
        dcqcn_decide(state, False, 5 * 55.0, 0.0)
        assert state.timer_count == 5
        assert state.target_rate == 80.0
        assert state.current_rate == pytest.approx(79.0625)
        assert state.increase_stage == IncreaseStage.FAST_RECOVERY

    def test_additive_stage_raises_target(self):
        state = DcqcnState(current_rate=10.0, target_rate=10.0, timer_count=5)
        dcqcn_decide(state, False, 55.0, 0.0)
        assert state.timer_count == 6
        assert state.increase_stage == IncreaseStage.ADDITIVE
        assert state.target_rate == 15.0
        assert state.current_rate == 12.5

    def test_hyper_stage_after_both_counters_pass_threshold(self):
        state = DcqcnState(current_rate=10.0, target_rate=10.0, timer_count=6, byte_count=6)
        dcqcn_decide(state, False, 55.0, 0.0)
        assert state.increase_stage == IncreaseStage.HYPER
        assert state.target_rate == 60.0

    def test_byte_counter_fires_increase(self):
        state = DcqcnState(current_rate=50.0, target_rate=100.0)
        dcqcn_decide(state, False, 0.0, 10 * 1024 * 1024)
        assert state.byte_count == 1
        assert state.current_rate == 75.0

    def test_alpha_decays_without_marks(self):
        state = DcqcnState(current_rate=50.0, target_rate=50.0, alpha=1.0)
        dcqcn_decide(state, False, 110.0, 0.0)
        assert state.alpha == pytest.approx((15 / 16) ** 2)

    def test_alpha_and_rate_stay_in_bounds(self):
        rng = np.random.default_rng(0)
        state = DcqcnState(current_rate=100.0, target_rate=100.0)
        for _ in range(5000):
            rate = dcqcn_decide(state, bool(rng.random() < 0.3), float(rng.uniform(0, 200)),
                                float(rng.uniform(0, 2e7)))
            assert 0.0 <= state.alpha <= 1.0
            assert 0.1 <= rate <= 100.0


class TestSwift:
    def test_below_target_adds_ai(self):
        state = SwiftState(rate=50.0)
        assert swift_decide(state, 14.9, now=0.0) == pytest.approx(51.0)

    def test_decrease_proportional_to_excess_delay(self):
        state = SwiftState(rate=50.0, md_beta=0.4)
        assert swift_decide(state, 20.0, now=0.0) == pytest.approx(40.0)

    def test_decrease_capped_by_max_md(self):
        state = SwiftState(rate=50.0, md_beta=1.0, max_md=0.5)
        assert swift_decide(state, 1000.0, now=0.0) == pytest.approx(25.0)

    def test_at_most_one_decrease_per_rtt(self):
        state = SwiftState(rate=50.0, md_beta=0.4)
        first = swift_decide(state, 20.0, now=100.0)
        second = swift_decide(state, 20.0, now=105.0)
        assert second == first
        third = swift_decide(state, 20.0, now=120.0)
        assert third < second

    def test_lockstep_decreases_are_not_skipped(self):
        """Regression: with one feedback sample per RTT, every other decrease was dropped."""
        state = SwiftState(rate=100.0, md_beta=0.4)
        now, rates = 1234.567, []
        for rtt in (16.3, 19.7, 23.1, 26.9, 24.2, 21.8, 19.1):
            now = now + rtt
            rates.append(swift_decide(state, rtt, now=now))
        assert all(b < a for a, b in zip(rates, rates[1:]))

    def test_gate_uses_rtt_of_last_decrease(self):
        state = SwiftState(rate=50.0, md_beta=0.4)
        swift_decide(state, 20.0, now=100.0)
        assert state.last_decrease_rtt_us == 20.0
        before = state.rate
        assert swift_decide(state, 30.0, now=120.0) < before

    def test_invalid_state_rejected(self):
        for kwargs in ({"target_delay_us": 0.0}, {"md_beta": 0.0}, {"max_md": 1.0}, {"max_md": 0.0}, {"ai": -1.0}):
            with pytest.raises(ValueError):
                SwiftState(rate=50.0, **kwargs)

    def test_zero_delay_with_zero_target_holds_rate(self):
        """Regression: a zero target with an empty queue divided by the zero delay."""
        state = SwiftState(rate=50.0)
        state.target_delay_us = 0.0
        assert swift_decide(state, 10.0, now=100.0, base_rtt=10.0) == 50.0
        assert state.last_decrease_time_us is None

    def test_rate_clamped(self):
        rng = np.random.default_rng(1)
        state = SwiftState(rate=100.0)
        for t in range(5000):
            rate = swift_decide(state, float(rng.uniform(10, 60)), now=float(t))
            assert 0.1 <= rate <= 100.0

    def test_asymmetric_flows_converge_to_fair_share(self):
        """Regression: lockstep AIMD shrinks the rate gap on every decrease."""
        def factory(flow, cfg):
            ctrl = SwiftController(cfg)
            ctrl.state.rate = 90.0 if flow.flow_id == 0 else 10.0
            return ctrl

        engine = build_scenario(many_to_one(2), SimConfig(duration_us=50_000.0), factory)
        rates = run(engine).array("rates")[-1]
        assert abs(rates[0] - rates[1]) <= 0.1 * max(rates)


class TestReferenceControllers:
    def test_greedy_asks_for_line_rate(self):
        cfg = SimConfig(initial_rate_gbps=5.0)
        assert GreedyController().initial_rate(cfg) == cfg.line_rate_gbps

    def test_fixed_rate(self):
        ctrl = FixedRateController(12.5, decision_latency_us=3.0)
        assert ctrl.initial_rate(SimConfig()) == 12.5
        assert ctrl.decision_latency_us == 3.0

    def test_fair_share_splits_line_rate(self):
        cfg = SimConfig()
        ctrl = fair_share_factory(64)(None, cfg)
        assert ctrl.rate_gbps == 1.5625

    def test_fair_share_of_zero_flows(self):
        assert fair_share_factory(0)(None, SimConfig()).rate_gbps == 100.0
