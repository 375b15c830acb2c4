import math

import numpy as np
import pytest

from rlcc_lab.policy import (
    ActionMapper,
    CheckpointFormatError,
    MlpPolicy,
    ObservationWindow,
    PolicyNumericError,
    RewardParams,
    RlccController,
    action_from_output,
    compute_delta,
    compute_reward,
    load_policy,
    mlp_forward,
    push_observation,
    save_policy,
)
from rlcc_lab.structs import ProbeFeedback


def _feedback(rtt_us: float = 10.0, rate: float = 40.0, flow_id: int = 0) -> ProbeFeedback:
    return ProbeFeedback(
        now_us=100.0, flow_id=flow_id, rtt_us=rtt_us, base_rtt_us=10.0, rate_gbps=rate,
        line_rate_gbps=100.0, occupancy_bits=0.0, elapsed_us=10.0, sent_bits=0.0,
    )


def _loop_forward(policy: MlpPolicy, x: np.ndarray) -> float:
    """Scalar reference implementation."""
    out = policy.b2
    for j in range(policy.hidden):
        z = policy.b1[j]
        for i in range(policy.n_inputs):
            z += x[i] * policy.w1[i, j]
        out += policy.w2[j] * math.tanh(z)
    return out


class TestReward:
    def test_below_threshold_delta_is_target(self):
        params = RewardParams()
        assert compute_delta(params, 1.2, 100.0, 100.0) == params.target
        assert compute_reward(params, 1.2, 100.0, 100.0) == pytest.approx(-0.004096)

    def test_congested_line_rate_flow(self):
        params = RewardParams()
        assert compute_delta(params, 2.5, 100.0, 100.0) == pytest.approx(-0.936)
        assert compute_reward(params, 2.5, 100.0, 100.0) == pytest.approx(-0.876096)

    def test_fair_share_fixed_point(self):
        """Verification: inflation = target * sqrt(N) + beta zeroes delta at rate line/N."""
        params = RewardParams()
        for n in (2 ** k for k in range(13)):
            inflation = params.target * math.sqrt(n) + params.beta
            assert abs(compute_delta(params, inflation, 100.0 / n, 100.0)) <= 1e-12

    def test_delta_never_exceeds_target(self):
        params = RewardParams()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            delta = compute_delta(params, float(rng.uniform(1, 10)), float(rng.uniform(0.1, 100)), 100.0)
            assert delta <= params.target

    def test_reward_is_zero_only_at_zero_delta(self):
        params = RewardParams()
        assert compute_reward(params, 2.012, 100.0 / 64, 100.0) == pytest.approx(0.0, abs=1e-20)
        assert compute_reward(params, 1.0, 50.0, 100.0) < 0

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            RewardParams(target=0.0)
        with pytest.raises(ValueError):
            RewardParams(beta=0.5)


class TestWindow:
    def test_starts_with_neutral_pairs(self):
        window = ObservationWindow(3, initial_delta=0.064)
        assert window.pairs() == [(0.064, 0.0)] * 3

    def test_single_slot_window_holds_newest(self):
        window = ObservationWindow(1)
        push_observation(window, 0.5, -0.1)
        push_observation(window, 0.2, 0.1)
        assert window.pairs() == [(0.2, 0.1)]

    def test_keeps_last_pairs_in_order(self):
        window = ObservationWindow(5)
        for i in range(1, 8):
            push_observation(window, float(i), float(-i))
        assert window.pairs() == [(float(i), float(-i)) for i in range(3, 8)]

    def test_features_interleave_oldest_first(self):
        window = ObservationWindow(2, initial_delta=0.0)
        window.push(1.0, 2.0).push(3.0, 4.0)
        assert window.features().tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_rejects_empty_window(self):
        with pytest.raises(ValueError):
            ObservationWindow(0)


class TestMlp:
    def test_zero_weights_output_zero(self):
        assert mlp_forward(MlpPolicy.zeros(), ObservationWindow()) == 0.0

    def test_output_bias_only(self):
        policy = MlpPolicy.zeros()
        policy.b2 = 0.37
        assert mlp_forward(policy, np.ones(10)) == 0.37

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(3)
        policy = MlpPolicy.init(10, 16, seed=5, scale=0.5)
        for _ in range(20):
            x = rng.normal(size=10)
            assert abs(mlp_forward(policy, x) - _loop_forward(policy, x)) <= 1e-12

    def test_predict_many_matches_predict(self):
        policy = MlpPolicy.init(seed=1)
        X = np.random.default_rng(2).normal(size=(7, 10))
        expected = [policy.predict(x) for x in X]
        assert np.allclose(policy.predict_many(X), expected, rtol=0, atol=1e-15)

    def test_non_finite_parameters_rejected(self):
        policy = MlpPolicy.zeros()
        policy.w2[3] = np.nan
        with pytest.raises(PolicyNumericError):
            mlp_forward(policy, np.zeros(10))

    def test_wrong_input_width_rejected(self):
        with pytest.raises(ValueError):
            MlpPolicy.zeros().predict(np.zeros(4))

    def test_warm_start_holds_on_target(self):
        policy = MlpPolicy.warm_start(seed=3)
        x = np.zeros(10)
        x[1::2] = [0.1, -0.2, 0.05, 0.0, 0.2]
        assert policy.predict(x) == pytest.approx(0.0, abs=1e-12)

    def test_warm_start_sign_pattern(self):
        policy = MlpPolicy.warm_start()
        under = np.zeros(10)
        under[0::2] = 0.064
        congested = np.zeros(10)
        congested[8] = -0.5
        draining = np.zeros(10)
        draining[6], draining[8] = -0.5, -0.2
        assert policy.predict(under) > 0.1
        assert policy.predict(congested) < math.log(0.8)
        assert policy.predict(draining) > policy.predict(np.where(draining < 0, -0.2, 0.0))

    def test_warm_start_needs_room(self):
        with pytest.raises(ValueError):
            MlpPolicy.warm_start(n_inputs=2)
        with pytest.raises(ValueError):
            MlpPolicy.warm_start(hidden=2)

    def test_parameter_vector_layout(self):
        policy = MlpPolicy.init(4, 3, seed=0)
        theta = policy.parameters()
        assert theta.shape == (policy.n_params,) == (4 * 3 + 3 + 3 + 1,)
        assert theta[:12].tolist() == policy.w1.ravel().tolist()
        assert theta[-1] == policy.b2
        rebuilt = policy.with_parameters(theta)
        assert np.array_equal(rebuilt.parameters(), theta)


class TestActions:
    def test_zero_output_keeps_rate(self):
        assert action_from_output(ActionMapper(), 0.0) == 1.0

    def test_large_output_clamped_to_max_increase(self):
        assert action_from_output(ActionMapper(), 10.0) == pytest.approx(1.25)

    def test_large_negative_output_clamped_to_max_decrease(self):
        assert action_from_output(ActionMapper(), -10.0) == pytest.approx(0.8)

    def test_in_range_output_maps_exactly(self):
        assert action_from_output(ActionMapper(), math.log(0.9)) == pytest.approx(0.9)

    def test_non_finite_output_rejected(self):
        with pytest.raises(PolicyNumericError):
            action_from_output(ActionMapper(), float("inf"))

    def test_in_range_mask(self):
        mask = ActionMapper().in_range(np.array([-1.0, 0.0, 1.0]))
        assert mask.tolist() == [False, True, False]


class TestController:
    def test_zero_policy_holds_rate(self):
        ctrl = RlccController(MlpPolicy.zeros())
        assert ctrl.decide(_feedback(rate=40.0)) == 40.0

    def test_window_receives_delta_and_previous_action(self):
        policy = MlpPolicy.zeros()
        policy.b2 = 0.1
        seen = []
        ctrl = RlccController(policy, record=lambda f, d, y, fid: seen.append((f.copy(), d, y, fid)))
        ctrl.decide(_feedback(rtt_us=25.0, rate=100.0, flow_id=3))
        ctrl.decide(_feedback(rtt_us=10.0, rate=50.0, flow_id=3))
        first, second = seen
        assert first[1] == pytest.approx(0.064 - 1.0)
        assert first[0][-2:].tolist() == pytest.approx([0.064 - 1.0, 0.0])
        assert second[0][-2:].tolist() == pytest.approx([0.064, 0.1])
        assert first[3] == 3

    def test_multiplier_applies_to_feedback_rate(self):
        policy = MlpPolicy.zeros()
        policy.b2 = 5.0
        ctrl = RlccController(policy)
        assert ctrl.decide(_feedback(rate=40.0)) == pytest.approx(50.0)
        assert ctrl.previous_action == pytest.approx(math.log(1.25))


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        policy = MlpPolicy.init(10, 16, seed=9, scale=0.7)
        mapper = ActionMapper(-0.3, 0.4)
        path = save_policy(policy, tmp_path / "policy.txt", mapper)
        loaded, loaded_mapper = load_policy(path)
        assert np.array_equal(loaded.parameters(), policy.parameters())
        assert loaded_mapper == mapper

    def test_missing_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("window 5\n")
        with pytest.raises(CheckpointFormatError):
            load_policy(path)

    def test_truncated_checkpoint_rejected(self, tmp_path):
        path = save_policy(MlpPolicy.zeros(), tmp_path / "policy.txt")
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(CheckpointFormatError):
            load_policy(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = save_policy(MlpPolicy.zeros(), tmp_path / "policy.txt")
        path.write_text(path.read_text().replace("hidden 16", "hidden 8"))
        with pytest.raises(CheckpointFormatError):
            load_policy(path)
