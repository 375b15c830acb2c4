"""
On-policy training of the MLP rate policy.

All flows of a rollout share one policy and each keeps its own window. Every
decision enters a fixed-size rollout buffer as (features, credited delta,
raw output), the credited delta being the mean of the next few deltas its
flow observes; when the buffer fills, the policy takes one gradient-ascent
step on sum_t delta_t * grad y(o_t) and the buffer is cleared.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pendulum

from .policy import (
    DEFAULT_HIDDEN,
    DEFAULT_WINDOW,
    ActionMapper,
    MlpPolicy,
    Predictor,
    RewardParams,
    compute_delta,
    rlcc_factory,
)
from .simcore import ControllerFactory, Engine, build_scenario, run
from .structs import PACKET_BITS, BITS_PER_GBPS_US, ScenarioKind, ScenarioSpec, SimConfig, many_to_one

logger = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["epoch", "mean_reward", "mean_abs_delta", "goodput", "inflation", "drops"]


class GradientError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class DeltaWeighting(str, Enum):
    PER_STEP = "per_step"
    TRAJECTORY_MEAN = "trajectory_mean"


class PolicyInit(str, Enum):
    WARM = "warm"
    UNIFORM = "uniform"


@dataclass
class Transition:
    features: np.ndarray
    delta: float
    raw_output: float
    flow_id: int = 0


class RolloutBuffer:
    """Fixed-capacity transition store; ``add`` reports when it becomes full."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError(f"buffer capacity must be > 0, got {capacity}")
        self.capacity = capacity
        self.transitions: list[Transition] = []

    def add(self, transition: Transition) -> bool:
        if self.is_full:
            raise GradientError("rollout buffer is full; update and clear it first")
        if not math.isfinite(transition.delta):
            raise GradientError(f"non-finite delta from flow {transition.flow_id}")
        self.transitions.append(transition)
        return self.is_full

    @property
    def is_full(self) -> bool:
        return len(self.transitions) >= self.capacity

    def clear(self) -> None:
        self.transitions.clear()

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if not self.transitions:
            return np.zeros((0, 0)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=int)
        X = np.vstack([t.features for t in self.transitions])
        deltas = np.array([t.delta for t in self.transitions])
        ys = np.array([t.raw_output for t in self.transitions])
        flows = np.array([t.flow_id for t in self.transitions], dtype=int)
        return X, deltas, ys, flows

    def __len__(self):
        return len(self.transitions)


def _weights(deltas: np.ndarray, flows: np.ndarray, weighting: DeltaWeighting) -> np.ndarray:
    if weighting == DeltaWeighting.PER_STEP:
        return deltas
    out = np.empty_like(deltas)
    for flow_id in np.unique(flows):
        mask = flows == flow_id
        out[mask] = deltas[mask].mean()
    return out


def accumulate_gradient(
    policy: MlpPolicy,
    buffer: RolloutBuffer,
    mapper: ActionMapper | None = None,
    weighting: DeltaWeighting | str = DeltaWeighting.PER_STEP,
) -> np.ndarray:
    """
    Gradient of sum_t w_t * y(o_t) with respect to the flat parameter vector.

    ``w_t`` is the transition's delta (or its flow's mean delta for
    trajectory-mean weighting). With a mapper, transitions whose recorded raw
    output sits outside the clamp interval contribute nothing.
    """
    theta_grad = np.zeros(policy.n_params)
    if len(buffer) == 0:
        return theta_grad
    X, deltas, ys, flows = buffer.arrays()
    if X.shape[1] != policy.n_inputs:
        raise GradientError(f"buffer features have width {X.shape[1]}, policy expects {policy.n_inputs}")

    w = _weights(deltas, flows, DeltaWeighting(weighting))
    if mapper is not None:
        w = np.where(mapper.in_range(ys), w, 0.0)

    hidden = policy.hidden_layer(X)
    g_w2 = hidden.T @ w
    g_b2 = w.sum()
    dz = (1.0 - hidden * hidden) * policy.w2[None, :] * w[:, None]
    g_w1 = X.T @ dz
    g_b1 = dz.sum(axis=0)

    theta_grad = np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])
    if not np.all(np.isfinite(theta_grad)):
        raise GradientError(f"non-finite gradient over {len(buffer)} transitions")
    return theta_grad


def clip_gradient(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None or max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def apply_update(policy: MlpPolicy, grad: np.ndarray, learning_rate: float) -> MlpPolicy:
    """theta + learning_rate * grad (ascent)."""
    if not np.all(np.isfinite(grad)):
        raise GradientError("refusing to apply a non-finite gradient")
    return policy.with_parameters(policy.parameters() + learning_rate * grad)


# ============================================================================
# Evaluation
# ============================================================================

@dataclass
class EvalReport:
    mean_reward: float = 0.0
    mean_abs_delta: float = 0.0
    goodput: float = 0.0
    inflation: float = 1.0
    # 64 KB packet equivalents dropped after warmup
    drops: float = 0.0
    n_probes: int = 0


def engine_report(engine: Engine, params: RewardParams, warmup_us: float) -> EvalReport:
    """Reward-side statistics of a finished run, over the post-warmup window."""
    cfg = engine.cfg
    trace = engine.trace
    report = EvalReport()

    probes = trace.array("probes")
    if len(probes):
        probes = probes[probes[:, 0] >= warmup_us]
    if len(probes):
        deltas = np.array([
            compute_delta(params, rtt / cfg.base_rtt_us, rate, cfg.line_rate_gbps)
            for _, _, rtt, rate in probes
        ])
        report.mean_reward = float(-np.mean(deltas * deltas))
        report.mean_abs_delta = float(np.mean(np.abs(deltas)))
        report.inflation = float(np.mean(probes[:, 2]) / cfg.base_rtt_us)
        report.n_probes = len(probes)

    if len(trace) < 2:
        return report
    start = min(trace.index_at(warmup_us), len(trace) - 1)
    window = trace.times_us[-1] - trace.times_us[start]
    ports = [p.port_id for p in engine.ports_in_use]
    if window > 0 and ports:
        delivered = trace.delivered[-1][ports] - trace.delivered[start][ports]
        report.goodput = float(delivered.sum() / (window * cfg.line_rate_gbps * BITS_PER_GBPS_US * len(ports)))
    dropped = trace.dropped[-1] - trace.dropped[start]
    report.drops = float(dropped.sum() / PACKET_BITS)
    return report


def evaluate_controller(
    factory: ControllerFactory,
    spec: ScenarioSpec,
    cfg: SimConfig,
    params: RewardParams | None = None,
) -> EvalReport:
    """Run ``spec`` under any controller and score it with the reward's delta."""
    params = params or RewardParams()
    engine = build_scenario(spec, cfg, factory)
    run(engine)
    return engine_report(engine, params, spec.warmup_for(cfg))


def evaluate_policy(
    policy: Predictor,
    spec: ScenarioSpec,
    cfg: SimConfig,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    window: int = DEFAULT_WINDOW,
) -> EvalReport:
    params = params or RewardParams()
    return evaluate_controller(rlcc_factory(policy, params, mapper, window), spec, cfg, params)


# ============================================================================
# Training
# ============================================================================

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    buffer_size: int = 256
    epochs: int = 50
    episode_us: float = 20_000.0
    curriculum_n: tuple[int, ...] = (2, 4, 8, 16, 32, 64)
    # hosts of the all-to-all curriculum scenario; 0 disables it
    all_to_all_hosts: int = 4
    eval_every: int = 5
    # None: many-to-one with the median curriculum N
    eval_flows: int | None = None
    convergence_threshold: float = 0.02
    delta_weighting: DeltaWeighting = DeltaWeighting.PER_STEP
    # a decision is credited with the mean of its flow's next credit_horizon deltas; 0 pairs it with its own
    credit_horizon: int = 4
    max_grad_norm: float | None = 10.0
    divergence_factor: float = 10.0
    window: int = DEFAULT_WINDOW
    hidden: int = DEFAULT_HIDDEN
    init: PolicyInit = PolicyInit.WARM
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.curriculum_n = tuple(int(n) for n in self.curriculum_n)
        self.delta_weighting = DeltaWeighting(self.delta_weighting)
        self.init = PolicyInit(self.init)
        if self.credit_horizon < 0:
            raise ValueError(f"credit_horizon must be >= 0, got {self.credit_horizon}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.buffer_size <= 0:
            raise ValueError(f"buffer_size must be > 0, got {self.buffer_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.episode_us > 0:
            raise ValueError(f"episode_us must be > 0, got {self.episode_us}")
        if any(n < 1 for n in self.curriculum_n):
            raise ValueError(f"curriculum flow counts must be >= 1, got {self.curriculum_n}")
        if not self.curriculum_n and self.all_to_all_hosts < 2:
            raise ValueError("curriculum is empty")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")

    def curriculum(self) -> list[ScenarioSpec]:
        specs = [many_to_one(n) for n in self.curriculum_n]
        if self.all_to_all_hosts >= 2:
            specs.append(ScenarioSpec(ScenarioKind.ALL_TO_ALL, hosts=self.all_to_all_hosts))
        return specs

    def eval_spec(self) -> ScenarioSpec:
        if self.eval_flows is not None:
            return many_to_one(self.eval_flows)
        ns = sorted(self.curriculum_n) or [self.all_to_all_hosts]
        return many_to_one(ns[len(ns) // 2])


@dataclass
class EpochLog:
    epoch: int
    mean_reward: float
    mean_abs_delta: float
    goodput: float
    inflation: float
    drops: float
    updates: int = 0
    eval_abs_delta: float | None = None


@dataclass
class TrainResult:
    policy: MlpPolicy
    log: list[EpochLog] = field(default_factory=list)
    # "epochs", "converged", "diverged" or "no_epochs"
    stop_reason: str = "epochs"
    best_eval_abs_delta: float = math.inf
    started_at: str = ""
    finished_at: str = ""


class _Learner:
    """
    Holds the live policy; controllers read it, the buffer hook updates it.

    A decision's effect on the queue shows up in later feedback of the same
    flow, so with a credit horizon K each decision waits in its flow's queue
    until K more deltas arrive and enters the buffer weighted by their mean.
    """

    def __init__(self, policy: MlpPolicy, config: TrainConfig, mapper: ActionMapper):
        self.policy = policy
        self.config = config
        self.mapper = mapper
        self.buffer = RolloutBuffer(config.buffer_size)
        self.updates = 0
        self.epoch_deltas: list[float] = []
        self._pending: dict[int, deque[tuple[np.ndarray, float, list[float]]]] = defaultdict(deque)

    def predict(self, features: np.ndarray) -> float:
        return self.policy.predict(features)

    def predict_many(self, features: np.ndarray) -> np.ndarray:
        return self.policy.predict_many(features)

    def start_episode(self) -> None:
        """Drop decisions still waiting for later deltas; flow ids restart per engine."""
        self._pending.clear()

    def record(self, features: np.ndarray, delta: float, y: float, flow_id: int) -> None:
        self.epoch_deltas.append(delta)
        horizon = self.config.credit_horizon
        if horizon == 0:
            self._add(Transition(features.copy(), delta, y, flow_id))
            return
        pending = self._pending[flow_id]
        for _, _, later in pending:
            later.append(delta)
        while pending and len(pending[0][2]) >= horizon:
            x, raw, later = pending.popleft()
            self._add(Transition(x, float(np.mean(later)), raw, flow_id))
        pending.append((features.copy(), y, []))

    def _add(self, transition: Transition) -> None:
        if self.buffer.add(transition):
            try:
                grad = accumulate_gradient(self.policy, self.buffer, self.mapper, self.config.delta_weighting)
                grad = clip_gradient(grad, self.config.max_grad_norm)
                self.policy = apply_update(self.policy, grad, self.config.learning_rate)
                self.updates += 1
            finally:
                self.buffer.clear()


def initial_policy(config: TrainConfig, params: RewardParams | None = None) -> MlpPolicy:
    params = params or RewardParams()
    n_inputs = 2 * config.window
    if config.init == PolicyInit.WARM:
        return MlpPolicy.warm_start(n_inputs, config.hidden, config.seed, config.init_scale, params.target)
    return MlpPolicy.init(n_inputs, config.hidden, config.seed, config.init_scale)


def train(
    config: TrainConfig,
    cfg: SimConfig,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    policy: MlpPolicy | None = None,
    strict: bool = False,
) -> TrainResult:
    """
    Alternate rollouts over the shuffled curriculum with buffer-triggered updates.

    Stops after ``config.epochs`` epochs, when the evaluation mean |delta| drops
    below the convergence threshold, or when it grows past
    ``divergence_factor`` times the best seen. Returns the policy with the
    lowest evaluation |delta|, not the last one; ``strict`` raises
    ``TrainingDiverged`` instead of stopping quietly.
    """
    params = params or RewardParams()
    mapper = mapper or ActionMapper()
    policy = policy or initial_policy(config, params)
    result = TrainResult(policy=policy, started_at=pendulum.now().to_iso8601_string())
    if config.epochs == 0:
        result.stop_reason = "no_epochs"
        result.finished_at = pendulum.now().to_iso8601_string()
        return result

    rng = np.random.default_rng(config.seed)
    curriculum = config.curriculum()
    eval_spec = config.eval_spec()
    episode_cfg = dataclasses.replace(cfg, duration_us=config.episode_us)
    learner = _Learner(policy, config, mapper)
    best_policy, best_eval = policy, math.inf

    for epoch in range(config.epochs):
        learner.epoch_deltas = []
        updates_before = learner.updates
        reports: list[EvalReport] = []
        for idx in rng.permutation(len(curriculum)):
            spec = curriculum[int(idx)]
            factory = rlcc_factory(learner, params, mapper, config.window, record=learner.record)
            learner.start_episode()
            engine = build_scenario(spec, dataclasses.replace(episode_cfg, seed=cfg.seed + epoch), factory)
            try:
                run(engine)
            except GradientError as exc:
                logger.error(f"Epoch {epoch}: aborted on {spec.key}: {exc}")
                learner.buffer.clear()
                break
            reports.append(engine_report(engine, params, spec.warmup_for(episode_cfg)))

        deltas = np.asarray(learner.epoch_deltas)
        entry = EpochLog(
            epoch=epoch,
            mean_reward=float(-np.mean(deltas * deltas)) if len(deltas) else 0.0,
            mean_abs_delta=float(np.mean(np.abs(deltas))) if len(deltas) else 0.0,
            goodput=float(np.mean([r.goodput for r in reports])) if reports else 0.0,
            inflation=float(np.mean([r.inflation for r in reports])) if reports else 1.0,
            drops=float(np.sum([r.drops for r in reports])) if reports else 0.0,
            updates=learner.updates - updates_before,
        )
        result.log.append(entry)

        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            report = evaluate_policy(learner.policy, eval_spec, episode_cfg, params, mapper, config.window)
            entry.eval_abs_delta = report.mean_abs_delta
            logger.info(
                f"Epoch {epoch}: reward {entry.mean_reward:.5f}, |delta| {entry.mean_abs_delta:.4f}, "
                f"eval |delta| {report.mean_abs_delta:.4f}, goodput {report.goodput:.3f}"
            )
            if report.mean_abs_delta < best_eval:
                best_policy, best_eval = learner.policy, report.mean_abs_delta
            if report.mean_abs_delta < config.convergence_threshold:
                result.stop_reason = "converged"
                break
            if report.mean_abs_delta > config.divergence_factor * best_eval:
                message = (
                    f"Epoch {epoch}: eval |delta| {report.mean_abs_delta:.4f} exceeds "
                    f"{config.divergence_factor}x best {best_eval:.4f}"
                )
                if strict:
                    raise TrainingDiverged(message)
                logger.warning(f"{message}; stopping with the best policy")
                result.stop_reason = "diverged"
                learner.policy = best_policy
                break

    result.policy = best_policy
    result.best_eval_abs_delta = best_eval
    result.finished_at = pendulum.now().to_iso8601_string()
    return result


def write_train_log(log: list[EpochLog], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(TRAIN_LOG_HEADER)
        for entry in log:
            writer.writerow([
                entry.epoch,
                repr(entry.mean_reward),
                repr(entry.mean_abs_delta),
                repr(entry.goodput),
                repr(entry.inflation),
                repr(entry.drops),
            ])
    return path
