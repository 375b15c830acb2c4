"""
The learned rate controller: reward and δ, the sliding observation window,
the single-hidden-layer MLP and the output-to-multiplier mapping.

Every decision multiplies the flow's current rate by ``exp(clamp(y))`` where
``y`` is the model's raw output for the flattened window.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .structs import FlowState, ProbeFeedback, SimConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "rlcc-policy v1"

DEFAULT_WINDOW = 5
DEFAULT_HIDDEN = 16


class PolicyNumericError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


class Predictor(Protocol):
    """Anything mapping a flattened observation window to a raw output."""

    def predict(self, features: np.ndarray) -> float: ...

    def predict_many(self, features: np.ndarray) -> np.ndarray: ...


# ============================================================================
# Reward
# ============================================================================

@dataclass(frozen=True)
class RewardParams:
    target: float = 0.064
    beta: float = 1.5

    def __post_init__(self):
        if not self.target > 0:
            raise ValueError(f"target must be > 0, got {self.target}")
        if not self.beta >= 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")


def compute_delta(params: RewardParams, rtt_inflation: float, rate: float, line_rate: float) -> float:
    """target - max(inflation - beta, 0) * sqrt(rate / line_rate); never above target."""
    excess = max(rtt_inflation - params.beta, 0.0)
    return params.target - excess * math.sqrt(rate / line_rate)


def compute_reward(params: RewardParams, rtt_inflation: float, rate: float, line_rate: float) -> float:
    delta = compute_delta(params, rtt_inflation, rate, line_rate)
    return -(delta * delta)


# ============================================================================
# Observation window
# ============================================================================

class ObservationWindow:
    """
    The last ``size`` (delta, action) pairs of one flow.

    Starts full of neutral pairs: delta at ``target`` and action 0, which maps
    to a multiplier of 1. ``features()`` flattens oldest to newest with delta
    and action interleaved.
    """

    def __init__(self, size: int = DEFAULT_WINDOW, initial_delta: float = 0.064, initial_action: float = 0.0):
        if size < 1:
            raise ValueError(f"window size must be >= 1, got {size}")
        self.size = size
        self._pairs: deque[tuple[float, float]] = deque(
            [(initial_delta, initial_action)] * size, maxlen=size
        )

    def push(self, delta: float, action: float) -> "ObservationWindow":
        self._pairs.append((float(delta), float(action)))
        return self

    def pairs(self) -> list[tuple[float, float]]:
        return list(self._pairs)

    def features(self) -> np.ndarray:
        return np.fromiter((v for pair in self._pairs for v in pair), float, 2 * self.size)

    def __len__(self):
        return len(self._pairs)

    def __repr__(self):
        return f"<ObservationWindow size={self.size} newest={self._pairs[-1]}>"


def push_observation(window: ObservationWindow, delta: float, action: float) -> ObservationWindow:
    return window.push(delta, action)


# ============================================================================
# MLP
# ============================================================================

@dataclass
class MlpPolicy:
    """y = w2 . tanh(x @ w1 + b1) + b2 with w1 shaped (2H, hidden)."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=float).reshape(-1)
        self.b2 = float(self.b2)
        if self.w1.ndim != 2:
            raise ValueError(f"w1 must be 2-D, got shape {self.w1.shape}")
        hidden = self.w1.shape[1]
        if self.b1.shape != (hidden,) or self.w2.shape != (hidden,):
            raise ValueError(
                f"shape mismatch: w1 {self.w1.shape}, b1 {self.b1.shape}, w2 {self.w2.shape}"
            )

    @classmethod
    def init(cls, n_inputs: int = 2 * DEFAULT_WINDOW, hidden: int = DEFAULT_HIDDEN,
             seed: int = 0, scale: float = 0.1) -> "MlpPolicy":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.uniform(-scale, scale, size=(n_inputs, hidden)),
            b1=rng.uniform(-scale, scale, size=hidden),
            w2=rng.uniform(-scale, scale, size=hidden),
            b2=float(rng.uniform(-scale, scale)),
        )

    @classmethod
    def warm_start(cls, n_inputs: int = 2 * DEFAULT_WINDOW, hidden: int = DEFAULT_HIDDEN,
                   seed: int = 0, scale: float = 0.1, target: float = 0.064,
                   damping: float = 0.5, level: float = 0.12, knee: float = 0.2,
                   ramp: float = 0.07, ramp_margin: float = 0.02) -> "MlpPolicy":
        """
        Hand-placed starting weights for training.

        Unit 0 follows the change of the newest delta, unit 1 its level with a
        soft knee at ``-knee`` bounding the decrease, and unit 2 ramps the rate
        up only while every delta in the window sits within ``ramp_margin`` of
        ``target`` in total. All three output 0 when the window holds delta 0,
        so a flow on the fixed point keeps its rate. Remaining units start
        random with zero output weight.
        """
        if n_inputs < 4 or n_inputs % 2:
            raise ValueError(f"warm start needs an even input width >= 4, got {n_inputs}")
        if hidden < 3:
            raise ValueError(f"warm start needs at least 3 hidden units, got {hidden}")
        policy = cls.init(n_inputs, hidden, seed, scale)
        window = n_inputs // 2
        newest, previous = n_inputs - 2, n_inputs - 4
        level_gain, ramp_gain = 10.0, 100.0
        policy.w1[:, :3] = 0.0
        policy.w1[newest, 0], policy.w1[previous, 0] = 1.0, -1.0
        policy.w1[newest, 1] = level_gain
        policy.w1[0::2, 2] = ramp_gain
        policy.b1[:3] = (0.0, level_gain * knee, -ramp_gain * (window * target - ramp_margin))
        policy.w2[:] = 0.0
        policy.w2[:3] = (damping, level, ramp)
        policy.b2 = ramp - level * float(np.tanh(level_gain * knee))
        return policy

    @classmethod
    def zeros(cls, n_inputs: int = 2 * DEFAULT_WINDOW, hidden: int = DEFAULT_HIDDEN) -> "MlpPolicy":
        return cls(np.zeros((n_inputs, hidden)), np.zeros(hidden), np.zeros(hidden), 0.0)

    @property
    def n_inputs(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1

    def parameters(self) -> np.ndarray:
        """Flat copy in the order w1 (row-major), b1, w2, b2."""
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_parameters(self, theta: np.ndarray) -> "MlpPolicy":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        n_w1 = self.w1.size
        h = self.hidden
        return MlpPolicy(
            w1=theta[:n_w1].reshape(self.w1.shape).copy(),
            b1=theta[n_w1:n_w1 + h].copy(),
            w2=theta[n_w1 + h:n_w1 + 2 * h].copy(),
            b2=float(theta[-1]),
        )

    def check_finite(self) -> None:
        if not (np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.b1))
                and np.all(np.isfinite(self.w2)) and math.isfinite(self.b2)):
            raise PolicyNumericError("policy has non-finite parameters")

    def hidden_layer(self, features: np.ndarray) -> np.ndarray:
        return np.tanh(np.asarray(features, dtype=float) @ self.w1 + self.b1)

    def predict(self, features: np.ndarray) -> float:
        x = np.asarray(features, dtype=float)
        if x.shape != (self.n_inputs,):
            raise ValueError(f"expected {self.n_inputs} features, got shape {x.shape}")
        return float(self.hidden_layer(x) @ self.w2 + self.b2)

    def predict_many(self, features: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        return self.hidden_layer(X) @ self.w2 + self.b2


def mlp_forward(policy: MlpPolicy, window: ObservationWindow | np.ndarray) -> float:
    policy.check_finite()
    features = window.features() if isinstance(window, ObservationWindow) else window
    return policy.predict(features)


# ============================================================================
# Actions
# ============================================================================

@dataclass(frozen=True)
class ActionMapper:
    y_min: float = math.log(0.8)
    y_max: float = math.log(1.25)

    def __post_init__(self):
        if not self.y_min < self.y_max:
            raise ValueError(f"need y_min < y_max, got {self.y_min}, {self.y_max}")

    def clamp(self, y: float) -> float:
        return min(max(y, self.y_min), self.y_max)

    def multiplier(self, y: float) -> float:
        return math.exp(self.clamp(y))

    def in_range(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (y >= self.y_min) & (y <= self.y_max)


def action_from_output(mapper: ActionMapper, y: float) -> float:
    if not math.isfinite(y):
        raise PolicyNumericError(f"raw output is not finite: {y}")
    return mapper.multiplier(y)


# ============================================================================
# Controller binding
# ============================================================================

# (features, delta, raw_output, flow_id)
RecordHook = Callable[[np.ndarray, float, float, int], None]


class RlccController:
    """Binds a model to one flow: owns the flow's window and previous action."""

    def __init__(
        self,
        model: Predictor,
        params: RewardParams | None = None,
        mapper: ActionMapper | None = None,
        window: int = DEFAULT_WINDOW,
        decision_latency_us: float | None = None,
        record: RecordHook | None = None,
    ):
        self.model = model
        self.params = params or RewardParams()
        self.mapper = mapper or ActionMapper()
        self.window = ObservationWindow(window, initial_delta=self.params.target)
        self.decision_latency_us = decision_latency_us
        self.record = record
        self.previous_action = 0.0
        # overrides the configured start rate when set
        self.start_rate_gbps: float | None = None

    def initial_rate(self, cfg: SimConfig) -> float:
        if self.start_rate_gbps is not None:
            return self.start_rate_gbps
        return cfg.line_rate_gbps if cfg.initial_rate_gbps is None else cfg.initial_rate_gbps

    def decide(self, feedback: ProbeFeedback) -> float:
        delta = compute_delta(self.params, feedback.inflation, feedback.rate_gbps, feedback.line_rate_gbps)
        self.window.push(delta, self.previous_action)
        features = self.window.features()
        y = self.model.predict(features)
        if not math.isfinite(y):
            raise PolicyNumericError(f"flow {feedback.flow_id}: raw output is not finite")
        if self.record is not None:
            self.record(features, delta, y, feedback.flow_id)
        self.previous_action = self.mapper.clamp(y)
        return feedback.rate_gbps * self.mapper.multiplier(y)


def rlcc_factory(
    model: Predictor,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    window: int = DEFAULT_WINDOW,
    decision_latency_us: float | None = None,
    record: RecordHook | None = None,
):
    """Every flow gets its own controller around the same shared model."""
    def factory(flow: FlowState, cfg: SimConfig) -> RlccController:
        return RlccController(model, params, mapper, window, decision_latency_us, record)
    return factory


# ============================================================================
# Checkpoints
# ============================================================================

def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _row(values: Sequence[float]) -> str:
    return " ".join(_fmt(v) for v in values)


def save_policy(policy: MlpPolicy, path: str | Path, mapper: ActionMapper | None = None) -> Path:
    mapper = mapper or ActionMapper()
    policy.check_finite()
    if policy.n_inputs % 2:
        raise CheckpointFormatError(f"input width must be even (delta, action pairs), got {policy.n_inputs}")
    lines = [
        CHECKPOINT_MAGIC,
        f"window {policy.n_inputs // 2}",
        f"hidden {policy.hidden}",
        f"clamp {_fmt(mapper.y_min)} {_fmt(mapper.y_max)}",
        f"w1 {policy.w1.shape[0]} {policy.w1.shape[1]}",
    ]
    lines.extend(_row(r) for r in policy.w1)
    lines.append(f"b1 {policy.hidden}")
    lines.append(_row(policy.b1))
    lines.append(f"w2 {policy.hidden}")
    lines.append(_row(policy.w2))
    lines.append("b2")
    lines.append(_fmt(policy.b2))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Saved policy checkpoint to {path}")
    return path


class _Lines:
    def __init__(self, text: str):
        self._lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        self._pos = 0

    def next(self, expect: str | None = None) -> list[str]:
        if self._pos >= len(self._lines):
            raise CheckpointFormatError(f"unexpected end of checkpoint (wanted {expect or 'a line'})")
        parts = self._lines[self._pos].split()
        self._pos += 1
        if expect is not None and parts[0] != expect:
            raise CheckpointFormatError(f"expected '{expect}', got '{parts[0]}'")
        return parts


def _floats(parts: list[str], n: int, what: str) -> np.ndarray:
    if len(parts) != n:
        raise CheckpointFormatError(f"{what}: expected {n} values, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise CheckpointFormatError(f"{what}: {exc}") from exc


def load_policy(path: str | Path) -> tuple[MlpPolicy, ActionMapper]:
    text = Path(path).read_text()
    if not text.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: not a policy checkpoint (missing '{CHECKPOINT_MAGIC}')")
    lines = _Lines(text)
    lines.next()
    try:
        window = int(lines.next("window")[1])
        hidden = int(lines.next("hidden")[1])
        clamp = lines.next("clamp")
        mapper = ActionMapper(float(clamp[1]), float(clamp[2]))
        _, rows, cols = lines.next("w1")
        rows, cols = int(rows), int(cols)
    except (IndexError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header: {exc}") from exc
    if rows != 2 * window or cols != hidden:
        raise CheckpointFormatError(f"{path}: w1 is {rows}x{cols}, header says window {window} hidden {hidden}")

    w1 = np.vstack([_floats(lines.next(), cols, f"w1 row {i}") for i in range(rows)])
    lines.next("b1")
    b1 = _floats(lines.next(), hidden, "b1")
    lines.next("w2")
    w2 = _floats(lines.next(), hidden, "w2")
    lines.next("b2")
    b2 = _floats(lines.next(), 1, "b2")[0]

    policy = MlpPolicy(w1, b1, w2, b2)
    try:
        policy.check_finite()
    except PolicyNumericError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    return policy, mapper
