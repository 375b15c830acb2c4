"""
Simplified DCQCN and Swift rate controllers, plus the reference controllers
used as oracles (greedy, fixed-rate, fair-share).

Both baselines are rate based and act once per probe, sharing the simulator's
actuation path with the learned policy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .structs import FlowState, ProbeFeedback, SimConfig

logger = logging.getLogger(__name__)


def _start_rate(cfg: SimConfig) -> float:
    return cfg.line_rate_gbps if cfg.initial_rate_gbps is None else cfg.initial_rate_gbps


# ============================================================================
# Reference controllers
# ============================================================================

class GreedyController:
    """Always asks for line rate."""
    decision_latency_us: float | None = None

    def initial_rate(self, cfg: SimConfig) -> float:
        return cfg.line_rate_gbps

    def decide(self, feedback: ProbeFeedback) -> float:
        return feedback.line_rate_gbps


class FixedRateController:
    """Pins the flow at a constant rate."""

    def __init__(self, rate_gbps: float, decision_latency_us: float | None = None):
        self.rate_gbps = rate_gbps
        self.decision_latency_us = decision_latency_us

    def initial_rate(self, cfg: SimConfig) -> float:
        return self.rate_gbps

    def decide(self, feedback: ProbeFeedback) -> float:
        return self.rate_gbps


def fair_share_factory(n_flows: int):
    """Factory pinning every flow at line_rate / n_flows."""
    def factory(flow: FlowState, cfg: SimConfig) -> FixedRateController:
        return FixedRateController(cfg.line_rate_gbps / max(n_flows, 1))
    factory.n_flows = n_flows
    return factory


# ============================================================================
# ECN marking
# ============================================================================

@dataclass
class EcnMarker:
    """RED-style marker on instantaneous queue occupancy."""
    k_min_bits: float = 100_000.0
    k_max_bits: float = 400_000.0
    p_max: float = 0.01
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    # port buffer the thresholds must fit in; None skips the check
    buffer_bits: float | None = None

    def __post_init__(self):
        if not (0 <= self.k_min_bits < self.k_max_bits):
            raise ValueError(f"need 0 <= k_min < k_max, got {self.k_min_bits}, {self.k_max_bits}")
        if self.buffer_bits is not None and self.k_max_bits > self.buffer_bits:
            raise ValueError(f"k_max_bits {self.k_max_bits} exceeds buffer {self.buffer_bits}")
        if not (0 <= self.p_max <= 1):
            raise ValueError(f"p_max must be in [0, 1], got {self.p_max}")

    def probability(self, occupancy: float) -> float:
        if occupancy < self.k_min_bits:
            return 0.0
        if occupancy >= self.k_max_bits:
            return 1.0
        return self.p_max * (occupancy - self.k_min_bits) / (self.k_max_bits - self.k_min_bits)


def ecn_mark(marker: EcnMarker, occupancy: float) -> bool:
    p = marker.probability(occupancy)
    if p <= 0.0:
        return False
    if p >= 1.0:
        return True
    return bool(marker.rng.random() < p)


# ============================================================================
# DCQCN
# ============================================================================

class IncreaseStage(str, Enum):
    FAST_RECOVERY = "fast_recovery"
    ADDITIVE = "additive"
    HYPER = "hyper"


@dataclass
class DcqcnParams:
    g: float = 1 / 16
    rate_ai_gbps: float = 5.0
    rate_hai_gbps: float = 50.0
    timer_us: float = 55.0
    byte_counter_bytes: float = 10 * 1024 * 1024
    fast_recovery_steps: int = 5
    alpha_period_us: float = 55.0


@dataclass
class DcqcnState:
    current_rate: float
    target_rate: float
    alpha: float = 1.0
    g: float = 1 / 16
    byte_counter: float = 0.0
    timer_state: float = 0.0
    alpha_timer: float = 0.0
    timer_count: int = 0
    byte_count: int = 0
    increase_stage: IncreaseStage = IncreaseStage.FAST_RECOVERY

    @property
    def stage_counter(self) -> int:
        return max(self.timer_count, self.byte_count)


def _dcqcn_stage(state: DcqcnState, params: DcqcnParams) -> IncreaseStage:
    f = params.fast_recovery_steps
    if max(state.timer_count, state.byte_count) <= f:
        return IncreaseStage.FAST_RECOVERY
    if min(state.timer_count, state.byte_count) > f:
        return IncreaseStage.HYPER
    return IncreaseStage.ADDITIVE


def _dcqcn_increase(state: DcqcnState, params: DcqcnParams, min_rate: float, line_rate: float) -> None:
    stage = _dcqcn_stage(state, params)
    state.increase_stage = stage
    if stage == IncreaseStage.ADDITIVE:
        state.target_rate = min(state.target_rate + params.rate_ai_gbps, line_rate)
    elif stage == IncreaseStage.HYPER:
        state.target_rate = min(state.target_rate + params.rate_hai_gbps, line_rate)
    state.current_rate = min(max((state.current_rate + state.target_rate) / 2, min_rate), line_rate)


def dcqcn_decide(
    state: DcqcnState,
    marked: bool,
    elapsed: float,
    bytes_sent: float,
    params: DcqcnParams | None = None,
    min_rate: float = 0.1,
    line_rate: float = 100.0,
) -> float:
    """
    Update a DCQCN reaction point for one probe and return the new current rate.

    A mark cuts the rate by alpha/2 and raises alpha. Without a mark the timer
    and the byte counter each fire increase events that walk through fast
    recovery, additive and hyper increase, and alpha decays once per period.
    """
    params = params or DcqcnParams(g=state.g)
    if marked:
        state.target_rate = state.current_rate
        state.current_rate = min(max(state.current_rate * (1 - state.alpha / 2), min_rate), line_rate)
        state.alpha = (1 - state.g) * state.alpha + state.g
        state.byte_counter = 0.0
        state.timer_state = 0.0
        state.alpha_timer = 0.0
        state.timer_count = 0
        state.byte_count = 0
        state.increase_stage = IncreaseStage.FAST_RECOVERY
        return state.current_rate

    state.alpha_timer += elapsed
    while state.alpha_timer >= params.alpha_period_us:
        state.alpha_timer -= params.alpha_period_us
        state.alpha = (1 - state.g) * state.alpha

    state.timer_state += elapsed
    while state.timer_state >= params.timer_us:
        state.timer_state -= params.timer_us
        state.timer_count += 1
        _dcqcn_increase(state, params, min_rate, line_rate)

    state.byte_counter += bytes_sent
    while state.byte_counter >= params.byte_counter_bytes:
        state.byte_counter -= params.byte_counter_bytes
        state.byte_count += 1
        _dcqcn_increase(state, params, min_rate, line_rate)

    return state.current_rate


class DcqcnController:
    decision_latency_us: float | None = None

    def __init__(self, cfg: SimConfig, marker: EcnMarker, params: DcqcnParams | None = None):
        self.params = params or DcqcnParams()
        self.marker = marker
        rate = cfg.clamp_rate(_start_rate(cfg))
        self.state = DcqcnState(current_rate=rate, target_rate=rate, g=self.params.g)
        self.min_rate = cfg.min_rate_gbps
        self.line_rate = cfg.line_rate_gbps

    def initial_rate(self, cfg: SimConfig) -> float:
        return self.state.current_rate

    def decide(self, feedback: ProbeFeedback) -> float:
        marked = ecn_mark(self.marker, feedback.occupancy_bits)
        return dcqcn_decide(
            self.state,
            marked,
            feedback.elapsed_us,
            feedback.sent_bits / 8.0,
            self.params,
            self.min_rate,
            self.line_rate,
        )


def dcqcn_factory(seed: int = 0, params: DcqcnParams | None = None, marker: EcnMarker | None = None):
    """All flows of one engine share a single seeded marking stream."""
    shared = marker or EcnMarker(rng=np.random.default_rng(seed))

    def factory(flow: FlowState, cfg: SimConfig) -> DcqcnController:
        return DcqcnController(cfg, shared, params)
    return factory


# ============================================================================
# Swift
# ============================================================================

@dataclass
class SwiftState:
    rate: float
    target_delay_us: float = 5.0
    ai: float = 1.0
    md_beta: float = 0.8
    max_md: float = 0.5
    last_decrease_time_us: float | None = None
    last_decrease_rtt_us: float = 0.0

    def __post_init__(self):
        if not self.target_delay_us > 0:
            raise ValueError(f"target_delay_us must be > 0, got {self.target_delay_us}")
        if not self.md_beta > 0:
            raise ValueError(f"md_beta must be > 0, got {self.md_beta}")
        if not (0 < self.max_md < 1):
            raise ValueError(f"max_md must be in (0, 1), got {self.max_md}")
        if self.ai < 0:
            raise ValueError(f"ai must be >= 0, got {self.ai}")

    def can_decrease(self, measured_rtt: float, now: float) -> bool:
        """
        True once a full RTT, as measured at the last decrease, has passed, or
        when the feedback left after that decrease.
        """
        last = self.last_decrease_time_us
        if last is None:
            return True
        tol = 1e-9 * max(1.0, abs(now))
        return now - last >= self.last_decrease_rtt_us - tol or now - measured_rtt >= last - tol


def swift_decide(
    state: SwiftState,
    measured_rtt: float,
    now: float,
    base_rtt: float = 10.0,
    min_rate: float = 0.1,
    line_rate: float = 100.0,
) -> float:
    """
    Delay-based AIMD step: additive increase below the target delay,
    multiplicative decrease proportional to the excess above it, at most once
    per measured RTT.
    """
    delay = max(measured_rtt - base_rtt, 0.0)
    if delay < state.target_delay_us:
        state.rate = state.rate + state.ai
    elif delay > 0 and state.can_decrease(measured_rtt, now):
        factor = max(1 - state.md_beta * (delay - state.target_delay_us) / delay, 1 - state.max_md)
        state.rate = state.rate * factor
        state.last_decrease_time_us = now
        state.last_decrease_rtt_us = measured_rtt
    state.rate = min(max(state.rate, min_rate), line_rate)
    return state.rate


class SwiftController:
    decision_latency_us: float | None = None

    def __init__(self, cfg: SimConfig, target_delay_us: float = 5.0, ai: float = 1.0,
                 md_beta: float = 0.8, max_md: float = 0.5):
        self.state = SwiftState(
            rate=cfg.clamp_rate(_start_rate(cfg)),
            target_delay_us=target_delay_us,
            ai=ai,
            md_beta=md_beta,
            max_md=max_md,
        )
        self.base_rtt = cfg.base_rtt_us
        self.min_rate = cfg.min_rate_gbps
        self.line_rate = cfg.line_rate_gbps

    def initial_rate(self, cfg: SimConfig) -> float:
        return self.state.rate

    def decide(self, feedback: ProbeFeedback) -> float:
        return swift_decide(
            self.state, feedback.rtt_us, feedback.now_us, self.base_rtt, self.min_rate, self.line_rate
        )


def swift_factory(**params):
    def factory(flow: FlowState, cfg: SimConfig) -> SwiftController:
        return SwiftController(cfg, **params)
    return factory
