"""
Shared domain types for the simulator, the controllers and the benchmarks.

Units used throughout the package:
- rates in Gbps
- times and durations in microseconds
- queue sizes and traffic volumes in bits

One Gbps sustained for one microsecond is exactly 1000 bits (``BITS_PER_GBPS_US``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum


BITS_PER_GBPS_US = 1000.0

# Drops are reported in units of one 64 KB RDMA write.
PACKET_BITS = 64 * 1024 * 8


class SimConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    line_rate_gbps: float = 100.0
    base_rtt_us: float = 10.0
    buffer_bits: float = 4_000_000.0
    min_rate_gbps: float = 0.1
    seed: int = 0
    duration_us: float = 50_000.0
    decision_latency_us: float = 0.0
    sample_interval_us: float = 100.0
    # None means flows start at line rate.
    initial_rate_gbps: float | None = None
    initial_occupancy_bits: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.line_rate_gbps > 0:
            raise SimConfigError(f"line_rate_gbps must be > 0, got {self.line_rate_gbps}")
        if not self.base_rtt_us > 0:
            raise SimConfigError(f"base_rtt_us must be > 0, got {self.base_rtt_us}")
        if not self.buffer_bits > 0:
            raise SimConfigError(f"buffer_bits must be > 0, got {self.buffer_bits}")
        if not (0 < self.min_rate_gbps <= self.line_rate_gbps):
            raise SimConfigError(
                f"min_rate_gbps must be in (0, line_rate_gbps], got {self.min_rate_gbps}"
            )
        if self.duration_us < 0:
            raise SimConfigError(f"duration_us must be >= 0, got {self.duration_us}")
        if self.decision_latency_us < 0:
            raise SimConfigError(f"decision_latency_us must be >= 0, got {self.decision_latency_us}")
        if not self.sample_interval_us > 0:
            raise SimConfigError(f"sample_interval_us must be > 0, got {self.sample_interval_us}")
        if self.initial_rate_gbps is not None and not self.initial_rate_gbps > 0:
            raise SimConfigError(f"initial_rate_gbps must be > 0, got {self.initial_rate_gbps}")
        if not (0 <= self.initial_occupancy_bits <= self.buffer_bits):
            raise SimConfigError(
                f"initial_occupancy_bits must be within [0, buffer_bits], got {self.initial_occupancy_bits}"
            )

    def clamp_rate(self, rate_gbps: float) -> float:
        return min(max(rate_gbps, self.min_rate_gbps), self.line_rate_gbps)

    @property
    def bdp_bits(self) -> float:
        """Bits held by a queue that adds exactly one base RTT of delay."""
        return self.line_rate_gbps * self.base_rtt_us * BITS_PER_GBPS_US


@dataclass
class PortQueue:
    """Fluid FIFO queue of one congested egress port."""
    port_id: int
    capacity_gbps: float
    buffer_bits: float
    occupancy_bits: float = 0.0
    dropped_bits: float = 0.0
    delivered_bits: float = 0.0
    injected_bits: float = 0.0
    last_update_us: float = 0.0
    # Sum of the current rates of the active flows feeding this port.
    aggregate_rate_gbps: float = 0.0
    flow_ids: list[int] = field(default_factory=list)

    def __repr__(self):
        return f"<PortQueue {self.port_id}: {self.occupancy_bits:.0f}/{self.buffer_bits:.0f} bits>"


class ScenarioKind(str, Enum):
    MANY_TO_ONE = "many_to_one"
    ALL_TO_ALL = "all_to_all"
    LONG_SHORT = "long_short"


@dataclass
class ScenarioSpec:
    kind: ScenarioKind = ScenarioKind.MANY_TO_ONE
    hosts: int = 4
    # many_to_one: flows per sender; all_to_all: flows per (sender, destination) pair
    flows_per_host: int = 1
    n_long: int = 4
    n_short: int = 100
    short_bytes: int = 1_000_000
    # None: take the horizon from SimConfig.duration_us
    duration_us: float | None = None
    # None: 20% of the horizon
    warmup_us: float | None = None
    # None: a seeded-random burst time in [warmup, horizon / 2]
    short_start_us: float | None = None

    def __post_init__(self):
        self.kind = ScenarioKind(self.kind)

    @property
    def key(self) -> str:
        if self.kind == ScenarioKind.LONG_SHORT:
            return f"{self.kind.value}-{self.n_long}L{self.n_short}S"
        if self.kind == ScenarioKind.ALL_TO_ALL:
            return f"{self.kind.value}-{self.hosts}x{self.flows_per_host}"
        return f"{self.kind.value}-{self.n_flows}"

    @property
    def n_flows(self) -> int:
        if self.kind == ScenarioKind.MANY_TO_ONE:
            return self.hosts * self.flows_per_host
        if self.kind == ScenarioKind.ALL_TO_ALL:
            return self.hosts * max(self.hosts - 1, 0) * self.flows_per_host
        return self.n_long + self.n_short

    @property
    def flows_per_port(self) -> int:
        """Flows sharing one bottleneck egress port."""
        if self.kind == ScenarioKind.ALL_TO_ALL:
            return max(self.hosts - 1, 0) * self.flows_per_host
        return self.n_flows

    def horizon_us(self, cfg: SimConfig) -> float:
        return cfg.duration_us if self.duration_us is None else self.duration_us

    def warmup_for(self, cfg: SimConfig) -> float:
        if self.warmup_us is not None:
            return self.warmup_us
        return 0.2 * self.horizon_us(cfg)

    def validate(self, cfg: SimConfig) -> None:
        for name in ("hosts", "flows_per_host", "n_long", "n_short"):
            value = getattr(self, name)
            if value < 0:
                raise SimConfigError(f"{name} must be >= 0, got {value}")
        if self.kind == ScenarioKind.LONG_SHORT and self.n_short > 0 and not self.short_bytes > 0:
            raise SimConfigError(f"short_bytes must be > 0 for long_short, got {self.short_bytes}")
        horizon = self.horizon_us(cfg)
        if horizon <= 0:
            raise SimConfigError(f"duration_us must be > 0, got {horizon}")
        warmup = self.warmup_for(cfg)
        if not (0 <= warmup < horizon):
            raise SimConfigError(f"warmup_us must be in [0, duration_us), got {warmup}")
        if self.short_start_us is not None and not (0 <= self.short_start_us < horizon):
            raise SimConfigError(f"short_start_us must be in [0, duration_us), got {self.short_start_us}")


def many_to_one(n_flows: int, **kwargs) -> ScenarioSpec:
    """Many-to-one with ``n_flows`` flows, spread over 4 senders when possible."""
    hosts = 4 if n_flows % 4 == 0 and n_flows >= 4 else 1
    return ScenarioSpec(ScenarioKind.MANY_TO_ONE, hosts=hosts, flows_per_host=n_flows // hosts, **kwargs)


@dataclass
class FlowState:
    flow_id: int
    src: int
    dst: int
    port_id: int
    rate_gbps: float = 0.0
    controller: object | None = None
    probe_seq: int = 0
    # None for infinite (long) flows
    size_bytes: int | None = None
    bytes_remaining: float | None = None
    start_time_us: float = 0.0
    completion_time_us: float | None = None
    active: bool = False
    sent_bits: float = 0.0
    last_rate_change_us: float = 0.0
    # RTT the in-flight probe will report when it arrives
    pending_rtt_us: float = 0.0
    last_rtt_us: float = 0.0
    last_decision_us: float = 0.0
    sent_at_last_decision: float = 0.0
    end_event_seq: int = -1
    pending_feedback: "ProbeFeedback | None" = None

    @property
    def is_short(self) -> bool:
        return self.size_bytes is not None

    def __repr__(self):
        return f"<FlowState {self.flow_id}: {self.src}->{self.dst} @ {self.rate_gbps:.3f} Gbps>"


@dataclass(frozen=True)
class ProbeFeedback:
    """What a controller sees when a probe comes back."""
    now_us: float
    flow_id: int
    rtt_us: float
    base_rtt_us: float
    rate_gbps: float
    line_rate_gbps: float
    occupancy_bits: float
    elapsed_us: float
    sent_bits: float

    @property
    def inflation(self) -> float:
        return self.rtt_us / self.base_rtt_us


class EventKind(IntEnum):
    FLOW_START = 0
    PROBE_ARRIVAL = 1
    DECISION_READY = 2
    FLOW_END = 3
    METRICS_SAMPLE = 4


@dataclass(frozen=True, order=True)
class Event:
    time_us: float
    flow_id: int
    seq: int
    kind: EventKind = field(compare=False)


@dataclass
class EventOutcome:
    event: Event
    # False when the event was stale (flow already ended, superseded FlowEnd)
    handled: bool = True
    new_rate_gbps: float | None = None
    rtt_us: float | None = None
