"""
Deterministic discrete-event, fluid-flow network simulator.

The network is a single switch with one congested FIFO queue per destination
egress port. Every flow keeps exactly one probe in flight: the probe reports the
RTT implied by its port's queue, the flow's controller reacts after a
configurable decision latency, and the next probe leaves when the new rate is
applied.

Between two events every rate is constant, so advancing a queue with the
piecewise-linear fluid update below is exact.
"""
from __future__ import annotations

import csv
import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .structs import (
    BITS_PER_GBPS_US,
    Event,
    EventKind,
    EventOutcome,
    FlowState,
    PortQueue,
    ProbeFeedback,
    ScenarioKind,
    ScenarioSpec,
    SimConfig,
)

logger = logging.getLogger(__name__)

TRACE_HEADER = ["time_us", "flow_id", "rate_gbps", "rtt_us", "port_occupancy_bits", "dropped_bits", "delivered_bits"]

# flow_id used for engine-level events so they sort before flow events at equal times
ENGINE_EVENT_ID = -1


class ContractViolation(ValueError):
    pass


class UnknownFlowError(RuntimeError):
    pass


class Controller(Protocol):
    # None: use SimConfig.decision_latency_us
    decision_latency_us: float | None

    def initial_rate(self, cfg: SimConfig) -> float: ...

    def decide(self, feedback: ProbeFeedback) -> float: ...


ControllerFactory = Callable[[FlowState, SimConfig], Controller]


def advance_queue(queue: PortQueue, aggregate_rate: float, dt: float) -> PortQueue:
    """
    Advance a fluid FIFO queue by ``dt`` microseconds under a constant inflow.

    The queue is updated in place and returned. With a constant inflow the
    occupancy moves monotonically, so clamping the end point at 0 and at the
    buffer limit is exact; inflow beyond the buffer limit is dropped.
    """
    if dt < 0:
        raise ContractViolation(f"advance_queue: dt must be >= 0, got {dt}")
    if aggregate_rate < 0:
        raise ContractViolation(f"advance_queue: aggregate_rate must be >= 0, got {aggregate_rate}")
    if dt == 0:
        return queue

    inflow = aggregate_rate * dt * BITS_PER_GBPS_US
    service = queue.capacity_gbps * dt * BITS_PER_GBPS_US
    unclamped = queue.occupancy_bits + inflow - service

    queue.injected_bits += inflow
    queue.delivered_bits += min(service, queue.occupancy_bits + inflow)
    if unclamped > queue.buffer_bits:
        queue.dropped_bits += unclamped - queue.buffer_bits
        queue.occupancy_bits = queue.buffer_bits
    elif unclamped < 0:
        queue.occupancy_bits = 0.0
    else:
        queue.occupancy_bits = unclamped
    queue.last_update_us += dt
    return queue


def rtt_of(queue: PortQueue, cfg: SimConfig) -> float:
    """Base RTT plus the queueing delay of one congested port, in microseconds."""
    return cfg.base_rtt_us + queue.occupancy_bits / (queue.capacity_gbps * BITS_PER_GBPS_US)


@dataclass
class MetricsTrace:
    """Periodic samples of the whole network plus every probe RTT."""
    flow_ids: list[int] = field(default_factory=list)
    flow_ports: list[int] = field(default_factory=list)
    times_us: list[float] = field(default_factory=list)
    rates: list[np.ndarray] = field(default_factory=list)
    sent_bits: list[np.ndarray] = field(default_factory=list)
    last_rtt: list[np.ndarray] = field(default_factory=list)
    occupancy: list[np.ndarray] = field(default_factory=list)
    dropped: list[np.ndarray] = field(default_factory=list)
    delivered: list[np.ndarray] = field(default_factory=list)
    injected: list[np.ndarray] = field(default_factory=list)
    # (time_us, flow_id, rtt_us, rate_gbps) for every probe arrival
    probes: list[tuple[float, int, float, float]] = field(default_factory=list)

    def array(self, name: str) -> np.ndarray:
        values = getattr(self, name)
        if name in ("times_us", "probes"):
            return np.asarray(values, dtype=float)
        n_cols = len(self.flow_ids) if name in ("rates", "sent_bits", "last_rtt") else None
        if not values:
            return np.zeros((0, n_cols or 0))
        return np.vstack(values)

    def index_at(self, time_us: float) -> int:
        """Index of the first sample taken at or after ``time_us``."""
        return int(np.searchsorted(np.asarray(self.times_us, dtype=float), time_us, side="left"))

    def __len__(self):
        return len(self.times_us)


class Engine:
    """
    One simulation instance: ports, flows, the event heap and the trace.

    Engines share no mutable state, so independent engines may run on
    separate threads.
    """

    def __init__(self, cfg: SimConfig, ports: list[PortQueue], flows: list[FlowState]):
        self.cfg = cfg
        self.ports = ports
        self.flows = flows
        self.now_us = 0.0
        self._heap: list[Event] = []
        self._seq = 0
        self._sample_index = 0
        self.horizon_us = cfg.duration_us
        self.trace = MetricsTrace(
            flow_ids=[f.flow_id for f in flows],
            flow_ports=[f.port_id for f in flows],
        )
        for idx, flow in enumerate(flows):
            if flow.flow_id != idx:
                raise ContractViolation(f"flow ids must be dense and ordered, got {flow.flow_id} at {idx}")
            if flow.controller is None:
                raise ContractViolation(f"flow {flow.flow_id} has no controller")
            self.ports[flow.port_id].flow_ids.append(flow.flow_id)
            self.schedule(flow.start_time_us, EventKind.FLOW_START, flow.flow_id)
        self.schedule(0.0, EventKind.METRICS_SAMPLE, ENGINE_EVENT_ID)

    @property
    def ports_in_use(self) -> list[PortQueue]:
        return [p for p in self.ports if p.flow_ids]

    def schedule(self, time_us: float, kind: EventKind, flow_id: int) -> Event:
        event = Event(time_us, flow_id, self._seq, kind)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def pending(self) -> int:
        return len(self._heap)

    def peek_time(self) -> float | None:
        return self._heap[0].time_us if self._heap else None

    def conservation_error(self) -> float:
        """Largest relative gap between injected bits and delivered + dropped + queued."""
        worst = 0.0
        for port in self.ports:
            accounted = port.delivered_bits + port.dropped_bits + port.occupancy_bits
            scale = max(port.injected_bits, 1.0)
            worst = max(worst, abs(port.injected_bits - accounted) / scale)
        return worst

    def _advance_port(self, port: PortQueue, now: float) -> None:
        advance_queue(port, port.aggregate_rate_gbps, now - port.last_update_us)
        port.last_update_us = now

    def _account_sent(self, flow: FlowState, now: float) -> None:
        if flow.active:
            flow.sent_bits += flow.rate_gbps * (now - flow.last_rate_change_us) * BITS_PER_GBPS_US
            if flow.size_bytes is not None:
                flow.bytes_remaining = max(flow.size_bytes - flow.sent_bits / 8.0, 0.0)
        flow.last_rate_change_us = now

    def _set_rate(self, flow: FlowState, new_rate: float, now: float) -> None:
        port = self.ports[flow.port_id]
        self._advance_port(port, now)
        self._account_sent(flow, now)
        port.aggregate_rate_gbps = max(port.aggregate_rate_gbps + new_rate - flow.rate_gbps, 0.0)
        flow.rate_gbps = new_rate
        if flow.size_bytes is not None:
            remaining_bits = flow.size_bytes * 8.0 - flow.sent_bits
            finish = now + max(remaining_bits, 0.0) / (new_rate * BITS_PER_GBPS_US)
            flow.end_event_seq = self.schedule(finish, EventKind.FLOW_END, flow.flow_id).seq

    def _send_probe(self, flow: FlowState, now: float) -> float:
        rtt = rtt_of(self.ports[flow.port_id], self.cfg)
        flow.pending_rtt_us = rtt
        self.schedule(now + rtt, EventKind.PROBE_ARRIVAL, flow.flow_id)
        return rtt

    def _flow(self, flow_id: int) -> FlowState:
        if not (0 <= flow_id < len(self.flows)):
            raise UnknownFlowError(f"event refers to unknown flow id {flow_id}")
        return self.flows[flow_id]

    def _on_flow_start(self, event: Event, flow: FlowState) -> EventOutcome:
        now = event.time_us
        flow.active = True
        flow.last_rate_change_us = now
        flow.last_decision_us = now
        flow.sent_at_last_decision = flow.sent_bits
        rate = self.cfg.clamp_rate(flow.controller.initial_rate(self.cfg))
        self._set_rate(flow, rate, now)
        rtt = self._send_probe(flow, now)
        return EventOutcome(event, new_rate_gbps=rate, rtt_us=rtt)

    def _on_probe_arrival(self, event: Event, flow: FlowState) -> EventOutcome:
        now = event.time_us
        if not flow.active:
            return EventOutcome(event, handled=False)
        port = self.ports[flow.port_id]
        self._advance_port(port, now)
        rtt = flow.pending_rtt_us
        flow.last_rtt_us = rtt
        self.trace.probes.append((now, flow.flow_id, rtt, flow.rate_gbps))

        sent_now = flow.sent_bits + flow.rate_gbps * (now - flow.last_rate_change_us) * BITS_PER_GBPS_US
        flow.pending_feedback = ProbeFeedback(
            now_us=now,
            flow_id=flow.flow_id,
            rtt_us=rtt,
            base_rtt_us=self.cfg.base_rtt_us,
            rate_gbps=flow.rate_gbps,
            line_rate_gbps=self.cfg.line_rate_gbps,
            occupancy_bits=port.occupancy_bits,
            elapsed_us=now - flow.last_decision_us,
            sent_bits=sent_now - flow.sent_at_last_decision,
        )
        latency = flow.controller.decision_latency_us
        if latency is None:
            latency = self.cfg.decision_latency_us
        self.schedule(now + latency, EventKind.DECISION_READY, flow.flow_id)
        return EventOutcome(event, rtt_us=rtt)

    def _on_decision_ready(self, event: Event, flow: FlowState) -> EventOutcome:
        now = event.time_us
        if not flow.active or flow.pending_feedback is None:
            return EventOutcome(event, handled=False)
        feedback = flow.pending_feedback
        flow.pending_feedback = None
        rate = self.cfg.clamp_rate(flow.controller.decide(feedback))
        self._set_rate(flow, rate, now)
        flow.last_decision_us = now
        flow.sent_at_last_decision = flow.sent_bits
        flow.probe_seq += 1
        rtt = self._send_probe(flow, now)
        return EventOutcome(event, new_rate_gbps=rate, rtt_us=rtt)

    def _on_flow_end(self, event: Event, flow: FlowState) -> EventOutcome:
        now = event.time_us
        if not flow.active or event.seq != flow.end_event_seq:
            return EventOutcome(event, handled=False)
        port = self.ports[flow.port_id]
        self._advance_port(port, now)
        self._account_sent(flow, now)
        flow.sent_bits = flow.size_bytes * 8.0
        flow.bytes_remaining = 0.0
        port.aggregate_rate_gbps = max(port.aggregate_rate_gbps - flow.rate_gbps, 0.0)
        if not any(self.flows[fid].active and fid != flow.flow_id for fid in port.flow_ids):
            port.aggregate_rate_gbps = 0.0
        flow.active = False
        flow.completion_time_us = now + rtt_of(port, self.cfg)
        return EventOutcome(event, new_rate_gbps=0.0)

    def _on_metrics_sample(self, event: Event) -> EventOutcome:
        now = event.time_us
        for port in self.ports:
            self._advance_port(port, now)
            # resync the incrementally maintained aggregate against float drift
            port.aggregate_rate_gbps = sum(
                self.flows[fid].rate_gbps for fid in port.flow_ids if self.flows[fid].active
            )
        self._record_sample(now)
        self._sample_index += 1
        next_time = self._sample_index * self.cfg.sample_interval_us
        if next_time <= self.horizon_us:
            self.schedule(next_time, EventKind.METRICS_SAMPLE, ENGINE_EVENT_ID)
        return EventOutcome(event)

    def _record_sample(self, now: float) -> None:
        trace = self.trace
        trace.times_us.append(now)
        rates = np.fromiter((f.rate_gbps if f.active else 0.0 for f in self.flows), float, len(self.flows))
        sent = np.fromiter(
            (f.sent_bits + (f.rate_gbps * (now - f.last_rate_change_us) * BITS_PER_GBPS_US if f.active else 0.0)
             for f in self.flows),
            float,
            len(self.flows),
        )
        trace.rates.append(rates)
        trace.sent_bits.append(sent)
        trace.last_rtt.append(np.fromiter((f.last_rtt_us for f in self.flows), float, len(self.flows)))
        trace.occupancy.append(np.array([p.occupancy_bits for p in self.ports]))
        trace.dropped.append(np.array([p.dropped_bits for p in self.ports]))
        trace.delivered.append(np.array([p.delivered_bits for p in self.ports]))
        trace.injected.append(np.array([p.injected_bits for p in self.ports]))

    def finalize(self, now: float) -> None:
        for port in self.ports:
            self._advance_port(port, now)
        for flow in self.flows:
            self._account_sent(flow, now)
        self.now_us = now


def step(engine: Engine) -> EventOutcome:
    """Pop and process the earliest pending event."""
    if not engine._heap:
        raise ContractViolation("step: event queue is empty")
    event = heapq.heappop(engine._heap)
    if event.time_us < engine.now_us:
        raise ContractViolation(f"event at {event.time_us} precedes clock {engine.now_us}")
    engine.now_us = event.time_us

    if event.kind == EventKind.METRICS_SAMPLE:
        return engine._on_metrics_sample(event)
    flow = engine._flow(event.flow_id)
    match event.kind:
        case EventKind.FLOW_START:
            return engine._on_flow_start(event, flow)
        case EventKind.PROBE_ARRIVAL:
            return engine._on_probe_arrival(event, flow)
        case EventKind.DECISION_READY:
            return engine._on_decision_ready(event, flow)
        case EventKind.FLOW_END:
            return engine._on_flow_end(event, flow)
    raise ContractViolation(f"unhandled event kind {event.kind}")


def run(engine: Engine, duration: float | None = None) -> MetricsTrace:
    """
    Process events up to ``duration`` microseconds of simulated time.

    Identical (config, seed) pairs produce identical traces.
    """
    horizon = engine.horizon_us if duration is None else duration
    if horizon > engine.horizon_us and engine._sample_index * engine.cfg.sample_interval_us > engine.horizon_us:
        # extending a finished run: re-arm the sampler
        engine.schedule(engine._sample_index * engine.cfg.sample_interval_us, EventKind.METRICS_SAMPLE, ENGINE_EVENT_ID)
    engine.horizon_us = horizon
    while engine._heap and engine._heap[0].time_us <= horizon:
        step(engine)
    engine.finalize(max(horizon, engine.now_us))
    return engine.trace


def _default_controller_factory(flow: FlowState, cfg: SimConfig) -> Controller:
    from .baselines import GreedyController

    return GreedyController()


def build_scenario(
    spec: ScenarioSpec,
    cfg: SimConfig,
    controller_factory: ControllerFactory | None = None,
) -> Engine:
    """
    Install a many-to-one, all-to-all or long-short scenario into a new engine.

    Ports are indexed by destination host. Without a factory every flow runs the
    greedy line-rate controller.
    """
    spec.validate(cfg)
    factory = controller_factory or _default_controller_factory
    rng = np.random.default_rng(cfg.seed)
    horizon = spec.horizon_us(cfg)
    flows: list[FlowState] = []

    def add_flow(src: int, dst: int, start: float = 0.0, size_bytes: int | None = None) -> None:
        flow = FlowState(
            flow_id=len(flows),
            src=src,
            dst=dst,
            port_id=dst,
            start_time_us=start,
            size_bytes=size_bytes,
            bytes_remaining=float(size_bytes) if size_bytes is not None else None,
        )
        flows.append(flow)

    match spec.kind:
        case ScenarioKind.MANY_TO_ONE:
            # host 0 receives, senders are hosts 1..hosts
            n_ports = 1
            for host in range(spec.hosts):
                for _ in range(spec.flows_per_host):
                    add_flow(host + 1, 0)
        case ScenarioKind.ALL_TO_ALL:
            n_ports = spec.hosts
            for src in range(spec.hosts):
                for dst in range(spec.hosts):
                    if dst == src:
                        continue
                    for _ in range(spec.flows_per_host):
                        add_flow(src, dst)
        case ScenarioKind.LONG_SHORT:
            n_ports = 1
            for idx in range(spec.n_long):
                add_flow(idx + 1, 0)
            burst = spec.short_start_us
            if burst is None:
                low = spec.warmup_for(cfg)
                burst = float(rng.uniform(low, max(low, horizon / 2)))
            for idx in range(spec.n_short):
                add_flow(spec.n_long + idx + 1, 0, start=burst, size_bytes=spec.short_bytes)
        case _:
            raise ContractViolation(f"unknown scenario kind {spec.kind}")

    ports = [
        PortQueue(
            port_id=idx,
            capacity_gbps=cfg.line_rate_gbps,
            buffer_bits=cfg.buffer_bits,
            occupancy_bits=cfg.initial_occupancy_bits,
            injected_bits=cfg.initial_occupancy_bits,
        )
        for idx in range(n_ports)
    ]
    for flow in flows:
        flow.controller = factory(flow, cfg)

    engine = Engine(cfg, ports, flows)
    engine.horizon_us = horizon
    logger.info(f"Built {spec.key}: {len(flows)} flows, {n_ports} ports, horizon {horizon} us")
    return engine


def write_trace_csv(trace: MetricsTrace, path: str | Path) -> Path:
    """Write one row per (sample, flow); port columns refer to the flow's port."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(TRACE_HEADER)
        for idx, now in enumerate(trace.times_us):
            rates = trace.rates[idx]
            rtts = trace.last_rtt[idx]
            occ, dropped, delivered = trace.occupancy[idx], trace.dropped[idx], trace.delivered[idx]
            for col, flow_id in enumerate(trace.flow_ids):
                port = trace.flow_ports[col]
                writer.writerow([
                    repr(float(now)), flow_id, repr(float(rates[col])), repr(float(rtts[col])),
                    repr(float(occ[port])), repr(float(dropped[port])), repr(float(delivered[port])),
                ])
    return path
