import pytest

import numpy as np

from rlcc_lab.baselines import FixedRateController, GreedyController, dcqcn_factory
from rlcc_lab.simcore import (
    TRACE_HEADER,
    ContractViolation,
    Engine,
    UnknownFlowError,
    advance_queue,
    build_scenario,
    rtt_of,
    run,
    step,
    write_trace_csv,
)
from rlcc_lab.structs import (
    EventKind,
    PortQueue,
    ScenarioKind,
    ScenarioSpec,
    SimConfig,
    SimConfigError,
    many_to_one,
)


def _queue(occupancy: float = 0.0, buffer_bits: float = 4_000_000.0) -> PortQueue:
    return PortQueue(port_id=0, capacity_gbps=100.0, buffer_bits=buffer_bits, occupancy_bits=occupancy)


def _fixed(rate: float):
    return lambda flow, cfg: FixedRateController(rate)


def _drain(engine: Engine, kind: EventKind, limit: int = 1000):
    outcomes = []
    for _ in range(limit):
        if not engine.pending():
            break
        outcome = step(engine)
        if outcome.event.kind == kind:
            outcomes.append(outcome)
    return outcomes


class TestAdvanceQueue:
    """Fluid queue update."""

    def test_saturated_link_keeps_queue_empty(self):
        q = advance_queue(_queue(), 100.0, 5.0)
        assert q.occupancy_bits == 0.0
        assert q.dropped_bits == 0.0
        assert q.delivered_bits == pytest.approx(500_000.0)

    def test_double_rate_builds_queue(self):
        q = advance_queue(_queue(), 200.0, 1.0)
        assert q.occupancy_bits == pytest.approx(100_000.0)
        assert q.dropped_bits == 0.0

    def test_overflow_accrues_to_drops(self):
        q = advance_queue(_queue(occupancy=4_000_000.0), 200.0, 1.0)
        assert q.occupancy_bits == 4_000_000.0
        assert q.dropped_bits == pytest.approx(100_000.0)

    def test_delivery_bounded_by_available_work(self):
        q = advance_queue(_queue(occupancy=50_000.0), 0.0, 1.0)
        assert q.occupancy_bits == 0.0
        assert q.delivered_bits == pytest.approx(50_000.0)

    def test_zero_dt_is_a_no_op(self):
        q = advance_queue(_queue(occupancy=10.0), 500.0, 0.0)
        assert q.occupancy_bits == 10.0
        assert q.injected_bits == 0.0

    def test_negative_dt_rejected(self):
        with pytest.raises(ContractViolation):
            advance_queue(_queue(), 100.0, -1.0)

    def test_negative_rate_rejected(self):
        with pytest.raises(ContractViolation):
            advance_queue(_queue(), -1.0, 1.0)


class TestRtt:
    def test_empty_queue_is_base_rtt(self):
        cfg = SimConfig()
        assert rtt_of(_queue(), cfg) == cfg.base_rtt_us

    def test_one_base_rtt_of_queueing_doubles_rtt(self):
        cfg = SimConfig()
        assert rtt_of(_queue(occupancy=cfg.bdp_bits), cfg) / cfg.base_rtt_us == pytest.approx(2.0)

    def test_rtt_is_linear_in_occupancy(self):
        cfg = SimConfig()
        assert rtt_of(_queue(occupancy=0.5 * cfg.bdp_bits), cfg) / cfg.base_rtt_us == pytest.approx(1.5)


class TestSimConfig:
    def test_rejects_min_rate_above_line_rate(self):
        with pytest.raises(SimConfigError):
            SimConfig(min_rate_gbps=200.0)

    def test_rejects_nonpositive_base_rtt(self):
        with pytest.raises(SimConfigError):
            SimConfig(base_rtt_us=0.0)

    def test_clamp_rate(self):
        cfg = SimConfig()
        assert cfg.clamp_rate(0.0) == cfg.min_rate_gbps
        assert cfg.clamp_rate(1e9) == cfg.line_rate_gbps


class TestStep:
    """Event processing."""

    def test_single_flow_probe_returns_after_base_rtt(self):
        cfg = SimConfig(duration_us=1000.0)
        engine = build_scenario(many_to_one(1), cfg)
        probes = _drain(engine, EventKind.PROBE_ARRIVAL, limit=5)
        assert probes[0].event.time_us == pytest.approx(cfg.base_rtt_us)
        assert probes[0].rtt_us == pytest.approx(cfg.base_rtt_us)

    def test_decision_latency_delays_actuation(self):
        cfg = SimConfig(duration_us=2000.0, decision_latency_us=450.0)
        engine = build_scenario(many_to_one(1), cfg)
        probe_time = decision_time = None
        while decision_time is None:
            outcome = step(engine)
            if outcome.event.kind == EventKind.PROBE_ARRIVAL and probe_time is None:
                probe_time = outcome.event.time_us
            if outcome.event.kind == EventKind.DECISION_READY:
                decision_time = outcome.event.time_us
        assert decision_time - probe_time == pytest.approx(450.0)

    def test_controller_latency_overrides_config(self):
        cfg = SimConfig(duration_us=2000.0, decision_latency_us=450.0)
        engine = build_scenario(many_to_one(1), cfg, lambda f, c: FixedRateController(50.0, decision_latency_us=2.0))
        decisions = _drain(engine, EventKind.DECISION_READY, limit=10)
        assert decisions[0].event.time_us == pytest.approx(cfg.base_rtt_us + 2.0)

    def test_empty_queue_is_a_contract_violation(self):
        engine = build_scenario(ScenarioSpec(ScenarioKind.MANY_TO_ONE, hosts=0), SimConfig(duration_us=500.0))
        run(engine)
        assert engine.pending() == 0
        with pytest.raises(ContractViolation):
            step(engine)

    def test_unknown_flow_id_is_fatal(self):
        engine = Engine(SimConfig(duration_us=100.0), [_queue()], [])
        engine.schedule(0.0, EventKind.PROBE_ARRIVAL, 99)
        step(engine)
        with pytest.raises(UnknownFlowError):
            step(engine)

    def test_flow_end_removes_rate_from_port(self):
        cfg = SimConfig(duration_us=1000.0)
        spec = ScenarioSpec(ScenarioKind.LONG_SHORT, n_long=0, n_short=1, short_bytes=125_000,
                            short_start_us=0.0, warmup_us=0.0)
        engine = build_scenario(spec, cfg)
        run(engine)
        flow = engine.flows[0]
        assert not flow.active
        assert flow.bytes_remaining == 0.0
        # 1 Mbit at line rate, plus one empty-queue RTT
        assert flow.completion_time_us == pytest.approx(20.0)
        assert engine.ports[0].aggregate_rate_gbps == 0.0


class TestRun:
    def test_zero_flows_gives_an_idle_trace(self):
        engine = build_scenario(ScenarioSpec(ScenarioKind.MANY_TO_ONE, hosts=0), SimConfig(duration_us=1000.0))
        trace = run(engine)
        assert len(trace) == 11
        assert not trace.array("occupancy").any()
        assert not trace.array("dropped").any()

    def test_single_greedy_flow_fills_the_link(self):
        cfg = SimConfig(duration_us=1000.0)
        engine = build_scenario(many_to_one(1), cfg, lambda f, c: GreedyController())
        run(engine)
        port = engine.ports[0]
        assert port.delivered_bits == pytest.approx(cfg.line_rate_gbps * 1000.0 * 1000.0)
        assert port.dropped_bits == 0.0

    def test_fair_share_keeps_the_queue_empty(self):
        engine = build_scenario(many_to_one(4), SimConfig(duration_us=2000.0), _fixed(25.0))
        trace = run(engine)
        assert not trace.array("occupancy").any()
        assert engine.ports[0].delivered_bits == pytest.approx(100.0 * 1000.0 * 2000.0)

    def test_sample_times_strictly_increase(self):
        engine = build_scenario(many_to_one(3), SimConfig(duration_us=2000.0, sample_interval_us=37.0))
        times = run(engine).array("times_us")
        assert np.all(np.diff(times) > 0)

    def test_extending_a_run_continues_sampling(self):
        engine = build_scenario(many_to_one(2), SimConfig(duration_us=1000.0))
        run(engine, 500.0)
        trace = run(engine, 1000.0)
        times = trace.array("times_us")
        assert times[-1] == 1000.0
        assert np.all(np.diff(times) > 0)


class TestBuildScenario:
    def test_many_to_one_shares_one_queue(self):
        engine = build_scenario(ScenarioSpec(ScenarioKind.MANY_TO_ONE, hosts=4), SimConfig())
        assert len(engine.flows) == 4
        assert len(engine.ports) == 1
        assert {f.port_id for f in engine.flows} == {0}

    def test_all_to_all_has_a_queue_per_destination(self):
        engine = build_scenario(ScenarioSpec(ScenarioKind.ALL_TO_ALL, hosts=8), SimConfig())
        assert len(engine.flows) == 56
        assert len(engine.ports) == 8
        assert all(f.src != f.dst for f in engine.flows)
        for host in range(8):
            assert {f.dst for f in engine.flows if f.src == host} == set(range(8)) - {host}

    def test_long_short_mixes_finite_and_infinite_flows(self):
        spec = ScenarioSpec(ScenarioKind.LONG_SHORT, n_long=4, n_short=100)
        engine = build_scenario(spec, SimConfig())
        assert len(engine.flows) == 104
        assert len(engine.ports) == 1
        shorts = [f for f in engine.flows if f.is_short]
        assert len(shorts) == 100
        assert all(f.bytes_remaining == spec.short_bytes for f in shorts)
        assert len({f.start_time_us for f in shorts}) == 1

    def test_burst_time_is_seeded(self):
        spec = ScenarioSpec(ScenarioKind.LONG_SHORT, n_long=1, n_short=2)
        a = build_scenario(spec, SimConfig(seed=3)).flows[-1].start_time_us
        b = build_scenario(spec, SimConfig(seed=3)).flows[-1].start_time_us
        assert a == b

    def test_negative_counts_rejected(self):
        with pytest.raises(SimConfigError):
            build_scenario(ScenarioSpec(ScenarioKind.MANY_TO_ONE, hosts=-1), SimConfig())

    def test_short_flows_need_a_size(self):
        with pytest.raises(SimConfigError):
            build_scenario(ScenarioSpec(ScenarioKind.LONG_SHORT, short_bytes=0), SimConfig())

    def test_warmup_must_precede_horizon(self):
        with pytest.raises(SimConfigError):
            build_scenario(many_to_one(2, warmup_us=5000.0, duration_us=1000.0), SimConfig())


class TestProperties:
    """Conservation, determinism and causality."""

    @pytest.mark.parametrize("spec", [
        many_to_one(16),
        ScenarioSpec(ScenarioKind.ALL_TO_ALL, hosts=4),
        ScenarioSpec(ScenarioKind.LONG_SHORT, n_long=2, n_short=10, short_start_us=300.0),
    ], ids=lambda s: s.key)
    def test_bits_are_conserved_at_every_sample(self, spec):
        engine = build_scenario(spec, SimConfig(duration_us=2000.0, buffer_bits=500_000.0))
        trace = run(engine)
        injected = trace.array("injected")
        accounted = trace.array("delivered") + trace.array("dropped") + trace.array("occupancy")
        assert np.all(np.abs(injected - accounted) <= 1e-6 * np.maximum(injected, 1.0))
        assert engine.conservation_error() <= 1e-6

    def test_identical_seeds_give_identical_traces(self, tmp_path):
        spec = ScenarioSpec(ScenarioKind.ALL_TO_ALL, hosts=3)
        cfg = SimConfig(duration_us=1500.0, seed=7)
        paths = []
        for name in ("a.csv", "b.csv"):
            engine = build_scenario(spec, cfg, dcqcn_factory(cfg.seed))
            paths.append(write_trace_csv(run(engine), tmp_path / name))
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_trace_csv_header(self, tmp_path):
        engine = build_scenario(many_to_one(2), SimConfig(duration_us=200.0))
        path = write_trace_csv(run(engine), tmp_path / "trace.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(TRACE_HEADER)
        assert len(lines) == 1 + 3 * 2

    def test_frozen_overload_grows_queue_monotonically(self):
        engine = build_scenario(many_to_one(4), SimConfig(duration_us=1000.0), _fixed(30.0))
        occupancy = run(engine).array("occupancy")[:, 0]
        assert np.all(np.diff(occupancy) >= 0)
        assert occupancy[-1] == engine.cfg.buffer_bits

    def test_every_rtt_is_at_least_base_rtt(self):
        cfg = SimConfig(duration_us=2000.0, decision_latency_us=17.0)
        engine = build_scenario(many_to_one(8), cfg, dcqcn_factory(0))
        probes = run(engine).array("probes")
        assert len(probes)
        assert np.all(probes[:, 2] >= cfg.base_rtt_us)
