"""
Benchmarks: scenario metrics, the square-root theory curve, parameter sweeps,
the decision-latency ablation, the explainability probe and drop tables.

Grid experiments run on worker threads, one independent engine per job, and
their results are sorted by key so output order never depends on scheduling.
"""
from __future__ import annotations

import asyncio
import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .baselines import (
    DcqcnParams,
    EcnMarker,
    FixedRateController,
    GreedyController,
    SwiftState,
    dcqcn_factory,
    fair_share_factory,
    swift_factory,
)
from .config import get_env_or_config
from .policy import DEFAULT_WINDOW, ActionMapper, Predictor, RewardParams, rlcc_factory
from .simcore import ControllerFactory, Engine, build_scenario, run
from .structs import BITS_PER_GBPS_US, PACKET_BITS, ScenarioKind, ScenarioSpec, SimConfig, many_to_one
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

CONTROLLER_KINDS = ("dcqcn", "swift", "rlcc-mlp", "rlcc-tree", "greedy", "fixed", "fair-share")

METRICS_HEADER = [
    "controller", "scenario", "normalized_goodput", "mean_latency_us", "p99_latency_us",
    "drops_per_flow", "jain_fairness", "long_bw_normalized", "slowdown", "slowdown_base_rtt",
    "steady_state_inflation", "reaction_us", "recovery_us",
]


class ControllerError(ValueError):
    pass


# ============================================================================
# Controllers
# ============================================================================

_DCQCN_KEYS = {f.name for f in dataclasses.fields(DcqcnParams)}
_MARKER_KEYS = {"k_min_bits", "k_max_bits", "p_max"}
_SWIFT_KEYS = {"target_delay_us", "ai", "md_beta", "max_md"}


def make_controller_factory(
    kind: str,
    cfg: SimConfig,
    model: Predictor | None = None,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    n_flows: int | None = None,
    decision_latency_us: float | None = None,
    options: Mapping[str, Any] | None = None,
) -> ControllerFactory:
    """Resolve a ``--controller`` name plus ``[controller]`` options into a factory."""
    options = dict(options or {})
    match kind:
        case "dcqcn":
            unknown = set(options) - _DCQCN_KEYS - _MARKER_KEYS
            if unknown:
                raise ControllerError(f"unknown dcqcn options: {sorted(unknown)}")
            dcqcn = DcqcnParams(**{k: v for k, v in options.items() if k in _DCQCN_KEYS})
            try:
                marker = EcnMarker(
                    rng=np.random.default_rng(cfg.seed),
                    buffer_bits=cfg.buffer_bits,
                    **{k: float(v) for k, v in options.items() if k in _MARKER_KEYS},
                )
            except ValueError as exc:
                raise ControllerError(f"invalid dcqcn marking options: {exc}") from exc
            inner = dcqcn_factory(cfg.seed, dcqcn, marker)
        case "swift":
            unknown = set(options) - _SWIFT_KEYS
            if unknown:
                raise ControllerError(f"unknown swift options: {sorted(unknown)}")
            try:
                SwiftState(rate=cfg.line_rate_gbps, **{k: float(v) for k, v in options.items()})
            except ValueError as exc:
                raise ControllerError(f"invalid swift options: {exc}") from exc
            inner = swift_factory(**options)
        case "rlcc-mlp" | "rlcc-tree":
            if model is None:
                raise ControllerError(f"controller {kind} needs a model (--model)")
            window = int(options.pop("window", DEFAULT_WINDOW))
            if options:
                raise ControllerError(f"unknown {kind} options: {sorted(options)}")
            return rlcc_factory(model, params, mapper, window, decision_latency_us)
        case "greedy":
            inner = lambda flow, c: GreedyController()
        case "fixed":
            if "rate_gbps" not in options:
                raise ControllerError("controller fixed needs rate_gbps")
            rate = float(options["rate_gbps"])
            inner = lambda flow, c: FixedRateController(rate)
        case "fair-share":
            if not n_flows:
                raise ControllerError("controller fair-share needs the flow count")
            inner = fair_share_factory(n_flows)
        case _:
            raise ControllerError(f"unknown controller '{kind}', expected one of {', '.join(CONTROLLER_KINDS)}")

    if decision_latency_us is None:
        return inner

    def with_latency(flow, c):
        controller = inner(flow, c)
        controller.decision_latency_us = decision_latency_us
        return controller
    if hasattr(inner, "n_flows"):
        with_latency.n_flows = inner.n_flows
    return with_latency


def check_factory_fits(spec: ScenarioSpec, factory: ControllerFactory) -> None:
    """Reject factories sized for a different flow count than ``spec``."""
    sized_for = getattr(factory, "n_flows", None)
    if sized_for is None:
        return
    if sized_for not in (spec.n_flows, spec.flows_per_port):
        raise ControllerError(
            f"controller is sized for {sized_for} flows but {spec.key} has "
            f"{spec.flows_per_port} per port ({spec.n_flows} total)"
        )


# ============================================================================
# Metrics
# ============================================================================

@dataclass
class MetricsReport:
    controller: str = ""
    scenario: str = ""
    normalized_goodput: float = 0.0
    mean_latency_us: float = 0.0
    p99_latency_us: float = 0.0
    drops_per_flow: float = 0.0
    jain_fairness: float = 1.0
    long_bw_normalized: float = 0.0
    # 1.0 when the scenario has no short flows
    slowdown: float = 1.0
    slowdown_base_rtt: float = 0.0
    steady_state_inflation: float = 1.0
    # long_short only; None when the threshold was never crossed
    reaction_us: float | None = None
    recovery_us: float | None = None

    def row(self) -> list:
        values = dataclasses.asdict(self)
        return [("" if values[k] is None else values[k]) for k in METRICS_HEADER]


def jain_index(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=float)
    if len(x) == 0 or not np.any(x):
        return 1.0
    return float(x.sum() ** 2 / (len(x) * np.dot(x, x)))


def _window(engine: Engine, warmup_us: float) -> tuple[int, float]:
    trace = engine.trace
    start = min(trace.index_at(warmup_us), len(trace) - 1)
    return start, trace.times_us[-1] - trace.times_us[start]


def _flow_throughput(engine: Engine, start: int) -> np.ndarray:
    """Bits per flow delivered over the window, scaled by its port's delivery ratio."""
    trace = engine.trace
    sent = trace.sent_bits[-1] - trace.sent_bits[start]
    delivered = trace.delivered[-1] - trace.delivered[start]
    injected = trace.injected[-1] - trace.injected[start]
    ratio = np.divide(delivered, injected, out=np.ones_like(delivered), where=injected > 0)
    return sent * np.minimum(ratio, 1.0)[np.asarray(trace.flow_ports, dtype=int)]


def _crossing(times: np.ndarray, series: np.ndarray, since: float, test) -> float | None:
    hit = np.nonzero((times >= since) & test(series))[0]
    return float(times[hit[0]] - since) if len(hit) else None


def metrics_from_engine(engine: Engine, spec: ScenarioSpec, controller: str = "") -> MetricsReport:
    cfg = engine.cfg
    trace = engine.trace
    report = MetricsReport(controller=controller, scenario=spec.key)
    warmup = spec.warmup_for(cfg)
    line_bits_per_us = cfg.line_rate_gbps * BITS_PER_GBPS_US
    flows = engine.flows

    probes = trace.array("probes")
    if len(probes):
        probes = probes[probes[:, 0] >= warmup]
    if len(probes):
        rtts = probes[:, 2]
        report.mean_latency_us = float(rtts.mean())
        report.p99_latency_us = float(np.percentile(rtts, 99))
    else:
        report.mean_latency_us = report.p99_latency_us = cfg.base_rtt_us
    report.steady_state_inflation = report.mean_latency_us / cfg.base_rtt_us

    if len(trace) >= 2:
        start, window = _window(engine, warmup)
        ports = [p.port_id for p in engine.ports_in_use]
        if window > 0 and ports:
            delivered = trace.delivered[-1][ports] - trace.delivered[start][ports]
            report.normalized_goodput = float(delivered.sum() / (window * line_bits_per_us * len(ports)))
            throughput = _flow_throughput(engine, start)
            sent = trace.sent_bits[-1] - trace.sent_bits[start]
            report.jain_fairness = jain_index(throughput[sent > 0])
            longs = [f.flow_id for f in flows if not f.is_short]
            if longs:
                long_ports = {flows[i].port_id for i in longs}
                report.long_bw_normalized = float(
                    throughput[longs].sum() / (window * line_bits_per_us * len(long_ports))
                )
        dropped = trace.dropped[-1] - trace.dropped[start]
        report.drops_per_flow = float(dropped.sum() / PACKET_BITS / max(len(flows), 1))

    shorts = [f for f in flows if f.is_short]
    if shorts:
        horizon = engine.horizon_us
        censored = [f for f in shorts if f.completion_time_us is None]
        if censored:
            logger.warning(f"{spec.key}: {len(censored)} short flows unfinished at {horizon} us, censored")
        fct = np.array([
            (f.completion_time_us if f.completion_time_us is not None else horizon) - f.start_time_us
            for f in shorts
        ])
        ideal = spec.short_bytes * 8.0 / line_bits_per_us + cfg.base_rtt_us
        report.slowdown = float(fct.mean() / ideal)
        report.slowdown_base_rtt = float(fct.mean() / cfg.base_rtt_us)

        if spec.kind == ScenarioKind.LONG_SHORT and len(trace):
            times = np.asarray(trace.times_us)
            longs = [f.flow_id for f in flows if not f.is_short]
            long_rate = trace.array("rates")[:, longs].sum(axis=1) if longs else np.zeros(len(times))
            burst = min(f.start_time_us for f in shorts)
            report.reaction_us = _crossing(times, long_rate, burst, lambda r: r < 0.5 * cfg.line_rate_gbps)
            if not censored:
                last = max(f.completion_time_us for f in shorts)
                report.recovery_us = _crossing(times, long_rate, last, lambda r: r >= 0.9 * cfg.line_rate_gbps)
    return report


def run_benchmark(spec: ScenarioSpec, factory: ControllerFactory, cfg: SimConfig,
                  controller: str = "") -> MetricsReport:
    check_factory_fits(spec, factory)
    engine = build_scenario(spec, cfg, factory)
    run(engine)
    return metrics_from_engine(engine, spec, controller)


def write_metrics_csv(reports: Iterable[MetricsReport], path: str | Path) -> Path:
    return _write_csv(path, METRICS_HEADER, [r.row() for r in reports])


def _write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        writer.writerows(rows)
    return path


# ============================================================================
# Parallel grid
# ============================================================================

def worker_threads() -> int:
    value = get_env_or_config("RLCC_LAB_THREADS", "bench.threads", None)
    if value is None:
        return os.cpu_count() or 1
    try:
        return max(int(value), 1)
    except (TypeError, ValueError):
        raise ControllerError(f"RLCC_LAB_THREADS must be an integer, got {value!r}")


async def _gather(jobs: Sequence[Callable[[], Any]], threads: int) -> list[Any]:
    gate = asyncio.Semaphore(threads)

    async def one(job):
        async with gate:
            return await asyncio.to_thread(job)

    return await asyncio.gather(*(one(job) for job in jobs))


def run_jobs(jobs: Sequence[Callable[[], Any]], threads: int | None = None) -> list[Any]:
    """Run independent jobs on at most ``threads`` worker threads, results in job order."""
    if not jobs:
        return []
    threads = threads or worker_threads()
    if threads == 1:
        return [job() for job in jobs]
    return asyncio.run(_gather(jobs, threads))


# ============================================================================
# Theory vs practice
# ============================================================================

def theory_curve(params: RewardParams, n: float, line_rate: float | None = None) -> float:
    """Steady-state inflation that zeroes delta at fair share: target * sqrt(N) + beta."""
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    return params.target * math.sqrt(n) + params.beta


def fit_sqrt_curve(ns: Sequence[float], values: Sequence[float]) -> tuple[float, float]:
    """Least-squares c, b for values ~ c * sqrt(N) + b."""
    A = np.column_stack([np.sqrt(np.asarray(ns, dtype=float)), np.ones(len(ns))])
    (c, b), *_ = np.linalg.lstsq(A, np.asarray(values, dtype=float), rcond=None)
    return float(c), float(b)


@dataclass
class TheoryRow:
    n: int
    measured: float
    predicted: float
    # half-width of the 99% interval across seeds; 0 for a single seed
    ci99: float = 0.0

    @property
    def relative_error(self) -> float:
        return abs(self.measured - self.predicted) / self.predicted


@dataclass
class TheoryTable:
    rows: list[TheoryRow] = field(default_factory=list)
    # (N, measured Swift inflation)
    swift: list[tuple[int, float]] = field(default_factory=list)
    swift_fit: tuple[float, float] | None = None

    @property
    def max_relative_error(self) -> float:
        return max((r.relative_error for r in self.rows), default=0.0)

    @property
    def monotone(self) -> bool:
        measured = [r.measured for r in sorted(self.rows, key=lambda r: r.n)]
        return all(b >= a for a, b in zip(measured, measured[1:]))


THEORY_HEADER = [
    "n", "measured_inflation", "measured_ci99", "predicted_inflation", "relative_error",
    "swift_inflation", "swift_fitted",
]

Z_99 = 2.5758


def _mean_ci99(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if len(arr) < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(Z_99 * arr.std(ddof=1) / math.sqrt(len(arr)))


def theory_vs_practice(
    model: Predictor | None,
    n_list: Sequence[int],
    cfg: SimConfig,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    include_swift: bool = True,
    factory_for_n: Callable[[int], ControllerFactory] | None = None,
    threads: int | None = None,
    seeds: Sequence[int] | None = None,
) -> TheoryTable:
    """Measured steady-state inflation on many-to-one for each N against the theory curve.

    With several seeds the measured value is the mean across seeds and ``ci99``
    the normal-approximation half-width of its 99% interval.
    """
    params = params or RewardParams()
    if factory_for_n is None:
        if model is None:
            raise ControllerError("theory_vs_practice needs a model or factory_for_n")
        factory_for_n = lambda n: rlcc_factory(model, params, mapper)

    ns = sorted(set(int(n) for n in n_list))
    seed_list = list(seeds) if seeds else [cfg.seed]
    cfgs = [dataclasses.replace(cfg, seed=s) for s in seed_list]
    jobs = [lambda n=n, c=c: run_benchmark(many_to_one(n), factory_for_n(n), c) for n in ns for c in cfgs]
    if include_swift:
        jobs += [lambda n=n, c=c: run_benchmark(many_to_one(n), swift_factory(), c) for n in ns for c in cfgs]
    reports = run_jobs(jobs, threads)
    inflation = [r.steady_state_inflation for r in reports]
    k = len(cfgs)

    table = TheoryTable()
    for i, n in enumerate(ns):
        measured, ci = _mean_ci99(inflation[i * k:(i + 1) * k])
        table.rows.append(TheoryRow(n, measured, theory_curve(params, n), ci))
    if include_swift:
        offset = len(ns) * k
        table.swift = [
            (n, _mean_ci99(inflation[offset + i * k:offset + (i + 1) * k])[0]) for i, n in enumerate(ns)
        ]
        if len(ns) >= 2:
            table.swift_fit = fit_sqrt_curve(ns, [v for _, v in table.swift])
    return table


def write_theory_csv(table: TheoryTable, path: str | Path) -> Path:
    swift = dict(table.swift)
    rows = []
    for r in table.rows:
        fitted = ""
        if table.swift_fit is not None:
            c, b = table.swift_fit
            fitted = c * math.sqrt(r.n) + b
        rows.append([r.n, r.measured, r.ci99, r.predicted, r.relative_error, swift.get(r.n, ""), fitted])
    return _write_csv(path, THEORY_HEADER, rows)


# ============================================================================
# Parameter sweep
# ============================================================================

FAILED_GOODPUT = 0.5

SWEEP_HEADER = ["target", "beta", "scenario", "goodput", "mean_latency_us", "failed"]


@dataclass
class SweepRow:
    target: float
    beta: float
    scenario: str
    goodput: float
    mean_latency_us: float
    failed: bool


def _sweep_point(target: float, beta: float, scenarios: Sequence[ScenarioSpec], cfg: SimConfig,
                 train_config: TrainConfig) -> list[SweepRow]:
    try:
        params = RewardParams(target, beta)
        policy = train(train_config, cfg, params).policy
    except Exception as exc:
        logger.warning(f"Sweep point target={target} beta={beta} failed to train: {exc}")
        return [SweepRow(target, beta, s.key, 0.0, math.nan, True) for s in scenarios]
    rows = []
    for spec in scenarios:
        report = run_benchmark(spec, rlcc_factory(policy, params, window=train_config.window), cfg)
        failed = report.normalized_goodput < FAILED_GOODPUT
        if failed:
            logger.warning(f"Sweep point target={target} beta={beta} collapsed on {spec.key}")
        rows.append(SweepRow(target, beta, spec.key, report.normalized_goodput, report.mean_latency_us, failed))
    return rows


def parameter_sweep(
    grid: Sequence[tuple[float, float]],
    scenarios: Sequence[ScenarioSpec],
    cfg: SimConfig,
    train_config: TrainConfig,
    threads: int | None = None,
) -> list[SweepRow]:
    """Train a fresh policy per (target, beta) and report goodput and latency per scenario."""
    jobs = [lambda t=t, b=b: _sweep_point(t, b, scenarios, cfg, train_config) for t, b in grid]
    rows = [row for point in run_jobs(jobs, threads) for row in point]
    return sorted(rows, key=lambda r: (r.target, r.beta, r.scenario))


def latency_trend_ok(rows: Sequence[SweepRow]) -> bool:
    """Among non-failed points with equal beta and scenario, latency never falls as target grows."""
    groups: dict[tuple[float, str], list[SweepRow]] = {}
    for row in rows:
        if not row.failed:
            groups.setdefault((row.beta, row.scenario), []).append(row)
    for group in groups.values():
        latencies = [r.mean_latency_us for r in sorted(group, key=lambda r: r.target)]
        if any(b < a for a, b in zip(latencies, latencies[1:])):
            return False
    return True


def write_sweep_csv(rows: Iterable[SweepRow], path: str | Path) -> Path:
    return _write_csv(path, SWEEP_HEADER, [
        [r.target, r.beta, r.scenario, r.goodput, r.mean_latency_us, int(r.failed)] for r in rows
    ])


# ============================================================================
# Decision-latency ablation
# ============================================================================

DEFAULT_LATENCIES = (0.9, 17.0, 450.0)

ABLATION_HEADER = ["model", "decision_latency_us", "scenario", "goodput", "drops_per_flow", "mean_latency_us"]


@dataclass
class AblationRow:
    model: str
    decision_latency_us: float
    scenario: str
    goodput: float
    drops_per_flow: float
    mean_latency_us: float


def latency_ablation(
    models: Mapping[str, Predictor],
    latencies: Sequence[float],
    specs: Sequence[ScenarioSpec],
    cfg: SimConfig,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    window: int = DEFAULT_WINDOW,
    threads: int | None = None,
) -> list[AblationRow]:
    """Run each model at each emulated inference latency on each scenario."""
    keys = [(name, lat, spec) for name in sorted(models) for lat in latencies for spec in specs]
    jobs = [
        lambda name=name, lat=lat, spec=spec: run_benchmark(
            spec, rlcc_factory(models[name], params, mapper, window, decision_latency_us=lat), cfg, name
        )
        for name, lat, spec in keys
    ]
    rows = [
        AblationRow(name, lat, spec.key, r.normalized_goodput, r.drops_per_flow, r.mean_latency_us)
        for (name, lat, spec), r in zip(keys, run_jobs(jobs, threads))
    ]
    return sorted(rows, key=lambda r: (r.model, r.decision_latency_us, r.scenario))


def write_ablation_csv(rows: Iterable[AblationRow], path: str | Path) -> Path:
    return _write_csv(path, ABLATION_HEADER, [
        [r.model, r.decision_latency_us, r.scenario, r.goodput, r.drops_per_flow, r.mean_latency_us] for r in rows
    ])


# ============================================================================
# Explainability probe
# ============================================================================

CONDITIONS = ("under_utilized", "on_target", "congested")


@dataclass
class ProbeTable:
    # matrix[previous][current], conditions in CONDITIONS order
    matrix: np.ndarray

    def at(self, previous: str, current: str) -> float:
        return float(self.matrix[CONDITIONS.index(previous), CONDITIONS.index(current)])

    def checks(self) -> dict[str, bool]:
        under, target, congested = range(3)
        m = self.matrix
        return {
            "under_utilized_increases": bool(np.all(m[:, under] > 1.0)),
            "congested_decreases": bool(np.all(m[:, congested] < 1.0)),
            "on_target_holds": bool(0.97 <= m[target, target] <= 1.03),
            "recovery_faster_after_congestion": bool(m[congested, under] > m[under, under]),
        }

    @property
    def passed(self) -> bool:
        return all(self.checks().values())

    def violations(self) -> list[str]:
        return [name for name, ok in self.checks().items() if not ok]


PROBE_HEADER = ["previous", *CONDITIONS]


def probe_policy(
    model: Predictor,
    params: RewardParams | None = None,
    mapper: ActionMapper | None = None,
    window: int = DEFAULT_WINDOW,
    congested_delta: float = 0.3,
) -> ProbeTable:
    """
    Feed the nine synthetic (previous, current) condition pairs through the
    model: the previous condition fills the older slots, the current one the
    newest, all action slots are 0.
    """
    params = params or RewardParams()
    mapper = mapper or ActionMapper()
    if not congested_delta > 0:
        raise ValueError(f"congested_delta must be > 0, got {congested_delta}")
    deltas = {"under_utilized": params.target, "on_target": 0.0, "congested": -congested_delta}

    matrix = np.empty((3, 3))
    for i, previous in enumerate(CONDITIONS):
        for j, current in enumerate(CONDITIONS):
            features = np.zeros(2 * window)
            features[0:2 * (window - 1):2] = deltas[previous]
            features[2 * (window - 1)] = deltas[current]
            matrix[i, j] = mapper.multiplier(model.predict(features))
    return ProbeTable(matrix)


def write_probe_csv(table: ProbeTable, path: str | Path) -> Path:
    return _write_csv(path, PROBE_HEADER, [
        [previous, *table.matrix[i].tolist()] for i, previous in enumerate(CONDITIONS)
    ])


# ============================================================================
# Drops
# ============================================================================

DROPS_HEADER = ["controller", "scenario", "drops_per_flow"]


@dataclass
class DropsRow:
    controller: str
    scenario: str
    drops_per_flow: float


def drops_table(
    factories: Mapping[str, Callable[[ScenarioSpec], ControllerFactory]],
    specs: Sequence[ScenarioSpec],
    cfg: SimConfig,
    threads: int | None = None,
) -> list[DropsRow]:
    """Per-flow drops for every (controller, scenario); factories are built per scenario."""
    keys = [(name, spec) for name in sorted(factories) for spec in specs]
    jobs = [lambda name=name, spec=spec: run_benchmark(spec, factories[name](spec), cfg, name)
            for name, spec in keys]
    rows = [DropsRow(name, spec.key, r.drops_per_flow) for (name, spec), r in zip(keys, run_jobs(jobs, threads))]
    return sorted(rows, key=lambda r: (r.scenario, r.controller))


def write_drops_csv(rows: Iterable[DropsRow], path: str | Path) -> Path:
    return _write_csv(path, DROPS_HEADER, [[r.controller, r.scenario, r.drops_per_flow] for r in rows])
