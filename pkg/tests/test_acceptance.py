"""
End-to-end experiments: train, distill, export and benchmark.

These take tens of minutes; run with RLCC_LAB_SLOW=1.
"""
import dataclasses

import pytest

from rlcc_lab.baselines import dcqcn_factory, swift_factory
from rlcc_lab.bench import drops_table, latency_ablation, probe_policy, run_benchmark, theory_vs_practice
from rlcc_lab.distill import (
    OP_BUDGET,
    FitConfig,
    collect_traces,
    default_distill_scenarios,
    fidelity_report,
    fit_gbt,
)
from rlcc_lab.policy import rlcc_factory
from rlcc_lab.structs import ScenarioKind, ScenarioSpec, SimConfig, many_to_one
from rlcc_lab.trainer import TrainConfig, evaluate_policy, train
from rlcc_lab.verify import verify_export

pytestmark = pytest.mark.slow

CURRICULUM = (2, 4, 8, 16, 32, 64)


@pytest.fixture(scope="module")
def cfg():
    return SimConfig(duration_us=20_000.0)


@pytest.fixture(scope="module")
def trained(cfg):
    config = TrainConfig(epochs=20, episode_us=10_000.0, curriculum_n=CURRICULUM, all_to_all_hosts=0,
                         eval_every=2, eval_flows=8)
    return train(config, cfg)


@pytest.fixture(scope="module")
def distilled(trained, cfg):
    data = collect_traces(trained.policy, default_distill_scenarios(CURRICULUM), 20_000,
                          dataclasses.replace(cfg, duration_us=10_000.0))
    return data, fit_gbt(data, FitConfig())


def test_training_converges(trained, cfg):
    """Regression: the curriculum run ended far above the convergence threshold."""
    assert trained.best_eval_abs_delta < 0.02
    report = evaluate_policy(trained.policy, many_to_one(8), cfg)
    assert report.mean_abs_delta < 0.02


def test_inflation_follows_theory_curve(trained, cfg):
    table = theory_vs_practice(trained.policy, [2, 4, 8, 16, 32, 64, 128], cfg, include_swift=False)
    assert table.max_relative_error <= 0.15
    assert table.monotone


def test_fair_and_busy_at_64_flows(trained, cfg):
    report = run_benchmark(many_to_one(64), rlcc_factory(trained.policy), cfg, "rlcc-mlp")
    assert report.jain_fairness >= 0.9
    assert report.normalized_goodput >= 0.85


def test_student_fits_budget_and_exports_exactly(distilled):
    _, student = distilled
    assert student.op_count <= OP_BUDGET
    assert len(student.trees) <= 10
    assert verify_export(student).ok


def test_student_matches_teacher_closed_loop(trained, distilled, cfg):
    data, student = distilled
    report = fidelity_report(trained.policy, student, data, [many_to_one(64), many_to_one(512)], cfg)
    assert report.n_held_out > 0
    assert len(report.rows) == 2
    for row in report.rows:
        assert abs(row.goodput_delta) <= 0.02, row.scenario
        assert abs(row.inflation_delta_rel) <= 0.05, row.scenario


def test_slow_inference_hurts_goodput_and_drops(trained, distilled, cfg):
    _, student = distilled
    rows = latency_ablation({"mlp": trained.policy, "tree": student}, [0.9, 450.0], [many_to_one(64)], cfg)
    fast_tree = next(r for r in rows if r.model == "tree" and r.decision_latency_us == 0.9)
    slow = [r for r in rows if r.decision_latency_us == 450.0]
    assert len(slow) == 2
    for row in slow:
        assert fast_tree.goodput >= row.goodput + 0.2, row.model
        assert row.drops_per_flow >= 10.0 * fast_tree.drops_per_flow, row.model
        assert row.drops_per_flow > 0.0, row.model


def test_drop_ordering(trained, cfg):
    large = ScenarioSpec(ScenarioKind.ALL_TO_ALL, hosts=33)
    small = many_to_one(32)
    assert large.n_flows >= 1024
    rows = drops_table(
        {
            "rlcc": lambda spec: rlcc_factory(trained.policy),
            "swift": lambda spec: swift_factory(),
            "dcqcn": lambda spec: dcqcn_factory(cfg.seed),
        },
        [large, small],
        cfg,
    )
    drops = {(r.controller, r.scenario): r.drops_per_flow for r in rows}
    assert drops[("rlcc", large.key)] <= drops[("swift", large.key)] <= drops[("dcqcn", large.key)]
    assert [drops[(name, small.key)] for name in ("rlcc", "swift", "dcqcn")] == [0.0, 0.0, 0.0]


def test_student_sign_pattern(distilled):
    _, student = distilled
    table = probe_policy(student)
    assert table.passed, table.violations()


def test_long_flows_yield_to_short_burst(trained):
    # smaller buffer: a full 4 Mbit queue stretches each decision interval past the reaction window
    cfg = SimConfig(duration_us=30_000.0, buffer_bits=2_000_000.0)
    spec = ScenarioSpec(ScenarioKind.LONG_SHORT, n_long=4, n_short=100, short_start_us=5_000.0)
    rlcc = run_benchmark(spec, rlcc_factory(trained.policy), cfg, "rlcc-mlp")
    swift = run_benchmark(spec, swift_factory(), cfg, "swift")
    assert rlcc.reaction_us is not None
    assert rlcc.reaction_us <= 20 * cfg.base_rtt_us
    assert rlcc.recovery_us is not None
    assert rlcc.recovery_us <= 100 * cfg.base_rtt_us
    assert rlcc.slowdown <= swift.slowdown
