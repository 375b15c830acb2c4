import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import pendulum
from dotenv import load_dotenv

from . import __version__
from .bench import (
    CONTROLLER_KINDS,
    DEFAULT_LATENCIES,
    DropsRow,
    latency_ablation,
    latency_trend_ok,
    make_controller_factory,
    metrics_from_engine,
    parameter_sweep,
    probe_policy,
    run_benchmark,
    theory_vs_practice,
    write_ablation_csv,
    write_drops_csv,
    write_metrics_csv,
    write_probe_csv,
    write_sweep_csv,
    write_theory_csv,
)
from .config import CONFIG_FILE, Experiment, configure_logging, init_config_file, load_experiment, output_dir
from .distill import collect_traces, default_distill_scenarios, fidelity_report, fit_gbt, write_fidelity_csv
from .export import load_ensemble, save_ensemble, write_export
from .policy import CHECKPOINT_MAGIC, ActionMapper, Predictor, load_policy, save_policy
from .simcore import build_scenario, run, write_trace_csv
from .structs import ScenarioKind, ScenarioSpec, many_to_one
from .trainer import train, write_train_log
from .verify import verify_export

logger = logging.getLogger(__name__)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _add_common(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--config", "-c", help="Experiment file ([sim], [scenario], [controller], ...).")
    cmd.add_argument("--seed", type=int, help="PRNG seed (overrides [sim] seed).")
    cmd.add_argument("--out-dir", help="Directory for CSV and summary output (overrides RLCC_LAB_OUT_DIR).")


def _add_scenario(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--scenario", choices=[k.value for k in ScenarioKind], help="Scenario kind.")
    cmd.add_argument("--flows", type=int, help="Total flows for many_to_one; flows per pair for all_to_all.")
    cmd.add_argument("--hosts", type=int, help="Hosts for all_to_all.")
    cmd.add_argument("--decision-latency-us", type=float, help="Emulated inference latency per decision.")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rlcc-lab",
        description="Congestion-control laboratory: simulate, train, distill and benchmark rate controllers.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subcommands = parser.add_subparsers(dest="command", required=True)

    init_cmd = subcommands.add_parser(
        "init",
        help="Initialize configuration file.",
        description="Create a default configuration file at ~/.config/rlcc-lab/config.toml",
    )
    init_cmd.add_argument("--force", "-f", action="store_true", help="Overwrite existing configuration file.")

    sim_cmd = subcommands.add_parser("simulate", help="Run one scenario and write its trace.")
    _add_common(sim_cmd)
    _add_scenario(sim_cmd)
    sim_cmd.add_argument("--controller", default=None, help=f"One of {', '.join(CONTROLLER_KINDS)}.")
    sim_cmd.add_argument("--model", help="Policy checkpoint or ensemble file for rlcc-* controllers.")

    train_cmd = subcommands.add_parser("train", help="Train the MLP policy on the curriculum.")
    _add_common(train_cmd)
    train_cmd.add_argument("--out", required=True, help="Checkpoint file to write.")
    train_cmd.add_argument("--epochs", type=int, help="Override [train] epochs.")

    distill_cmd = subcommands.add_parser("distill", help="Distill a checkpoint into a tree ensemble.")
    _add_common(distill_cmd)
    distill_cmd.add_argument("--teacher", required=True, help="Policy checkpoint.")
    distill_cmd.add_argument("--out", required=True, help="Ensemble file to write.")
    distill_cmd.add_argument("--samples", type=int, help="Override [distill] n_samples.")
    distill_cmd.add_argument("--fidelity-n", type=_int_list, default=[64, 512],
                             help="Many-to-one N values for the closed-loop fidelity check.")

    export_cmd = subcommands.add_parser("export", help="Export an ensemble as if-else pseudocode.")
    export_cmd.add_argument("--ensemble", required=True, help="Ensemble file.")
    export_cmd.add_argument("--out", required=True, help="Pseudocode file to write.")
    export_cmd.add_argument("--check", type=int, default=10_000, help="Random inputs for the equivalence check.")

    bench_cmd = subcommands.add_parser("bench", help="Benchmark one or more controllers on a scenario.")
    _add_common(bench_cmd)
    _add_scenario(bench_cmd)
    bench_cmd.add_argument("--controller", default="dcqcn",
                           help="Comma-separated controllers: " + ", ".join(CONTROLLER_KINDS))
    bench_cmd.add_argument("--model", help="Policy checkpoint or ensemble file for rlcc-* controllers.")

    sweep_cmd = subcommands.add_parser("sweep", help="Train and evaluate over a (target, beta) grid.")
    _add_common(sweep_cmd)
    _add_scenario(sweep_cmd)
    sweep_cmd.add_argument("--targets", type=_float_list, default=[0.032, 0.064, 0.128])
    sweep_cmd.add_argument("--betas", type=_float_list, default=[1.25, 1.5, 2.0])

    probe_cmd = subcommands.add_parser("probe", help="Explainability probe over synthetic conditions.")
    _add_common(probe_cmd)
    probe_cmd.add_argument("--model", required=True, help="Policy checkpoint or ensemble file.")
    probe_cmd.add_argument("--congested-delta", type=float, default=0.3)

    theory_cmd = subcommands.add_parser("theory", help="Measured vs predicted steady-state inflation.")
    _add_common(theory_cmd)
    theory_cmd.add_argument("--policy", required=True, help="Policy checkpoint or ensemble file.")
    theory_cmd.add_argument("--n", type=_int_list, default=[2, 4, 8, 16, 32, 64, 128])
    theory_cmd.add_argument("--no-swift", action="store_true", help="Skip the Swift comparison.")
    theory_cmd.add_argument("--seeds", type=_int_list, help="Repeat each N over these seeds and report 99%% intervals.")

    ablation_cmd = subcommands.add_parser("ablation", help="Decision-latency ablation of teacher and student.")
    _add_common(ablation_cmd)
    ablation_cmd.add_argument("--policy", required=True, help="Policy checkpoint.")
    ablation_cmd.add_argument("--ensemble", required=True, help="Ensemble file.")
    ablation_cmd.add_argument("--latencies", type=_float_list, default=list(DEFAULT_LATENCIES))
    ablation_cmd.add_argument("--n", type=_int_list, default=[64])

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    configure_logging()

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1

    try:
        return _dispatch(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "init":
        if CONFIG_FILE.exists() and not args.force:
            print(f"Configuration file already exists: {CONFIG_FILE}")
            print("Use --force to overwrite.")
            return 0
        if args.force and CONFIG_FILE.exists():
            CONFIG_FILE.unlink()
        config_path = init_config_file()
        print(f"Configuration file created: {config_path}")
        return 0

    if args.command == "export":
        return _export(args)

    exp = load_experiment(args.config)
    if args.seed is not None:
        exp.sim = dataclasses.replace(exp.sim, seed=args.seed)
    out = output_dir(args.out_dir)

    handlers = {
        "simulate": _simulate,
        "train": _train,
        "distill": _distill,
        "bench": _bench,
        "sweep": _sweep,
        "probe": _probe,
        "theory": _theory,
        "ablation": _ablation,
    }
    return handlers[args.command](args, exp, out)


def _scenario(args, exp: Experiment) -> ScenarioSpec:
    spec = exp.scenario
    kind = ScenarioKind(args.scenario) if getattr(args, "scenario", None) else spec.kind
    flows = getattr(args, "flows", None)
    hosts = getattr(args, "hosts", None)
    if kind == ScenarioKind.MANY_TO_ONE and flows is not None:
        spec = many_to_one(flows, duration_us=spec.duration_us, warmup_us=spec.warmup_us)
    else:
        spec = dataclasses.replace(spec, kind=kind)
        if flows is not None:
            spec = dataclasses.replace(spec, flows_per_host=flows)
        if hosts is not None:
            spec = dataclasses.replace(spec, hosts=hosts)
    spec.validate(exp.sim)
    return spec


def _sim_cfg(args, exp: Experiment):
    latency = getattr(args, "decision_latency_us", None)
    if latency is None:
        return exp.sim
    return dataclasses.replace(exp.sim, decision_latency_us=latency)


def load_model(path: str) -> tuple[Predictor, ActionMapper, str]:
    """Load a policy checkpoint or an ensemble file; returns (model, mapper, kind)."""
    with open(path) as fp:
        head = fp.readline().strip()
    if head == CHECKPOINT_MAGIC:
        policy, mapper = load_policy(path)
        return policy, mapper, "rlcc-mlp"
    return load_ensemble(path), ActionMapper(), "rlcc-tree"


def _write_summary(out: Path, command: str, lines: list[str]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.txt"
    header = [f"rlcc-lab {__version__} {command}", f"finished {pendulum.now().to_iso8601_string()}"]
    path.write_text("\n".join(header + lines) + "\n")
    return path


def _factory(kind: str, exp: Experiment, cfg, spec: ScenarioSpec, model_path: str | None, latency):
    model, mapper = None, None
    if kind.startswith("rlcc"):
        if not model_path:
            raise ValueError(f"controller {kind} needs --model")
        model, mapper, _ = load_model(model_path)
    options = {k: v for k, v in exp.controller.items() if k not in ("kind", "decision_latency_us")}
    if kind != exp.controller.get("kind"):
        options = {}
    if latency is None:
        latency = exp.controller.get("decision_latency_us")
    return make_controller_factory(
        kind, cfg, model=model, params=exp.reward, mapper=mapper, n_flows=spec.n_flows,
        decision_latency_us=latency, options=options,
    )


def _simulate(args, exp: Experiment, out: Path) -> int:
    cfg = exp.sim
    spec = _scenario(args, exp)
    kind = args.controller or exp.controller.get("kind", "greedy")
    factory = _factory(kind, exp, cfg, spec, args.model, args.decision_latency_us)
    engine = build_scenario(spec, cfg, factory)
    run(engine)
    report = metrics_from_engine(engine, spec, kind)
    write_trace_csv(engine.trace, out / "trace.csv")
    write_metrics_csv([report], out / "metrics.csv")
    _write_summary(out, "simulate", [
        f"scenario {spec.key} controller {kind}",
        f"goodput {report.normalized_goodput:.4f} inflation {report.steady_state_inflation:.4f}",
        f"conservation error {engine.conservation_error():.3e}",
    ])
    print(f"Wrote {out / 'trace.csv'}")
    return 0


def _train(args, exp: Experiment, out: Path) -> int:
    config = exp.train
    if args.epochs is not None:
        config = dataclasses.replace(config, epochs=args.epochs)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    result = train(config, exp.sim, exp.reward)
    save_policy(result.policy, args.out)
    write_train_log(result.log, out / "train_log.csv")
    last = result.log[-1] if result.log else None
    _write_summary(out, "train", [
        f"started {result.started_at}",
        f"epochs {len(result.log)} stop {result.stop_reason}",
        f"final |delta| {last.mean_abs_delta:.5f}" if last else "no epochs run",
        f"checkpoint {args.out}",
    ])
    print(f"Wrote {args.out} ({result.stop_reason})")
    return 0


def _distill(args, exp: Experiment, out: Path) -> int:
    teacher, mapper = load_policy(args.teacher)
    window = teacher.n_inputs // 2
    n_samples = args.samples if args.samples is not None else exp.n_samples
    data = collect_traces(
        teacher, default_distill_scenarios(exp.train.curriculum_n), n_samples, exp.sim, exp.reward, mapper, window
    )
    student = fit_gbt(data, exp.distill)
    save_ensemble(student, args.out)
    report = fidelity_report(
        teacher, student, data, [many_to_one(n) for n in args.fidelity_n], exp.sim, exp.reward, mapper, window
    )
    write_fidelity_csv(report, out / "fidelity.csv")
    _write_summary(out, "distill", [
        f"samples {len(data)} (held out {report.n_held_out})",
        f"trees {len(student.trees)} ops {student.op_count}",
        f"held-out rmse raw {report.rmse_raw:.6f} multiplier {report.rmse_multiplier:.6f}",
    ])
    print(f"Wrote {args.out} ({student.op_count} ops)")
    return 0


def _export(args) -> int:
    ens = load_ensemble(args.ensemble)
    source, description = write_export(ens, args.out)
    check = verify_export(ens, n_inputs=args.check)
    status = "PASS" if check.ok else "FAIL"
    print(f"Wrote {source} and {description}; equivalence on {check.n_inputs} inputs: {status}")
    return 0 if check.ok else 2


def _bench(args, exp: Experiment, out: Path) -> int:
    cfg = _sim_cfg(args, exp)
    spec = _scenario(args, exp)
    kinds = [k.strip() for k in args.controller.split(",") if k.strip()]
    factories = {kind: _factory(kind, exp, cfg, spec, args.model, None) for kind in kinds}
    reports = [run_benchmark(spec, factories[kind], cfg, kind) for kind in kinds]
    write_metrics_csv(reports, out / "metrics.csv")
    if len(kinds) > 1:
        rows = [DropsRow(r.controller, r.scenario, r.drops_per_flow) for r in reports]
        write_drops_csv(rows, out / "drops.csv")
    _write_summary(out, "bench", [
        f"{r.controller} {r.scenario}: goodput {r.normalized_goodput:.4f} "
        f"latency {r.mean_latency_us:.2f} us drops/flow {r.drops_per_flow:.3f}"
        for r in reports
    ])
    print(f"Wrote {out / 'metrics.csv'}")
    return 0


def _sweep(args, exp: Experiment, out: Path) -> int:
    cfg = _sim_cfg(args, exp)
    spec = _scenario(args, exp)
    grid = [(t, b) for t in args.targets for b in args.betas]
    rows = parameter_sweep(grid, [spec], cfg, exp.train)
    write_sweep_csv(rows, out / "sweep.csv")
    _write_summary(out, "sweep", [
        f"grid points {len(grid)} failed {sum(r.failed for r in rows)}",
        f"latency trend {'PASS' if latency_trend_ok(rows) else 'FAIL'}",
    ])
    print(f"Wrote {out / 'sweep.csv'}")
    return 0


def _probe(args, exp: Experiment, out: Path) -> int:
    model, mapper, _ = load_model(args.model)
    window = model.n_inputs // 2 if hasattr(model, "n_inputs") else model.n_features // 2
    table = probe_policy(model, exp.reward, mapper, window, args.congested_delta)
    write_probe_csv(table, out / "probe.csv")
    status = "PASS" if table.passed else "FAIL: " + ", ".join(table.violations())
    _write_summary(out, "probe", [f"sign pattern {status}"] + [
        " ".join(f"{v:.4f}" for v in row) for row in table.matrix
    ])
    print(f"Wrote {out / 'probe.csv'}; sign pattern {status}")
    return 0


def _theory(args, exp: Experiment, out: Path) -> int:
    model, mapper, _ = load_model(args.policy)
    table = theory_vs_practice(model, args.n, exp.sim, exp.reward, mapper, include_swift=not args.no_swift,
                               seeds=args.seeds)
    write_theory_csv(table, out / "theory.csv")
    lines = [f"max relative error {table.max_relative_error:.4f}", f"monotone {table.monotone}"]
    if table.swift_fit is not None:
        lines.append(f"swift fit c={table.swift_fit[0]:.5f} b={table.swift_fit[1]:.5f}")
    _write_summary(out, "theory", lines)
    print(f"Wrote {out / 'theory.csv'}")
    return 0


def _ablation(args, exp: Experiment, out: Path) -> int:
    teacher, mapper = load_policy(args.policy)
    student = load_ensemble(args.ensemble)
    rows = latency_ablation(
        {"rlcc-mlp": teacher, "rlcc-tree": student}, args.latencies,
        [many_to_one(n) for n in args.n], exp.sim, exp.reward, mapper, teacher.n_inputs // 2,
    )
    write_ablation_csv(rows, out / "ablation.csv")
    _write_summary(out, "ablation", [
        f"{r.model} @ {r.decision_latency_us} us {r.scenario}: goodput {r.goodput:.4f} drops/flow {r.drops_per_flow:.3f}"
        for r in rows
    ])
    print(f"Wrote {out / 'ablation.csv'}")
    return 0
