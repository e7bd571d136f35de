import argparse
import json
import pathlib
import sys
import traceback
from typing import List, Optional

import numpy as np
from ddtrace import tracer

import disk
import dynamics
import lqr
import net
import plotdata
import sim
import smt
import train
import verify
from autodiff import UnsupportedOperationError
from config import CONFIG, RunConfig, load_run_config
from constants import EXIT_FALSIFIED, EXIT_INTERNAL, EXIT_OK, EXIT_UNKNOWN, EXIT_USAGE, SYSTEM_DEFAULTS
from dynamics import DynamicsModel, SingularityError
from logger import set_up_logging
from util import UsageError

tracer.enabled = CONFIG["DATADOG_TRACE_ENABLED"]

EXIT_BY_STATUS = {
    verify.CertificationStatus.VERIFIED: EXIT_OK,
    verify.CertificationStatus.UNKNOWN: EXIT_UNKNOWN,
    verify.CertificationStatus.FALSIFIED: EXIT_FALSIFIED,
}
EMPIRICAL_SAMPLES = 500


def build_model(run: RunConfig) -> DynamicsModel:
    return DynamicsModel(dynamics.SystemKind(run.system), run.params)


def load_weights(args, run: RunConfig):
    directory = pathlib.Path(args.weights) if args.weights else run.paths.weights_out
    if not (directory / net.CERTIFICATE_FILENAME).exists():
        raise UsageError(f"no weights found in {directory}")
    return net.load_networks(directory)


def output_dir(args, run: RunConfig) -> pathlib.Path:
    return pathlib.Path(args.out) if getattr(args, "out", None) else run.paths.data_out


def level(args, run: RunConfig) -> float:
    """--c, else the configured level, else the reference level for the system."""
    if getattr(args, "c", None) is not None:
        return args.c
    return run.verify.c if run.verify.c is not None else run.reference_c


@tracer.wrap()
def cmd_train(args, run: RunConfig) -> int:
    model = build_model(run)
    weights_dir = pathlib.Path(args.weights) if args.weights else run.paths.weights_out
    result = train.train(run.train, model, checkpoint_dir=weights_dir / "checkpoints")
    net.save_networks(weights_dir, result.certificate, result.policy)
    history_path = disk.write_frame(result.history, output_dir(args, run) / "history.csv")
    final = result.history.iloc[-1].to_dict()
    logger.info(f"Wrote weights to {weights_dir} and history to {history_path}")
    print(json.dumps({name: float(value) for name, value in final.items()}, indent=2))
    return EXIT_OK


@tracer.wrap()
def cmd_verify(args, run: RunConfig) -> int:
    model = build_model(run)
    certificate, policy = load_weights(args, run)
    region = run.train.r2
    options = dict(
        epsilon=run.verify.epsilon,
        delta_min=run.verify.resolved_delta_min(region),
        budget=run.verify.budget,
        chunk=run.verify.chunk,
        threads=run.verify.threads,
    )
    if run.verify.c is not None:
        result = verify.certify_conditions(certificate, policy, model, region, run.verify.c, **options)
    else:
        _, result = verify.find_max_level(certificate, policy, model, region, tol=run.verify.tol, **options)

    verify.report_with_area(result, certificate, region, run.verify.area_samples, np.random.default_rng(run.seed))
    if args.grid_check and result.verified:
        verdict = verify.grid_oracle(certificate, policy, model, region, result.c, result.epsilon)
        if not verdict.holds:
            logger.error(
                f"grid check disagrees with the verified level {result.c}: "
                f"{len(verdict.interior_violations)} interior and {len(verdict.boundary_violations)} boundary points"
            )
            return EXIT_INTERNAL

    report_path = pathlib.Path(args.report) if args.report else run.paths.report_out
    disk.write_json(result.to_report(), report_path)
    print(json.dumps(result.to_report(), indent=2))
    return EXIT_BY_STATUS[result.status]


@tracer.wrap()
def cmd_lqr(args, run: RunConfig) -> int:
    model = build_model(run)
    solution = lqr.lqr_baseline(
        model,
        run.train.r2,
        epsilon=run.verify.epsilon,
        tol=run.verify.tol,
        budget=run.verify.budget,
        threads=run.verify.threads,
    )
    report_path = pathlib.Path(args.report) if args.report else output_dir(args, run) / "lqr_report.json"
    disk.write_json(solution.to_report(), report_path)
    print(json.dumps(solution.to_report(), indent=2))
    return EXIT_OK


def _write_trajectories(trajectories: List[sim.Trajectory], directory: pathlib.Path) -> None:
    for i, trajectory in enumerate(trajectories):
        disk.write_frame(sim.trajectory_frame(trajectory), directory / f"trajectory-{i:03d}.csv")


@tracer.wrap()
def cmd_simulate(args, run: RunConfig) -> int:
    model = build_model(run)
    certificate, policy = load_weights(args, run)
    rng = np.random.default_rng(run.seed)
    out = output_dir(args, run)
    trajectories = plotdata.sample_trajectories(model, policy, run.train.r2, args.count, rng)
    _write_trajectories(trajectories, out / "trajectories")
    statuses = [t.status.value for t in trajectories]
    logger.info(f"Simulated {len(trajectories)} trajectories: {statuses}")

    if args.c is None:
        return EXIT_OK
    field = dynamics.vector_field(model, lambda x: net.policy_eval(policy, x))
    region = run.train.r2
    report = sim.check_empirical_soundness(
        field, certificate, args.c, region.lo, region.hi, run.verify.epsilon, args.samples, rng
    )
    disk.write_json(
        {"level": args.c, "samples": report.samples, "escapes": report.escapes}, out / "empirical_soundness.json"
    )
    return EXIT_OK if report.passed else EXIT_FALSIFIED


@tracer.wrap()
def cmd_area(args, run: RunConfig) -> int:
    certificate, _ = load_weights(args, run)
    c = level(args, run)
    samples = args.samples or run.verify.area_samples
    estimate = verify.doa_area(certificate, c, run.train.r2, samples, np.random.default_rng(run.seed))
    payload = {"c": c, "samples": samples, "area": estimate.area, "stderr": estimate.stderr}
    disk.write_json(payload, output_dir(args, run) / "area.json")
    print(json.dumps(payload, indent=2))
    return EXIT_OK


@tracer.wrap()
def cmd_plotdata(args, run: RunConfig) -> int:
    model = build_model(run)
    certificate, policy = load_weights(args, run)
    region = run.train.r2
    c = level(args, run)
    out = output_dir(args, run)
    disk.write_frame(plotdata.certificate_grid(certificate, region, args.points), out / "w_grid.csv")
    disk.write_frame(plotdata.vector_field(model, policy, region), out / "vector_field.csv")
    disk.write_frame(plotdata.level_set(certificate, region, c, args.points), out / "level_set.csv")
    disk.write_frame(plotdata.value_grid(certificate, region, run.train.alpha, args.points), out / "value_grid.csv")
    trajectories = plotdata.sample_trajectories(model, policy, region, rng=np.random.default_rng(run.seed))
    _write_trajectories(trajectories, out / "trajectories")
    logger.info(f"Wrote plot data for level {c} to {out}")
    return EXIT_OK


@tracer.wrap()
def cmd_export_smt(args, run: RunConfig) -> int:
    model = build_model(run)
    c = level(args, run)
    out = output_dir(args, run) / "smt"
    if args.lqr:
        a, b = dynamics.linearize(model, np.zeros(model.state_dim), model.u_star)
        p = lqr.solve_care(a, b, np.eye(model.state_dim), np.eye(model.input_dim))
        k = lqr.lqr_gain(p, b, np.eye(model.input_dim))
        queries = smt.export_lqr_smt2(model, p, k, c, run.verify.epsilon)
        prefix = "lqr-"
    else:
        certificate, policy = load_weights(args, run)
        queries = smt.export_smt2(certificate, policy, model, run.train.r2, c, run.verify.epsilon)
        prefix = ""
    for condition, text in queries.items():
        disk.write_text(text, out / f"{prefix}{condition}.smt2")
    logger.info(f"Wrote {len(queries)} SMT-LIB queries to {out}")
    return EXIT_OK


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=pathlib.Path, help="run configuration JSON")
    common.add_argument("--system", choices=sorted(SYSTEM_DEFAULTS), help="benchmark system")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on verification workers")
    common.add_argument("--weights", help="directory holding certificate.json and policy.json")
    common.add_argument("--out", help="output directory for data files")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="zubov", description="Neural Zubov certificates and policies")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", parents=[common], help="co-train certificate and policy")
    p.add_argument("--iterations", type=int)
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("verify", parents=[common], help="certify a level set of the certificate")
    p.add_argument("--c", type=float, help="level to certify; bisect for the largest one when absent")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--report", help="certification report path")
    p.add_argument("--grid-check", action="store_true", help="cross-check a verified level on a dense grid")
    p.set_defaults(handler=cmd_verify)

    p = commands.add_parser("lqr", parents=[common], help="LQR baseline and its certified ellipse")
    p.add_argument("--report", help="baseline report path")
    p.set_defaults(handler=cmd_lqr)

    p = commands.add_parser("simulate", parents=[common], help="closed-loop trajectories")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--c", type=float, help="also check that states with W < c reach the epsilon ball")
    p.add_argument("--samples", type=int, default=EMPIRICAL_SAMPLES)
    p.set_defaults(handler=cmd_simulate)

    p = commands.add_parser("area", parents=[common], help="Monte Carlo area of a sublevel set")
    p.add_argument("--c", type=float)
    p.add_argument("--samples", type=int)
    p.set_defaults(handler=cmd_area)

    p = commands.add_parser("plot-data", parents=[common], help="CSV data for surface, field and level-set plots")
    p.add_argument("--c", type=float)
    p.add_argument("--points", type=int, default=201)
    p.set_defaults(handler=cmd_plotdata)

    p = commands.add_parser("export-smt", parents=[common], help="SMT-LIB queries for the certified conditions")
    p.add_argument("--c", type=float)
    p.add_argument("--lqr", action="store_true", help="export the LQR conditions instead")
    p.set_defaults(handler=cmd_export_smt)
    return parser


def overrides_from(args) -> dict:
    overrides: dict = {}
    if args.system:
        overrides["system"] = {"name": args.system}
    if args.seed is not None:
        overrides["seed"] = args.seed
    verify_section = {}
    if args.threads is not None:
        verify_section["threads"] = args.threads
    if args.command == "verify":
        for name in ("c", "epsilon", "budget"):
            if getattr(args, name) is not None:
                verify_section[name] = getattr(args, name)
    if verify_section:
        overrides["verify"] = verify_section
    if getattr(args, "iterations", None) is not None:
        overrides["train"] = {"iterations": args.iterations}
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        run = load_run_config(args.config, overrides_from(args))
        return args.handler(args, run)
    except (UsageError, UnsupportedOperationError, SingularityError, FileNotFoundError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except train.TrainingDivergedError as e:
        logger.error(f"training diverged, diagnostic snapshot in {e.snapshot}")
        return EXIT_INTERNAL
    except Exception:
        if tracer.enabled:
            logger.exception(f"{args.command} failed", stack_info=True, exc_info=True)
        else:
            traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    logger = set_up_logging(__file__)
    sys.exit(main())
else:
    logger = set_up_logging(__name__)
