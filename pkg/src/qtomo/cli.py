"""Command-line front end.

    qtomo simulate   --config run.json [--m N] [--seed N] [--out DIR]
    qtomo moments    --config run.json [--beta X] [--out DIR]
    qtomo estimate   --config run.json LOG.csv [--mode M] [--out DIR]
    qtomo experiment experiment-1 [--R N] [--m N] [--full] [--jobs N]

Exit codes: 0 success, 2 bad configuration or input, 3 simulation failure,
4 estimation did not converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .estimator import EstimationError, SolverOptions, estimate
from .experiments import EXPERIMENTS, TOPOLOGIES, StudyConfig, run_experiment
from .io import read_json, read_log, write_json, write_log, write_moments, write_result
from .model import EstimationMode, ModelError, NetworkParams, validate
from .moments import SingularSystemError, observed_moments
from .simulator import replicate, simulate

logger = logging.getLogger("qtomo")

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_NOT_CONVERGED = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    params: NetworkParams | None = None
    beta: float = 5.0
    m: int = 1000
    R: int = 1
    mode: EstimationMode = EstimationMode.KNOWN
    seed: int = 0
    burnin: float | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    out: Path = Path(".")
    extra: dict = field(default_factory=dict)


_CONFIG_KEYS = {"schema_version", "params", "beta", "m", "R", "mode", "seed", "burnin", "solver", "out"}


def load_config(path) -> RunConfig:
    """Read a JSON run configuration; ``params`` may be inline or a path
    relative to the configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    try:
        doc = read_json(path)
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    cfg = RunConfig(extra={k: v for k, v in doc.items() if k not in _CONFIG_KEYS})
    if "params" in doc:
        spec = doc["params"]
        if isinstance(spec, str):
            ppath = (path.parent / spec) if not Path(spec).is_absolute() else Path(spec)
            if not ppath.exists():
                raise ConfigError(f"parameter file {ppath} does not exist")
            spec = read_json(ppath)
        try:
            cfg.params = NetworkParams.from_dict(spec)
        except (ModelError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid params: {exc}") from None
    try:
        cfg.beta = float(doc.get("beta", cfg.beta))
        cfg.m = int(doc.get("m", cfg.m))
        cfg.R = int(doc.get("R", cfg.R))
        cfg.seed = int(doc.get("seed", cfg.seed))
        if doc.get("burnin") is not None:
            cfg.burnin = float(doc["burnin"])
        cfg.mode = EstimationMode.parse(doc.get("mode", cfg.mode))
        if "solver" in doc:
            cfg.solver = SolverOptions.from_dict(doc["solver"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from None
    if "out" in doc:
        cfg.out = Path(doc["out"])
    return cfg


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    for name in ("beta", "seed", "burnin", "R"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "m", None) is not None:
        cfg.m = _as_int(args.m)
    if getattr(args, "mode", None) is not None:
        cfg.mode = EstimationMode.parse(args.mode)
    if getattr(args, "out", None) is not None:
        cfg.out = Path(args.out)
    return cfg


def _check(cfg: RunConfig, need_params: bool = True):
    if need_params and cfg.params is None:
        raise ConfigError("configuration has no params")
    if cfg.m < 2:
        raise ConfigError("m must be at least 2")
    if cfg.R < 1:
        raise ConfigError("R must be at least 1")
    if not cfg.beta > 0:
        raise ConfigError("beta must be positive")
    if cfg.burnin is not None and cfg.burnin < 0:
        raise ConfigError("burnin must be nonnegative")
    if cfg.params is not None:
        rep = validate(cfg.params, EstimationMode.KNOWN)
        # a network without inflow is legal (it stays empty); everything else must hold
        bad = [k for k in rep.failures if k != "flow_in"]
        if bad:
            raise ConfigError("invalid params: " + "; ".join(rep.messages.get(k, k) for k in bad))


def _as_int(text) -> int:
    value = float(text)
    if value != int(value):
        raise ConfigError(f"expected an integer, got {text}")
    return int(value)


def _int_list(text) -> list[int]:
    return [_as_int(t) for t in str(text).split(",") if t.strip()]


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    _check(cfg)
    if not cfg.params.sampleable:
        raise ConfigError("params contain model-free services, which cannot be simulated")
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        if cfg.R == 1:
            logs = [simulate(cfg.params, cfg.beta, cfg.m, cfg.seed, burnin=cfg.burnin, keep_true=args.keep_true)]
        else:
            logs = replicate(cfg.params, cfg.beta, cfg.m, cfg.R, cfg.seed, jobs=args.jobs,
                             burnin=cfg.burnin, keep_true=args.keep_true)
    except (ArithmeticError, MemoryError, RuntimeError) as exc:
        logger.error("simulation failed: %s", exc)
        return EXIT_SIMULATION
    for r, log in enumerate(logs):
        name = "log.csv" if len(logs) == 1 else f"log_{r:04d}.csv"
        write_log(log, cfg.out / name)
    write_json(cfg.out / "params.json", cfg.params.to_dict())
    logger.info("wrote %d log(s) to %s", len(logs), cfg.out)
    return EXIT_OK


def cmd_moments(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    _check(cfg)
    try:
        mom = observed_moments(cfg.params, cfg.beta, lag2=True)
    except (SingularSystemError, ModelError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    write_moments(mom, cfg.out)
    logger.info("wrote analytic moments to %s", cfg.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    _check(cfg)
    log_path = Path(args.log)
    if not log_path.exists():
        raise ConfigError(f"log file {log_path} does not exist")
    try:
        log = read_log(log_path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read log: {exc}") from None
    if log.n != cfg.params.n:
        raise ConfigError(f"log has {log.n} stations but params describe {cfg.params.n}")
    beta = args.beta if args.beta is not None else log.beta
    try:
        res = estimate(log, cfg.mode, cfg.params, beta=beta, opts=cfg.solver)
    except (EstimationError, SingularSystemError) as exc:
        logger.error("estimation failed: %s", exc)
        return EXIT_NOT_CONVERGED
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_result(res, cfg.out / "result.json")
    if not res.converged:
        logger.warning("estimation did not converge (residual norm %.3g)", res.residual_norm)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_experiment(args) -> int:
    solver = SolverOptions()
    extra: dict = {}
    if args.config:
        cfg = load_config(args.config)
        solver, extra = cfg.solver, cfg.extra
    ms = None
    if args.m is not None:
        ms = _int_list(args.m)
        if any(v < 2 for v in ms):
            raise ConfigError("m must be at least 2")
        if args.name != "experiment-2":
            if len(ms) != 1:
                raise ConfigError(f"{args.name} takes a single m")
            ms = ms[0]
    if args.R is not None and args.R < 1:
        raise ConfigError("R must be at least 1")
    study = StudyConfig(
        R=args.R,
        m=ms,
        beta=args.beta,
        seed=args.seed if args.seed is not None else 0,
        jobs=args.jobs,
        out=Path(args.out) if args.out else Path(args.name),
        full=args.full,
        burnin=args.burnin,
        topology=args.topology or extra.get("topology", "line"),
        estimator=args.estimator or extra.get("estimator", "closed-form"),
        solver=solver,
    )
    try:
        summary = run_experiment(args.name, study)
    except (ArithmeticError, RuntimeError) as exc:
        logger.error("%s failed: %s", args.name, exc)
        return EXIT_SIMULATION
    logger.info("%s finished; reports in %s", args.name, study.out)
    if args.print_summary:
        print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--out", help="output directory")
    common.add_argument("--beta", type=float, help="sampling rate")
    common.add_argument("--burnin", type=float, help="start empty this long before time 0")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qtomo", description=__doc__.split("\n")[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate observation logs")
    p.add_argument("--config", required=True)
    p.add_argument("--m", help="number of sampling epochs")
    p.add_argument("--R", type=int, help="number of independent logs")
    p.add_argument("--keep-true", action="store_true", help="also write the uncensored counts")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("moments", parents=[common], help="write analytic moments")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("estimate", parents=[common], help="estimate parameters from a log")
    p.add_argument("--config", required=True)
    p.add_argument("log", help="observation log CSV (with its JSON sidecar)")
    p.add_argument("--mode", choices=[m.value for m in EstimationMode])
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("experiment", parents=[common], help="run a simulation study")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--config")
    p.add_argument("--m", help="epochs per run; experiment-2 takes a comma-separated list")
    p.add_argument("--R", type=int, help="replications")
    p.add_argument("--full", action="store_true", help="replication count used in the original study")
    p.add_argument("--topology", choices=TOPOLOGIES + ("all",), help="experiment-1 network")
    p.add_argument("--estimator", choices=("closed-form", "least-squares"), help="experiment-1 estimator")
    p.add_argument("--print-summary", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad flags, matching the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
