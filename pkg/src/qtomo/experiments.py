"""Simulation studies: replicated simulate-then-estimate runs with CSV reports.

Each study writes its tables into an output directory and returns a small
summary dict.  Per-run seeds come from ``(seed, run_index)`` substreams, so
results do not depend on the number of worker processes.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .estimator import (
    SolverOptions,
    empirical_moments,
    estimate,
    estimate_closed_form,
    estimate_sequential,
)
from .io import fmt, write_csv, write_json
from .model import (
    EstimationMode,
    Erlang,
    Exponential,
    NetworkParams,
    circle_routing,
    cliques_routing,
    distance,
    exponential_network,
    line_routing,
    symmetric_circle_routing,
)
from .moments import effective_rates
from .simulator import simulate

logger = logging.getLogger(__name__)

EXPERIMENTS = ("experiment-1", "experiment-2", "experiment-3", "experiment-4")
TOPOLOGIES = ("line", "circle", "symmetric-circle", "cliques")

EXP1_LAMBDA = (3.0, 2.0, 4.0, 3.0, 4.0)
EXP1_MU = (2.0, 3.0, 3.0, 4.0, 3.0)
EXP2_P = (0.9, 0.8, 0.7, 0.8, 0.9)
EXP2_M = (100_000, 500_000, 1_000_000, 2_000_000, 3_000_000)
EXP3_MU = (2.0, 3.0, 3.0, 6.0, 3.0, 4.0, 6.0, 3.0, 2.0, 5.0)
EXP3_LAMBDA = (3.0, 2.0, 4.0, 5.0, 2.0, 6.0, 4.0, 3.0, 2.0, 6.0)

# adjacency report thresholds of the topology-recovery study
OMIT_BELOW = 0.01
DOTTED_BELOW = 0.02


@dataclass
class StudyConfig:
    R: int | None = None
    m: int | list | None = None
    beta: float | None = None
    seed: int = 0
    jobs: int = 1
    out: Path = Path("out")
    full: bool = False
    burnin: float | None = None
    topology: str = "line"
    estimator: str = "closed-form"
    solver: SolverOptions = field(default_factory=SolverOptions)


# --------------------------------------------------------------------------
# reference networks


def experiment1_params(topology: str = "line") -> NetworkParams:
    builders = {
        "line": lambda: line_routing(5, 0.5),
        "circle": lambda: circle_routing(5, 0.5),
        "symmetric-circle": lambda: symmetric_circle_routing(5, 0.25),
        "cliques": cliques_routing,
    }
    if topology not in builders:
        raise ValueError(f"unknown topology {topology!r}; choose from {TOPOLOGIES}")
    return exponential_network(builders[topology](), EXP1_LAMBDA, EXP1_MU)


def experiment2_params() -> NetworkParams:
    return exponential_network(circle_routing(5, 0.5), EXP1_LAMBDA, EXP1_MU, p=EXP2_P)


def random_routing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-diagonal sub-stochastic matrix: Dirichlet rows with an exit atom."""
    Q = np.zeros((n, n))
    for i in range(n):
        w = rng.dirichlet(np.ones(n))
        Q[i, np.arange(n) != i] = w[:-1]
    return Q


def experiment3_params(seed: int = 1) -> NetworkParams:
    return exponential_network(random_routing(10, np.random.default_rng(seed)), EXP3_LAMBDA, EXP3_MU)


def experiment4_params(erlang: bool = True) -> NetworkParams:
    Q = np.array([[0.0, 0.5], [0.5, 0.0]])
    rates = (3.0, 5.0)
    services = [Erlang(2, r) for r in rates] if erlang else [Exponential(r) for r in rates]
    return NetworkParams(Q=Q, lam=[3.0, 4.0], services=services)


# --------------------------------------------------------------------------
# helpers


def _pool_map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _qnames(n, no_self_loops=False):
    return [(i, j) for i in range(n) for j in range(n) if not (no_self_loops and i == j)]


def _estimate_row(theta, n):
    return [fmt(v) for v in theta.lam] + [fmt(theta.Q[i, j]) for i, j in _qnames(n)]


def _estimate_header(n):
    return [f"lambda_{i + 1}" for i in range(n)] + [f"q_{i + 1}_{j + 1}" for i, j in _qnames(n)]


def _summary_rows(truth: NetworkParams, draws: np.ndarray):
    """parameter, true value, sample mean, sample variance."""
    n = truth.n
    names = _estimate_header(n)
    true = np.concatenate([truth.lam, [truth.Q[i, j] for i, j in _qnames(n)]])
    mean = draws.mean(axis=0)
    var = draws.var(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1])
    return [[nm, fmt(t), fmt(mu), fmt(v)] for nm, t, mu, v in zip(names, true, mean, var)]


# --------------------------------------------------------------------------
# experiment 1: topology recovery with known services


def _exp1_run(task):
    params, beta, m, seed, r, burnin, estimator, opts = task
    log = simulate(params, beta, m, seed, run_index=r, burnin=burnin)
    if estimator == "closed-form":
        res = estimate_closed_form(empirical_moments(log), params, beta, opts)
    else:
        res = estimate(log, EstimationMode.KNOWN, params, opts=replace(opts, known_estimate="least-squares"))
    return res.theta_hat, res.converged


def run_experiment_1(cfg: StudyConfig) -> dict:
    R = cfg.R or (1000 if cfg.full else 30)
    m = int(cfg.m or 250_000)
    beta = cfg.beta or 5.0
    if cfg.estimator not in ("closed-form", "least-squares"):
        raise ValueError(f"unknown estimator {cfg.estimator!r}")
    topologies = TOPOLOGIES if cfg.topology == "all" else (cfg.topology,)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"experiment": "experiment-1", "R": R, "m": m, "beta": beta, "seed": cfg.seed, "estimator": cfg.estimator}
    for topo in topologies:
        params = experiment1_params(topo)
        n = params.n
        tasks = [(params, beta, m, cfg.seed, r, cfg.burnin, cfg.estimator, cfg.solver) for r in range(R)]
        t0 = time.perf_counter()
        results = _pool_map(_exp1_run, tasks, cfg.jobs)
        elapsed = time.perf_counter() - t0
        draws = np.array([np.concatenate([th.lam, [th.Q[i, j] for i, j in _qnames(n)]]) for th, _ in results])
        header = ["run", "converged"] + _estimate_header(n)
        rows = [[r, int(ok)] + _estimate_row(th, n) for r, (th, ok) in enumerate(results)]
        write_csv(out / f"exp1_{topo}_runs.csv", header, rows)
        write_csv(out / f"exp1_{topo}_summary.csv", ["parameter", "true", "mean", "variance"], _summary_rows(params, draws))
        write_csv(out / f"exp1_{topo}_lambda1_draws.csv", ["run", "lambda_1"], [[r, fmt(v)] for r, v in enumerate(draws[:, 0])])
        mean_lam = draws[:, :n].mean(axis=0)
        mean_q = draws[:, n:].mean(axis=0).reshape(n, n)
        summary[topo] = {
            "mean_lambda": mean_lam.tolist(),
            "mean_Q": mean_q.tolist(),
            "max_abs_lambda_error": float(np.abs(mean_lam - params.lam).max()),
            "max_abs_Q_error": float(np.abs(mean_q - params.Q).max()),
            "converged_runs": int(sum(ok for _, ok in results)),
        }
        logger.info("experiment-1 %s: %d runs in %.1fs", topo, R, elapsed)
    write_json(out / "exp1_summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# experiment 2: accuracy against the number of observations, p unknown


def _exp2_run(task):
    params, beta, m, seed, run_index, burnin, opts = task
    log = simulate(params, beta, m, seed, run_index=run_index, burnin=burnin)
    template = params.replace(services=[Exponential(1.0)] * params.n, p=np.ones(params.n))
    res = estimate(log, EstimationMode.WITHP, template, opts=opts)
    return res.theta_hat, res.converged, res.residual_norm


def adjacency_report(Q_hat: np.ndarray, omit_below: float = OMIT_BELOW, dotted_below: float = DOTTED_BELOW):
    """(from, to, q_hat, style) for every off-diagonal pair."""
    n = Q_hat.shape[0]
    rows = []
    for i, j in _qnames(n, no_self_loops=True):
        q = float(Q_hat[i, j])
        style = "omitted" if q < omit_below else "dotted" if q < dotted_below else "solid"
        rows.append((i + 1, j + 1, q, style))
    return rows


def run_experiment_2(cfg: StudyConfig) -> dict:
    ms = cfg.m if cfg.m is not None else list(EXP2_M)
    ms = [int(v) for v in (ms if isinstance(ms, (list, tuple)) else [ms])]
    R = cfg.R or 1
    beta = cfg.beta or 5.0
    params = experiment2_params()
    n = params.n
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(params, beta, m, cfg.seed, k * R + r, cfg.burnin, cfg.solver) for k, m in enumerate(ms) for r in range(R)]
    results = _pool_map(_exp2_run, tasks, cfg.jobs)

    err_rows, est_rows, adj_rows = [], [], []
    by_m = {}
    for (_, _, m, _, idx, _, _), (theta, ok, norm) in zip(tasks, results):
        r = idx % R
        err = distance(theta, params, EstimationMode.WITHP)
        q_err = float(np.abs(theta.Q - params.Q).sum())
        by_m.setdefault(m, []).append(err)
        err_rows.append([m, r, fmt(err), fmt(q_err), int(ok), fmt(norm)])
        mu = [1.0 / s.mean for s in theta.services]
        est_rows.append([m, r] + _estimate_row(theta, n) + [fmt(v) for v in mu] + [fmt(v) for v in theta.p])
        for a, b, q, style in adjacency_report(theta.Q):
            adj_rows.append([m, r, a, b, fmt(q), style])
    write_csv(out / "exp2_error_vs_m.csv", ["m", "run", "l1_error", "q_l1_error", "converged", "residual_norm"], err_rows)
    header = ["m", "run"] + _estimate_header(n) + [f"mu_{i + 1}" for i in range(n)] + [f"p_{i + 1}" for i in range(n)]
    write_csv(out / "exp2_estimates.csv", header, est_rows)
    write_csv(out / "exp2_adjacency.csv", ["m", "run", "from", "to", "q_hat", "style"], adj_rows)
    summary = {
        "experiment": "experiment-2",
        "R": R,
        "beta": beta,
        "seed": cfg.seed,
        "thresholds": {"omit_below": OMIT_BELOW, "dotted_below": DOTTED_BELOW},
        "median_l1_error": {str(m): float(np.median(v)) for m, v in by_m.items()},
    }
    write_json(out / "exp2_summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# experiment 3: a ten-station network, sequential scheme


def _exp3_run(task):
    params, beta, m, seed, r, burnin, opts = task
    log = simulate(params, beta, m, seed, run_index=r, burnin=burnin)
    template = params.replace(services=[Exponential(1.0)] * params.n)
    t0 = time.perf_counter()
    res = estimate_sequential(empirical_moments(log), beta, template, opts)
    return res.theta_hat, res.converged, time.perf_counter() - t0


def run_experiment_3(cfg: StudyConfig) -> dict:
    R = cfg.R or 1
    m = int(cfg.m or 2_000_000)
    beta = cfg.beta or 10.0
    params = experiment3_params()
    n = params.n
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(params, beta, m, cfg.seed, r, cfg.burnin, cfg.solver) for r in range(R)]
    results = _pool_map(_exp3_run, tasks, cfg.jobs)
    lam_eff = effective_rates(params)
    q_rows, mu_rows, runs = [], [], []
    for r, (theta, ok, secs) in enumerate(results):
        mu_hat = np.array([1.0 / s.mean for s in theta.services])
        lam_eff_hat = effective_rates(theta)
        for i in range(n):
            mu_rows.append([r, i + 1, fmt(EXP3_MU[i]), fmt(mu_hat[i]), fmt(params.lam[i]), fmt(theta.lam[i]),
                            fmt(lam_eff[i]), fmt(lam_eff_hat[i])])
        for i, j in _qnames(n, no_self_loops=True):
            q_rows.append([r, i + 1, j + 1, fmt(params.Q[i, j]), fmt(theta.Q[i, j]), fmt(abs(params.Q[i, j] - theta.Q[i, j]))])
        logger.info("experiment-3 run %d: estimation took %.1fs", r, secs)
        runs.append({
            "run": r,
            "converged": bool(ok),
            "mu_hat": mu_hat.tolist(),
            "max_abs_mu_error": float(np.abs(mu_hat - np.array(EXP3_MU)).max()),
            "squared_Q_error": float(np.sum((theta.Q - params.Q) ** 2)),
        })
    write_csv(out / "exp3_abs_q_error.csv", ["run", "from", "to", "q", "q_hat", "abs_error"], q_rows)
    write_csv(out / "exp3_station_estimates.csv",
              ["run", "station", "mu", "mu_hat", "lambda", "lambda_hat", "lambda_eff", "lambda_eff_hat"], mu_rows)
    summary = {"experiment": "experiment-3", "R": R, "m": m, "beta": beta, "seed": cfg.seed,
               "true_Q": params.Q.tolist(), "runs": runs}
    write_json(out / "exp3_summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# experiment 4: model-free against a misspecified exponential fit


def _exp4_run(task):
    params, beta, m, seed, run_index, burnin, opts = task
    log = simulate(params, beta, m, seed, run_index=run_index, burnin=burnin)
    n = params.n
    exp_template = params.replace(services=[Exponential(1.0)] * n)
    rows = []
    for method, mode, template in (
        ("exponential-assumption", EstimationMode.PARAMETRIC, exp_template),
        ("model-free", EstimationMode.MODELFREE, params),
    ):
        res = estimate(log, mode, template, opts=opts)
        rows.append((method, res))
    return rows


def run_experiment_4(cfg: StudyConfig) -> dict:
    R = cfg.R or 1
    m = int(cfg.m or 1_000_000)
    beta = cfg.beta or 3.0
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = (("exponential", experiment4_params(erlang=False)), ("erlang-2", experiment4_params(erlang=True)))
    tasks = [(params, beta, m, cfg.seed, k * R + r, cfg.burnin, cfg.solver)
             for k, (_, params) in enumerate(cases) for r in range(R)]
    results = _pool_map(_exp4_run, tasks, cfg.jobs)
    header = ["data", "run", "method", "lambda_1", "lambda_2", "mean_service_1", "mean_service_2",
              "q_1_2", "q_2_1", "residual_norm", "converged", "null_directions"]
    rows = []
    table: dict = {}
    for (params, _, _, _, idx, _, _), per_method in zip(tasks, results):
        data = cases[idx // R][0]
        for method, res in per_method:
            th = res.theta_hat
            rows.append([data, idx % R, method, fmt(th.lam[0]), fmt(th.lam[1]), fmt(th.services[0].mean),
                         fmt(th.services[1].mean), fmt(th.Q[0, 1]), fmt(th.Q[1, 0]), fmt(res.residual_norm),
                         int(res.converged), res.diagnostics.get("null_directions", 0)])
            table.setdefault(data, {}).setdefault(method, []).append([s.mean for s in th.services])
    write_csv(out / "exp4_comparison.csv", header, rows)
    summary = {"experiment": "experiment-4", "R": R, "m": m, "beta": beta, "seed": cfg.seed,
               "true_mean_service": {d: list(p.means) for d, p in cases},
               "mean_service_estimates": {d: {k: np.mean(v, axis=0).tolist() for k, v in t.items()} for d, t in table.items()}}
    write_json(out / "exp4_summary.json", summary)
    return summary


RUNNERS = {
    "experiment-1": run_experiment_1,
    "experiment-2": run_experiment_2,
    "experiment-3": run_experiment_3,
    "experiment-4": run_experiment_4,
}


def run_experiment(name: str, cfg: StudyConfig) -> dict:
    if name not in RUNNERS:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    return RUNNERS[name](cfg)
