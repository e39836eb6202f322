"""Method-of-moments inference of routing, arrival and service parameters.

The data enter only through three averages of the observed counts: the
per-station mean, the lag-one product matrix and (for the richer modes) the
lag-two product matrix.  Parameters are recovered by

* an exact inverse map when services and observation probabilities are
  known (:func:`identify_closed_form`),
* a two-stage fit of routing and one-parameter service laws from the
  cross-moment equations followed by the arrival rates from the means
  (:func:`estimate_sequential`), or
* bounded nonlinear least squares on the stacked moment residuals, with
  several starting points (:func:`estimate_least_squares`).

:func:`estimate` chains these into one pipeline.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.optimize

from .lst import _fresh, residual_transforms
from .model import (
    EstimationMode,
    Exponential,
    ModelError,
    ModelFree,
    NetworkParams,
    ProjectionConfig,
    free_parameter,
    layout,
    pack,
    project_q,
    project_theta,
    with_free_parameter,
)
from .moments import MomentSet, SingularSystemError, raw_moments
from .simulator import ObservationLog

logger = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    pass


class IllConditioned(EstimationError):
    """The linear system of the exact inverse map is numerically singular."""


@dataclass(frozen=True)
class SolverOptions:
    starts: int = 8
    max_iter: int = 500
    gtol: float = 1e-9
    ftol: float = 1e-15
    xtol: float = 1e-15
    jac: str = "2-point"
    seed: int = 0
    # weights on the first-moment, lag-one and lag-two residual blocks
    block_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    penalty_weight: float = 1e3
    cond_limit: float = 1e12
    reorder_cond_limit: float = 1e10
    # lag-one residual form of the sequential scheme: "direct", "reordered" or
    # "auto" (reordered while its leading factor is well conditioned)
    sequential_form: str = "direct"
    # known services, full observation: report the projected inverse map
    # ("closed-form") or the constrained least-squares refinement
    known_estimate: str = "closed-form"
    # random starts draw mean service times log-uniformly in this range, in units of 1/beta
    start_mean_range: tuple[float, float] = (0.2, 5.0)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SolverOptions":
        doc = dict(doc)
        if "projection" in doc and isinstance(doc["projection"], dict):
            proj = dict(doc["projection"])
            for key in ("mean_bounds", "eta_bounds"):
                if key in proj:
                    proj[key] = tuple(proj[key])
            doc["projection"] = ProjectionConfig(**proj)
        for key in ("block_weights", "start_mean_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class EstimationResult:
    theta_hat: NetworkParams
    residual_norm: float
    iterations: int
    converged: bool
    mode: EstimationMode
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        diag = {}
        for key, value in self.diagnostics.items():
            if isinstance(value, NetworkParams):
                value = value.to_dict()
            elif isinstance(value, np.ndarray):
                value = value.tolist()
            diag[key] = value
        return {
            "mode": self.mode.value,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "theta_hat": self.theta_hat.to_dict(),
            "diagnostics": diag,
        }

    def named_parameters(self) -> list[tuple[str, float]]:
        return named_parameters(self.theta_hat, self.mode)


def named_parameters(params: NetworkParams, mode: EstimationMode) -> list[tuple[str, float]]:
    """Flat (name, value) listing with 1-based station indices."""
    n = params.n
    rows = []
    for i in range(n):
        for j in range(n):
            if mode.no_self_loops and i == j:
                continue
            rows.append((f"q_{i + 1}_{j + 1}", float(params.Q[i, j])))
    rows += [(f"lambda_{i + 1}", float(v)) for i, v in enumerate(params.lam)]
    for i, s in enumerate(params.services):
        if isinstance(s, ModelFree):
            rows += [
                (f"mean_{i + 1}", s.mean),
                (f"lst_{i + 1}", s.lst_at_beta),
                (f"dlst_{i + 1}", s.dlst_at_beta),
            ]
        elif mode in (EstimationMode.PARAMETRIC, EstimationMode.WITHP):
            rows.append((f"eta_{i + 1}", float(free_parameter(s))))
            rows.append((f"mean_{i + 1}", float(s.mean)))
    if mode is EstimationMode.WITHP:
        rows += [(f"p_{i + 1}", float(v)) for i, v in enumerate(params.p)]
    return rows


# --------------------------------------------------------------------------
# empirical moments


def empirical_moments(log, need_lag2: bool = False) -> MomentSet:
    """Sample averages of the counts and of their lag-one / lag-two products.

    ``alpha1[j, i]`` averages ``counts[k, j] * counts[k + 1, i]``.
    """
    if isinstance(log, ObservationLog):
        counts, beta = log.counts, log.beta
    else:
        counts, beta = np.asarray(log), None
    m = counts.shape[0]
    if m < 2 or (need_lag2 and m < 3):
        raise EstimationError(f"{m} epochs are too few for the requested moments")
    x = counts.astype(np.float64)
    a0 = x.mean(axis=0)
    a1 = x[:-1].T @ x[1:] / (m - 1)
    a2 = x[:-2].T @ x[2:] / (m - 2) if need_lag2 else None
    return MomentSet(alpha0=a0, alpha1=a1, alpha2=a2, source="empirical", beta=beta)


def dethin(moments: MomentSet, p: np.ndarray) -> MomentSet:
    """Undo known binomial thinning: moments of the full population."""
    p = np.asarray(p, dtype=float)
    if np.all(p == 1.0):
        return moments
    outer = np.outer(p, p)
    return MomentSet(
        alpha0=moments.alpha0 / p,
        alpha1=moments.alpha1 / outer,
        alpha2=None if moments.alpha2 is None else moments.alpha2 / outer,
        source=moments.source,
        beta=moments.beta,
    )


# --------------------------------------------------------------------------
# exact inverse map


def identify_closed_form(moments: MomentSet, services, beta: float, cond_limit: float = 1e12):
    """Routing matrix and arrival rates from the first two moments.

    Requires known services and full observation.  The result is the raw
    solution of the moment equations and may lie outside the feasible set.
    """
    a0 = np.asarray(moments.alpha0, dtype=float)
    a1 = np.asarray(moments.alpha1, dtype=float)
    n = a0.size
    mean, g, dg = (np.array(v) for v in zip(*[_fresh(s, beta) for s in services]))
    if np.any(mean <= 0):
        raise ModelError("service means must be positive")
    g_res, _ = residual_transforms(mean, g, dg, beta)
    lam_eff = a0 / mean
    I = np.eye(n)
    xi1 = np.diag(1.0 / (1.0 - g))
    xi2 = -np.diag(g / (1.0 - g))
    phi = np.outer(a0, a0) + np.diag(a0)
    drift = np.outer(a0, lam_eff) / beta
    omega1 = a1 @ xi2 - phi @ (np.diag(g_res) + np.diag(1.0 - g) @ xi2) + drift
    omega2 = -a1 @ xi1 + phi @ np.diag(1.0 - g) @ xi1 + drift
    cond = np.linalg.cond(omega1)
    if not np.isfinite(cond) or cond > cond_limit:
        raise IllConditioned(f"condition number of the inverse map is {cond:.3g}")
    Q = np.linalg.solve(omega1, omega2)
    lam = (I - Q.T) @ lam_eff
    return Q, lam


# --------------------------------------------------------------------------
# moment residuals


def _family_transforms(services, eta, beta):
    vals = [_fresh(with_free_parameter(s, float(e)), beta) for s, e in zip(services, eta)]
    return (np.array(v) for v in zip(*vals))


def _decode(x, mode, template, beta):
    """Arrays (Q, lam, mean, g, dg, p) for a flat vector, no feasibility checks."""
    n = template.n
    sl = layout(n, mode)
    Q = np.zeros((n, n))
    if mode.no_self_loops:
        Q[~np.eye(n, dtype=bool)] = x[sl["Q"]]
    else:
        Q[:] = x[sl["Q"]].reshape(n, n)
    lam = x[sl["lam"]]
    if mode is EstimationMode.KNOWN:
        mean, g, dg = (np.array(v) for v in zip(*[_fresh(s, beta) for s in template.services]))
    elif mode is EstimationMode.MODELFREE:
        mean, g, dg = x[sl["mean"]], x[sl["lst"]], x[sl["dlst"]]
    else:
        mean, g, dg = _family_transforms(template.services, x[sl["eta"]], beta)
    p = x[sl["p"]] if "p" in sl else np.asarray(template.p, dtype=float)
    return Q, lam, mean, g, dg, p


def _stack(a0, a1, a2, moments, lag2_block, weights):
    w0, w1, w2 = weights
    parts = [w0 * (moments.alpha0 - a0), w1 * (moments.alpha1 - a1).ravel()]
    if lag2_block == "full":
        parts.append(w2 * (moments.alpha2 - a2).ravel())
    elif lag2_block == "diagonal":
        parts.append(w2 * np.diag(moments.alpha2 - a2))
    return np.concatenate(parts)


def moment_residual(
    params: NetworkParams,
    moments: MomentSet,
    mode: EstimationMode | str,
    beta: float,
    weights=(1.0, 1.0, 1.0),
) -> np.ndarray:
    """Stacked differences between empirical and model moments.

    First moments (n), lag-one products (n^2, row-major) and, depending on
    the mode, the full lag-two matrix or its diagonal.
    """
    mode = EstimationMode.parse(mode)
    x = pack(params, mode)
    return _residual_at(x, mode, params, moments, beta, weights)


def _residual_at(x, mode, template, moments, beta, weights):
    Q, lam, mean, g, dg, p = _decode(x, mode, template, beta)
    block = mode.lag2_block
    a0, a1, a2 = raw_moments(Q, lam, mean, g, dg, beta, p=p, lag2=block is not None)
    return _stack(a0, a1, a2, moments, block, weights)


# --------------------------------------------------------------------------
# bounded least squares with several starts


def _bounds(n, mode, beta, opts: SolverOptions):
    sl = layout(n, mode)
    dim = mode.dimension(n)
    lo, hi = np.empty(dim), np.empty(dim)
    proj = opts.projection
    lo[sl["Q"]], hi[sl["Q"]] = 0.0, 1.0
    lo[sl["lam"]], hi[sl["lam"]] = 0.0, proj.lambda_cap
    if "eta" in sl:
        lo[sl["eta"]], hi[sl["eta"]] = proj.eta_bounds
    if "p" in sl:
        lo[sl["p"]], hi[sl["p"]] = 0.0, 1.0
    if mode is EstimationMode.MODELFREE:
        lo[sl["mean"]], hi[sl["mean"]] = proj.mean_bounds
        lo[sl["lst"]], hi[sl["lst"]] = 0.0, 1.0
        lo[sl["dlst"]], hi[sl["dlst"]] = -proj.mean_bounds[1], 0.0
    return lo, hi


class _Objective:
    """Residual vector for scipy's least squares: moment misfit plus
    penalties that keep routing rows sub-stochastic and model-free triples
    consistent with some service law."""

    def __init__(self, mode, template, moments, beta, opts: SolverOptions):
        self.mode = mode
        self.template = template
        self.moments = moments
        self.beta = beta
        self.opts = opts
        n = template.n
        size = {None: 0, "diagonal": n, "full": n * n}[mode.lag2_block]
        self.size = n + n * n + size
        self.sl = layout(n, mode)

    def penalties(self, x):
        w = self.opts.penalty_weight
        n = self.template.n
        Q = _decode(x, self.mode, self.template, self.beta)[0]
        cap = 1.0 - self.opts.projection.exit_eps
        out = [w * np.maximum(Q.sum(axis=1) - cap, 0.0)]
        if self.mode is EstimationMode.MODELFREE:
            b = self.beta
            mean, g, dg = x[self.sl["mean"]], x[self.sl["lst"]], x[self.sl["dlst"]]
            out.append(w * np.maximum((1.0 - b * mean) - g, 0.0))
            out.append(w * np.maximum(-(1.0 - g + b * dg), 0.0))
        return np.concatenate(out) if out else np.zeros(n)

    def __call__(self, x):
        pen = self.penalties(x)
        try:
            with np.errstate(all="ignore"):
                r = _residual_at(x, self.mode, self.template, self.moments, self.beta, self.opts.block_weights)
        except (SingularSystemError, np.linalg.LinAlgError, ZeroDivisionError):
            r = np.full(self.size, 1e6)
        if not np.all(np.isfinite(r)):
            r = np.full(self.size, 1e6)
        return np.concatenate([r, pen])


def _start_means(rng, n, beta, opts):
    lo, hi = opts.start_mean_range
    return np.exp(rng.uniform(math.log(lo), math.log(hi), n)) / beta


def _random_start(rng, mode, template, moments, beta, opts: SolverOptions) -> np.ndarray:
    n = template.n
    sl = layout(n, mode)
    x = np.zeros(mode.dimension(n))
    Q = np.zeros((n, n))
    for i in range(n):
        allowed = np.ones(n, dtype=bool)
        if mode.no_self_loops:
            allowed[i] = False
        if allowed.any():
            Q[i, allowed] = rng.uniform(0.1, 0.9) * rng.dirichlet(np.ones(allowed.sum()))
    x[sl["Q"]] = Q[~np.eye(n, dtype=bool)] if mode.no_self_loops else Q.ravel()

    p = np.asarray(template.p, dtype=float)
    if mode is EstimationMode.KNOWN:
        mean = template.means
    else:
        mean = _start_means(rng, n, beta, opts)
    if "eta" in sl:
        eta = []
        for s, mu in zip(template.services, mean):
            if hasattr(s, "shape"):
                eta.append(s.shape / mu)
            elif s.kind == "deterministic":
                eta.append(mu)
            else:
                eta.append(1.0 / mu)
        x[sl["eta"]] = eta
    if mode is EstimationMode.MODELFREE:
        # transform values of an exponential law with the drawn mean: always feasible
        x[sl["mean"]] = mean
        x[sl["lst"]] = 1.0 / (1.0 + beta * mean)
        x[sl["dlst"]] = -mean / (1.0 + beta * mean) ** 2
    if "p" in sl:
        p = rng.uniform(0.5, 1.0, n)
        x[sl["p"]] = p
    lam_eff = moments.alpha0 / (np.maximum(p, 1e-6) * mean)
    x[sl["lam"]] = np.clip((np.eye(n) - Q.T) @ lam_eff, 1e-3, opts.projection.lambda_cap)
    return x


def _run_start(fun, x0, lo, hi, opts: SolverOptions):
    x0 = np.clip(x0, lo, hi)
    res = scipy.optimize.least_squares(
        fun,
        x0,
        bounds=(lo, hi),
        method="trf",
        jac=opts.jac,
        x_scale="jac",
        ftol=opts.ftol,
        xtol=opts.xtol,
        gtol=opts.gtol,
        max_nfev=opts.max_iter,
    )
    return res


def _polish(fun, res, lo, hi, opts: SolverOptions):
    """One more run from the winning start with the stopping rules switched
    off; the gradient test alone stops short of a bound by about 1e-7."""
    tight = replace(opts, gtol=1e-15, ftol=1e-15, xtol=1e-15)
    again = _run_start(fun, res.x, lo, hi, tight)
    again.nfev += res.nfev
    return again


def estimate_least_squares(
    moments: MomentSet,
    mode: EstimationMode | str,
    beta: float,
    template: NetworkParams,
    opts: SolverOptions = SolverOptions(),
    init: NetworkParams | list | None = None,
) -> EstimationResult:
    """Minimise the squared moment residuals over the feasible set.

    ``template`` supplies the station count and every coordinate the mode
    does not estimate (known services or service families, known p).
    ``init`` adds one or more warm starts ahead of the random ones.
    """
    mode = EstimationMode.parse(mode)
    n = template.n
    if moments.n != n:
        raise EstimationError(f"moments describe {moments.n} stations, template {n}")
    if mode.lag2_block is not None and moments.alpha2 is None:
        raise EstimationError(f"mode {mode.value} needs lag-two moments")
    if mode is EstimationMode.MODELFREE:
        template = _modelfree_template(template, beta)

    lo, hi = _bounds(n, mode, beta, opts)
    fun = _Objective(mode, template, moments, beta, opts)
    starts = []
    if init is not None:
        inits = init if isinstance(init, (list, tuple)) else [init]
        starts += [pack(_as_mode_point(p, mode, beta), mode) for p in inits]
    n_warm = len(starts)
    rng = np.random.default_rng(opts.seed)
    while len(starts) < max(opts.starts, 1):
        starts.append(_random_start(rng, mode, template, moments, beta, opts))

    best = None
    summaries = []
    for k, x0 in enumerate(starts):
        res = _run_start(fun, x0, lo, hi, opts)
        point = project_theta(res.x, mode, template, opts.projection, beta=beta)
        norm = float(np.linalg.norm(moment_residual(point, moments, mode, beta)))
        summaries.append({"start": k, "residual_norm": norm, "nfev": int(res.nfev), "status": int(res.status)})
        if best is None or norm < best[0]:
            best = (norm, k, res, point)
    norm, k, res, point = best
    polished = _polish(fun, res, lo, hi, opts)
    cand = project_theta(polished.x, mode, template, opts.projection, beta=beta)
    cand_norm = float(np.linalg.norm(moment_residual(cand, moments, mode, beta)))
    if cand_norm <= norm:
        norm, res, point = cand_norm, polished, cand
    diagnostics = {"best_start": k, "starts": summaries, "warm_starts": n_warm}
    if mode is EstimationMode.MODELFREE:
        # a zero-length atom in a service law is invisible to sampling, so
        # the model-free fit is only determined up to these directions
        diagnostics["null_directions"] = null_directions(point, moments, mode, beta)
    return EstimationResult(
        theta_hat=point,
        residual_norm=norm,
        iterations=int(res.nfev),
        converged=bool(res.status > 0),
        mode=mode,
        diagnostics=diagnostics,
    )


def null_directions(params: NetworkParams, moments: MomentSet, mode, beta: float, rtol: float = 1e-7) -> int:
    """Number of parameter directions the moment equations cannot see at
    ``params`` (numerical rank deficit of the central-difference Jacobian)."""
    mode = EstimationMode.parse(mode)
    x = pack(params, mode)
    steps = 1e-6 * np.maximum(np.abs(x), 1.0)
    cols = []
    for k, h in enumerate(steps):
        e = np.zeros_like(x)
        e[k] = h
        hi = _residual_at(x + e, mode, params, moments, beta, (1.0, 1.0, 1.0))
        lo = _residual_at(x - e, mode, params, moments, beta, (1.0, 1.0, 1.0))
        cols.append((hi - lo) / (2 * h))
    sv = np.linalg.svd(np.array(cols).T, compute_uv=False)
    return int(x.size - np.sum(sv > rtol * sv[0]))


def _modelfree_template(template: NetworkParams, beta: float) -> NetworkParams:
    if all(isinstance(s, ModelFree) and s.anchored_beta == beta for s in template.services):
        return template
    services = []
    for s in template.services:
        if isinstance(s, ModelFree):
            services.append(ModelFree(s.mean, s.lst_at_beta, s.dlst_at_beta, beta))
        else:
            mean, g, dg = _fresh(s, beta)
            services.append(ModelFree(mean, g, dg, beta))
    return template.replace(services=services)


def _as_mode_point(params: NetworkParams, mode, beta):
    if mode is EstimationMode.MODELFREE:
        return _modelfree_template(params, beta)
    return params


# --------------------------------------------------------------------------
# sequential scheme for one-parameter service families, p = 1


class _SequentialObjective:
    def __init__(self, moments, template, beta, opts: SolverOptions, reorder: bool):
        self.a0 = np.asarray(moments.alpha0, dtype=float)
        self.a1 = np.asarray(moments.alpha1, dtype=float)
        self.template = template
        self.beta = beta
        self.opts = opts
        self.reorder = reorder
        n = template.n
        self.n = n
        self.offdiag = ~np.eye(n, dtype=bool)
        self.t1 = np.outer(self.a0, self.a0) + np.diag(self.a0)

    def unpack(self, x):
        n = self.n
        Q = np.zeros((n, n))
        Q[self.offdiag] = x[: n * n - n]
        return Q, x[n * n - n :]

    def factor(self, x):
        Q, eta = self.unpack(x)
        mean, g, dg = _family_transforms(self.template.services, eta, self.beta)
        g_res, _ = residual_transforms(mean, g, dg, self.beta)
        I = np.eye(self.n)
        t2 = np.outer(self.a0, self.a0 / mean) @ (I - Q) / self.beta
        F = self.t1 @ (g_res[:, None] * Q) + t2
        return Q, g, g_res, F

    def __call__(self, x):
        Q, g, g_res, F = self.factor(x)
        I = np.eye(self.n)
        cap = 1.0 - self.opts.projection.exit_eps
        pen = self.opts.penalty_weight * np.maximum(Q.sum(axis=1) - cap, 0.0)
        try:
            with np.errstate(all="ignore"):
                t3 = np.linalg.solve(I - g[:, None] * Q, np.diag(1.0 - g))
                rhs = self.a1 - self.t1 @ np.diag(1.0 - g_res)
                if self.reorder:
                    r = np.linalg.solve(F, rhs) - t3
                else:
                    r = F @ t3 - rhs
        except np.linalg.LinAlgError:
            r = np.full((self.n, self.n), 1e6)
        r = r.ravel()
        if not np.all(np.isfinite(r)):
            r = np.full(self.n * self.n, 1e6)
        return np.concatenate([r, pen])


def estimate_sequential(
    moments: MomentSet,
    beta: float,
    template: NetworkParams,
    opts: SolverOptions = SolverOptions(),
    init: NetworkParams | None = None,
) -> EstimationResult:
    """Fit routing and service parameters from the cross moments, then the
    arrival rates from the means.

    Each service in ``template`` fixes a one-parameter family (its rate, or
    its duration for deterministic service).  Observation is assumed
    complete.  With ``F = t1 D_res Q + t2`` the lag-one equations read
    ``t1 (I - D_res) + F t3 - alpha1 = 0`` (direct form) or
    ``F^-1 (alpha1 - t1 (I - D_res)) - t3 = 0`` (reordered form);
    ``opts.sequential_form`` picks one, and ``"auto"`` uses the reordered
    form only while F stays well conditioned.
    """
    n = template.n
    if moments.n != n:
        raise EstimationError(f"moments describe {moments.n} stations, template {n}")
    nq = n * n - n
    proj = opts.projection
    lo = np.concatenate([np.zeros(nq), np.full(n, proj.eta_bounds[0])])
    hi = np.concatenate([np.ones(nq), np.full(n, proj.eta_bounds[1])])
    rng = np.random.default_rng(opts.seed)
    starts = []
    if init is not None:
        starts.append(pack(init, EstimationMode.PARAMETRIC)[np.r_[0:nq, nq + n : nq + 2 * n]])
    while len(starts) < max(opts.starts, 1):
        x = _random_start(rng, EstimationMode.PARAMETRIC, template, moments, beta, opts)
        starts.append(np.concatenate([x[:nq], x[nq + n :]]))

    best = None
    summaries = []
    form = opts.sequential_form
    if form not in ("direct", "reordered", "auto"):
        raise EstimationError(f"unknown sequential form {form!r}")
    for k, x0 in enumerate(starts):
        x0 = np.clip(x0, lo, hi)
        probe = _SequentialObjective(moments, template, beta, opts, reorder=True)
        reorder = form == "reordered" or (
            form == "auto" and np.linalg.cond(probe.factor(x0)[3]) < opts.reorder_cond_limit
        )
        res = _run_start(_SequentialObjective(moments, template, beta, opts, reorder), x0, lo, hi, opts)
        if form == "auto" and reorder and not np.linalg.cond(probe.factor(res.x)[3]) < opts.reorder_cond_limit:
            reorder = False
            res = _run_start(_SequentialObjective(moments, template, beta, opts, False), x0, lo, hi, opts)
        point = _sequential_point(res.x, moments, template, beta, opts)
        norm = float(np.linalg.norm(moment_residual(point, moments, EstimationMode.PARAMETRIC, beta)))
        summaries.append(
            {"start": k, "residual_norm": norm, "nfev": int(res.nfev), "status": int(res.status), "reordered": bool(reorder)}
        )
        if best is None or norm < best[0]:
            best = (norm, k, res, point)
    norm, k, res, point = best
    polished = _polish(_SequentialObjective(moments, template, beta, opts, False), res, lo, hi, opts)
    cand = _sequential_point(polished.x, moments, template, beta, opts)
    cand_norm = float(np.linalg.norm(moment_residual(cand, moments, EstimationMode.PARAMETRIC, beta)))
    if cand_norm <= norm:
        norm, res, point = cand_norm, polished, cand
    return EstimationResult(
        theta_hat=point,
        residual_norm=norm,
        iterations=int(res.nfev),
        converged=bool(res.status > 0),
        mode=EstimationMode.PARAMETRIC,
        diagnostics={"best_start": k, "starts": summaries, "reordered": summaries[k]["reordered"]},
    )


def _sequential_point(x, moments, template, beta, opts):
    n = template.n
    nq = n * n - n
    Q = np.zeros((n, n))
    Q[~np.eye(n, dtype=bool)] = x[:nq]
    Q = project_q(Q, True, opts.projection.exit_eps)
    eta = np.clip(x[nq:], *opts.projection.eta_bounds)
    services = [with_free_parameter(s, float(e)) for s, e in zip(template.services, eta)]
    mean = np.array([s.mean for s in services])
    lam = (np.eye(n) - Q.T) @ (moments.alpha0 / mean)
    lam = np.clip(lam, 0.0, opts.projection.lambda_cap)
    return NetworkParams(Q=Q, lam=lam, services=services, p=template.p)


# --------------------------------------------------------------------------
# pipeline


def _closed_form_point(moments, template, beta, opts):
    Q, lam = identify_closed_form(dethin(moments, template.p), template.services, beta, opts.cond_limit)
    raw = template.replace(Q=Q, lam=lam)
    return raw, project_theta(pack(raw, EstimationMode.KNOWN), EstimationMode.KNOWN, template, opts.projection)


def estimate_closed_form(
    moments: MomentSet,
    template: NetworkParams,
    beta: float,
    opts: SolverOptions = SolverOptions(),
) -> EstimationResult:
    """Known-services estimate straight from the inverse map, projected.

    Routing entries are clipped into the feasible set while the arrival rates
    keep the values the map produced (clipped at 0 and the cap only), so
    clipping true zeros of Q does not leak into lambda.
    """
    raw, projected = _closed_form_point(moments, template, beta, opts)
    norm = float(np.linalg.norm(moment_residual(projected, moments, EstimationMode.KNOWN, beta)))
    return EstimationResult(
        theta_hat=projected,
        residual_norm=norm,
        iterations=0,
        converged=True,
        mode=EstimationMode.KNOWN,
        diagnostics={"closed_form_raw": raw, "method": "closed_form"},
    )


def _warm_starts(moments, mode, beta, template, opts, diagnostics):
    """Cheap deterministic starting points for the least-squares stage."""
    if mode is EstimationMode.KNOWN:
        try:
            raw, projected = _closed_form_point(moments, template, beta, opts)
        except (IllConditioned, np.linalg.LinAlgError) as exc:
            diagnostics["closed_form_error"] = str(exc)
            return []
        diagnostics["closed_form_raw"] = raw
        diagnostics["closed_form"] = projected
        return [projected]
    if mode is EstimationMode.WITHP:
        return []
    families = template
    if mode is EstimationMode.MODELFREE:
        # an exponential fit gives the shape of the network; its transforms seed the triple
        families = template.replace(services=[_exponential_like(s) for s in template.services])
    seq_opts = replace(opts, starts=max(2, opts.starts // 2))
    seq = estimate_sequential(dethin(moments, template.p), beta, families.replace(p=np.ones(template.n)), seq_opts)
    diagnostics["sequential_residual"] = seq.residual_norm
    return [seq.theta_hat.replace(p=template.p)]


def _exponential_like(service):
    return Exponential(1.0 / service.mean)


def estimate(
    log: ObservationLog,
    mode: EstimationMode | str,
    template: NetworkParams,
    beta: float | None = None,
    opts: SolverOptions = SolverOptions(),
) -> EstimationResult:
    """Empirical moments, warm start, least squares and projection.

    Stations that were never observed (zero mean count) carry no
    information; they are dropped from the fit, their rows and columns are
    reported as zero and listed under ``diagnostics['degenerate_stations']``.
    """
    mode = EstimationMode.parse(mode)
    beta = log.beta if beta is None else beta
    if log.n != template.n:
        raise EstimationError(f"log has {log.n} stations, parameters have {template.n}")
    moments = empirical_moments(log, need_lag2=mode.lag2_block is not None)
    return estimate_from_moments(moments, mode, template, beta, opts)


def estimate_from_moments(moments, mode, template, beta, opts: SolverOptions = SolverOptions()) -> EstimationResult:
    mode = EstimationMode.parse(mode)
    active = np.asarray(moments.alpha0) > 0
    if not active.all():
        return _estimate_partial(moments, mode, template, beta, opts, active)
    if opts.known_estimate not in ("closed-form", "least-squares"):
        raise EstimationError(f"unknown known_estimate {opts.known_estimate!r}")
    diagnostics: dict = {}
    warm = _warm_starts(moments, mode, beta, template, opts, diagnostics)
    res = estimate_least_squares(moments, mode, beta, template, opts, init=warm or None)
    diagnostics.update(res.diagnostics)
    diagnostics["degenerate_stations"] = []
    if (
        mode is EstimationMode.KNOWN
        and opts.known_estimate == "closed-form"
        and "closed_form" in diagnostics
        and np.all(np.asarray(template.p) == 1.0)
    ):
        # clipping true zeros of Q at the boundary biases the constrained
        # fit (Q up, lambda down); the projected inverse map does not leak
        # that clipping into lambda, so it is reported and the refinement
        # is kept alongside it
        cf = diagnostics["closed_form"]
        diagnostics["least_squares"] = res.theta_hat
        diagnostics["least_squares_residual"] = res.residual_norm
        diagnostics["method"] = "closed_form"
        norm = float(np.linalg.norm(moment_residual(cf, moments, mode, beta)))
        return replace(res, theta_hat=cf, residual_norm=norm, diagnostics=diagnostics)
    diagnostics["method"] = "least_squares"
    return replace(res, diagnostics=diagnostics)


def _estimate_partial(moments, mode, template, beta, opts, active) -> EstimationResult:
    n = template.n
    idx = np.flatnonzero(active)
    dead = np.flatnonzero(~active).tolist()
    services = list(template.services)
    if mode is EstimationMode.MODELFREE:
        services = list(_modelfree_template(template, beta).services)
    if idx.size == 0:
        theta = template.replace(Q=np.zeros((n, n)), lam=np.zeros(n), services=services)
        return EstimationResult(
            theta_hat=theta,
            residual_norm=0.0,
            iterations=0,
            converged=True,
            mode=mode,
            diagnostics={"degenerate_stations": dead, "note": "no customers observed at any station"},
        )
    sub_template = NetworkParams(
        Q=template.Q[np.ix_(idx, idx)],
        lam=template.lam[idx],
        services=[services[i] for i in idx],
        p=template.p[idx],
    )
    sub_moments = MomentSet(
        alpha0=moments.alpha0[idx],
        alpha1=moments.alpha1[np.ix_(idx, idx)],
        alpha2=None if moments.alpha2 is None else moments.alpha2[np.ix_(idx, idx)],
        source=moments.source,
        beta=moments.beta,
    )
    sub = estimate_from_moments(sub_moments, mode, sub_template, beta, opts)
    Q = np.zeros((n, n))
    Q[np.ix_(idx, idx)] = sub.theta_hat.Q
    lam = np.zeros(n)
    lam[idx] = sub.theta_hat.lam
    for k, i in enumerate(idx):
        services[i] = sub.theta_hat.services[k]
    p = np.array(template.p, dtype=float)
    p[idx] = sub.theta_hat.p
    theta = NetworkParams(Q=Q, lam=lam, services=services, p=p)
    diagnostics = dict(sub.diagnostics)
    diagnostics["degenerate_stations"] = dead
    return replace(sub, theta_hat=theta, diagnostics=diagnostics)
