"""Parameter space of an infinite-server queueing network.

A parameter point bundles the routing matrix, the external Poisson arrival
rates, one service-time law per station and the per-station observation
probabilities.  This module also knows how each estimation mode lays the
point out as a flat vector, how to pull an arbitrary vector back into the
feasible set, and how to check the structural conditions (every station
receives work, every customer eventually leaves).
"""
from __future__ import annotations

import enum
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

ZERO_TOL = 1e-12
DEFAULT_LAMBDA_CAP = 100.0
DEFAULT_EXIT_EPS = 1e-3


class ModelError(ValueError):
    """Raised for malformed parameter points or documents."""


# --------------------------------------------------------------------------
# service-time laws


@dataclass(frozen=True)
class Exponential:
    rate: float
    kind = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ModelError(f"exponential rate must be positive, got {self.rate}")

    @property
    def mean(self) -> float:
        return 1.0 / self.rate


@dataclass(frozen=True)
class Erlang:
    shape: int
    rate: float
    kind = "erlang"

    def __post_init__(self):
        if int(self.shape) != self.shape or self.shape < 1:
            raise ModelError(f"erlang shape must be a positive integer, got {self.shape}")
        if not self.rate > 0:
            raise ModelError(f"erlang rate must be positive, got {self.rate}")
        object.__setattr__(self, "shape", int(self.shape))

    @property
    def mean(self) -> float:
        return self.shape / self.rate


@dataclass(frozen=True)
class Deterministic:
    duration: float
    kind = "deterministic"

    def __post_init__(self):
        if not self.duration > 0:
            raise ModelError(f"deterministic duration must be positive, got {self.duration}")

    @property
    def mean(self) -> float:
        return self.duration


@dataclass(frozen=True)
class ModelFree:
    """Service law known only through its mean and its transform at one rate.

    ``lst_at_beta`` and ``dlst_at_beta`` are the Laplace-Stieltjes transform
    and its derivative evaluated at ``anchored_beta``; no distribution is
    attached, so such a station cannot be simulated.
    """

    mean: float
    lst_at_beta: float
    dlst_at_beta: float
    anchored_beta: float
    kind = "modelfree"

    def __post_init__(self):
        if not self.mean > 0:
            raise ModelError(f"model-free mean must be positive, got {self.mean}")
        if not 0.0 < self.lst_at_beta < 1.0:
            raise ModelError(f"model-free transform must lie in (0, 1), got {self.lst_at_beta}")
        if not self.dlst_at_beta < 0:
            raise ModelError(f"model-free transform derivative must be negative, got {self.dlst_at_beta}")
        if not self.anchored_beta > 0:
            raise ModelError("anchored_beta must be positive")


ServiceModel = Union[Exponential, Erlang, Deterministic, ModelFree]
SAMPLEABLE = (Exponential, Erlang, Deterministic)


def free_parameter(service: ServiceModel) -> float:
    """The single unknown of a one-parameter service family."""
    if isinstance(service, (Exponential, Erlang)):
        return service.rate
    if isinstance(service, Deterministic):
        return service.duration
    raise ModelError(f"{service.kind} service has no single free parameter")


def with_free_parameter(service: ServiceModel, value: float) -> ServiceModel:
    if isinstance(service, Exponential):
        return Exponential(value)
    if isinstance(service, Erlang):
        return Erlang(service.shape, value)
    if isinstance(service, Deterministic):
        return Deterministic(value)
    raise ModelError(f"{service.kind} service has no single free parameter")


def service_to_dict(service: ServiceModel) -> dict:
    if isinstance(service, Exponential):
        return {"kind": "exponential", "rate": service.rate}
    if isinstance(service, Erlang):
        return {"kind": "erlang", "shape": service.shape, "rate": service.rate}
    if isinstance(service, Deterministic):
        return {"kind": "deterministic", "duration": service.duration}
    if isinstance(service, ModelFree):
        return {
            "kind": "modelfree",
            "mean": service.mean,
            "lst_at_beta": service.lst_at_beta,
            "dlst_at_beta": service.dlst_at_beta,
            "anchored_beta": service.anchored_beta,
        }
    raise ModelError(f"unknown service object {service!r}")


def service_from_dict(doc: dict) -> ServiceModel:
    kind = doc.get("kind")
    try:
        if kind == "exponential":
            return Exponential(float(doc["rate"]))
        if kind == "erlang":
            return Erlang(int(doc["shape"]), float(doc["rate"]))
        if kind == "deterministic":
            return Deterministic(float(doc["duration"]))
        if kind == "modelfree":
            return ModelFree(
                float(doc["mean"]),
                float(doc["lst_at_beta"]),
                float(doc["dlst_at_beta"]),
                float(doc["anchored_beta"]),
            )
    except KeyError as exc:
        raise ModelError(f"service of kind {kind!r} is missing field {exc}") from None
    raise ModelError(f"unknown service kind {kind!r}")


# --------------------------------------------------------------------------
# parameter point


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise ModelError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """A full parameter point.

    ``Q[i, j]`` is the probability of moving from station i to station j
    after service; the row deficit ``1 - Q[i].sum()`` is the exit
    probability.  Construction only checks shapes: raw estimator output may
    sit outside the feasible set, use :func:`validate` to inspect it.
    """

    Q: np.ndarray
    lam: np.ndarray
    services: tuple
    p: np.ndarray = None

    def __post_init__(self):
        Q = _frozen(self.Q, 2)
        lam = _frozen(self.lam, 1)
        n = lam.shape[0]
        if Q.shape != (n, n):
            raise ModelError(f"Q has shape {Q.shape}, expected {(n, n)}")
        services = tuple(self.services)
        if len(services) != n:
            raise ModelError(f"{len(services)} services for {n} stations")
        p = np.ones(n) if self.p is None else self.p
        p = _frozen(p, 1)
        if p.shape != (n,):
            raise ModelError(f"p has shape {p.shape}, expected {(n,)}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "services", services)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    @property
    def exit_probabilities(self) -> np.ndarray:
        return 1.0 - self.Q.sum(axis=1)

    @property
    def means(self) -> np.ndarray:
        return np.array([s.mean for s in self.services])

    @property
    def sampleable(self) -> bool:
        return all(isinstance(s, SAMPLEABLE) for s in self.services)

    def replace(self, **changes) -> "NetworkParams":
        fields = {"Q": self.Q, "lam": self.lam, "services": self.services, "p": self.p}
        fields.update(changes)
        return NetworkParams(**fields)

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.Q, other.Q)
            and np.array_equal(self.lam, other.lam)
            and np.array_equal(self.p, other.p)
            and self.services == other.services
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "Q": self.Q.tolist(),
            "lambda": self.lam.tolist(),
            "services": [service_to_dict(s) for s in self.services],
            "p": self.p.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkParams":
        try:
            services = [service_from_dict(s) for s in doc["services"]]
            params = cls(Q=doc["Q"], lam=doc["lambda"], services=services, p=doc.get("p"))
        except KeyError as exc:
            raise ModelError(f"parameter document is missing {exc}") from None
        if "n" in doc and int(doc["n"]) != params.n:
            raise ModelError(f"declared n={doc['n']} but arrays have {params.n} stations")
        return params

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkParams":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# estimation modes and the flat parameter layout


class EstimationMode(enum.Enum):
    KNOWN = "known"            # Q (diagonal allowed) and lambda; services, p given
    PARAMETRIC = "parametric"  # Q off-diagonal, lambda, one parameter per service
    MODELFREE = "modelfree"    # Q off-diagonal, lambda, (mean, LST, LST') per station
    WITHP = "withp"            # PARAMETRIC plus the observation probabilities

    @property
    def no_self_loops(self) -> bool:
        return self is not EstimationMode.KNOWN

    def dimension(self, n: int) -> int:
        return {
            EstimationMode.KNOWN: n * n + n,
            EstimationMode.PARAMETRIC: n * n + n,
            EstimationMode.MODELFREE: n * n + 3 * n,
            EstimationMode.WITHP: n * n + 2 * n,
        }[self]

    @property
    def lag2_block(self) -> str | None:
        """Which part of the lag-two moment matrix the mode consumes."""
        if self is EstimationMode.MODELFREE:
            return "full"
        if self is EstimationMode.WITHP:
            return "diagonal"
        return None

    @classmethod
    def parse(cls, value) -> "EstimationMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ModelError(f"unknown estimation mode {value!r}") from None


def _q_index(n: int, mode: EstimationMode):
    if mode.no_self_loops:
        return ~np.eye(n, dtype=bool)
    return np.ones((n, n), dtype=bool)


def layout(n: int, mode: EstimationMode) -> dict[str, slice]:
    """Slices of the flat vector occupied by each parameter group."""
    nq = n * n - n if mode.no_self_loops else n * n
    blocks = [("Q", nq), ("lam", n)]
    if mode in (EstimationMode.PARAMETRIC, EstimationMode.WITHP):
        blocks.append(("eta", n))
    if mode is EstimationMode.MODELFREE:
        blocks += [("mean", n), ("lst", n), ("dlst", n)]
    if mode is EstimationMode.WITHP:
        blocks.append(("p", n))
    out, start = {}, 0
    for name, size in blocks:
        out[name] = slice(start, start + size)
        start += size
    return out


def pack(params: NetworkParams, mode: EstimationMode) -> np.ndarray:
    """Flatten the coordinates that ``mode`` estimates."""
    mode = EstimationMode.parse(mode)
    n = params.n
    parts = [params.Q[_q_index(n, mode)], params.lam]
    if mode in (EstimationMode.PARAMETRIC, EstimationMode.WITHP):
        parts.append([free_parameter(s) for s in params.services])
    if mode is EstimationMode.MODELFREE:
        from .lst import transform_arrays

        beta = _anchor(params.services)
        mean, g, dg = transform_arrays(params.services, beta)
        parts += [mean, g, dg]
    if mode is EstimationMode.WITHP:
        parts.append(params.p)
    return np.concatenate([np.asarray(x, dtype=float) for x in parts])


def _anchor(services) -> float:
    betas = {s.anchored_beta for s in services if isinstance(s, ModelFree)}
    if len(betas) != 1:
        raise ModelError("model-free services must share one anchored beta")
    return betas.pop()


def unpack(
    x: np.ndarray,
    mode: EstimationMode,
    template: NetworkParams,
    beta: float | None = None,
) -> NetworkParams:
    """Inverse of :func:`pack`; coordinates the mode does not estimate come
    from ``template``.  No feasibility checks are made beyond what the
    service constructors enforce."""
    mode = EstimationMode.parse(mode)
    n = template.n
    x = np.asarray(x, dtype=float)
    if x.shape != (mode.dimension(n),):
        raise ModelError(f"vector of length {x.size} does not match mode {mode.value} with n={n}")
    sl = layout(n, mode)
    Q = np.zeros((n, n))
    Q[_q_index(n, mode)] = x[sl["Q"]]
    services = template.services
    p = template.p
    if "eta" in sl:
        services = tuple(with_free_parameter(s, v) for s, v in zip(template.services, x[sl["eta"]]))
    if mode is EstimationMode.MODELFREE:
        if beta is None:
            beta = _anchor(template.services)
        services = tuple(
            ModelFree(float(a), float(b), float(c), beta)
            for a, b, c in zip(x[sl["mean"]], x[sl["lst"]], x[sl["dlst"]])
        )
    if "p" in sl:
        p = x[sl["p"]]
    return NetworkParams(Q=Q, lam=x[sl["lam"]], services=services, p=p)


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    messages: dict[str, str] = field(default_factory=dict)

    def record(self, name: str, ok: bool, message: str = ""):
        self.checks[name] = bool(ok)
        if not ok and message:
            self.messages[name] = message

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]

    @property
    def bounds_ok(self) -> bool:
        return all(v for k, v in self.checks.items() if k not in ("drain", "flow_in"))

    def __str__(self):
        lines = [f"{k}: {'ok' if v else 'FAIL'}" for k, v in self.checks.items()]
        lines += [f"  {k}: {m}" for k, m in self.messages.items()]
        return "\n".join(lines)


def draining_stations(Q: np.ndarray) -> np.ndarray:
    """Stations from which a positive-probability route reaches the exit."""
    Q = np.asarray(Q, dtype=float)
    support = Q > ZERO_TOL
    ok = (1.0 - Q.sum(axis=1)) > ZERO_TOL
    queue = deque(np.flatnonzero(ok))
    while queue:
        j = queue.popleft()
        for i in np.flatnonzero(support[:, j] & ~ok):
            ok[i] = True
            queue.append(i)
    return ok


def fed_stations(Q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Stations reached by external arrivals directly or through routing."""
    Q = np.asarray(Q, dtype=float)
    support = Q > ZERO_TOL
    ok = np.asarray(lam, dtype=float) > ZERO_TOL
    queue = deque(np.flatnonzero(ok))
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(support[i] & ~ok):
            ok[j] = True
            queue.append(j)
    return ok


def validate(
    params: NetworkParams,
    mode: EstimationMode | str = EstimationMode.KNOWN,
    lambda_cap: float = DEFAULT_LAMBDA_CAP,
    mean_bounds: tuple[float, float] = (1e-3, 1e3),
) -> ValidationReport:
    mode = EstimationMode.parse(mode)
    rep = ValidationReport()
    Q, lam, p = params.Q, params.lam, params.p
    finite = bool(np.all(np.isfinite(Q)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(p)))
    rep.record("finite", finite, "non-finite entries")
    rep.record("q_entries", bool(np.all((Q >= 0) & (Q <= 1))), "routing entries outside [0, 1]")
    rs = Q.sum(axis=1)
    rep.record("substochastic", bool(np.all(rs <= 1 + ZERO_TOL)), f"row sums {np.round(rs, 6).tolist()}")
    if mode.no_self_loops:
        rep.record("no_self_loops", bool(np.all(np.diag(Q) == 0)), "mode forbids self-loops")
    rep.record(
        "lambda_bounds",
        bool(np.all((lam >= 0) & (lam <= lambda_cap))),
        f"arrival rates outside [0, {lambda_cap}]",
    )
    rep.record("p_bounds", bool(np.all((p >= 0) & (p <= 1))), "observation probabilities outside [0, 1]")
    lo, hi = mean_bounds
    bad = [i for i, s in enumerate(params.services) if isinstance(s, ModelFree) and not lo <= s.mean <= hi]
    rep.record("service_bounds", not bad, f"model-free means outside [{lo}, {hi}] at stations {bad}")
    drains = draining_stations(Q)
    rep.record("drain", bool(drains.all()), f"no exit route from stations {np.flatnonzero(~drains).tolist()}")
    fed = fed_stations(Q, lam)
    rep.record("flow_in", bool(fed.all()), f"no inflow at stations {np.flatnonzero(~fed).tolist()}")
    return rep


# --------------------------------------------------------------------------
# projection and distance


@dataclass(frozen=True)
class ProjectionConfig:
    lambda_cap: float = DEFAULT_LAMBDA_CAP
    exit_eps: float = DEFAULT_EXIT_EPS
    mean_bounds: tuple[float, float] = (1e-3, 1e3)
    eta_bounds: tuple[float, float] = (1e-6, 1e6)
    # margin keeping model-free transforms strictly inside their valid range
    transform_margin: float = 1e-9


def project_q(Q: np.ndarray, no_self_loops: bool, exit_eps: float = DEFAULT_EXIT_EPS) -> np.ndarray:
    Q = np.clip(np.array(Q, dtype=float), 0.0, None)
    if no_self_loops:
        np.fill_diagonal(Q, 0.0)
    cap = 1.0 - exit_eps
    rs = Q.sum(axis=1)
    over = rs > cap * (1 + 1e-12)
    Q[over] *= (cap / rs[over])[:, None]
    return Q


def project_modelfree(mean, lst, dlst, beta: float, cfg: ProjectionConfig):
    """Clip a model-free triple into the region any real service law occupies.

    For a nonnegative service time G with mean g, the transform value
    E[exp(-beta G)] exceeds 1 - beta g and its derivative lies between
    -(1 - lst) / beta and 0; both keep the residual-life transform and its
    derivative well defined.
    """
    eps = cfg.transform_margin
    mean = np.clip(np.asarray(mean, dtype=float), *cfg.mean_bounds)
    lst = np.clip(np.asarray(lst, dtype=float), np.maximum(1.0 - beta * mean, 0.0) + eps, 1.0 - eps)
    dlst = np.clip(np.asarray(dlst, dtype=float), -(1.0 - lst) / beta + eps, -eps)
    return mean, lst, dlst


def project_theta(
    raw: np.ndarray,
    mode: EstimationMode | str,
    template: NetworkParams,
    config: ProjectionConfig = ProjectionConfig(),
    beta: float | None = None,
) -> NetworkParams:
    """Nearest feasible point (coordinatewise rules) for a flat vector."""
    mode = EstimationMode.parse(mode)
    n = template.n
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (mode.dimension(n),):
        raise ModelError(f"vector of length {raw.size} does not match mode {mode.value} with n={n}")
    x = raw.copy()
    sl = layout(n, mode)
    Q = np.zeros((n, n))
    Q[_q_index(n, mode)] = x[sl["Q"]]
    Q = project_q(Q, mode.no_self_loops, config.exit_eps)
    x[sl["Q"]] = Q[_q_index(n, mode)]
    x[sl["lam"]] = np.clip(x[sl["lam"]], 0.0, config.lambda_cap)
    if "eta" in sl:
        x[sl["eta"]] = np.clip(x[sl["eta"]], *config.eta_bounds)
    if "p" in sl:
        x[sl["p"]] = np.clip(x[sl["p"]], 0.0, 1.0)
    if mode is EstimationMode.MODELFREE:
        if beta is None:
            beta = _anchor(template.services)
        x[sl["mean"]], x[sl["lst"]], x[sl["dlst"]] = project_modelfree(
            x[sl["mean"]], x[sl["lst"]], x[sl["dlst"]], beta, config
        )
    return unpack(x, mode, template, beta=beta)


def project_params(params: NetworkParams, mode, config: ProjectionConfig = ProjectionConfig()) -> NetworkParams:
    mode = EstimationMode.parse(mode)
    return project_theta(pack(params, mode), mode, params, config)


def distance(a: NetworkParams, b: NetworkParams, mode: EstimationMode | str = EstimationMode.KNOWN) -> float:
    """Entrywise L1 distance over the coordinates ``mode`` estimates."""
    mode = EstimationMode.parse(mode)
    if a.n != b.n:
        raise ModelError("parameter points have different station counts")
    return float(np.abs(pack(a, mode) - pack(b, mode)).sum())


# --------------------------------------------------------------------------
# reference topologies used throughout tests and experiments


def line_routing(n: int, q: float = 0.5) -> np.ndarray:
    Q = np.zeros((n, n))
    for i in range(n - 1):
        Q[i, i + 1] = q
    return Q


def circle_routing(n: int, q: float = 0.5, clockwise: bool = True) -> np.ndarray:
    Q = np.zeros((n, n))
    for i in range(n):
        j = (i + 1) % n if clockwise else (i - 1) % n
        Q[i, j] = q
    return Q


def symmetric_circle_routing(n: int, q: float = 0.25) -> np.ndarray:
    Q = np.zeros((n, n))
    for i in range(n):
        Q[i, (i + 1) % n] = q
        Q[i, (i - 1) % n] = q
    return Q


def cliques_routing() -> np.ndarray:
    Q = np.zeros((5, 5))
    Q[0, 1] = Q[1, 0] = 0.5
    Q[2, 3] = Q[4, 3] = 0.5
    Q[3, 2] = Q[3, 4] = 0.25
    return Q


def exponential_network(Q, lam, rates, p=None) -> NetworkParams:
    return NetworkParams(Q=Q, lam=lam, services=[Exponential(float(r)) for r in rates], p=p)


def as_params(obj: Any) -> NetworkParams:
    if isinstance(obj, NetworkParams):
        return obj
    if isinstance(obj, dict):
        return NetworkParams.from_dict(obj)
    raise ModelError(f"cannot interpret {type(obj).__name__} as a parameter point")
