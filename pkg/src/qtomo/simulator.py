"""Sampled-population simulation of infinite-server networks.

Customers never interact at an infinite-server station, so a run can be
generated one customer at a time: each customer's route and sojourn
intervals are drawn independently, and the population seen at a sampling
epoch is the number of intervals that cover it.  The default ``trajectory``
engine does this in vectorised form and accumulates coverage on the epoch
grid with difference arrays.  The ``event`` engine is a plain
discrete-event loop (binary heap, ties broken by insertion order) kept as a
slow but independent reference.

Both engines start from the exact stationary law: Poisson(load) customers
per station, each with a residual service time, followed by fresh services
along the rest of the route.  ``burnin=T`` instead starts empty at time -T.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .lst import sample_residual, sample_service
from .model import ModelError, NetworkParams
from .moments import effective_rates, loads

logger = logging.getLogger(__name__)

ENGINES = ("trajectory", "event")


@dataclass(frozen=True, eq=False)
class ObservationLog:
    """Observed counts at m Poisson sampling epochs.

    ``counts[k, i]`` is the number of customers seen at station i at the
    k-th epoch; ``true_counts`` (kept on request) is the uncensored
    population.
    """

    beta: float
    counts: np.ndarray
    seed: int | None = None
    params_fingerprint: str = ""
    true_counts: np.ndarray | None = None
    run_index: int | None = None
    start: str = "stationary"
    burnin: float = 0.0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValueError(f"counts must be an m x n matrix, got shape {counts.shape}")
        if counts.shape[0] < 2:
            raise ValueError("an observation log needs at least two epochs")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        counts = counts.astype(np.int64, copy=False)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        if self.true_counts is not None:
            true = np.asarray(self.true_counts).astype(np.int64, copy=False)
            if true.shape != counts.shape:
                raise ValueError("true_counts and counts differ in shape")
            if np.any(counts > true):
                raise ValueError("observed counts exceed the true population")
            true.setflags(write=False)
            object.__setattr__(self, "true_counts", true)

    @property
    def m(self) -> int:
        return self.counts.shape[0]

    @property
    def n(self) -> int:
        return self.counts.shape[1]

    def metadata(self) -> dict:
        return {
            "beta": self.beta,
            "seed": self.seed,
            "run_index": self.run_index,
            "params_fingerprint": self.params_fingerprint,
            "start": self.start,
            "burnin": self.burnin,
            "m": self.m,
            "n": self.n,
        }

    def __eq__(self, other):
        if not isinstance(other, ObservationLog):
            return NotImplemented
        same_true = (self.true_counts is None and other.true_counts is None) or (
            self.true_counts is not None
            and other.true_counts is not None
            and np.array_equal(self.true_counts, other.true_counts)
        )
        return self.metadata() == other.metadata() and np.array_equal(self.counts, other.counts) and same_true

    __hash__ = None


@dataclass(frozen=True)
class CustomerRecord:
    station: int
    remaining_service: float

    def __post_init__(self):
        if self.remaining_service < 0:
            raise ValueError("remaining service must be nonnegative")


@dataclass(frozen=True)
class PopulationState:
    """Customers present at time 0: their stations and remaining services."""

    stations: np.ndarray
    remaining: np.ndarray

    def counts(self, n: int) -> np.ndarray:
        return np.bincount(self.stations, minlength=n)

    def records(self) -> list[CustomerRecord]:
        return [CustomerRecord(int(s), float(r)) for s, r in zip(self.stations, self.remaining)]


def _require_sampleable(params: NetworkParams):
    if not params.sampleable:
        raise ModelError("network contains model-free services, which cannot be simulated")


def stationary_init(params: NetworkParams, rng: np.random.Generator) -> PopulationState:
    _require_sampleable(params)
    rho = loads(params)
    per_station = rng.poisson(rho)
    stations = np.repeat(np.arange(params.n), per_station)
    remaining = np.empty(stations.size)
    lo = 0
    for i, c in enumerate(per_station):
        if c:
            remaining[lo : lo + c] = sample_residual(params.services[i], rng, c)
        lo += c
    return PopulationState(stations, remaining)


def _seed_sequence(seed, run_index=None) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if run_index is None:
        return np.random.SeedSequence(seed)
    return np.random.SeedSequence(seed, spawn_key=(int(run_index),))


def _epochs(beta: float, m: int, rng: np.random.Generator) -> np.ndarray:
    return np.cumsum(rng.exponential(1.0 / beta, m))


# --------------------------------------------------------------------------
# trajectory engine


class _Coverage:
    """Difference-array accumulator of station occupancy on the epoch grid."""

    def __init__(self, epochs: np.ndarray, n: int):
        self.epochs = epochs
        self.n = n
        self.width = epochs.size + 1
        self.diff = np.zeros(n * self.width, dtype=np.int64)

    def add(self, stations, t_in, t_out):
        a = np.searchsorted(self.epochs, t_in)
        b = np.searchsorted(self.epochs, t_out)
        hit = a < b
        if not hit.any():
            return
        base = stations[hit] * self.width
        np.add.at(self.diff, base + a[hit], 1)
        np.add.at(self.diff, base + b[hit], -1)

    def population(self) -> np.ndarray:
        grid = np.cumsum(self.diff.reshape(self.n, self.width), axis=1)
        return np.ascontiguousarray(grid[:, :-1].T)


def _trace(params, cum, coverage, stations, times, rng, t_end, residual_first):
    n = params.n
    first = residual_first
    while stations.size:
        order = np.argsort(stations, kind="stable")
        stations, times = stations[order], times[order]
        per_station = np.bincount(stations, minlength=n)
        dur = np.empty(stations.size)
        nxt = np.empty(stations.size, dtype=np.int64)
        lo = 0
        for i, c in enumerate(per_station):
            if not c:
                continue
            sl = slice(lo, lo + c)
            draw = sample_residual if first else sample_service
            dur[sl] = draw(params.services[i], rng, c)
            nxt[sl] = np.searchsorted(cum[i], rng.random(c), side="right")
            lo += c
        t_out = times + dur
        coverage.add(stations, times, t_out)
        go = (nxt < n) & (t_out < t_end)
        stations, times = nxt[go], t_out[go]
        first = False


def _trajectory_population(params, epochs, rng, burnin, chunk_visits):
    n = params.n
    t_end = epochs[-1]
    cov = _Coverage(epochs, n)
    cum = np.cumsum(params.Q, axis=1)
    if burnin is None:
        init = stationary_init(params, rng)
        # a residual service is a sojourn that started before time 0
        _trace(params, cum, cov, init.stations, np.zeros(init.stations.size), rng, t_end, True)
        t0 = 0.0
    else:
        t0 = -float(burnin)
    lam = params.lam
    total = lam.sum()
    if total <= 0:
        return cov.population()
    visits_per_time = max(effective_rates(params).sum(), total)
    window = max(chunk_visits / visits_per_time, 1e-9)
    a = t0
    while a < t_end:
        b = min(a + window, t_end)
        k = rng.poisson(lam * (b - a))
        stations = np.repeat(np.arange(n), k)
        times = rng.uniform(a, b, stations.size)
        _trace(params, cum, cov, stations, times, rng, t_end, False)
        a = b
    return cov.population()


# --------------------------------------------------------------------------
# event engine


def _event_population(params, epochs, rng, burnin):
    n = params.n
    services = params.services
    cum = np.cumsum(params.Q, axis=1)
    heap: list = []
    seq = itertools.count()
    pop = np.zeros(n, dtype=np.int64)
    out = np.empty((epochs.size, n), dtype=np.int64)

    def admit(station, now, duration):
        pop[station] += 1
        heapq.heappush(heap, (now + duration, next(seq), "departure", station))

    if burnin is None:
        t = 0.0
        for rec in stationary_init(params, rng).records():
            admit(rec.station, 0.0, rec.remaining_service)
    else:
        t = -float(burnin)
    for i, rate in enumerate(params.lam):
        if rate > 0:
            heapq.heappush(heap, (t + rng.exponential(1.0 / rate), next(seq), "arrival", i))

    k = 0
    while k < epochs.size:
        if heap and heap[0][0] < epochs[k]:
            t, _, kind, i = heapq.heappop(heap)
            if kind == "arrival":
                admit(i, t, sample_service(services[i], rng))
                heapq.heappush(heap, (t + rng.exponential(1.0 / params.lam[i]), next(seq), "arrival", i))
            else:
                pop[i] -= 1
                j = int(np.searchsorted(cum[i], rng.random(), side="right"))
                if j < n:
                    admit(j, t, sample_service(services[j], rng))
        else:
            out[k] = pop
            k += 1
    return out


# --------------------------------------------------------------------------
# public entry points


def simulate(
    params: NetworkParams,
    beta: float,
    m: int,
    seed=0,
    *,
    run_index: int | None = None,
    keep_true: bool = False,
    burnin: float | None = None,
    engine: str = "trajectory",
    chunk_visits: int = 500_000,
) -> ObservationLog:
    """Simulate m Poisson(beta) sampling epochs of a stationary network.

    Deterministic given ``(seed, run_index)``.
    """
    if m < 2:
        raise ValueError("m must be at least 2")
    if not beta > 0:
        raise ValueError("beta must be positive")
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")
    _require_sampleable(params)
    if burnin is not None and burnin < 0:
        raise ValueError("burnin must be nonnegative")

    ss = _seed_sequence(seed, run_index)
    epoch_ss, net_ss, thin_ss = ss.spawn(3)
    epochs = _epochs(beta, m, np.random.default_rng(epoch_ss))
    net_rng = np.random.default_rng(net_ss)
    if engine == "trajectory":
        true = _trajectory_population(params, epochs, net_rng, burnin, chunk_visits)
    else:
        true = _event_population(params, epochs, net_rng, burnin)

    thin_rng = np.random.default_rng(thin_ss)
    counts = true.copy()
    for i, p in enumerate(params.p):
        if p < 1.0:
            counts[:, i] = thin_rng.binomial(true[:, i], p)

    seed_value = None if isinstance(seed, np.random.SeedSequence) else int(seed)
    return ObservationLog(
        beta=float(beta),
        counts=counts,
        seed=seed_value,
        params_fingerprint=params.fingerprint(),
        true_counts=true if keep_true else None,
        run_index=run_index,
        start="stationary" if burnin is None else "burnin",
        burnin=0.0 if burnin is None else float(burnin),
    )


def _simulate_star(args):
    params, beta, m, seed, r, kwargs = args
    return simulate(params, beta, m, seed, run_index=r, **kwargs)


def replicate(params: NetworkParams, beta: float, m: int, runs: int, seed=0, jobs: int = 1, **kwargs):
    """``runs`` independent logs, run r seeded from the substream (seed, r)."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    tasks = [(params, beta, m, seed, r, kwargs) for r in range(runs)]
    if jobs <= 1 or runs == 1:
        return [_simulate_star(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_simulate_star, tasks))
