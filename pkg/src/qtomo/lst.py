"""Service-time transforms and samplers.

Every service law is summarised at a sampling rate ``beta`` by its mean, its
Laplace-Stieltjes transform E[exp(-beta G)], the derivative of that transform
in beta, and the same two quantities for the residual (excess-life) service
time.  The residual pair always follows from the fresh one:

    lst_res  = (1 - lst) / (beta * mean)
    dlst_res = -(1 - lst + beta * dlst) / (beta**2 * mean)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Deterministic, Erlang, Exponential, ModelError, ModelFree, ServiceModel


class UnanchoredBetaError(ModelError):
    """A model-free service was queried at a rate it carries no values for."""


@dataclass(frozen=True)
class TransformBundle:
    beta: float
    mean: float
    lst: float
    dlst: float
    lst_res: float
    dlst_res: float


def residual_transforms(mean, lst, dlst, beta):
    """Residual-life transform and its derivative from the fresh ones.

    Works elementwise on arrays as well as on scalars.
    """
    one_minus = 1.0 - lst
    lst_res = one_minus / (beta * mean)
    dlst_res = -(one_minus + beta * dlst) / (beta * beta * mean)
    return lst_res, dlst_res


def _fresh(service: ServiceModel, beta: float) -> tuple[float, float, float]:
    if isinstance(service, Exponential):
        mu = service.rate
        return 1.0 / mu, mu / (mu + beta), -mu / (mu + beta) ** 2
    if isinstance(service, Erlang):
        k, mu = service.shape, service.rate
        base = mu / (mu + beta)
        return k / mu, base**k, -k * base**k / (mu + beta)
    if isinstance(service, Deterministic):
        d = service.duration
        e = math.exp(-beta * d)
        return d, e, -d * e
    if isinstance(service, ModelFree):
        if not math.isclose(beta, service.anchored_beta, rel_tol=1e-12):
            raise UnanchoredBetaError(
                f"model-free service is anchored at beta={service.anchored_beta}, queried at {beta}"
            )
        return service.mean, service.lst_at_beta, service.dlst_at_beta
    raise ModelError(f"unsupported service {service!r}")


def bundle(service: ServiceModel, beta: float) -> TransformBundle:
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    mean, lst, dlst = _fresh(service, beta)
    lst_res, dlst_res = residual_transforms(mean, lst, dlst, beta)
    return TransformBundle(beta, mean, lst, dlst, lst_res, dlst_res)


def transform_arrays(services, beta: float):
    """(mean, lst, dlst) as arrays over a sequence of services."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    vals = np.array([_fresh(s, beta) for s in services], dtype=float).reshape(-1, 3)
    return vals[:, 0].copy(), vals[:, 1].copy(), vals[:, 2].copy()


# --------------------------------------------------------------------------
# sampling


def _check_sampleable(service):
    if isinstance(service, ModelFree):
        raise ModelError("a model-free service has no distribution to sample from")


def sample_service(service: ServiceModel, rng: np.random.Generator, size=None):
    """Draw fresh service times."""
    _check_sampleable(service)
    if isinstance(service, Exponential):
        return rng.exponential(1.0 / service.rate, size)
    if isinstance(service, Erlang):
        return rng.gamma(service.shape, 1.0 / service.rate, size)
    if isinstance(service, Deterministic):
        if size is None:
            return float(service.duration)
        return np.full(size, float(service.duration))
    raise ModelError(f"unsupported service {service!r}")


def sample_residual(service: ServiceModel, rng: np.random.Generator, size=None):
    """Draw from the excess-life density (1 - G(s)) / E[G].

    Erlang(k, mu) has an excess-life law that is an equal-weight mixture of
    Erlang(j, mu), j = 1..k, so no numerical inversion is needed.
    """
    _check_sampleable(service)
    if isinstance(service, Exponential):
        return rng.exponential(1.0 / service.rate, size)
    if isinstance(service, Erlang):
        shapes = rng.integers(1, service.shape + 1, size)
        return rng.gamma(shapes, 1.0 / service.rate)
    if isinstance(service, Deterministic):
        return rng.uniform(0.0, service.duration, size)
    raise ModelError(f"unsupported service {service!r}")
