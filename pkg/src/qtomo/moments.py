"""Exact stationary moments of the network population at Poisson epochs.

Conventions:

* ``alpha1[j, i] = E[M_j(0) M_i(T)]`` with T ~ Exp(beta): the row index is
  the station at the earlier epoch, the column index the station at the later
  one.  The matrix is not symmetric in general.
* ``alpha2`` is the same object with an Erlang-2 lag, i.e. two sampling
  epochs apart.
* With observation probabilities p, every customer is seen independently
  with probability p_i, which multiplies the first moments by p and
  sandwiches the cross moments between diag(p) on both sides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .lst import transform_arrays, residual_transforms
from .model import NetworkParams, draining_stations

MIN_BETA = 1e-9


class SingularSystemError(ArithmeticError):
    """A linear system of the moment engine is singular."""


@dataclass(frozen=True)
class PassageMatrices:
    """Where a tagged customer sits after an independent Exp(beta) time.

    ``P[i, j]`` starts from a fresh service at station i, ``P_res`` from a
    residual one; ``P0``/``P0_res`` hold the probabilities of having left.
    ``dP``/``dP_res`` are derivatives with respect to beta.
    """

    P: np.ndarray
    P_res: np.ndarray
    P0: np.ndarray
    P0_res: np.ndarray
    dP: np.ndarray
    dP_res: np.ndarray


@dataclass(frozen=True)
class MomentSet:
    alpha0: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray | None = None
    source: str = "analytic"
    beta: float | None = None

    @property
    def n(self) -> int:
        return self.alpha0.shape[0]

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "beta": self.beta,
            "alpha0": self.alpha0.tolist(),
            "alpha1": self.alpha1.tolist(),
            "alpha2": None if self.alpha2 is None else self.alpha2.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MomentSet":
        a2 = doc.get("alpha2")
        return cls(
            alpha0=np.asarray(doc["alpha0"], dtype=float),
            alpha1=np.asarray(doc["alpha1"], dtype=float),
            alpha2=None if a2 is None else np.asarray(a2, dtype=float),
            source=doc.get("source", "analytic"),
            beta=doc.get("beta"),
        )


def _check_beta(beta: float):
    if not beta >= MIN_BETA:
        raise ValueError(f"beta must be at least {MIN_BETA}, got {beta}")


def effective_rates(params: NetworkParams) -> np.ndarray:
    """Solve the traffic equations (I - Q^T) lam_eff = lam."""
    return _effective_rates(params.Q, params.lam)


def _effective_rates(Q, lam):
    if not draining_stations(Q).all():
        raise SingularSystemError("some stations have no route to the exit; traffic equations are singular")
    n = Q.shape[0]
    try:
        return np.linalg.solve(np.eye(n) - Q.T, lam)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from None


def loads(params: NetworkParams) -> np.ndarray:
    """Stationary mean population per station."""
    return effective_rates(params) * params.means


def _passage(Q, g, dg, g_res, dg_res, derivatives: bool = True):
    n = Q.shape[0]
    I = np.eye(n)
    A = I - g[:, None] * Q
    try:
        lu = scipy.linalg.lu_factor(A, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularSystemError(str(exc)) from None
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
        raise SingularSystemError("I - diag(G) Q is singular")
    P = scipy.linalg.lu_solve(lu, np.diag(1.0 - g), check_finite=False)
    QP = Q @ P
    P_res = g_res[:, None] * QP + np.diag(1.0 - g_res)
    if not derivatives:
        return P, P_res, None, None
    dP = scipy.linalg.lu_solve(lu, dg[:, None] * (QP - I), check_finite=False)
    dP_res = dg_res[:, None] * QP + g_res[:, None] * (Q @ dP) - np.diag(dg_res)
    return P, P_res, dP, dP_res


def passage(params: NetworkParams, beta: float) -> PassageMatrices:
    _check_beta(beta)
    mean, g, dg = transform_arrays(params.services, beta)
    g_res, dg_res = residual_transforms(mean, g, dg, beta)
    P, P_res, dP, dP_res = _passage(params.Q, g, dg, g_res, dg_res)
    one = np.ones(params.n)
    return PassageMatrices(P, P_res, one - P @ one, one - P_res @ one, dP, dP_res)


def raw_moments(Q, lam, mean, g, dg, beta, p=None, lag2: bool = True, rho=None):
    """Observed moments from plain arrays.

    This is the workhorse behind :func:`observed_moments`; the estimator
    calls it directly with candidate transform values.  ``rho`` overrides the
    loads computed from the traffic equations.
    """
    n = Q.shape[0]
    if rho is None:
        try:
            lam_eff = np.linalg.solve(np.eye(n) - Q.T, lam)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(str(exc)) from None
        rho = lam_eff * mean
    g_res, dg_res = residual_transforms(mean, g, dg, beta)
    P, P_res, dP, dP_res = _passage(Q, g, dg, g_res, dg_res, derivatives=lag2)
    second = np.outer(rho, rho) + np.diag(rho)
    flow = np.outer(rho, lam)
    a1 = second @ P_res + (flow @ P) / beta
    a2 = None
    if lag2:
        a2 = second @ (P_res - beta * dP_res) + 2.0 * (flow @ P) / beta - flow @ dP
    if p is not None:
        a1 = p[:, None] * a1 * p[None, :]
        if a2 is not None:
            a2 = p[:, None] * a2 * p[None, :]
        rho = p * rho
    return rho, a1, a2


def cross_moment_lag1(params: NetworkParams, beta: float) -> np.ndarray:
    """E[M_j(0) M_i(T)] at entry (j, i), T ~ Exp(beta)."""
    _check_beta(beta)
    rho = loads(params)
    mean, g, dg = transform_arrays(params.services, beta)
    return raw_moments(params.Q, params.lam, mean, g, dg, beta, lag2=False, rho=rho)[1]


def cross_moment_lag2(params: NetworkParams, beta: float) -> np.ndarray:
    """E[M_j(0) M_i(E)] at entry (j, i), E ~ Erlang(2, beta)."""
    _check_beta(beta)
    rho = loads(params)
    mean, g, dg = transform_arrays(params.services, beta)
    return raw_moments(params.Q, params.lam, mean, g, dg, beta, lag2=True, rho=rho)[2]


def observed_moments(params: NetworkParams, beta: float, lag2: bool = True) -> MomentSet:
    """Moments of the thinned population N as seen through p."""
    _check_beta(beta)
    rho = loads(params)
    mean, g, dg = transform_arrays(params.services, beta)
    a0, a1, a2 = raw_moments(params.Q, params.lam, mean, g, dg, beta, p=params.p, lag2=lag2, rho=rho)
    return MomentSet(alpha0=a0, alpha1=a1, alpha2=a2, source="analytic", beta=beta)
