import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exp1a, random_params, single_queue_lag1
from qtomo.lst import transform_arrays
from qtomo.model import Deterministic, Erlang, Exponential, NetworkParams, circle_routing, exponential_network
from qtomo.moments import (
    MomentSet,
    SingularSystemError,
    cross_moment_lag1,
    cross_moment_lag2,
    effective_rates,
    loads,
    observed_moments,
    passage,
    raw_moments,
)

BETAS = (1e-3, 1e-1, 1.0, 10.0, 1e3)


def single(lam=3.0, service=Exponential(2.0), q=0.0, p=None):
    return NetworkParams(Q=[[q]], lam=[lam], services=[service], p=p)


def params_from_seed(seed, n=None, **kw):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 6))
    return random_params(rng, n, **kw)


def test_effective_rates_examples():
    p = exp1a()
    np.testing.assert_allclose(effective_rates(p.replace(Q=np.zeros((5, 5)))), p.lam)
    np.testing.assert_allclose(effective_rates(p), [3, 3.5, 5.75, 5.875, 6.9375], rtol=0, atol=1e-12)
    assert effective_rates(single(q=0.5))[0] == pytest.approx(6.0)


def test_loads_examples():
    assert loads(single())[0] == pytest.approx(1.5)
    np.testing.assert_allclose(loads(exp1a()), [1.5, 3.5 / 3, 5.75 / 3, 1.46875, 2.3125], rtol=1e-12)
    assert np.all(loads(exp1a().replace(lam=np.zeros(5))) == 0)


def test_drain_violation_is_singular():
    p = NetworkParams(Q=np.eye(2), lam=[1.0, 1.0], services=[Exponential(1.0)] * 2)
    with pytest.raises(SingularSystemError):
        effective_rates(p)


def test_beta_guard():
    with pytest.raises(ValueError):
        cross_moment_lag1(exp1a(), 1e-12)


def test_passage_single_node():
    pm = passage(single(), 5.0)
    assert pm.P[0, 0] == pytest.approx(5 / 7, abs=1e-15)
    assert pm.P0[0] == pytest.approx(2 / 7, abs=1e-15)


def test_passage_tandem():
    p = exponential_network([[0.0, 1.0], [0.0, 0.0]], [1.0, 0.0], [2.0, 2.0])
    np.testing.assert_allclose(passage(p, 5.0).P, [[5 / 7, 10 / 49], [0.0, 5 / 7]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_exponential_residual_passage_equals_fresh(seed):
    p = params_from_seed(seed, kinds=("exponential",))
    pm = passage(p, 2.0)
    np.testing.assert_allclose(pm.P_res, pm.P, rtol=0, atol=1e-14)


def test_lag1_single_queue():
    assert cross_moment_lag1(single(), 5.0)[0, 0] == pytest.approx(3.3214286, abs=1e-7)
    assert cross_moment_lag1(single(), 5.0)[0, 0] == pytest.approx(4.65 * 5 / 7, rel=1e-14)


def test_lag2_single_queue():
    assert cross_moment_lag2(single(), 5.0)[0, 0] == pytest.approx(147.75 / 49, rel=1e-13)


@pytest.mark.parametrize("beta", [0.5, 1.0, 5.0])
def test_single_queue_reduction_exponential(beta):
    # (rho^2 + rho) beta / (mu + beta) + rho lam / (mu + beta)
    lam, mu = 3.0, 2.0
    rho = lam / mu
    expect = (rho**2 + rho) * beta / (mu + beta) + rho * lam / (mu + beta)
    assert abs(cross_moment_lag1(single(lam, Exponential(mu)), beta)[0, 0] - expect) <= 1e-12


@pytest.mark.parametrize("beta", [0.5, 1.0, 5.0])
@pytest.mark.parametrize("service", [Erlang(2, 5.0), Erlang(3, 2.0), Deterministic(0.7)], ids=repr)
def test_single_queue_reduction_general(service, beta):
    got = cross_moment_lag1(single(2.5, service), beta)[0, 0]
    assert got == pytest.approx(single_queue_lag1(2.5, service, beta), rel=1e-8)


def test_lag1_beta_limits():
    p = exp1a()
    rho = loads(p)
    np.testing.assert_allclose(cross_moment_lag1(p, 1e6), np.outer(rho, rho) + np.diag(rho), atol=1e-3)
    np.testing.assert_allclose(cross_moment_lag1(p, 1e-6), np.outer(rho, rho), atol=1e-3)
    np.testing.assert_allclose(cross_moment_lag2(p, 1e-6), np.outer(rho, rho), atol=1e-3)


def test_orientation_convention_tandem():
    p = exponential_network([[0.0, 1.0], [0.0, 0.0]], [2.0, 0.5], [1.0, 1.0])
    a1 = cross_moment_lag1(p, 2.0)
    # customers flow 1 -> 2, so "at 1 earlier, at 2 later" is the heavier pairing
    assert a1[0, 1] > a1[1, 0]


def test_observed_moments_examples():
    p = exp1a()
    full = observed_moments(p, 5.0)
    np.testing.assert_array_equal(full.alpha1, cross_moment_lag1(p, 5.0))
    np.testing.assert_array_equal(full.alpha2, cross_moment_lag2(p, 5.0))
    np.testing.assert_array_equal(full.alpha0, loads(p))
    assert full.source == "analytic" and full.beta == 5.0
    thin = observed_moments(single(p=[0.5]), 5.0)
    assert thin.alpha0[0] == pytest.approx(0.75)
    assert thin.alpha1[0, 0] == pytest.approx(0.25 * 4.65 * 5 / 7, rel=1e-14)


def test_observed_moments_sandwich():
    p = exp1a().replace(p=[0.9, 0.8, 0.7, 0.8, 0.9])
    m = observed_moments(p, 5.0)
    D = np.diag(p.p)
    np.testing.assert_allclose(m.alpha1, D @ cross_moment_lag1(p, 5.0) @ D, rtol=1e-14)
    np.testing.assert_allclose(m.alpha2, D @ cross_moment_lag2(p, 5.0) @ D, rtol=1e-14)


def test_lag1_only_request():
    m = observed_moments(exp1a(), 5.0, lag2=False)
    assert m.alpha2 is None


def test_moment_set_dict_round_trip():
    m = observed_moments(exp1a(), 5.0)
    back = MomentSet.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.alpha1, m.alpha1)
    np.testing.assert_array_equal(back.alpha2, m.alpha2)
    assert back.beta == 5.0


def test_orientation_sensitivity_circle():
    cw = exponential_network(circle_routing(5, 0.5, clockwise=True), [2.0] * 5, [3.0] * 5)
    ccw = cw.replace(Q=circle_routing(5, 0.5, clockwise=False))
    a, b = observed_moments(cw, 5.0), observed_moments(ccw, 5.0)
    np.testing.assert_allclose(a.alpha0, b.alpha0, rtol=1e-14)
    assert np.abs(a.alpha1 - b.alpha1).max() > 1e-3
    np.testing.assert_allclose(a.alpha1, b.alpha1.T, rtol=1e-12)


# --------------------------------------------------------------------------
# properties

SEEDS = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(seed=SEEDS)
def test_row_conservation_and_probability_range(seed):
    p = params_from_seed(seed)
    one = np.ones(p.n)
    for beta in BETAS:
        pm = passage(p, beta)
        assert np.abs(pm.P @ one + pm.P0 - 1).max() <= 1e-12
        assert np.abs(pm.P_res @ one + pm.P0_res - 1).max() <= 1e-12
        for M in (pm.P, pm.P_res):
            assert M.min() >= -1e-12 and M.max() <= 1 + 1e-12
        assert pm.P0.min() >= -1e-12 and pm.P0_res.min() >= -1e-12


@settings(max_examples=60, deadline=None)
@given(seed=SEEDS, beta=st.sampled_from(BETAS))
def test_passage_fixed_point(seed, beta):
    p = params_from_seed(seed)
    _, g, _ = transform_arrays(p.services, beta)
    P = passage(p, beta).P
    D = np.diag(g)
    assert np.abs(P - (D @ p.Q @ P + np.eye(p.n) - D)).max() <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=SEEDS, beta=st.floats(0.2, 20.0))
def test_passage_derivatives_finite_difference(seed, beta):
    p = params_from_seed(seed)
    h = 1e-4 * beta
    hi, lo, mid = passage(p, beta + h), passage(p, beta - h), passage(p, beta)
    for name, dname in (("P", "dP"), ("P_res", "dP_res")):
        fd = (getattr(hi, name) - getattr(lo, name)) / (2 * h)
        exact = getattr(mid, dname)
        scale = max(np.abs(exact).max(), 1e-12)
        assert np.abs(fd - exact).max() <= 1e-4 * scale


@settings(max_examples=50, deadline=None)
@given(seed=SEEDS, beta=st.floats(0.2, 20.0))
def test_lag2_matches_finite_difference(seed, beta):
    p = params_from_seed(seed)
    h = 1e-4 * beta
    fd = (cross_moment_lag1(p, beta + h) - cross_moment_lag1(p, beta - h)) / (2 * h)
    oracle = cross_moment_lag1(p, beta) - beta * fd
    got = cross_moment_lag2(p, beta)
    np.testing.assert_allclose(got, oracle, rtol=1e-4, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=SEEDS)
def test_beta_limits_random(seed):
    p = params_from_seed(seed)
    rho = loads(p)
    second = np.outer(rho, rho) + np.diag(rho)
    scale = max(1.0, second.max())
    assert np.abs(cross_moment_lag1(p, 1e8) - second).max() <= 1e-3 * scale
    assert np.abs(cross_moment_lag1(p, 1e-7) - np.outer(rho, rho)).max() <= 1e-3 * scale
    assert np.abs(cross_moment_lag2(p, 1e-7) - np.outer(rho, rho)).max() <= 1e-3 * scale


@settings(max_examples=40, deadline=None)
@given(seed=SEEDS)
def test_moments_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = params_from_seed(seed).replace(p=None)
    p = p.replace(p=rng.uniform(0, 1, p.n))
    m = observed_moments(p, float(rng.uniform(0.1, 10)))
    assert m.alpha0.min() >= 0 and m.alpha1.min() >= 0 and m.alpha2.min() >= 0


@settings(max_examples=40, deadline=None)
@given(seed=SEEDS)
def test_zero_duration_atom_family_is_invisible(seed):
    """Rescaling every service by an atom at zero and rerouting leaves all moments unchanged.

    Adding probability 1 - 1/c of a zero-length service (c < 1 removes one)
    multiplies the mean and dlst by c and 1 - lst by c; visits of zero
    length are never sampled, so the network with routing
    Q (D_c + (I - D_c) Q)^-1 and matching external rates is observationally
    identical.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    p = random_params(rng, n, zero_diagonal=True)
    beta = float(rng.uniform(0.5, 5))
    mean, g, dg = transform_arrays(p.services, beta)
    c = rng.uniform(0.7, 1.0, n)
    I, Dc = np.eye(n), np.diag(c)
    Q2 = p.Q @ np.linalg.inv(Dc + (I - Dc) @ p.Q)
    lam_eff = np.linalg.solve(I - p.Q.T, p.lam)
    lam2 = (I - Q2.T) @ (lam_eff / c)
    a = raw_moments(p.Q, p.lam, mean, g, dg, beta)
    b = raw_moments(Q2, lam2, c * mean, 1 - c * (1 - g), c * dg, beta)
    for x, y in zip(a, b):
        np.testing.assert_allclose(y, x, rtol=1e-9, atol=1e-12)
