import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import batch_means, exp1a, random_params
from qtomo.estimator import (
    EstimationError,
    IllConditioned,
    SolverOptions,
    dethin,
    empirical_moments,
    estimate,
    estimate_closed_form,
    estimate_from_moments,
    estimate_least_squares,
    estimate_sequential,
    identify_closed_form,
    moment_residual,
    null_directions,
)
from qtomo.experiments import experiment1_params, experiment2_params, experiment3_params, experiment4_params
from qtomo.lst import transform_arrays
from qtomo.model import (
    EstimationMode,
    Exponential,
    ModelFree,
    NetworkParams,
    circle_routing,
    exponential_network,
    validate,
)
from qtomo.moments import MomentSet, loads, observed_moments
from qtomo.simulator import ObservationLog, simulate

BOUND_CHECKS = ("finite", "q_entries", "substochastic", "lambda_bounds", "p_bounds", "service_bounds")


def assert_in_theta(params, mode):
    rep = validate(params, mode)
    for name in BOUND_CHECKS:
        assert rep.checks[name], (name, rep.messages.get(name))
    if mode.no_self_loops:
        assert rep.checks["no_self_loops"]


# --------------------------------------------------------------------------
# empirical moments


def test_empirical_moments_constant_log():
    log = ObservationLog(beta=1.0, counts=np.full((6, 2), 3))
    m = empirical_moments(log, need_lag2=True)
    assert m.source == "empirical" and m.beta == 1.0
    np.testing.assert_array_equal(m.alpha0, [3, 3])
    np.testing.assert_array_equal(m.alpha1, np.full((2, 2), 9))
    np.testing.assert_array_equal(m.alpha2, np.full((2, 2), 9))


def test_empirical_moments_hand_log():
    m = empirical_moments(np.array([[2], [0], [3]]), need_lag2=True)
    assert m.alpha0[0] == pytest.approx(5 / 3)
    assert m.alpha1[0, 0] == 0.0
    assert m.alpha2[0, 0] == 6.0


def test_empirical_moments_orientation():
    counts = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    m = empirical_moments(counts)
    # station 1 earlier, station 2 later in every consecutive pair starting at 1
    assert m.alpha1[0, 1] == pytest.approx(2 / 3)
    assert m.alpha1[1, 0] == pytest.approx(1 / 3)


def test_empirical_moments_too_short():
    with pytest.raises(EstimationError):
        empirical_moments(np.array([[1], [2]]), need_lag2=True)


def test_empirical_first_moment_on_simulated_data():
    p = exp1a()
    log = simulate(p, 5.0, 2 * 10**5, seed=30)
    mean, se = batch_means(log.counts)
    np.testing.assert_allclose(empirical_moments(log).alpha0, mean, rtol=1e-12)
    assert np.all(np.abs(mean - loads(p)) < 4 * se)


def test_dethin():
    p = exp1a().replace(p=[0.9, 0.8, 0.7, 0.8, 0.9])
    full = observed_moments(p.replace(p=None), 5.0)
    back = dethin(observed_moments(p, 5.0), p.p)
    np.testing.assert_allclose(back.alpha0, full.alpha0, rtol=1e-13)
    np.testing.assert_allclose(back.alpha1, full.alpha1, rtol=1e-13)
    np.testing.assert_allclose(back.alpha2, full.alpha2, rtol=1e-13)


# --------------------------------------------------------------------------
# closed-form identification


def test_closed_form_exp1a():
    p = exp1a()
    Q, lam = identify_closed_form(observed_moments(p, 5.0), p.services, 5.0)
    assert np.abs(Q - p.Q).max() <= 1e-8
    assert np.abs(lam - p.lam).max() <= 1e-8


def test_closed_form_single_queue():
    p = exponential_network([[0.0]], [3.0], [2.0])
    Q, lam = identify_closed_form(observed_moments(p, 5.0), p.services, 5.0)
    assert abs(Q[0, 0]) <= 1e-10 and abs(lam[0] - 3.0) <= 1e-10


@pytest.mark.parametrize("clockwise", [True, False])
def test_closed_form_recovers_orientation(clockwise):
    p = exponential_network(circle_routing(5, 0.5, clockwise), [2.0] * 5, [3.0] * 5)
    Q, _ = identify_closed_form(observed_moments(p, 5.0), p.services, 5.0)
    np.testing.assert_allclose(Q, p.Q, atol=1e-8)


def test_closed_form_raw_output_is_not_projected():
    p = exp1a()
    log = simulate(p, 5.0, 20000, seed=31)
    Q, _ = identify_closed_form(empirical_moments(log), p.services, 5.0)
    # sampling noise pushes some true zeros negative
    assert Q.min() < 0
    res = estimate_closed_form(empirical_moments(log), p, 5.0)
    assert res.theta_hat.Q.min() >= 0
    np.testing.assert_array_equal(res.diagnostics["closed_form_raw"].Q, Q)


def test_closed_form_ill_conditioned():
    p = exp1a()
    m = observed_moments(p, 5.0)
    with pytest.raises(IllConditioned):
        identify_closed_form(m, p.services, 5.0, cond_limit=1.0)
    # duplicated stations make the lag-one block exactly singular
    twin = MomentSet(alpha0=np.ones(2), alpha1=np.ones((2, 2)))
    with pytest.raises(IllConditioned):
        identify_closed_form(twin, [Exponential(1.0)] * 2, 1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.sampled_from([1, 2, 3, 5]))
def test_closed_form_round_trip_property(seed, n):
    rng = np.random.default_rng(seed)
    p = random_params(rng, n, kinds=("exponential",))
    beta = float(rng.uniform(0.5, 10.0))
    Q, lam = identify_closed_form(observed_moments(p, beta), p.services, beta)
    assert max(np.abs(Q - p.Q).max(), np.abs(lam - p.lam).max()) <= 1e-8


# --------------------------------------------------------------------------
# residual stack


def _mode_point(rng, n, mode, beta):
    p = random_params(rng, n, kinds=("exponential", "erlang", "deterministic"), zero_diagonal=mode.no_self_loops)
    if mode is EstimationMode.WITHP:
        p = p.replace(p=rng.uniform(0.3, 1.0, n))
    if mode is EstimationMode.MODELFREE:
        mean, g, dg = transform_arrays(p.services, beta)
        p = p.replace(services=[ModelFree(a, b, c, beta) for a, b, c in zip(mean, g, dg)])
    return p


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4), mode=st.sampled_from(list(EstimationMode)))
def test_residual_zero_at_truth(seed, n, mode):
    rng = np.random.default_rng(seed)
    beta = float(rng.uniform(0.5, 8.0))
    p = _mode_point(rng, n, mode, beta)
    r = moment_residual(p, observed_moments(p, beta), mode, beta)
    expected = n + n * n + {None: 0, "diagonal": n, "full": n * n}[mode.lag2_block]
    assert r.shape == (expected,)
    assert np.abs(r).max() <= 1e-12


def test_residual_requires_lag2_block():
    p = exp1a()
    m = observed_moments(p, 5.0, lag2=False)
    with pytest.raises(EstimationError):
        estimate_least_squares(m, EstimationMode.WITHP, 5.0, p)


# --------------------------------------------------------------------------
# least squares and the sequential scheme


def test_least_squares_known_exp1a():
    p = exp1a()
    res = estimate_least_squares(observed_moments(p, 5.0), EstimationMode.KNOWN, 5.0, p)
    assert res.residual_norm <= 1e-8
    assert np.abs(res.theta_hat.Q - p.Q).max() <= 1e-6
    assert np.abs(res.theta_hat.lam - p.lam).max() <= 1e-6


def test_known_pipeline_from_analytic_moments():
    p = exp1a()
    res = estimate_from_moments(observed_moments(p, 5.0), EstimationMode.KNOWN, p, 5.0)
    assert res.residual_norm <= 1e-8 and res.converged
    assert np.abs(res.theta_hat.Q - p.Q).max() <= 1e-6
    assert "closed_form" in res.diagnostics and "least_squares" in res.diagnostics


def test_parametric_least_squares_round_trip():
    rng = np.random.default_rng(32)
    p = random_params(rng, 3, kinds=("exponential", "erlang"), zero_diagonal=True)
    res = estimate_from_moments(observed_moments(p, 2.0), EstimationMode.PARAMETRIC, p, 2.0)
    assert res.residual_norm <= 1e-8
    np.testing.assert_allclose(res.theta_hat.means, p.means, rtol=1e-6)
    np.testing.assert_allclose(res.theta_hat.Q, p.Q, atol=1e-6)
    assert_in_theta(res.theta_hat, EstimationMode.PARAMETRIC)


def test_withp_least_squares_round_trip():
    p = experiment2_params()
    res = estimate_from_moments(observed_moments(p, 5.0), EstimationMode.WITHP, p.replace(p=None), 5.0)
    assert res.residual_norm <= 1e-8
    np.testing.assert_allclose(res.theta_hat.p, p.p, atol=1e-6)
    np.testing.assert_allclose(res.theta_hat.Q, p.Q, atol=1e-6)
    np.testing.assert_allclose(res.theta_hat.lam, p.lam, atol=1e-5)
    assert_in_theta(res.theta_hat, EstimationMode.WITHP)


def test_sequential_tandem_exact():
    p = exponential_network([[0.0, 0.7], [0.0, 0.0]], [2.0, 1.0], [2.0, 3.0])
    res = estimate_sequential(observed_moments(p, 2.0), 2.0, p.replace(services=[Exponential(1.0)] * 2))
    assert np.abs(res.theta_hat.Q - p.Q).max() <= 1e-8
    assert np.abs(res.theta_hat.lam - p.lam).max() <= 1e-8
    np.testing.assert_allclose([s.rate for s in res.theta_hat.services], [2.0, 3.0], atol=1e-8)


@pytest.mark.parametrize("form", ["reordered", "auto"])
def test_sequential_forms_run(form):
    p = exponential_network([[0.0, 0.7], [0.2, 0.0]], [2.0, 1.0], [2.0, 3.0])
    opts = SolverOptions(sequential_form=form, starts=4)
    res = estimate_sequential(observed_moments(p, 2.0), 2.0, p, opts)
    assert res.residual_norm <= 1e-6
    assert isinstance(res.diagnostics["reordered"], bool)
    with pytest.raises(EstimationError):
        estimate_sequential(observed_moments(p, 2.0), 2.0, p, SolverOptions(sequential_form="sideways"))


def test_sequential_experiment3_analytic():
    p = experiment3_params()
    res = estimate_sequential(observed_moments(p, 10.0, lag2=False), 10.0, p)
    assert res.residual_norm <= 1e-6
    np.testing.assert_allclose([s.rate for s in res.theta_hat.services], [s.rate for s in p.services], atol=1e-4)
    assert_in_theta(res.theta_hat, EstimationMode.PARAMETRIC)


@pytest.mark.slow
def test_sequential_experiment3_simulated():
    p = experiment3_params()
    log = simulate(p, 10.0, 2 * 10**6, seed=33)
    res = estimate_sequential(empirical_moments(log), 10.0, p)
    rates = np.array([s.rate for s in res.theta_hat.services])
    assert np.all(np.abs(rates - [s.rate for s in p.services]) <= 0.1), rates


def test_modelfree_exponential_simulated():
    # Table-1 setting: model-free fit on exponential data
    p = experiment4_params(erlang=False)
    log = simulate(p, 3.0, 10**6, seed=34)
    res = estimate(log, EstimationMode.MODELFREE, p)
    assert_in_theta(res.theta_hat, EstimationMode.MODELFREE)
    np.testing.assert_allclose(res.theta_hat.means, [1 / 3, 1 / 5], atol=0.02)
    assert abs(res.theta_hat.Q[0, 1] - 0.5) <= 0.03 and abs(res.theta_hat.Q[1, 0] - 0.5) <= 0.03


def test_exponential_assumption_bias_on_erlang_moments():
    p = experiment4_params(erlang=True)
    template = p.replace(services=[Exponential(1.0)] * 2)
    res = estimate_from_moments(observed_moments(p, 3.0, lag2=False), EstimationMode.PARAMETRIC, template, 3.0)
    assert res.theta_hat.means[0] <= 0.8 * (2 / 3)


def test_modelfree_null_directions():
    rng = np.random.default_rng(35)
    p = _mode_point(rng, 3, EstimationMode.MODELFREE, 2.0)
    m = observed_moments(p, 2.0)
    assert null_directions(p, m, EstimationMode.MODELFREE, 2.0) == 3
    q = _mode_point(rng, 3, EstimationMode.PARAMETRIC, 2.0)
    assert null_directions(q, observed_moments(q, 2.0), EstimationMode.PARAMETRIC, 2.0) == 0


# --------------------------------------------------------------------------
# the full pipeline


def test_estimate_exp1a_simulated():
    p = experiment1_params("line")
    res = estimate(simulate(p, 5.0, 250_000, seed=36), EstimationMode.KNOWN, p)
    assert np.all(np.abs(res.theta_hat.lam - p.lam) <= 0.5), res.theta_hat.lam
    assert np.abs(res.theta_hat.Q - p.Q).max() <= 0.06
    assert "closed_form" in res.diagnostics
    assert_in_theta(res.theta_hat, EstimationMode.KNOWN)


@pytest.mark.parametrize("seed", [37, 38])
def test_estimate_circle_closing_edge(seed):
    p = experiment1_params("circle")
    res = estimate(simulate(p, 5.0, 250_000, seed=seed), EstimationMode.KNOWN, p)
    assert abs(res.theta_hat.Q[4, 0] - 0.5) <= 0.06


def test_estimate_least_squares_choice():
    p = experiment1_params("line")
    log = simulate(p, 5.0, 20000, seed=39)
    res = estimate(log, EstimationMode.KNOWN, p, opts=SolverOptions(known_estimate="least-squares", starts=2))
    assert res.diagnostics["method"] == "least_squares"
    assert_in_theta(res.theta_hat, EstimationMode.KNOWN)
    with pytest.raises(EstimationError):
        estimate(log, EstimationMode.KNOWN, p, opts=SolverOptions(known_estimate="guess"))


def test_estimate_all_zero_log():
    p = exp1a().replace(lam=np.zeros(5))
    log = simulate(p, 5.0, 100, seed=40)
    res = estimate(log, EstimationMode.KNOWN, exp1a())
    assert res.diagnostics["degenerate_stations"] == [0, 1, 2, 3, 4]
    assert np.all(res.theta_hat.lam == 0) and np.all(res.theta_hat.Q == 0)


def test_estimate_degenerate_station_is_pinned():
    p = exponential_network([[0.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], [3.0, 1.0, 0.0], [2.0, 3.0, 1.0])
    m = observed_moments(p, 4.0)
    res = estimate_from_moments(m, EstimationMode.KNOWN, p, 4.0)
    assert res.diagnostics["degenerate_stations"] == [2]
    assert np.all(res.theta_hat.Q[2] == 0) and np.all(res.theta_hat.Q[:, 2] == 0)
    np.testing.assert_allclose(res.theta_hat.Q[:2, :2], p.Q[:2, :2], atol=1e-8)


def test_estimate_station_count_mismatch():
    log = ObservationLog(beta=1.0, counts=np.ones((10, 2), dtype=int))
    with pytest.raises(EstimationError):
        estimate(log, EstimationMode.KNOWN, exp1a())


def test_result_serialisation():
    p = exp1a()
    res = estimate_from_moments(observed_moments(p, 5.0), EstimationMode.KNOWN, p, 5.0)
    doc = res.to_dict()
    assert doc["mode"] == "known" and doc["converged"] is True
    assert NetworkParams.from_dict(doc["theta_hat"]) == res.theta_hat
    names = [k for k, _ in res.named_parameters()]
    assert names[:2] == ["q_1_1", "q_1_2"] and "lambda_5" in names
    assert SolverOptions.from_dict(SolverOptions().to_dict()) == SolverOptions()
