import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from fluidnet import analytics
from fluidnet.model import JobLaw, NetworkSpec
from fluidnet.segments import DomainExceeded


@pytest.fixture
def single():
    return NetworkSpec.single_node(1.0, JobLaw.exponential(1.0), 1.0, 1.0)


@pytest.fixture
def tandem():
    return NetworkSpec.tandem(1.0, JobLaw.exponential(1.0), 2.0, 1.0, 1.0)


def test_log_mgf_zero(single, tandem):
    assert analytics.log_mgf(single, [0.0]) == pytest.approx(0.0, abs=1e-14)
    assert analytics.log_mgf(tandem, [0.0, 0.0]) == pytest.approx(0.0, abs=1e-14)


def test_log_mgf_single_node_closed_form(single):
    th = 0.4
    expected = analytics.log_mgf_exp_closed(1.0, 1.0, th, 1.0) - 1.0
    assert analytics.log_mgf(single, [th]) == pytest.approx(expected, rel=1e-13)


def test_log_mgf_tandem_against_direct_quadrature(tandem):
    th = np.array([0.3, 0.5])
    R = tandem.R

    def integrand(u):
        from scipy.linalg import expm

        v = (expm(-R * u) @ th)[0]
        return 1.0 / (1.0 - v) - 1.0

    ref = integrate.quad(integrand, 0, 1, epsabs=1e-13)[0]
    assert analytics.log_mgf(tandem, th) == pytest.approx(ref, rel=1e-10)


def test_log_mgf_domain(single):
    with pytest.raises(DomainExceeded):
        analytics.log_mgf(single, [1.0])
    assert analytics.log_mgf(single, [1.0], strict=False) == math.inf


def test_mean_vector(single, tandem):
    np.testing.assert_allclose(analytics.mean_vector(single), [1 - math.exp(-1)])
    m = analytics.mean_vector(tandem)
    # node 1 mean (1 - e^{-2})/2, node 2 = total input minus node 1 and outflow
    assert m[0] == pytest.approx((1 - math.exp(-2)) / 2)
    g = analytics.log_mgf_parts(tandem, np.zeros(2), order=1)[1]
    np.testing.assert_allclose(m, g, rtol=1e-10)


def test_hessian_finite_differences(tandem):
    th = np.array([0.2, 0.3])
    H = analytics.hessian_logM(tandem, th)
    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        gp = analytics.log_mgf_parts(tandem, th + e, 1)[1]
        gm = analytics.log_mgf_parts(tandem, th - e, 1)[1]
        np.testing.assert_allclose((gp - gm) / (2 * h), H[:, i], atol=1e-7)


def test_single_node_twist_values(single):
    sol = analytics.solve_twist(single, [1.0])
    assert sol.theta_star[0] == pytest.approx(0.2918, abs=1e-3)
    assert sol.tau == pytest.approx(1.8240, abs=1e-3)
    assert sol.D == 1


def test_closed_form_twist_matches_solver():
    for lam, mu, r, t, a in [(1, 1, 1, 1, 1), (2, 0.5, 5, 1, 3), (0.9, 1 / 0.9, 0.3, 1, 0.8)]:
        spec = NetworkSpec.single_node(lam, JobLaw.exponential(mu), r, t)
        sol = analytics.solve_twist(spec, [a])
        # the closed form is for unit arrival rate scaled into the mean m
        th_closed = _closed_twist(lam, mu, r, t, a)
        assert sol.theta_star[0] == pytest.approx(th_closed, rel=1e-9)


def _closed_twist(lam, mu, r, t, a):
    # a = d/dth log M = (lam mu / r) (1 - x) / ((mu - th)(mu - x th)) with x = e^{-rt};
    # solve the resulting quadratic in th.
    x = math.exp(-r * t)
    k = lam * mu * (1 - x) / (r * a)
    A, B, C = x, -(mu * (1 + x)), mu * mu - k
    return (-B - math.sqrt(B * B - 4 * A * C)) / (2 * A)


def test_library_closed_form_helper():
    assert analytics.exp_twist_closed_form(1, 1, 1, 1, 1) == pytest.approx(_closed_twist(1, 1, 1, 1, 1), rel=1e-12)
    assert analytics.exp_twist_closed_form(1, 1, 1, 1, 0.1) == 0.0


def test_downstream_only_tandem(tandem):
    sol = analytics.solve_twist(tandem, [0.0, 1.0])
    assert sol.theta_star[0] == 0.0
    assert sol.theta_star[1] == pytest.approx(0.8104, abs=1e-3)
    assert sol.tau == pytest.approx(1.4774, abs=1e-3)
    assert analytics.alpha(sol, 0.1, 1.96) == pytest.approx(474.3, abs=1)


def test_complementary_slackness(tandem):
    for a in ([0.0, 1.0], [1.2, 1.1], [0.6, 0.2], [0.1, 0.9]):
        sol = analytics.solve_twist(tandem, a)
        slack = sol.b_star - np.asarray(a)
        assert np.all(slack >= -1e-9)
        assert np.all(np.abs(slack * sol.theta_star) <= 1e-9)


def test_non_rare_target(single):
    sol = analytics.solve_twist(single, [0.1])
    assert sol.D == 0 and sol.I == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(analytics.RarityViolated):
        analytics.solve_twist(single, [0.1], strict=True)


def test_rate_function_is_legendre_transform(single):
    sol = analytics.solve_twist(single, [1.0])
    grid = np.linspace(0.0, 0.99, 2000)
    vals = [g - analytics.log_mgf(single, [g]) for g in grid]
    assert sol.I >= max(vals) - 1e-12
    assert sol.I == pytest.approx(max(vals), abs=1e-6)


def test_alpha_formula_single_node(single):
    sol = analytics.solve_twist(single, [1.0])
    th, tau = sol.theta_star[0], sol.tau
    expected = (1.96 / 0.1) ** 2 * th / 2 * math.sqrt(2 * math.pi * tau)
    assert analytics.alpha(sol, 0.1, 1.96) == pytest.approx(expected, rel=1e-12)
    assert analytics.alpha(sol, 0.1, 1.96) == pytest.approx(189.79, abs=0.05)


def test_predicted_runs_scaling(single):
    r40 = analytics.predicted_runs(single, [1.0], 40, 0.1, 1.96)
    r160 = analytics.predicted_runs(single, [1.0], 160, 0.1, 1.96)
    assert r160 / r40 == pytest.approx(2.0)


def test_bahadur_rao_against_exact_tail_for_gamma_sum():
    # X = sum of Poisson(lam) unit exponentials has a compound law; with r -> 0
    # the network is a plain compound Poisson sum. Check the sharp asymptotic
    # against numerical inversion via a large-n comparison of log-probabilities.
    spec = NetworkSpec.single_node(1.0, JobLaw.exponential(1.0), 1e-9, 1.0)
    sol = analytics.solve_twist(spec, [2.0])
    # compound Poisson(n) of Exp(1): P(S >= 2n) = sum_k Pois(n; k) P(Gamma(k) >= 2n)
    from scipy import stats

    n = 200
    k = np.arange(1, 2000)
    exact = np.sum(stats.poisson.pmf(k, n) * stats.gamma.sf(2 * n, k))
    approx = analytics.bahadur_rao_p(spec, [2.0], n, sol)
    assert approx / exact == pytest.approx(1.0, abs=0.02)


@settings(max_examples=25, deadline=None)
@given(a1=st.floats(0.05, 2.0), a2=st.floats(0.05, 2.0))
def test_kkt_over_random_targets(a1, a2):
    tandem = NetworkSpec.tandem(1.0, JobLaw.exponential(1.0), 2.0, 1.0, 1.0)
    sol = analytics.solve_twist(tandem, [a1, a2])
    grad = sol.b_star
    assert np.all(grad >= np.array([a1, a2]) - 1e-8)
    assert np.all(np.abs((grad - [a1, a2]) * sol.theta_star) <= 1e-8)
    assert sol.I >= -1e-14


def test_joint_tandem_values_at_doubled_arrival_rate():
    # the published joint-target figures match lambda = 2; at lambda = 1 the
    # same numbers follow from the target halved (theta*(2, a) = theta*(1, a/2))
    fast = NetworkSpec.tandem(2.0, JobLaw.exponential(1.0), 2.0, 1.0, 1.0)
    sol = analytics.solve_twist(fast, [1.2, 1.1])
    np.testing.assert_allclose(sol.theta_star, [0.1367, 0.2225], atol=1e-3)
    from fluidnet.twist import build_plan

    assert build_plan(fast, sol).poisson_mean_Q == pytest.approx(2.3478, abs=1e-3)
    half = analytics.solve_twist(NetworkSpec.tandem(1.0, JobLaw.exponential(1.0), 2.0, 1.0, 1.0), [0.6, 0.55])
    np.testing.assert_allclose(half.theta_star, sol.theta_star, atol=1e-9)


def test_alpha_quoted_value_needs_larger_curvature(single):
    # 198.7 is what the run-count formula gives with tau = 2 instead of 1.824
    sol = analytics.solve_twist(single, [1.0])
    th = sol.theta_star[0]
    assert (1.96 / 0.1) ** 2 * th / 2 * math.sqrt(2 * math.pi * 2.0) == pytest.approx(198.7, abs=0.5)


def test_alpha_general_form_matches_two_dimensional_closed_form(tandem):
    # general prefactor 2^-D (2 pi)^(D/2) sqrt(tau) reduces to pi sqrt(tau) / 2 for D = 2
    sol = analytics.solve_twist(tandem, [1.2, 1.1])
    assert sol.D == 2
    th1, th2 = sol.theta_star
    two_d = (1.96 / 0.1) ** 2 * th1 * th2 * math.pi * math.sqrt(sol.tau) / 2
    assert analytics.alpha(sol, 0.1, 1.96) == pytest.approx(two_d, rel=1e-12)
