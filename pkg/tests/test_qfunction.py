import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughctrl.catalog import CATALOG, make_driver, make_problem
from roughctrl.dynamics import integrate_rde, reward
from roughctrl.errors import InvalidInput
from roughctrl.measures import ActionGrid, DiscreteMeasure, RelaxedControl, spike
from roughctrl.problem import ProblemSpec
from roughctrl.qfunction import (evaluate_q, q_beta, q_derivative, q_drift, q_hamiltonian, q_limit, q_table,
                                 value_path)

KINDS = ["smooth", "fbm"]


def _state(prob, gamma, rp, t0):
    k = rp.grid.index(t0)
    return integrate_rde(prob.spec, prob.y0, 0.0, gamma, rp).x[k]


def _linear(n=256, kind="fbm", a_gamma=0.0):
    prob = make_problem("linear-additive")
    rp = make_driver(kind, 1, n, seed=4)
    gamma = RelaxedControl.constant(rp.grid, DiscreteMeasure.dirac(prob.spec.actions, a_gamma))
    return prob, rp, gamma


def _measure_reward():
    """b = 0, σ = 0, F(t, x, m) = ∫a dm, G = 0."""
    acts = ActionGrid.uniform(-1.0, 1.0, 5)
    return ProblemSpec(m=1, d=1, T=1.0, actions=acts,
                       b=lambda t, x, u: np.zeros((np.size(u), 1)), Db=lambda t, x, u: np.zeros((np.size(u), 1, 1)),
                       sigma=lambda t, x: np.zeros((1, 1)), Dsigma=lambda t, x: np.zeros((1, 1, 1)),
                       D2sigma=lambda t, x: np.zeros((1, 1, 1, 1)),
                       F=lambda t, x, p: float(p @ acts.u), DF=lambda t, x, p: np.zeros(1),
                       G=lambda x: 0.0, DG=lambda x: np.zeros(1))


# --------------------------------------------------------------------- Q_β

def test_q_beta_zero_is_reward():
    prob = make_problem("sine-drift")
    rp = make_driver("fbm", 1, 128, seed=0)
    g = prob.optimal(rp)
    mu = DiscreteMeasure.dirac(prob.spec.actions, -1.0)
    assert q_beta(prob.spec, 0.25, [0.3], mu, g, 0.0, rp) == reward(prob.spec, [0.3], 0.25, g, rp)


def test_q_beta_matching_measure_is_reward():
    prob = make_problem("bilinear-noise")
    rp = make_driver("fbm", 1, 128, seed=0)
    g = prob.optimal(rp)
    same = DiscreteMeasure(g.P[0], prob.spec.actions)
    J = reward(prob.spec, prob.y0, 0.0, g, rp)
    for b in (0.01, 0.125, 0.5):
        assert q_beta(prob.spec, 0.0, prob.y0, same, g, b, rp) == J


@pytest.mark.parametrize("t0,beta", [(0.0, 0.25), (0.25, 0.125), (0.5, 0.5)])
def test_q_beta_is_reward_of_spiked_control(t0, beta):
    prob = make_problem("sine-drift")
    rp = make_driver("fbm", 1, 64, seed=1)
    g = prob.optimal(rp)
    mu = DiscreteMeasure.dirac(prob.spec.actions, 0.0)
    y = [0.1]
    assert q_beta(prob.spec, t0, y, mu, g, beta, rp) == pytest.approx(
        reward(prob.spec, y, t0, spike(g, t0, beta, mu), rp), abs=1e-14)


@pytest.mark.parametrize("a_mu", [-1.0, 0.5, 1.0])
def test_q_beta_linear_closed_form(a_mu):
    prob, rp, gamma = _linear(a_gamma=0.2)
    mu = DiscreteMeasure.dirac(prob.spec.actions, a_mu)
    J = reward(prob.spec, [0.0], 0.25, gamma, rp)
    for b in (0.0625, 0.001):
        assert q_beta(prob.spec, 0.25, [0.0], mu, gamma, b, rp) - J == pytest.approx(b * (a_mu - 0.2), abs=1e-13)


# --------------------------------------------------------------------- forms

def test_q_limit_matching_measure_zero():
    prob, rp, gamma = _linear()
    est = q_limit(prob.spec, 0.5, [0.0], DiscreteMeasure.dirac(prob.spec.actions, 0.0), gamma, rp)
    assert est.value == pytest.approx(0.0, abs=1e-12) and est.converged


def test_q_limit_linear_closed_form():
    prob, rp, gamma = _linear(a_gamma=-0.5)
    mu = DiscreteMeasure.uniform(prob.spec.actions)
    est = q_limit(prob.spec, 0.25, [0.3], mu, gamma, rp)
    assert est.value == pytest.approx(0.0 - (-0.5), abs=1e-10)


def test_q_limit_needs_four_betas():
    prob, rp, gamma = _linear()
    with pytest.raises(InvalidInput):
        q_limit(prob.spec, 0.25, [0.0], DiscreteMeasure.uniform(prob.spec.actions), gamma, rp, betas=[0.1, 0.05, 0.02])
    with pytest.raises(InvalidInput):
        q_limit(prob.spec, 1.0, [0.0], DiscreteMeasure.uniform(prob.spec.actions), gamma, rp)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_q_limit_extrapolation_residual(name, kind):
    prob = make_problem(name)
    rp = make_driver(kind, prob.spec.d, 512, seed=2)
    g = prob.suboptimal(rp)
    mu = DiscreteMeasure.dirac(prob.spec.actions, prob.spec.actions.u[5])
    est = q_limit(prob.spec, 0.5, _state(prob, g, rp, 0.5), mu, g, rp)
    assert est.residual <= 1e-3 and est.converged
    assert np.all(np.isfinite(est.quotients))


def test_q_derivative_without_drift_gap():
    spec = _measure_reward()
    rp = make_driver("fbm", 1, 64, seed=0)
    g = RelaxedControl.constant(rp.grid, DiscreteMeasure.dirac(spec.actions, -1.0))
    mu = DiscreteMeasure.dirac(spec.actions, 0.5)
    assert q_derivative(spec, 0.25, [0.0], mu, g, rp) == pytest.approx(1.5, abs=1e-14)
    assert q_hamiltonian(spec, 0.25, [0.0], mu, g, rp) == pytest.approx(1.5, abs=1e-14)


def test_q_derivative_terminal_only():
    prob, rp, gamma = _linear(a_gamma=1.0)
    mu = DiscreteMeasure.dirac(prob.spec.actions, -1.0)
    assert q_derivative(prob.spec, 0.5, [0.0], mu, gamma, rp) == pytest.approx(-2.0, abs=1e-14)


def test_q_hamiltonian_constant_gradient():
    # ∇J ≡ 1 on the linear problem, so q = b̄_μ - b̄_γ
    prob, rp, gamma = _linear(a_gamma=0.5)
    mu = DiscreteMeasure(np.full(21, 1 / 21), prob.spec.actions)
    assert q_hamiltonian(prob.spec, 0.75, [2.0], mu, gamma, rp) == pytest.approx(mu.mean() - 0.5, abs=1e-14)


def test_q_drift_analytic_equals_hamiltonian():
    prob = make_problem("sine-drift")
    rp = make_driver("fbm", 1, 256, seed=5)
    g = prob.suboptimal(rp)
    y = _state(prob, g, rp, 0.25)
    for a in (-1.0, 0.0, 0.7):
        mu = DiscreteMeasure.dirac(prob.spec.actions, a)
        dr = q_drift(prob.spec, 0.25, y, mu, g, rp)
        assert dr.analytic == pytest.approx(q_hamiltonian(prob.spec, 0.25, y, mu, g, rp), abs=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_q_drift_numeric_time_derivative(kind):
    prob = make_problem("sine-drift")
    for n in (256, 1024):
        rp = make_driver(kind, 1, n, seed=5)
        g = prob.suboptimal(rp)
        y = _state(prob, g, rp, 0.5)
        dr = q_drift(prob.spec, 0.5, y, DiscreteMeasure.dirac(prob.spec.actions, 0.0), g, rp)
        assert abs(dr.jdot_numeric - dr.jdot_analytic) <= rp.grid.mesh ** min(1.0, 3 * rp.alpha - 1)
        assert dr.jdot_analytic == pytest.approx(-np.tanh(y[0]))


def test_q_drift_matching_measure():
    prob = make_problem("sine-drift")
    rp = make_driver("fbm", 1, 256, seed=5)
    g = prob.optimal(rp)
    y = _state(prob, g, rp, 0.25)
    same = DiscreteMeasure(g.P[rp.grid.index(0.25)], prob.spec.actions)
    dr = q_drift(prob.spec, 0.25, y, same, g, rp)
    assert dr.analytic == pytest.approx(0.0, abs=1e-12)
    assert dr.jdot_analytic + prob.spec.reward_rate(0.25, y, same.p) == pytest.approx(0.0, abs=1e-14)


def test_value_path():
    prob = make_problem("sine-drift")
    rp = make_driver("fbm", 1, 64, seed=0)
    g = prob.optimal(rp)
    v = value_path(prob.spec, 0.25, [0.1], g, rp)
    k = rp.grid.index(0.25)
    assert v[k] == pytest.approx(reward(prob.spec, [0.1], 0.25, g, rp), abs=1e-14)
    assert np.all(v[:k] == v[k])


# ----------------------------------------------------------- cross checks

@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_four_way_agreement(name, kind):
    prob = make_problem(name)
    rp = make_driver(kind, prob.spec.d, 512, seed=2)
    for ctrl in (prob.optimal(rp), prob.suboptimal(rp)):
        for t0 in (0.25, 0.75):
            y = _state(prob, ctrl, rp, t0)
            for j in (0, 13):
                mu = DiscreteMeasure.dirac(prob.spec.actions, prob.spec.actions.u[j])
                ev = evaluate_q(prob.spec, t0, y, mu, ctrl, rp)
                assert np.all(np.isfinite(ev.estimates))
                assert ev.spread <= max(1e-3, 5 * ev.scheme_error), (t0, j, ev)


@pytest.mark.parametrize("name", CATALOG)
def test_q_vanishes_for_unperturbed_measure(name):
    prob = make_problem(name)
    rp = make_driver("fbm", prob.spec.d, 256, seed=6)
    g = prob.suboptimal(rp)
    y = _state(prob, g, rp, 0.5)
    same = DiscreteMeasure(g.P[rp.grid.index(0.5)], prob.spec.actions)
    ev = evaluate_q(prob.spec, 0.5, y, same, g, rp)
    np.testing.assert_allclose(ev.estimates, 0.0, atol=1e-12)
    assert ev.right_continuous


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 20), st.integers(0, 20))
def test_q_affine_in_measure(alpha, i, j):
    prob = make_problem("sine-drift")
    rp = make_driver("fbm", 1, 128, seed=7)
    g = prob.suboptimal(rp)
    y = _state(prob, g, rp, 0.25)
    acts = prob.spec.actions
    m1, m2 = DiscreteMeasure.dirac(acts, acts.u[i]), DiscreteMeasure.dirac(acts, acts.u[j])
    mix = DiscreteMeasure(alpha * m1.p + (1 - alpha) * m2.p, acts)
    for form in (q_hamiltonian, q_derivative):
        lhs = form(prob.spec, 0.25, y, mix, g, rp)
        rhs = alpha * form(prob.spec, 0.25, y, m1, g, rp) + (1 - alpha) * form(prob.spec, 0.25, y, m2, g, rp)
        assert lhs == pytest.approx(rhs, abs=1e-12)


# ----------------------------------------------------------------- q table

@pytest.mark.parametrize("name", CATALOG)
def test_q_table_matches_hamiltonian_form(name):
    prob = make_problem(name)
    rp = make_driver("fbm", prob.spec.d, 128, seed=8)
    g = prob.suboptimal(rp)
    tab = q_table(prob.spec, g, rp, prob.y0)
    traj = integrate_rde(prob.spec, prob.y0, 0.0, g, rp)
    for k in (0, 37, 127):
        for j in (0, 10, 20):
            mu = DiscreteMeasure.dirac(prob.spec.actions, prob.spec.actions.u[j])
            ref = q_hamiltonian(prob.spec, rp.grid.t[k], traj.x[k], mu, g, rp)
            assert tab[k, j] == pytest.approx(ref, abs=1e-10)


@pytest.mark.parametrize("name", CATALOG)
def test_q_table_averages_to_zero_under_control(name):
    prob = make_problem(name)
    rp = make_driver("fbm", prob.spec.d, 64, seed=8)
    g = RelaxedControl(rp.grid, prob.spec.actions, np.random.default_rng(1).dirichlet(np.ones(21), 65))
    tab = q_table(prob.spec, g, rp, prob.y0)
    np.testing.assert_allclose(np.einsum("kj,kj->k", g.P, tab), 0.0, atol=1e-12)


def test_q_table_selected_nodes():
    prob = make_problem("sine-drift")
    rp = make_driver("fbm", 1, 32, seed=0)
    tab = q_table(prob.spec, prob.optimal(rp), rp, prob.y0, nodes=[3, 5])
    assert np.all(np.isfinite(tab[[3, 5]]))
    assert np.all(np.isnan(np.delete(tab, [3, 5], axis=0)))
