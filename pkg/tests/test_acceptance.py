"""End-to-end acceptance checks, one marker per criterion.

Run ``pytest tests/test_acceptance.py`` to get a per-criterion PASS/FAIL
summary at the end of the report.
"""
import json
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import logsumexp

from roughctrl.catalog import CATALOG, make_driver, make_problem, named_seed, smooth_signal
from roughctrl.cli import run
from roughctrl.controlled import ControlledPath, compose_smooth, rough_integral_mixed, rough_integral_pair
from roughctrl.dynamics import integrate_rde, jacobian, noise_flow
from roughctrl.measures import ActionGrid, DiscreteMeasure, RelaxedControl, SpikeConfig
from roughctrl.pontryagin import (approx_derivative_check, duality_check, pmp_check, state_gap_sweep,
                                  taylor_reward_check)
from roughctrl.problem import ProblemSpec
from roughctrl.qfunction import evaluate_q
from roughctrl.rough import TimeGrid, delta1, delta2, lift_fbm, lift_smooth, loglog_slope, sewing_refinement
from roughctrl.softpolicy import (gibbs_objective, gibbs_optimizer, open_loop_policy, policy_iteration,
                                  q_policy_identity_check, random_policy)

KINDS = ["smooth", "fbm"]
HURST = [0.4, 0.45, 0.5]
RUNTIME_BUDGET = 900.0
_clock = {}


@pytest.fixture(autouse=True, scope="module")
def _start_clock():
    _clock.setdefault("start", time.perf_counter())


def _driver(kind, d, n):
    return make_driver(kind, d, n, seed=named_seed(0, "driver"))


def _rounding(scale):
    return 8 * np.finfo(float).eps * max(1.0, scale)


# -------------------------------------------------------------- rough core

@pytest.mark.criterion(1)
@pytest.mark.parametrize("H", HURST)
def test_second_difference_of_increment_vanishes(H):
    rp = lift_fbm(H, 1, 64, seed=named_seed(0, "driver"))
    f = np.sin(3 * rp.zeta[:, 0]) + rp.grid.t ** 2
    out = delta2(delta1(f, rp.grid)).values
    assert np.max(np.abs(out)) <= _rounding(np.max(np.abs(f)))


def _identity_residuals(rp):
    n = rp.grid.n
    i, j = np.triu_indices(n + 1)
    a = rp.area_between(i, j)
    dz = rp.zeta[j] - rp.zeta[i]
    sym = np.max(np.abs(a + np.swapaxes(a, 1, 2) - np.einsum("ki,kj->kij", dz, dz)))
    s, u, t = np.array([(p, q, r) for p in range(0, n + 1, 3) for q in range(p, n + 1, 2)
                        for r in range(q, n + 1, 3)]).T
    lhs = rp.area_between(s, t)
    rhs = (rp.area_between(s, u) + rp.area_between(u, t)
           + np.einsum("ki,kj->kij", rp.zeta[u] - rp.zeta[s], rp.zeta[t] - rp.zeta[u]))
    return sym, np.max(np.abs(lhs - rhs)), np.max(np.abs(a))


@pytest.mark.criterion(1)
@pytest.mark.parametrize("kind,d", [("fbm", 1), ("fbm", 2), ("fbm", 3), ("smooth", 2), ("smooth", 3)])
def test_geometric_symmetry_and_chen_identity(kind, d):
    rp = _driver(kind, d, 64)
    sym, chen, scale = _identity_residuals(rp)
    assert sym <= _rounding(scale)
    assert chen <= _rounding(scale)


@pytest.mark.criterion(1)
@pytest.mark.parametrize("H", HURST)
def test_sewing_cauchy_slope(H):
    rp = lift_fbm(H, 2, 4096, seed=named_seed(0, "driver"))
    z = rp.zeta

    def germ(i, j):
        a = rp.area_between(i, j)
        return np.sin(z[i, 0]) * (z[j, 1] - z[i, 1]) + np.cos(z[i, 0]) * a[:, 0, 1]

    rep = sewing_refinement(germ, rp.grid, 0.0, 1.0, 6)
    assert rep.slope >= 3 * rp.alpha - 1 - 0.15


def _ddt(f, t, eps=1e-6):
    return (f(np.array([t + eps])) - f(np.array([t - eps])))[0] / (2 * eps)


@pytest.mark.criterion(1)
def test_smooth_rough_integrals_match_quadrature():
    f = smooth_signal(2)
    rp = make_driver("smooth", 2, 4096)
    z = ControlledPath.from_driver(rp)
    mu = compose_smooth(lambda t, x: np.array([np.sin(x[0])]), lambda t, x: np.array([[np.cos(x[0]), 0.0]]), z)
    pair = rough_integral_pair(mu, z, None, rp)
    for j in range(2):
        exact = quad(lambda t: np.sin(f(np.array([t]))[0, 0]) * _ddt(f, t)[j], 0, 1, limit=200, epsabs=1e-14)[0]
        assert abs(pair.z[-1, j] - exact) <= 1e-6
    N = rp.grid.n + 1
    cross = ControlledPath(rp.grid, np.column_stack([np.zeros(N), rp.zeta[:, 0]]),
                           np.broadcast_to(np.array([[0.0, 0.0], [1.0, 0.0]]), (N, 2, 2)))
    mixed = rough_integral_mixed(cross, None, rp)
    exact = quad(lambda t: f(np.array([t]))[0, 0] * _ddt(f, t)[1], 0, 1, limit=200, epsabs=1e-14)[0]
    assert abs(mixed.z[-1, 0] - exact) <= 1e-6


# ---------------------------------------------------------------------- RDE

@pytest.mark.criterion(2)
@pytest.mark.parametrize("H", HURST)
@pytest.mark.parametrize("name", CATALOG)
def test_self_convergence_slope(name, H):
    prob = make_problem(name)
    fine = make_driver("fbm", prob.spec.d, 2048, H=H, seed=named_seed(0, "driver"))
    vals, meshes = [], []
    for f in (1, 2, 4, 8, 16, 32):
        rp = fine.coarsen(f)
        vals.append(integrate_rde(prob.spec, prob.y0, 0.0, prob.optimal(rp), rp).terminal)
        meshes.append(rp.grid.mesh)
    errs = np.linalg.norm(np.array(vals[1:]) - vals[0], axis=1)
    if errs.max() < 1e-12:
        return  # the scheme reproduces this solution exactly
    assert loglog_slope(np.array(meshes[1:]), errs) >= min(1.0, 3 * fine.alpha - 1) - 0.15


def _exponential_rde(c):
    """dx = c x dζ, whose solution is x_0 exp(c ζ_t)."""
    return ProblemSpec(m=1, d=1, T=1.0, actions=ActionGrid.uniform(0.0, 1.0, 2),
                       b=lambda t, x, u: np.zeros((np.size(u), 1)), Db=lambda t, x, u: np.zeros((np.size(u), 1, 1)),
                       sigma=lambda t, x: np.array([[c * x[0]]]), Dsigma=lambda t, x: np.full((1, 1, 1), c),
                       D2sigma=lambda t, x: np.zeros((1, 1, 1, 1)),
                       G=lambda x: 0.0, DG=lambda x: np.zeros(1))


@pytest.mark.criterion(2)
@pytest.mark.parametrize("c", [0.5, 1.0, -1.5])
def test_exponential_rde_closed_form(c):
    spec = _exponential_rde(c)
    rp = lift_smooth(lambda t: np.sin(3 * t) + t, TimeGrid.uniform(1.0, 2 ** 12))
    g = RelaxedControl.constant(rp.grid, DiscreteMeasure.uniform(spec.actions))
    traj = integrate_rde(spec, [0.8], 0.0, g, rp)
    exact = 0.8 * np.exp(c * rp.zeta[:, 0])
    assert np.max(np.abs(traj.x[:, 0] - exact) / exact) <= 1e-4


@pytest.mark.criterion(2)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_jacobian_matches_finite_differences(name, kind):
    prob = make_problem(name)
    spec, h = prob.spec, 1e-5
    rp = _driver(kind, spec.d, 1024)
    g = prob.suboptimal(rp)
    traj = integrate_rde(spec, prob.y0, 0.0, g, rp)
    for e in np.eye(spec.m):
        V = jacobian(spec, traj, g, rp, 0.0, e)
        fd = (integrate_rde(spec, prob.y0 + h * e, 0.0, g, rp).x
              - integrate_rde(spec, prob.y0 - h * e, 0.0, g, rp).x) / (2 * h)
        assert np.max(np.abs(V - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))


@pytest.mark.criterion(2)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_noise_flow_inverse(name, kind):
    prob = make_problem(name)
    rp = _driver(kind, prob.spec.d, 512)
    flow = noise_flow(prob.spec, rp)
    rng = np.random.default_rng(named_seed(0, "acceptance-points"))
    for t in (0.125, 0.5, 1.0):
        for _ in range(4):
            eta = prob.y0 + rng.normal(size=prob.spec.m)
            assert np.linalg.norm(flow.chi(t, flow.phi(t, eta)) - eta) <= 1e-8


# --------------------------------------------------------------- Pontryagin

@pytest.mark.criterion(3)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_residual_vanishes_at_optimal_pair(name, kind):
    prob = make_problem(name)
    rp = _driver(kind, prob.spec.d, 1024)
    assert pmp_check(prob.spec, prob.optimal(rp), rp, prob.y0).max <= 1e-8


@pytest.mark.criterion(3)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_residual_flags_suboptimal_control(name, kind):
    prob = make_problem(name)
    rp = _driver(kind, prob.spec.d, 1024)
    assert pmp_check(prob.spec, prob.suboptimal(rp), rp, prob.y0).max >= 0.5


@pytest.mark.criterion(3)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_spike_sweeps(name, kind):
    prob = make_problem(name)
    spec = prob.spec
    rp = _driver(kind, spec.d, 1024)
    gamma = prob.optimal(rp)
    mu = DiscreteMeasure.dirac(spec.actions, spec.actions.u[7])
    # O(β): halving β halves the state gap
    assert state_gap_sweep(spec, 0.3, mu, gamma, rp, prob.y0).within(2.0, 0.2)
    # o(β): the remainders shrink faster than β
    assert approx_derivative_check(spec, 0.3, mu, gamma, rp, prob.y0).decreasing(1.5)
    assert taylor_reward_check(spec, 0.3, mu, gamma, rp, prob.y0).decreasing(1.5)


@pytest.mark.criterion(3)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_duality_cancellation(name, kind):
    prob = make_problem(name)
    spec = prob.spec
    rp = _driver(kind, spec.d, 1024)
    gamma = prob.optimal(rp)
    xbar = integrate_rde(spec, prob.y0, 0.0, gamma, rp)
    mu = DiscreteMeasure.dirac(spec.actions, spec.actions.u[7])
    for t0, beta in ((0.25, 0.125), (0.5, 0.0625)):
        rep = duality_check(spec, SpikeConfig(t0, beta, mu), xbar, gamma, rp)
        assert rep.exact_gap <= 1e-12 * max(1.0, abs(rep.direct))
        assert rep.left_gap <= rep.bound + 1e-13


# --------------------------------------------------------------- q-function

Q_CELLS = [(t0, j) for t0 in (0.125, 0.375, 0.625, 0.875) for j in (0, -1)]


@pytest.mark.criterion(4)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_q_estimates_agree(name, kind):
    prob = make_problem(name)
    spec = prob.spec
    rp = _driver(kind, spec.d, 1024)
    gamma = prob.suboptimal(rp)
    traj = integrate_rde(spec, prob.y0, 0.0, gamma, rp)
    assert len(Q_CELLS) == 8
    for t0, j in Q_CELLS:
        k = rp.grid.index(t0)
        mu = DiscreteMeasure.dirac(spec.actions, spec.actions.u[j])
        ev = evaluate_q(spec, t0, traj.x[k], mu, gamma, rp)
        assert np.all(np.isfinite(ev.estimates))
        assert ev.spread <= max(1e-3, 5 * ev.scheme_error), (t0, j, ev.estimates, ev.scheme_error)


@pytest.mark.criterion(4)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_q_of_unperturbed_measure_is_zero(name, kind):
    prob = make_problem(name)
    spec = prob.spec
    rp = _driver(kind, spec.d, 1024)
    for gamma in (prob.optimal(rp), prob.suboptimal(rp)):
        traj = integrate_rde(spec, prob.y0, 0.0, gamma, rp)
        for t0 in (0.25, 0.75):
            k = rp.grid.index(t0)
            ev = evaluate_q(spec, t0, traj.x[k], gamma.measure(k), gamma, rp)
            assert np.max(np.abs(ev.estimates)) <= 1e-10


# -------------------------------------------------------------------- Gibbs

def _entropy_objective(P, h, lam, du):
    ent = -np.sum(np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0) / du), 0.0), axis=1)
    return P @ h + lam * ent


@pytest.mark.criterion(5)
def test_gibbs_beats_random_candidates():
    rng = np.random.default_rng(named_seed(0, "gibbs-draws"))
    acts = ActionGrid.uniform(-1.0, 2.0, 16)
    for _ in range(100):
        h = rng.normal(scale=2.0, size=acts.J)
        lam = float(rng.uniform(0.1, 3.0))
        m, val = gibbs_optimizer(h, lam, acts)
        P = rng.dirichlet(np.full(acts.J, rng.choice([0.2, 1.0, 5.0])), size=10 ** 4)
        objs = _entropy_objective(P, h, lam, acts.du)
        assert np.all(objs < val)
        assert _entropy_objective(m.p[None], h, lam, acts.du)[0] == pytest.approx(val, abs=1e-10)


@pytest.mark.criterion(5)
def test_gibbs_value_identity():
    rng = np.random.default_rng(named_seed(0, "gibbs-identity"))
    for _ in range(100):
        J = int(rng.integers(3, 60))
        acts = ActionGrid.uniform(float(rng.uniform(-2, 0)), float(rng.uniform(0.5, 3)), J)
        h, lam = rng.normal(scale=3.0, size=J), float(rng.uniform(0.05, 5.0))
        m, val = gibbs_optimizer(h, lam, acts)
        assert abs(val - lam * logsumexp(h / lam, b=acts.du)) <= 1e-8
        assert abs(gibbs_objective(m, h, lam) - val) <= 1e-8


@pytest.mark.criterion(5)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_q_policy_identity_at_converged_policy(name, kind):
    prob = make_problem(name, lam=1.0)
    rp = _driver(kind, prob.spec.d, 1024)
    ol = open_loop_policy(prob.spec, prob.y0, rp, tol=1e-8)
    assert ol.converged
    rep = q_policy_identity_check(prob.spec, ol.gamma, rp, prob.y0)
    assert rep.normalization_gap <= 1e-6
    assert rep.density_gap <= 1e-3


# -------------------------------------------------------- policy improvement

@pytest.mark.criterion(6)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_policy_iteration_from_random_starts(name, kind):
    prob = make_problem(name, lam=1.0)
    spec = prob.spec
    rp = _driver(kind, spec.d, 1024)
    target = open_loop_policy(spec, prob.y0, rp, tol=1e-8).value
    for child in named_seed(0, "policy-init").spawn(10):
        # tol=inf records every step so the check below sees the raw dips
        seq = policy_iteration(spec, random_policy(spec.actions, rp.grid, child), rp, prob.y0, iters=20,
                               tol=np.inf)
        vals = np.array([it.value for it in seq])
        assert np.all(np.diff(vals) >= -1e-6), np.diff(vals).min()
        assert abs(vals[-1] - target) <= 1e-4


# -------------------------------------------------------------- determinism

def _fingerprints(name, kind):
    """Raw bytes of one result from every layer, driver to policy iteration."""
    prob = make_problem(name, lam=1.0)
    spec = prob.spec
    rp = _driver(kind, spec.d, 256)
    gamma = random_policy(spec.actions, rp.grid, named_seed(0, "policy-init"))
    traj = integrate_rde(spec, prob.y0, 0.0, gamma, rp)
    plain = make_problem(name)
    rep = pmp_check(plain.spec, plain.suboptimal(rp), rp, plain.y0)
    mu = DiscreteMeasure.dirac(spec.actions, spec.actions.u[3])
    ev = evaluate_q(spec, 0.5, traj.x[rp.grid.index(0.5)], mu, gamma, rp)
    seq = policy_iteration(spec, gamma, rp, prob.y0, iters=3, tol=np.inf)
    return [rp.zeta.tobytes(), rp.area.tobytes(), traj.x.tobytes(), np.asarray(rep.residual).tobytes(),
            ev.estimates.tobytes(), seq[-1].gamma.P.tobytes(), np.array([it.value for it in seq]).tobytes()]


@pytest.mark.criterion(7)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("name", CATALOG)
def test_library_results_bit_reproducible(name, kind):
    assert _fingerprints(name, kind) == _fingerprints(name, kind)


@pytest.mark.criterion(7)
@pytest.mark.parametrize("command", ["simulate", "pontryagin", "qfunc", "improve"])
def test_cli_outputs_bit_reproducible(tmp_path, monkeypatch, command):
    monkeypatch.delenv("ROUGHCTRL_OUT", raising=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"problem": "sine-drift", "grid": 256, "seed": 7}), encoding="utf-8")
    for name in ("a", "b"):
        t = time.perf_counter()
        assert run([command, "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        assert time.perf_counter() - t <= 60.0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.name for p in a.iterdir())
    assert files and files == sorted(p.name for p in b.iterdir())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


@pytest.mark.criterion(7)
def test_root_seed_changes_driver_streams():
    a = make_driver("fbm", 2, 128, seed=named_seed(0, "driver"))
    b = make_driver("fbm", 2, 128, seed=named_seed(1, "driver"))
    assert not np.array_equal(a.zeta, b.zeta)
    # the policy stream is independent of the driver stream under the same root
    P = random_policy(ActionGrid.uniform(0.0, 1.0, 5), a.grid, named_seed(0, "policy-init")).P
    Q = random_policy(ActionGrid.uniform(0.0, 1.0, 5), a.grid, named_seed(0, "driver")).P
    assert not np.array_equal(P, Q)


@pytest.mark.criterion(7)
def test_acceptance_runtime_within_budget():
    # keep this test last in the module: it times everything above it
    elapsed = time.perf_counter() - _clock["start"]
    print(f"acceptance wall time {elapsed:.1f} s")
    assert elapsed <= RUNTIME_BUDGET
