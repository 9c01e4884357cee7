"""The perturbation reward Q_β and the q-function in four equivalent forms.

All forms are evaluated at a grid node t0 with the control read at that
node. ``q_limit`` and ``q_derivative`` differentiate the discrete scheme
itself; ``q_hamiltonian`` and ``q_drift`` pair the drift gap with ∇J at
(t0, y). The two families agree up to first order in the mesh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controlled import ControlledPath, time_derivative
from .dynamics import (Trajectory, adjoint, grad_value, integrate_linear_rde, integrate_rde, linearize,
                       reward, running_gradients)
from .errors import InvalidInput
from .measures import DiscreteMeasure, RelaxedControl, SpikeConfig
from .pontryagin import hamiltonian
from .problem import ProblemSpec
from .rough import RoughPath

LIMIT_LEVELS = 6


def _weights(m):
    return m.p if isinstance(m, DiscreteMeasure) else np.asarray(m, dtype=float)


def q_beta(spec: ProblemSpec, t0: float, y, mu: DiscreteMeasure, gamma: RelaxedControl, beta: float,
           rp: RoughPath) -> float:
    """Reward from (t0, y) with the control replaced by μ on [t0, t0 + β)."""
    spike = SpikeConfig(t0, beta, mu) if beta > 0 else None
    return reward(spec, y, t0, gamma, rp, spike=spike)


@dataclass(frozen=True)
class LimitEstimate:
    value: float
    residual: float  # gap between the last two extrapolants
    quotients: np.ndarray  # (Q_β - J)/β over the sweep
    converged: bool


def _richardson(h, f):
    """Neville extrapolation of f(h) to h = 0; returns the diagonal of the tableau."""
    T = [np.asarray(f, dtype=float)]
    for j in range(1, len(h)):
        prev = T[-1]
        T.append((h[:-j] * prev[1:] - h[j:] * prev[:-1]) / (h[:-j] - h[j:]))
    return np.array([row[-1] for row in T])


def q_limit(spec: ProblemSpec, t0: float, y, mu: DiscreteMeasure, gamma: RelaxedControl, rp: RoughPath,
            betas=None, tol: float = 1e-3) -> LimitEstimate:
    """Extrapolated limit of (Q_β - J)/β as β → 0.

    The default sweep is β = Δt/2^i, i = 0..5, inside the first step, where
    Q_β is a smooth function of the covered fraction.
    """
    k0 = rp.grid.index(t0)
    if k0 >= rp.grid.n:
        raise InvalidInput("no step left after t0")
    if betas is None:
        betas = rp.grid.dt[k0] / 2.0 ** np.arange(LIMIT_LEVELS)
    betas = np.asarray(betas, dtype=float)
    if betas.size < 4:
        raise InvalidInput("the limit sweep needs at least four β values")
    J = reward(spec, y, t0, gamma, rp)
    quot = np.array([(q_beta(spec, t0, y, mu, gamma, b, rp) - J) / b for b in betas])
    diag = _richardson(betas, quot)
    res = float(abs(diag[-1] - diag[-2]))
    return LimitEstimate(float(diag[-1]), res, quot, res <= tol * max(1.0, abs(diag[-1])))


def _start(spec, t0, y, gamma, rp):
    k0 = rp.grid.index(t0)
    traj = integrate_rde(spec, y, t0, gamma, rp)
    return k0, traj


def q_derivative(spec: ProblemSpec, t0: float, y, mu: DiscreteMeasure, gamma: RelaxedControl,
                 rp: RoughPath) -> float:
    """F(μ) - F(γ_t0) + Σ DF·V̂ Δt + DG·V̂_T with V̂ = J_{·←t0+} g⁰."""
    k0, traj = _start(spec, t0, y, gamma, rp)
    grid = rp.grid
    if k0 >= grid.n:
        raise InvalidInput("no step left after t0")
    y0 = traj.x[k0]
    pk = gamma.P[k0]
    g0 = spec.bbar(grid.t[k0], y0, _weights(mu)) - spec.bbar(grid.t[k0], y0, pk)
    lin = linearize(spec, traj, gamma, rp)
    V = integrate_linear_rde(lin.steps(), None, lin.push(k0, g0), rp, k0=k0 + 1)
    dF = running_gradients(spec, traj, gamma, rp)
    run = float(np.sum(dF[k0 + 1:] * V[k0 + 1:-1]))
    term = float(np.asarray(spec.DG(traj.terminal), dtype=float).reshape(spec.m) @ V[-1])
    Fgap = spec.reward_rate(grid.t[k0], y0, _weights(mu)) - spec.reward_rate(grid.t[k0], y0, pk)
    return float(Fgap + run + term)


def q_hamiltonian(spec: ProblemSpec, t0: float, y, mu: DiscreteMeasure, gamma: RelaxedControl,
                  rp: RoughPath, grad=None) -> float:
    """H(t, y, μ, ∇J) - H(t, y, γ_t, ∇J)."""
    k0 = rp.grid.index(t0)
    g = grad_value(spec, y, t0, gamma, rp) if grad is None else grad
    return hamiltonian(spec, t0, y, _weights(mu), g) - hamiltonian(spec, t0, y, gamma.P[k0], g)


@dataclass(frozen=True)
class DriftForm:
    analytic: float  # with J̇ = -F(t, y, γ_t)
    numeric: float  # with J̇ identified from t ↦ J_{t,T}(x_t)
    jdot_analytic: float
    jdot_numeric: float


def value_path(spec: ProblemSpec, t0: float, y, gamma: RelaxedControl, rp: RoughPath) -> np.ndarray:
    """J_{t_k,T}(x_k) along the trajectory from (t0, y), constant before t0."""
    k0, traj = _start(spec, t0, y, gamma, rp)
    grid = rp.grid
    rates = np.zeros(grid.n)
    for k in range(k0, grid.n):
        rates[k] = spec.reward_rate(grid.t[k], traj.x[k], gamma.P[k]) * grid.dt[k]
    tail = np.concatenate([np.cumsum(rates[::-1])[::-1], [0.0]]) + spec.G(traj.terminal)
    tail[:k0] = tail[k0]
    return tail


def q_drift(spec: ProblemSpec, t0: float, y, mu: DiscreteMeasure, gamma: RelaxedControl, rp: RoughPath,
            grad=None) -> DriftForm:
    """J̇ + H(t, y, μ, ∇J) - ∇J·∫b dγ_t, with J̇ taken two ways."""
    k0 = rp.grid.index(t0)
    g = grad_value(spec, y, t0, gamma, rp) if grad is None else grad
    pk = gamma.P[k0]
    rest = hamiltonian(spec, t0, y, _weights(mu), g) - float(g @ spec.bbar(t0, np.asarray(y, float), pk))
    jdot_a = -spec.reward_rate(t0, np.asarray(y, float), pk)
    v = value_path(spec, t0, y, gamma, rp)[:, None]
    N, d = v.shape[0], rp.d
    z = ControlledPath(rp.grid, v, np.zeros((N, 1, d)), np.zeros((N, 1, d, d)))
    jdot_n = float(time_derivative(z, rp)[k0, 0])
    return DriftForm(jdot_a + rest, jdot_n + rest, jdot_a, jdot_n)


# ------------------------------------------------------------ evaluation

@dataclass(frozen=True)
class QEvaluation:
    t0: float
    y: np.ndarray
    mu: np.ndarray
    q_limit: float
    q_derivative: float
    q_hamiltonian: float
    q_drift: float
    q_drift_numeric: float
    limit_residual: float
    scheme_error: float  # first-order change of the estimates when the mesh is doubled
    right_continuous: bool  # γ constant across t0; the limit assumes it

    @property
    def estimates(self) -> np.ndarray:
        return np.array([self.q_limit, self.q_derivative, self.q_hamiltonian, self.q_drift])

    @property
    def spread(self) -> float:
        e = self.estimates
        return float(e.max() - e.min())


def _coarse(gamma: RelaxedControl, rp: RoughPath):
    rc = rp.coarsen(2)
    return rc, RelaxedControl(rc.grid, gamma.actions, gamma.P[::2])


def evaluate_q(spec: ProblemSpec, t0: float, y, mu: DiscreteMeasure, gamma: RelaxedControl,
               rp: RoughPath, with_scheme_error: bool = True) -> QEvaluation:
    k0 = rp.grid.index(t0)
    grad = grad_value(spec, y, t0, gamma, rp)
    lim = q_limit(spec, t0, y, mu, gamma, rp)
    qd = q_derivative(spec, t0, y, mu, gamma, rp)
    qh = q_hamiltonian(spec, t0, y, mu, gamma, rp, grad)
    dr = q_drift(spec, t0, y, mu, gamma, rp, grad)
    err = np.nan
    if with_scheme_error and k0 % 2 == 0 and rp.grid.n % 2 == 0:
        rc, gc = _coarse(gamma, rp)
        err = max(abs(q_derivative(spec, t0, y, mu, gc, rc) - qd),
                  abs(q_hamiltonian(spec, t0, y, mu, gc, rc) - qh))
    cont = bool(k0 + 1 > rp.grid.n or np.array_equal(gamma.P[k0], gamma.P[min(k0 + 1, rp.grid.n)]))
    return QEvaluation(float(t0), np.asarray(y, dtype=float), _weights(mu).copy(), lim.value, qd, qh,
                       dr.analytic, dr.numeric, lim.residual, float(err), cont)


def q_table(spec: ProblemSpec, gamma: RelaxedControl, rp: RoughPath, y0, nodes=None,
            traj: Trajectory | None = None) -> np.ndarray:
    """q(t_k, x_k, δ_a; γ) along the γ-trajectory for every node and action, shape (N, J).

    One adjoint sweep gives ∇J at every node (p_k = ∇_x J_{t_k,T}(x_k)), so
    the table costs a single forward and backward pass. Diracs carry the
    zero-entropy convention.
    """
    traj = traj or integrate_rde(spec, y0, 0.0, gamma, rp)
    p = adjoint(spec, traj, gamma, rp).p
    grid = rp.grid
    nodes = range(grid.n + 1) if nodes is None else nodes
    out = np.full((grid.n + 1, spec.actions.J), np.nan)
    for k in nodes:
        t, x = grid.t[k], traj.x[k]
        drift = spec.drift_table(t, x) @ p[k]
        out[k] = drift + spec.dirac_rate(t, x) - (gamma.P[k] @ drift + spec.reward_rate(t, x, gamma.P[k]))
    return out

