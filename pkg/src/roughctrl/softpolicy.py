"""Entropy-regularized rewards, Gibbs policies and policy improvement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import NoiseFlow, Trajectory, adjoint, integrate_rde, reward_of
from .errors import InvalidInput, MonotonicityError
from .measures import ActionGrid, DiscreteMeasure, RelaxedControl, entropy_weights, wasserstein2_rows
from .pontryagin import hamiltonian
from .problem import EntropicSpec, ProblemSpec
from .qfunction import q_table
from .rough import RoughPath

__all__ = ["EntropicSpec", "entropic_F", "gibbs_optimizer", "gibbs_objective", "feedback_policy",
           "open_loop_policy", "random_policy", "q_policy_identity_check", "improve", "policy_iteration", "hat_hamiltonian"]

DENSITY_FLOOR = 1e-8


def _entropic(spec: ProblemSpec) -> EntropicSpec:
    if spec.entropic is None:
        raise InvalidInput("this operation needs an entropy-regularized problem")
    return spec.entropic


def entropic_F(espec: EntropicSpec, t, x, m: DiscreteMeasure) -> float:
    """∫R dm + λ·entropy(m)."""
    return float(m.p @ espec.R(t, x, m.grid.u) + espec.lam * entropy_weights(m.p, m.grid.du))


def gibbs_optimizer(h, lam: float, actions: ActionGrid) -> tuple[DiscreteMeasure, float]:
    """Maximizer of ∫h dm + λ·entropy(m) and the optimal value λ log ∫exp(h/λ) da."""
    if not lam > 0:
        raise InvalidInput("temperature must be positive")
    h = np.asarray(h, dtype=float)
    top = h.max()
    w = np.exp((h - top) / lam) * actions.du
    Z = w.sum()
    return DiscreteMeasure(w / Z, actions), float(top + lam * np.log(Z))


def gibbs_objective(m: DiscreteMeasure, h, lam: float) -> float:
    return float(m.p @ np.asarray(h, dtype=float) + lam * entropy_weights(m.p, m.grid.du))


def _htilde(spec: ProblemSpec, t, y, p) -> np.ndarray:
    """H̃(t, y, a, p) = p·b(t, y, a) + R(t, y, a) on the action grid."""
    e = _entropic(spec)
    return spec.drift_table(t, y) @ np.asarray(p, dtype=float) + np.asarray(e.R(t, y, spec.actions.u), dtype=float)


def feedback_policy(spec: ProblemSpec, t, y, p) -> DiscreteMeasure:
    """Gibbs measure with exponent H̃(t, y, a, p)/λ."""
    return gibbs_optimizer(_htilde(spec, t, y, p), _entropic(spec).lam, spec.actions)[0]


def _gibbs_along(spec: ProblemSpec, gamma: RelaxedControl, rp: RoughPath, y0):
    """Gibbs update at every node along the γ-trajectory, with p = ∇J along it."""
    traj = integrate_rde(spec, y0, 0.0, gamma, rp)
    p = adjoint(spec, traj, gamma, rp).p
    t = rp.grid.t
    P = np.array([feedback_policy(spec, t[k], traj.x[k], p[k]).p for k in range(rp.grid.n + 1)])
    return traj, p, P


def random_policy(actions: ActionGrid, grid, seed) -> RelaxedControl:
    """Independent flat-Dirichlet weights at every node."""
    P = np.random.default_rng(seed).dirichlet(np.ones(actions.J), size=grid.n + 1)
    return RelaxedControl(grid, actions, P / P.sum(axis=1, keepdims=True))


def max_w2(g1: RelaxedControl, g2: RelaxedControl) -> float:
    return float(wasserstein2_rows(g1.P, g2.P, g1.actions.u).max())


@dataclass(frozen=True)
class OpenLoopResult:
    gamma: RelaxedControl
    value: float
    converged: bool
    iterations: int
    gaps: np.ndarray  # sup_t W2 between successive iterates


def open_loop_policy(spec: ProblemSpec, y0, rp: RoughPath, gamma0: RelaxedControl | None = None,
                     max_iter: int = 200, tol: float = 1e-6) -> OpenLoopResult:
    """Self-consistent Gibbs control: γ_t ∝ exp(H̃(t, x^γ_t, ·, ∇J_{t,T}(x^γ_t; γ))/λ)."""
    _entropic(spec)
    g = gamma0 or RelaxedControl.constant(rp.grid, DiscreteMeasure.uniform(spec.actions))
    gaps = []
    for it in range(1, max_iter + 1):
        _, _, P = _gibbs_along(spec, g, rp, y0)
        new = RelaxedControl(rp.grid, spec.actions, P)
        gaps.append(max_w2(g, new))
        g = new
        if gaps[-1] <= tol:
            break
    traj = integrate_rde(spec, y0, 0.0, g, rp)
    return OpenLoopResult(g, reward_of(spec, traj, g, rp), gaps[-1] <= tol, it, np.array(gaps))


@dataclass(frozen=True)
class IdentityReport:
    normalization_gap: float  # max_t |∫exp(q/λ) da - 1|
    density_gap: float  # max_t sup_a |exp(q/λ) - γ̇*|
    q: np.ndarray  # (N, J)


def q_policy_identity_check(spec: ProblemSpec, gamma_star: RelaxedControl, rp: RoughPath, y0) -> IdentityReport:
    """Compare γ̇* with exp(q(t, x_t, a; γ*)/λ), q taken on Diracs with zero entropy."""
    lam = _entropic(spec).lam
    q = q_table(spec, gamma_star, rp, y0)
    e = np.exp(q / lam)
    norm = np.abs(e @ spec.actions.du - 1.0)
    dens = np.abs(e - gamma_star.P / spec.actions.du)
    return IdentityReport(float(norm.max()), float(dens.max()), q)


@dataclass(frozen=True)
class PolicyIterate:
    gamma: RelaxedControl
    value: float
    q_table: np.ndarray  # q(t, a; γ) along the γ-trajectory; NaN for the new iterate until evaluated
    w2_step: float  # sup_t W2 from the previous iterate (0 for the start)
    traj: Trajectory | None = None

    @property
    def entropy_mean(self) -> float:
        return float(np.mean(entropy_weights(self.gamma.P, self.gamma.actions.du)))


def improve(spec: ProblemSpec, gamma: RelaxedControl, rp: RoughPath, y0,
            traj: Trajectory | None = None) -> tuple[PolicyIterate, np.ndarray]:
    """γ⁺ ∝ exp(q(t, x^γ_t, ·; γ)/λ) per node, floored at DENSITY_FLOOR and renormalized.

    Returns the new iterate and the q table of γ that produced it.
    """
    lam = _entropic(spec).lam
    q = q_table(spec, gamma, rp, y0, traj=traj)
    du = spec.actions.du
    shift = q.max(axis=1, keepdims=True)
    dens = np.exp((q - shift) / lam)
    dens /= (dens * du).sum(axis=1, keepdims=True)
    dens = np.maximum(dens, DENSITY_FLOOR)
    w = dens * du
    new = RelaxedControl(rp.grid, spec.actions, w / w.sum(axis=1, keepdims=True))
    new_traj = integrate_rde(spec, y0, 0.0, new, rp)
    value = reward_of(spec, new_traj, new, rp)
    return PolicyIterate(new, value, np.full_like(q, np.nan), max_w2(gamma, new), new_traj), q


def policy_iteration(spec: ProblemSpec, gamma0: RelaxedControl, rp: RoughPath, y0, iters: int = 20,
                     tol: float = 1e-6, stop: float = 1e-8) -> list[PolicyIterate]:
    """Repeated improvement; raises MonotonicityError if a value drops by more than ``tol``.

    Stops once a step moves no measure by more than ``stop`` in W2; measures
    that differ only by rounding are about sqrt(eps) = 1e-8 apart in W2.
    """
    if iters < 1:
        raise InvalidInput("need at least one iteration")
    traj = integrate_rde(spec, y0, 0.0, gamma0, rp)
    value = reward_of(spec, traj, gamma0, rp)
    seq = [PolicyIterate(gamma0, value, np.full((rp.grid.n + 1, spec.actions.J), np.nan), 0.0, traj)]
    for i in range(iters):
        cur = seq[-1]
        nxt, q = improve(spec, cur.gamma, rp, y0, traj=cur.traj)
        seq[-1] = PolicyIterate(cur.gamma, cur.value, q, cur.w2_step, cur.traj)
        if nxt.value < seq[-1].value - tol:
            raise MonotonicityError(f"value dropped from {seq[-1].value:.12g} to {nxt.value:.12g} "
                                    f"at iteration {i + 1}", i + 1, [it.value for it in seq] + [nxt.value])
        seq.append(nxt)
        if nxt.w2_step <= stop:
            break
    return seq


def hat_hamiltonian(spec: ProblemSpec, flow: NoiseFlow, t, y, m, p) -> float:
    """H(t, φ_t(y), m, p·∇χ_t(φ_t(y))): the Hamiltonian seen through the noise flow."""
    x = flow.phi(t, y)
    q = np.asarray(p, dtype=float) @ flow.inverse_jacobian(t, y)
    return hamiltonian(spec, flow.rp.grid.t[flow._node(t)], x, m, q)
