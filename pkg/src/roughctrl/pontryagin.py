"""Spike variations, their derivative processes and the maximum-principle residual.

A spike replaces the control by a fixed measure μ on [t0, t0 + β). When
t0 + β falls inside a step the drift of that step is mixed with the
covered fraction, so every quantity here is a smooth function of β and the
derivative processes are exact derivatives of the discrete scheme.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (Linearization, Trajectory, adjoint, integrate_linear_rde, integrate_rde,
                       linearize, reward, reward_of, running_gradients)
from .errors import InvalidInput
from .measures import DiscreteMeasure, RelaxedControl, SpikeConfig, spike_weights
from .problem import ProblemSpec
from .rough import RoughPath, TimeGrid


def dyadic_betas(T: float, first: int = 3, last: int = 8) -> np.ndarray:
    """β = T/2^first, ..., T/2^last."""
    return T / 2.0 ** np.arange(first, last + 1)


def snap_t0(grid: TimeGrid, t0: float) -> tuple[float, bool]:
    """Grid node at or below t0, and whether snapping moved it."""
    s = float(grid.t[grid.floor_index(t0)])
    return s, abs(s - t0) > 1e-12 * max(1.0, grid.T)


def hamiltonian(spec: ProblemSpec, t, y, m, p) -> float:
    """H = p·∫b dm + F(t, y, m)."""
    w = m.p if isinstance(m, DiscreteMeasure) else np.asarray(m, dtype=float)
    y = np.asarray(y, dtype=float).reshape(spec.m)
    return float(np.asarray(p, dtype=float) @ spec.bbar(t, y, w) + spec.reward_rate(t, y, w))


def _end_step(grid: TimeGrid, cfg: SpikeConfig) -> int:
    """Step whose covered fraction moves when β grows (the step containing t0 + β)."""
    e = cfg.t0 + cfg.beta
    if e >= grid.T - 1e-12 * max(1.0, grid.T):
        return grid.n
    return grid.floor_index(e)


def _gap(spec, t, x, mu, pk):
    return spec.bbar(t, x, mu.p) - spec.bbar(t, x, pk)


# ------------------------------------------------------------- derivatives

def spike_state(spec: ProblemSpec, cfg: SpikeConfig, gamma: RelaxedControl, rp: RoughPath, y) -> Trajectory:
    """State under the spiked control; identical steps up to t0."""
    return integrate_rde(spec, y, 0.0, gamma, rp, spike=cfg)


def spike_derivative(spec: ProblemSpec, cfg: SpikeConfig, gamma: RelaxedControl, rp: RoughPath,
                     base: Trajectory | None = None, y=None) -> np.ndarray:
    """V^β = ∂_β x^β: zero up to the step containing t0 + β, then the
    drift gap g^β at its right end, propagated by the linearized flow."""
    if base is None:
        if y is None:
            raise InvalidInput("need the spiked trajectory or the initial state")
        base = spike_state(spec, cfg, gamma, rp, y)
    grid = rp.grid
    V = np.zeros((grid.n + 1, spec.m))
    ke = _end_step(grid, cfg)
    if ke >= grid.n:
        return V
    g = _gap(spec, grid.t[ke], base.x[ke], cfg.mu, gamma.P[ke])
    lin = linearize(spec, base, gamma, rp, cfg)
    V[ke + 1:] = integrate_linear_rde(lin.steps(), None, lin.push(ke, g), rp, k0=ke + 1)[ke + 1:]
    return V


def _bar_lin(spec, xbar, gammabar, rp, lin):
    return lin or linearize(spec, xbar, gammabar, rp)


def drift_gaps(spec: ProblemSpec, cfg: SpikeConfig, xbar: Trajectory, gammabar: RelaxedControl,
               rp: RoughPath) -> np.ndarray:
    """θ_k (b̄_μ - b̄_γ̄)(t_k, x̄_k) Δt_k, θ_k the covered fraction of step k."""
    grid = rp.grid
    theta = spike_weights(grid, cfg.t0, cfg.beta)
    out = np.zeros((grid.n, spec.m))
    for k in np.flatnonzero(theta):
        out[k] = theta[k] * _gap(spec, grid.t[k], xbar.x[k], cfg.mu, gammabar.P[k]) * grid.dt[k]
    return out


def variational_forcing(spec: ProblemSpec, cfg: SpikeConfig, xbar: Trajectory,
                        gammabar: RelaxedControl, rp: RoughPath, lin: Linearization | None = None) -> np.ndarray:
    """ℓ_k: the drift gaps carried through the noise of their step."""
    lin = _bar_lin(spec, xbar, gammabar, rp, lin)
    raw = drift_gaps(spec, cfg, xbar, gammabar, rp)
    return raw + np.einsum("kab,kb->ka", lin.N, raw)


def variational_Y(spec: ProblemSpec, cfg: SpikeConfig, xbar: Trajectory, gammabar: RelaxedControl,
                  rp: RoughPath, lin: Linearization | None = None) -> np.ndarray:
    """Y^β: the linear RDE along (x̄, γ̄) forced by the spike drift gap, zero before t0."""
    cfg.check(rp.grid.T)
    Y = np.zeros((rp.grid.n + 1, spec.m))
    if cfg.beta == 0:
        return Y
    lin = _bar_lin(spec, xbar, gammabar, rp, lin)
    k0 = rp.grid.floor_index(cfg.t0)
    ell = variational_forcing(spec, cfg, xbar, gammabar, rp, lin)
    Y[k0:] = integrate_linear_rde(lin.steps(), None, np.zeros(spec.m), rp, ell, k0=k0)[k0:]
    return Y


def W_beta(spec: ProblemSpec, cfg: SpikeConfig, xbar: Trajectory, gammabar: RelaxedControl,
           rp: RoughPath, lin: Linearization | None = None) -> np.ndarray:
    """W^β = ∂_β Y^β: the gap h^β along x̄ at the end of the spike, propagated."""
    grid = rp.grid
    W = np.zeros((grid.n + 1, spec.m))
    ke = _end_step(grid, cfg)
    if ke >= grid.n:
        return W
    lin = _bar_lin(spec, xbar, gammabar, rp, lin)
    h = _gap(spec, grid.t[ke], xbar.x[ke], cfg.mu, gammabar.P[ke])
    W[ke + 1:] = integrate_linear_rde(lin.steps(), None, lin.push(ke, h), rp, k0=ke + 1)[ke + 1:]
    return W


# ----------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class BetaSweep:
    """A quantity tabulated over a halving β sweep.

    ``ratios[i] = values[i] / values[i + 1]``; for O(β) quantities they sit
    near 2, for the normalized o(β) remainders they stay ≥ 1.5.
    """

    betas: np.ndarray
    values: np.ndarray
    ratios: np.ndarray
    t0: float
    snapped: bool

    def within(self, target: float, rel: float) -> bool:
        return bool(np.all(np.abs(self.ratios / target - 1) <= rel))

    def decreasing(self, factor: float, floor: float = 1e-10) -> bool:
        """Each halving shrinks the value by ``factor``, ignoring values already below ``floor``."""
        v = self.values
        live = v[:-1] > floor
        return bool(np.all(v[1:][live] * factor <= v[:-1][live] * (1 + 1e-12)))


def _sweep(betas, values, t0, snapped):
    values = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(values[1:] > 0, values[:-1] / values[1:], np.inf)
    return BetaSweep(np.asarray(betas, dtype=float), values, ratios, t0, snapped)


def _sup(a):
    return float(np.max(np.linalg.norm(a, axis=-1)))


def state_gap_sweep(spec: ProblemSpec, t0: float, mu: DiscreteMeasure, gamma: RelaxedControl,
                    rp: RoughPath, y, betas=None) -> BetaSweep:
    """‖x^β - x̄‖_∞ over the sweep (expected O(β))."""
    betas = dyadic_betas(rp.grid.T) if betas is None else np.asarray(betas, dtype=float)
    t0, snapped = snap_t0(rp.grid, t0)
    xbar = integrate_rde(spec, y, 0.0, gamma, rp)
    vals = [_sup(spike_state(spec, SpikeConfig(t0, b, mu), gamma, rp, y).x - xbar.x) for b in betas]
    return _sweep(betas, vals, t0, snapped)


def approx_derivative_check(spec: ProblemSpec, t0: float, mu: DiscreteMeasure, gamma: RelaxedControl,
                            rp: RoughPath, y, betas=None) -> BetaSweep:
    """r(β) = ‖x^β - x̄ - Y^β‖_∞ / β over the sweep (expected → 0)."""
    betas = dyadic_betas(rp.grid.T) if betas is None else np.asarray(betas, dtype=float)
    t0, snapped = snap_t0(rp.grid, t0)
    xbar = integrate_rde(spec, y, 0.0, gamma, rp)
    lin = linearize(spec, xbar, gamma, rp)
    vals = []
    for b in betas:
        cfg = SpikeConfig(t0, b, mu)
        xb = spike_state(spec, cfg, gamma, rp, y)
        Y = variational_Y(spec, cfg, xbar, gamma, rp, lin)
        vals.append(_sup(xb.x - xbar.x - Y) / b)
    return _sweep(betas, vals, t0, snapped)


@dataclass(frozen=True)
class TaylorTerms:
    left: float  # J(γ^β) - J(γ̄)
    right: float  # first-order expansion
    terminal: float  # ⟨DG, Y_T⟩
    running: float  # Σ ⟨DF, Y⟩ Δt
    spike: float  # Σ θ (F(μ) - F(γ̄)) Δt


def taylor_terms(spec: ProblemSpec, cfg: SpikeConfig, xbar: Trajectory, gammabar: RelaxedControl,
                 rp: RoughPath, y, lin: Linearization | None = None) -> TaylorTerms:
    grid = rp.grid
    Y = variational_Y(spec, cfg, xbar, gammabar, rp, lin)
    Jbar = reward_of(spec, xbar, gammabar, rp)
    left = reward(spec, y, 0.0, gammabar, rp, spike=cfg) - Jbar
    terminal = float(np.asarray(spec.DG(xbar.terminal), dtype=float).reshape(spec.m) @ Y[-1])
    running = float(np.sum(running_gradients(spec, xbar, gammabar, rp) * Y[:-1]))
    theta = spike_weights(grid, cfg.t0, cfg.beta)
    sp = 0.0
    for k in np.flatnonzero(theta):
        t, x = grid.t[k], xbar.x[k]
        sp += theta[k] * (spec.reward_rate(t, x, cfg.mu.p) - spec.reward_rate(t, x, gammabar.P[k])) * grid.dt[k]
    return TaylorTerms(left, terminal + running + sp, terminal, running, float(sp))


def taylor_reward_check(spec: ProblemSpec, t0: float, mu: DiscreteMeasure, gamma: RelaxedControl,
                        rp: RoughPath, y, betas=None) -> BetaSweep:
    """|J(γ^β) - J(γ̄) - first-order terms| / β over the sweep (expected → 0)."""
    betas = dyadic_betas(rp.grid.T) if betas is None else np.asarray(betas, dtype=float)
    t0, snapped = snap_t0(rp.grid, t0)
    xbar = integrate_rde(spec, y, 0.0, gamma, rp)
    lin = linearize(spec, xbar, gamma, rp)
    vals = []
    for b in betas:
        tt = taylor_terms(spec, SpikeConfig(t0, b, mu), xbar, gamma, rp, y, lin)
        vals.append(abs(tt.left - tt.right) / b)
    return _sweep(betas, vals, t0, snapped)


@dataclass(frozen=True)
class DualityReport:
    direct: float  # ⟨DG(x̄_T), Y_T⟩
    paired: float  # Σ⟨p_{k+1}, ℓ_k⟩ - Σ⟨Y_k, DF_k⟩Δt
    left_point: float  # Σ⟨p_k, θ_k gap_k Δt⟩ - Σ⟨Y_k, DF_k⟩Δt, the continuous-time form
    bound: float  # max|δp| Σ|θ gap Δt|, the size of the left-point discrepancy

    @property
    def exact_gap(self) -> float:
        return abs(self.direct - self.paired)

    @property
    def left_gap(self) -> float:
        return abs(self.direct - self.left_point)


def duality_check(spec: ProblemSpec, cfg: SpikeConfig, xbar: Trajectory, gammabar: RelaxedControl,
                  rp: RoughPath) -> DualityReport:
    """Pairing of the adjoint with Y^β: the rough terms cancel, leaving drift-gap and running terms."""
    lin = linearize(spec, xbar, gammabar, rp)
    p = adjoint(spec, xbar, gammabar, rp, lin=lin).p
    Y = variational_Y(spec, cfg, xbar, gammabar, rp, lin)
    ell = variational_forcing(spec, cfg, xbar, gammabar, rp, lin)
    raw = drift_gaps(spec, cfg, xbar, gammabar, rp)
    f = running_gradients(spec, xbar, gammabar, rp)
    run = float(np.sum(f * Y[:-1]))
    direct = float(np.asarray(spec.DG(xbar.terminal), dtype=float).reshape(spec.m) @ Y[-1])
    paired = float(np.sum(p[1:] * ell)) - run
    left = float(np.sum(p[:-1] * raw)) - run
    dp = float(np.max(np.abs(np.diff(p, axis=0))))
    return DualityReport(direct, paired, left, dp * float(np.sum(np.abs(raw))))


# --------------------------------------------------------------- residual

@dataclass(frozen=True)
class PMPReport:
    t: np.ndarray
    residual: np.ndarray  # sup_m H(m) - H(γ̄) per node, ≥ 0
    argmax: np.ndarray  # maximizing action per node

    @property
    def max(self) -> float:
        return float(self.residual.max())

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.t, self.residual, self.argmax]), delimiter=",",
                   header="t,residual,argmax_action", comments="", fmt="%.17g", encoding="utf-8")


def node_sup_hamiltonian(spec: ProblemSpec, t, x, p) -> tuple[float, int]:
    """sup over P(U) of H(t, x, ·, p) and the maximizing grid action.

    Without entropy H is affine in the measure and the sup sits at a Dirac.
    With entropy the sup is the Gibbs value λ log Σ exp(H̃/λ) du.
    """
    htilde = spec.drift_table(t, x) @ p + spec.dirac_rate(t, x)
    j = int(np.argmax(htilde))
    if spec.entropic is None:
        return float(htilde[j]), j
    lam = spec.entropic.lam
    top = htilde[j]
    return float(top + lam * np.log(np.sum(np.exp((htilde - top) / lam) * spec.actions.du))), j


def pmp_residual(spec: ProblemSpec, xbar: Trajectory, gammabar: RelaxedControl, p, rp: RoughPath) -> PMPReport:
    pp = p.p if hasattr(p, "p") else np.asarray(p, dtype=float)
    grid = rp.grid
    res = np.zeros(grid.n + 1)
    arg = np.zeros(grid.n + 1)
    for k in range(xbar.k0, grid.n + 1):
        t, x = grid.t[k], xbar.x[k]
        top, j = node_sup_hamiltonian(spec, t, x, pp[k])
        res[k] = max(0.0, top - hamiltonian(spec, t, x, gammabar.P[k], pp[k]))
        arg[k] = spec.actions.u[j]
    return PMPReport(grid.t.copy(), res, arg)


def pmp_check(spec: ProblemSpec, gamma: RelaxedControl, rp: RoughPath, y) -> PMPReport:
    """Residual along the pair started at y, with its own adjoint."""
    xbar = integrate_rde(spec, y, 0.0, gamma, rp)
    return pmp_residual(spec, xbar, gamma, adjoint(spec, xbar, gamma, rp), rp)
