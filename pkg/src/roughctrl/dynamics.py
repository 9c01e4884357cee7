"""Controlled RDE integration, linearizations, adjoints and value evaluation.

The state scheme is a drift-first second-order (Davie type) step

    x̃_k = x_k + b̄(t_k, x_k) Δt,
    x_{k+1} = x̃_k + σ(x̃_k) δζ_k + Σ_ij (Dσ_j σ_i)(x̃_k) ζ²^{ij}_k,

with Dσ_j the space Jacobian of the j-th column of σ. Applying the drift
first lets a drift perturbation on a step feel that step's noise, as it
does in continuous time. Every derivative process below is the exact
derivative of this discrete map, so finite differences of the scheme and
the linear engine agree to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controlled import ControlledPath
from .errors import DivergenceError, InvalidInput, InversionError
from .measures import DiscreteMeasure, RelaxedControl, SpikeConfig, spike_weights
from .problem import ProblemSpec
from .rough import RoughPath, rough_norm


# ------------------------------------------------------------ step controls

class _StepControl:
    """Per-step measure: γ_k, optionally mixed with a spike measure.

    A spike covering a fraction θ of step k uses b̄ = b̄_γ + θ(b̄_μ - b̄_γ)
    and likewise for the running reward.
    """

    def __init__(self, gamma: RelaxedControl, rp: RoughPath, spike: SpikeConfig | None):
        if gamma.grid != rp.grid:
            raise InvalidInput("control and driver live on different grids")
        self.P = gamma.P
        if spike is None or spike.beta == 0:
            self.theta = np.zeros(rp.grid.n)
            self.mu = None
        else:
            spike.check(rp.grid.T)
            self.theta = spike_weights(rp.grid, spike.t0, spike.beta)
            self.mu = spike.mu.p

    def mix(self, k, f):
        """f evaluated at the effective measure of step k (f affine in p)."""
        base = f(self.P[k])
        th = self.theta[k] if k < self.theta.size else 0.0
        if th == 0.0:
            return base
        alt = f(self.mu)
        if th == 1.0:
            return alt
        return base + th * (alt - base)


def _comp_coef(S, DS):
    """(Dσ_j σ_i)^a stored as [a, j, i]."""
    return np.einsum("ajk,ki->aji", DS, S)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """State on the grid from node k0 on (NaN before), with its rough levels."""

    grid: object
    k0: int
    x: np.ndarray  # (N, m)
    x_zeta: np.ndarray  # σ(t_k, x_k), (N, m, d)
    x_zeta2: np.ndarray  # [k, a, j, i] = (Dσ_j σ_i)^a, multiplies area[i, j]
    x_tau: np.ndarray  # effective b̄ per step, (N, m)
    x_pre: np.ndarray  # drift-advanced points x̃_k where the noise step is evaluated, (N, m)

    @property
    def terminal(self) -> np.ndarray:
        return self.x[-1]

    def as_controlled(self) -> ControlledPath:
        if self.k0 != 0:
            raise InvalidInput("only trajectories started at t = 0 form a controlled path")
        return ControlledPath(self.grid, self.x, self.x_zeta, self.x_zeta2, self.x_tau)

    def to_csv(self, path) -> None:
        m = self.x.shape[1]
        cols = ["t"] + [f"x_{i + 1}" for i in range(m)] + [f"drift_{i + 1}" for i in range(m)]
        np.savetxt(path, np.column_stack([self.grid.t, self.x, self.x_tau]), delimiter=",",
                   header=",".join(cols), comments="", fmt="%.17g", encoding="utf-8")


def integrate_rde(spec: ProblemSpec, y, s: float, gamma: RelaxedControl, rp: RoughPath,
                  spike: SpikeConfig | None = None, until: int | None = None) -> Trajectory:
    """Solve the controlled RDE from (s, y) with the Davie-type step.

    ``until`` stops at that node index (the remaining nodes stay NaN).
    """
    if rp.d != spec.d:
        raise InvalidInput(f"driver dimension {rp.d} does not match the problem ({spec.d})")
    grid = rp.grid
    k0 = grid.index(s)
    k1 = grid.n if until is None else int(until)
    ctrl = _StepControl(gamma, rp, spike)
    N, m, d = grid.n + 1, spec.m, spec.d
    x = np.full((N, m), np.nan)
    xz = np.full((N, m, d), np.nan)
    xz2 = np.full((N, m, d, d), np.nan)
    tau = np.full((N, m), np.nan)
    pre = np.full((N, m), np.nan)
    x[k0] = np.asarray(y, dtype=float).reshape(m)
    t, dt, dz, area = grid.t, grid.dt, rp.dz, rp.area
    for k in range(k0, k1 + 1):
        xk = x[k]
        S = np.asarray(spec.sigma(t[k], xk), dtype=float).reshape(m, d)
        DS = np.asarray(spec.Dsigma(t[k], xk), dtype=float).reshape(m, d, m)
        xz[k] = S
        xz2[k] = _comp_coef(S, DS)
        if k == k1:
            tab = spec.drift_table(t[k], xk)
            tau[k] = ctrl.P[k] @ tab
            break
        tab = spec.drift_table(t[k], xk)
        tau[k] = ctrl.mix(k, lambda p: p @ tab)
        yk = pre[k] = xk + tau[k] * dt[k]
        Sy = np.asarray(spec.sigma(t[k], yk), dtype=float).reshape(m, d)
        DSy = np.asarray(spec.Dsigma(t[k], yk), dtype=float).reshape(m, d, m)
        xn = yk + Sy @ dz[k] + np.einsum("aji,ij->a", _comp_coef(Sy, DSy), area[k])
        if not np.all(np.isfinite(xn)):
            raise DivergenceError(k)
        x[k + 1] = xn
    return Trajectory(grid, k0, x, xz, xz2, tau, pre)


# ------------------------------------------------------------ linear engine

def noise_matrices(B, rp: RoughPath, C=None) -> np.ndarray:
    """N_k = Σ_j B_kj δζ^j_k + Σ_ij C_kij ζ²^{ij}_k; without C, C_ij = B_j B_i."""
    B = np.asarray(B, float)
    if C is None:
        C = np.einsum("kjab,kibc->kijac", B, B)
    return np.einsum("kjab,kj->kab", B, rp.dz) + np.einsum("kijab,kij->kab", C, rp.area)


def step_matrices(A, B, rp: RoughPath, C=None) -> np.ndarray:
    """M_k with I + M_k = (I + N_k)(I + A_k Δt), the drift-first step, shape (n, m, m)."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    n, d = rp.grid.n, rp.d
    if A.shape[0] != n or B.shape[:2] != (n, d) or B.shape[2:] != A.shape[1:]:
        raise InvalidInput(f"matrix paths of shapes {A.shape}, {B.shape} do not fit the driver")
    Ad = A * rp.grid.dt[:, None, None]
    N = noise_matrices(B, rp, C)
    return Ad + N + N @ Ad


def integrate_linear_rde(A, B, v0, rp: RoughPath, forcing=None, direction: str = "forward",
                         C=None, k0: int = 0, k1: int | None = None) -> np.ndarray:
    """Linear RDE dv = A v dt + B v dζ (+ forcing) on nodes k0..k1.

    forward:  v_{k+1} = (I + M_k) v_k + f_k from v_{k0} = v0.
    backward: exact inverse of the forward step from v_{k1} = v0.
    adjoint:  v_k = (I + M_k)^T v_{k+1} + f_k from v_{k1} = v0.
    ``forcing`` holds per-step increments f_k (already multiplied by Δt).
    """
    M = step_matrices(A, B, rp, C) if not isinstance(A, _Steps) else A.M
    n = rp.grid.n
    k1 = n if k1 is None else k1
    v0 = np.asarray(v0, dtype=float)
    m = M.shape[1]
    if v0.shape[0] != m:
        raise InvalidInput(f"initial value of dimension {v0.shape[0]} for {m}x{m} system")
    out = np.full((n + 1,) + v0.shape, np.nan)
    f = None if forcing is None else np.asarray(forcing, dtype=float)
    if direction == "forward":
        out[k0] = v0
        for k in range(k0, k1):
            v = out[k] + M[k] @ out[k]
            out[k + 1] = v if f is None else v + f[k]
    elif direction == "backward":
        out[k1] = v0
        eye = np.eye(m)
        for k in range(k1 - 1, k0 - 1, -1):
            rhs = out[k + 1] if f is None else out[k + 1] - f[k]
            out[k] = np.linalg.solve(eye + M[k], rhs)
    elif direction == "adjoint":
        out[k1] = v0
        for k in range(k1 - 1, k0 - 1, -1):
            v = out[k + 1] + M[k].T @ out[k + 1]
            out[k] = v if f is None else v + f[k]
    else:
        raise InvalidInput(f"unknown direction {direction!r}")
    return out


class _Steps:
    """Precomputed step matrices, accepted by integrate_linear_rde in place of A."""

    def __init__(self, M):
        self.M = M


@dataclass(frozen=True, eq=False)
class Linearization:
    A: np.ndarray  # (n, m, m)  ∫Db dγ
    B: np.ndarray  # (n, d, m, m)  Dσ_j
    C: np.ndarray  # (n, d, d, m, m)  derivative of the compensator
    M: np.ndarray  # step matrices
    N: np.ndarray  # noise part of each step, I + M = (I + N)(I + AΔt)

    def push(self, k, v):
        """A drift increment added on step k, carried through that step's noise."""
        return v + self.N[k] @ v

    def steps(self):
        return _Steps(self.M)


def linearize(spec: ProblemSpec, traj: Trajectory, gamma: RelaxedControl, rp: RoughPath,
              spike: SpikeConfig | None = None) -> Linearization:
    """Exact derivative of each scheme step along ``traj`` (zero before its start)."""
    grid = rp.grid
    n, m, d = grid.n, spec.m, spec.d
    ctrl = _StepControl(gamma, rp, spike)
    A = np.zeros((n, m, m))
    B = np.zeros((n, d, m, m))
    C = np.zeros((n, d, d, m, m))
    t = grid.t
    for k in range(traj.k0, n):
        xk = traj.x[k]
        Dtab = np.asarray(spec.Db(t[k], xk, spec.actions.u), dtype=float).reshape(-1, m, m)
        A[k] = ctrl.mix(k, lambda p: np.einsum("j,jab->ab", p, Dtab))
        yk = traj.x_pre[k]
        S = np.asarray(spec.sigma(t[k], yk), dtype=float).reshape(m, d)
        DS = np.asarray(spec.Dsigma(t[k], yk), dtype=float).reshape(m, d, m)
        D2 = np.asarray(spec.D2sigma(t[k], yk), dtype=float).reshape(m, d, m, m)
        Bk = np.transpose(DS, (1, 0, 2))  # [j, a, l]
        B[k] = Bk
        C[k] = np.einsum("ajkl,ki->ijal", D2, S) + np.einsum("jab,ibc->ijac", Bk, Bk)
    N = noise_matrices(B, rp, C)
    Ad = A * grid.dt[:, None, None]
    return Linearization(A, B, C, Ad + N + N @ Ad, N)


def jacobian(spec: ProblemSpec, traj: Trajectory, gamma: RelaxedControl, rp: RoughPath,
             s: float, e, lin: Linearization | None = None) -> np.ndarray:
    """Directional flow derivative V_t = J_{t←s} e along ``traj``."""
    lin = lin or linearize(spec, traj, gamma, rp)
    ks = rp.grid.index(s)
    if ks < traj.k0:
        raise InvalidInput("the trajectory does not cover the requested start time")
    return integrate_linear_rde(lin.steps(), None, e, rp, k0=ks)


@dataclass(frozen=True, eq=False)
class AdjointPath:
    grid: object
    p: np.ndarray  # (N, m)


def running_gradients(spec: ProblemSpec, traj: Trajectory, gamma: RelaxedControl, rp: RoughPath,
                      spike: SpikeConfig | None = None) -> np.ndarray:
    """DF(t_k, x_k, γ_k) Δt per step (zero before the trajectory start)."""
    ctrl = _StepControl(gamma, rp, spike)
    t, dt = rp.grid.t, rp.grid.dt
    out = np.zeros((rp.grid.n, spec.m))
    for k in range(traj.k0, rp.grid.n):
        out[k] = ctrl.mix(k, lambda p: spec.reward_grad(t[k], traj.x[k], p)) * dt[k]
    return out


def adjoint(spec: ProblemSpec, xbar: Trajectory, gammabar: RelaxedControl, rp: RoughPath,
            spike: SpikeConfig | None = None, lin: Linearization | None = None) -> AdjointPath:
    """Backward RDE -dp = (∫Db dγ̄)^T p dt + Dσ^T p dζ + DF dt, p_T = DG(x̄_T).

    Solved as the discrete adjoint of the state scheme, so ⟨p, V⟩ pairs
    exactly with any forward variation V.
    """
    lin = lin or linearize(spec, xbar, gammabar, rp, spike)
    forcing = running_gradients(spec, xbar, gammabar, rp, spike)
    pT = np.asarray(spec.DG(xbar.terminal), dtype=float).reshape(spec.m)
    p = integrate_linear_rde(lin.steps(), None, pT, rp, forcing, "adjoint", k0=xbar.k0)
    return AdjointPath(rp.grid, p)


# ------------------------------------------------------------------ rewards

def reward_of(spec: ProblemSpec, traj: Trajectory, gamma: RelaxedControl, rp: RoughPath,
              spike: SpikeConfig | None = None) -> float:
    """Left-endpoint running reward plus terminal reward along ``traj``."""
    ctrl = _StepControl(gamma, rp, spike)
    t, dt = rp.grid.t, rp.grid.dt
    total = 0.0
    for k in range(traj.k0, rp.grid.n):
        total += ctrl.mix(k, lambda p: spec.reward_rate(t[k], traj.x[k], p)) * dt[k]
    return float(total + spec.G(traj.terminal))


def reward(spec: ProblemSpec, y, t: float, gamma: RelaxedControl, rp: RoughPath,
           spike: SpikeConfig | None = None) -> float:
    """J_{t,T}(γ, y)."""
    traj = integrate_rde(spec, y, t, gamma, rp, spike)
    return reward_of(spec, traj, gamma, rp, spike)


def grad_value(spec: ProblemSpec, y, t: float, gamma: RelaxedControl, rp: RoughPath) -> np.ndarray:
    """∇_y J_{t,T} = Σ DF J_{s←t} Δs + DG J_{T←t} from one matrix Jacobian sweep."""
    traj = integrate_rde(spec, y, t, gamma, rp)
    lin = linearize(spec, traj, gamma, rp)
    k0 = traj.k0
    Jm = integrate_linear_rde(lin.steps(), None, np.eye(spec.m), rp, k0=k0)
    dF = running_gradients(spec, traj, gamma, rp)
    g = np.einsum("ka,kab->b", dF[k0:], Jm[k0:-1])
    return g + np.asarray(spec.DG(traj.terminal), dtype=float).reshape(spec.m) @ Jm[-1]


# ------------------------------------------------------- Jacobian growth

@dataclass(frozen=True)
class JacobianBoundReport:
    norms: np.ndarray  # ‖ζ‖_α per scale
    sups: np.ndarray  # sup_t ‖J_{t←s}‖ (max over samples)
    C: float  # smallest C >= 1 with sup <= C exp(C T ‖ζ‖^{1/α})
    slope: float  # regression of log sup on ‖ζ‖^{1/α}
    monotone: bool


def _min_constant(x, logsup, T):
    def ok(C):
        return np.all(logsup <= np.log(C) + C * T * x + 1e-12)
    lo, hi = 1.0, 2.0
    if ok(lo):
        return 1.0
    while not ok(hi):
        hi *= 2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi


def jacobian_bound_check(spec: ProblemSpec, rp: RoughPath, samples, gamma: RelaxedControl | None = None,
                         targets=(0.5, 1.0, 2.0, 3.0, 4.0)) -> JacobianBoundReport:
    """Fit the exponential Jacobian bound over dilations of ``rp``.

    Each dilation cζ is chosen so that ‖cζ‖_α hits one of ``targets``.
    """
    if gamma is None:
        gamma = RelaxedControl.constant(rp.grid, DiscreteMeasure.uniform(spec.actions))
    a = rp.alpha
    from .rough import pair_sup
    t = rp.grid.t
    n1 = pair_sup(lambda i, j: rp.zeta[j] - rp.zeta[i], t, a).norm
    n2 = pair_sup(rp.area_between, t, 2 * a).norm
    norms, sups = [], []
    for target in targets:
        c = (-n1 + np.sqrt(n1 * n1 + 4 * n2 * target)) / (2 * n2) if n2 > 0 else target / n1
        rc = rp.scaled(c)
        worst = 0.0
        for s, y in samples:
            traj = integrate_rde(spec, y, s, gamma, rc)
            lin = linearize(spec, traj, gamma, rc)
            Jm = integrate_linear_rde(lin.steps(), None, np.eye(spec.m), rc, k0=traj.k0)
            worst = max(worst, float(np.nanmax(np.linalg.norm(Jm[traj.k0:], ord=2, axis=(1, 2)))))
        norms.append(rough_norm(rc))
        sups.append(worst)
    norms, sups = np.array(norms), np.array(sups)
    x = norms ** (1 / a)
    logsup = np.log(sups)
    slope = float(np.polyfit(x, logsup, 1)[0]) if len(x) > 1 else 0.0
    return JacobianBoundReport(norms, sups, _min_constant(x, logsup, rp.grid.T), slope,
                               bool(np.all(np.diff(logsup) >= -1e-12)))


# --------------------------------------------------------------- noise flow

class NoiseFlow:
    """Pure-noise flow φ_t (drift removed) and its inverse χ_t.

    φ_t(η) is the scheme from (0, η) up to node t; χ_t is computed by damped
    Newton iterations on φ_t started at the query point.
    """

    def __init__(self, spec: ProblemSpec, rp: RoughPath, tol: float = 1e-10, max_iter: int = 50,
                 damping: float = 0.5):
        self.spec = spec.without_drift()
        self.rp = rp
        self.tol, self.max_iter, self.damping = tol, max_iter, damping
        self._gamma = RelaxedControl.constant(rp.grid, DiscreteMeasure.uniform(spec.actions))

    def _node(self, t):
        return t if isinstance(t, (int, np.integer)) else self.rp.grid.index(t)

    def _traj(self, k, eta):
        return integrate_rde(self.spec, eta, 0.0, self._gamma, self.rp, until=k)

    def phi(self, t, eta) -> np.ndarray:
        k = self._node(t)
        return self._traj(k, eta).x[k].copy()

    def jac_phi(self, t, eta) -> np.ndarray:
        k = self._node(t)
        traj = self._traj(k, eta)
        lin = linearize(self.spec, traj, self._gamma, self.rp)
        Jm = integrate_linear_rde(lin.steps(), None, np.eye(self.spec.m), self.rp, k1=k)
        return Jm[k]

    def chi(self, t, eta) -> np.ndarray:
        k = self._node(t)
        eta = np.asarray(eta, dtype=float).reshape(self.spec.m)
        xi = eta.copy()
        scale = 1.0 + np.linalg.norm(eta)
        r = self.phi(k, xi) - eta
        res = np.linalg.norm(r)
        for it in range(self.max_iter):
            if res <= self.tol * scale:
                return xi
            step = np.linalg.solve(self.jac_phi(k, xi), r)
            lam = 1.0
            while True:
                cand = xi - lam * step
                rc = self.phi(k, cand) - eta
                if np.linalg.norm(rc) < res or lam < 1e-6:
                    break
                lam *= self.damping
            xi, r, res = cand, rc, np.linalg.norm(rc)
        if res <= self.tol * scale:
            return xi
        raise InversionError(f"noise-flow inversion did not converge at node {k}", self.max_iter, res)

    def inverse_jacobian(self, t, y) -> np.ndarray:
        """∇χ_t at φ_t(y) by central differences of χ (step 1e-6 (1 + |y|))."""
        k = self._node(t)
        y = np.asarray(y, dtype=float).reshape(self.spec.m)
        xp = self.phi(k, y)
        h = 1e-6 * (1 + np.abs(y))
        cols = []
        for l in range(y.size):
            e = np.zeros_like(y)
            e[l] = h[l]
            cols.append((self.chi(k, xp + e) - self.chi(k, xp - e)) / (2 * h[l]))
        return np.stack(cols, axis=-1)


def noise_flow(spec: ProblemSpec, rp: RoughPath, **kw) -> NoiseFlow:
    return NoiseFlow(spec, rp, **kw)
