"""Relaxed controls as probability weights on an action grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import InvalidInput
from .rough import TimeGrid

_SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ActionGrid:
    """Action points with quadrature widths; densities are p / du."""

    u: np.ndarray
    du: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        du = np.asarray(self.du, dtype=float)
        if u.ndim != 1 or u.size < 1 or u.shape != du.shape:
            raise InvalidInput("action points and widths must be matching 1-d arrays")
        if np.any(np.diff(u) <= 0) or np.any(du <= 0):
            raise InvalidInput("actions must be strictly increasing with positive widths")
        u.setflags(write=False)
        du.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "du", du)

    @classmethod
    def uniform(cls, lo: float, hi: float, J: int) -> "ActionGrid":
        """J equally spaced points on [lo, hi] including the endpoints.

        Widths are trapezoid weights, so the total width is hi - lo.
        """
        if J < 2 or hi <= lo:
            raise InvalidInput("need J >= 2 and hi > lo")
        u = np.linspace(lo, hi, J)
        du = np.full(J, (hi - lo) / (J - 1))
        du[[0, -1]] *= 0.5
        return cls(u, du)

    @property
    def J(self) -> int:
        return self.u.size

    @property
    def length(self) -> float:
        return float(self.du.sum())

    def index(self, a: float) -> int:
        k = int(np.argmin(np.abs(self.u - a)))
        if abs(self.u[k] - a) > 1e-12 * max(1.0, abs(a)):
            raise InvalidInput(f"action {a} is not on the grid")
        return k


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    p: np.ndarray
    grid: ActionGrid

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != self.grid.u.shape:
            raise InvalidInput("weights do not match the action grid")
        if np.any(p < 0) or abs(p.sum() - 1) > _SUM_TOL * p.size:
            raise InvalidInput("weights must be non-negative and sum to one")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @classmethod
    def dirac(cls, grid: ActionGrid, a: float) -> "DiscreteMeasure":
        p = np.zeros(grid.J)
        p[grid.index(a)] = 1.0
        return cls(p, grid)

    @classmethod
    def uniform(cls, grid: ActionGrid) -> "DiscreteMeasure":
        return cls(grid.du / grid.du.sum(), grid)

    @classmethod
    def from_density(cls, density, grid: ActionGrid, floor: float = 0.0) -> "DiscreteMeasure":
        """Normalize a density on the grid, optionally clamped below by ``floor``."""
        dens = np.maximum(np.asarray(density, dtype=float), floor)
        w = dens * grid.du
        return cls(w / w.sum(), grid)

    @property
    def density(self) -> np.ndarray:
        return self.p / self.grid.du

    def mean(self) -> float:
        return float(self.p @ self.grid.u)


def normalize_rows(P: np.ndarray) -> np.ndarray:
    return P / P.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """One measure per time node; node k's measure drives the step [t_k, t_{k+1})."""

    grid: TimeGrid
    actions: ActionGrid
    P: np.ndarray  # (N, J)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.shape != (self.grid.n + 1, self.actions.J):
            raise InvalidInput(f"control weights must have shape {(self.grid.n + 1, self.actions.J)}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > _SUM_TOL * P.shape[1]):
            raise InvalidInput("every node must carry a probability vector")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @classmethod
    def constant(cls, grid: TimeGrid, m: DiscreteMeasure) -> "RelaxedControl":
        return cls(grid, m.grid, np.tile(m.p, (grid.n + 1, 1)))

    def measure(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.P[k], self.actions)

    def to_csv(self, path) -> None:
        cols = ["t"] + [f"p_{j + 1}" for j in range(self.actions.J)]
        header = "# actions=" + " ".join(repr(float(a)) for a in self.actions.u) + "\n" + ",".join(cols)
        np.savetxt(path, np.column_stack([self.grid.t, self.P]), delimiter=",", header=header,
                   comments="", fmt="%.17g", encoding="utf-8")


# -------------------------------------------------------------- functionals

def _weights(m):
    return m.p if isinstance(m, DiscreteMeasure) else np.asarray(m, dtype=float)


def entropy_weights(p: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Differential entropy -Σ p log(p/du), vectorized over leading axes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / du), 0.0)
    return -terms.sum(axis=-1)


def entropy(m: DiscreteMeasure) -> float:
    return float(entropy_weights(m.p, m.grid.du))


def kl(m: DiscreteMeasure, ref: DiscreteMeasure) -> float:
    """Relative entropy; ``inf`` signals a violation of absolute continuity."""
    p, q = _weights(m), _weights(ref)
    if np.any((p > 0) & (q <= 0)):
        return np.inf
    pos = p > 0
    return float(max(0.0, np.sum(p[pos] * np.log(p[pos] / q[pos]))))


def wasserstein2_1d(m1: DiscreteMeasure, m2: DiscreteMeasure) -> float:
    """Quantile coupling: (∫_0^1 |F1^{-1}(q) - F2^{-1}(q)|² dq)^{1/2}."""
    u = m1.grid.u
    if m2.grid.u.shape != u.shape or np.any(m2.grid.u != u):
        raise InvalidInput("measures live on different action grids")
    c1, c2 = np.cumsum(m1.p), np.cumsum(m2.p)
    c1[-1] = c2[-1] = 1.0
    qs = np.unique(np.concatenate([[0.0], c1, c2]))
    qs = qs[qs <= 1.0]
    mid = 0.5 * (qs[:-1] + qs[1:])
    i1 = np.minimum(np.searchsorted(c1, mid, side="left"), u.size - 1)
    i2 = np.minimum(np.searchsorted(c2, mid, side="left"), u.size - 1)
    return float(np.sqrt(np.sum(np.diff(qs) * (u[i1] - u[i2]) ** 2)))


def wasserstein2_rows(P1: np.ndarray, P2: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise W2 between weight arrays (K, J) on the same sorted points ``u``."""
    c1, c2 = np.cumsum(P1, axis=1), np.cumsum(P2, axis=1)
    c1[:, -1] = c2[:, -1] = 1.0
    qs = np.sort(np.concatenate([np.zeros((c1.shape[0], 1)), c1, c2], axis=1), axis=1)
    qs = np.clip(qs, 0.0, 1.0)
    mid = 0.5 * (qs[:, :-1] + qs[:, 1:])
    J = u.size
    i1 = np.minimum((c1[:, None, :] < mid[:, :, None]).sum(axis=2), J - 1)
    i2 = np.minimum((c2[:, None, :] < mid[:, :, None]).sum(axis=2), J - 1)
    return np.sqrt(np.sum(np.diff(qs, axis=1) * (u[i1] - u[i2]) ** 2, axis=1))


def wasserstein1_1d(m1: DiscreteMeasure, m2: DiscreteMeasure) -> float:
    """Σ |F1 - F2| between consecutive action points."""
    gap = np.abs(np.cumsum(m1.p) - np.cumsum(m2.p))[:-1]
    return float(np.sum(gap * np.diff(m1.grid.u)))


# HiGHS defaults (~1e-7) can drop masses of that size
_LP_TOL = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def fortet_mourier(m1: DiscreteMeasure, m2: DiscreteMeasure) -> float:
    """sup |∫f d(m1 - m2)| over |f| <= 1, Lip(f) <= 1, as a linear program.

    On a sorted 1-d grid the Lipschitz constraint only needs consecutive
    points; the pairwise constraints follow by the triangle inequality.
    """
    u = m1.grid.u
    diff = m1.p - m2.p
    J = u.size
    if J == 1:
        return 0.0
    rows = np.zeros((J - 1, J))
    idx = np.arange(J - 1)
    rows[idx, idx + 1] = 1.0
    rows[idx, idx] = -1.0
    gaps = np.diff(u)
    res = linprog(-diff, A_ub=np.vstack([rows, -rows]), b_ub=np.concatenate([gaps, gaps]),
                  bounds=[(-1.0, 1.0)] * J, method="highs", options=_LP_TOL)
    if res.status != 0:  # cannot happen: f = 0 is feasible and the box is bounded
        raise RuntimeError(f"Fortet-Mourier LP failed: {res.message}")
    return float(max(0.0, -res.fun))


@dataclass(frozen=True)
class HolderCertificate:
    ok: bool
    worst_pair: tuple
    worst_ratio: float


def _node_w2(g: RelaxedControl, i: int, j: int) -> float:
    return wasserstein2_1d(g.measure(i), g.measure(j))


def holder_certificate(g: RelaxedControl, eps: float, L: float) -> HolderCertificate:
    """Checks W2(γ_s, γ_t) <= L|t - s|^eps on adjacent and dyadic-lag pairs.

    ``worst_ratio`` is the largest W2 / |t - s|^eps seen.
    """
    t = g.grid.t
    n = g.grid.n
    lags = [1]
    while lags[-1] * 2 <= n:
        lags.append(lags[-1] * 2)
    if lags[-1] != n:
        lags.append(n)
    worst, pair = 0.0, ()
    for lag in lags:
        for i in range(0, n + 1 - lag):
            r = _node_w2(g, i, i + lag) / (t[i + lag] - t[i]) ** eps
            if r > worst:
                worst, pair = r, (i, i + lag)
    return HolderCertificate(worst <= L * (1 + 1e-12) + 1e-14, pair, worst)


# ------------------------------------------------------------------- spikes

@dataclass(frozen=True)
class SpikeConfig:
    """Replace the control by ``mu`` on [t0, t0 + beta)."""

    t0: float
    beta: float
    mu: DiscreteMeasure

    def check(self, T: float):
        if self.beta < 0 or self.t0 < 0 or self.t0 + self.beta > T * (1 + 1e-12):
            raise InvalidInput(f"spike interval [{self.t0}, {self.t0 + self.beta}] outside [0, {T}]")


def spike_weights(grid: TimeGrid, t0: float, beta: float) -> np.ndarray:
    """Fraction of each step [t_k, t_{k+1}) covered by [t0, t0 + beta)."""
    t = grid.t
    lo = np.maximum(t[:-1], t0)
    hi = np.minimum(t[1:], t0 + beta)
    w = np.clip((hi - lo) / grid.dt, 0.0, 1.0)
    tol = 1e-9
    w[w < tol] = 0.0
    w[w > 1 - tol] = 1.0
    return w


def spike(g: RelaxedControl, t0: float, beta: float, mu: DiscreteMeasure) -> RelaxedControl:
    """Node-wise spike variation with half-open membership [t0, t0 + beta).

    An interval reaching the horizon also covers the terminal node.
    """
    SpikeConfig(t0, beta, mu).check(g.grid.T)
    if beta == 0:
        return g
    t = g.grid.t
    tol = 1e-12 * max(1.0, g.grid.T)
    inside = (t >= t0 - tol) & (t < t0 + beta - tol)
    if t0 + beta >= g.grid.T - tol:
        inside[-1] = True
    P = np.array(g.P)
    P[inside] = mu.p
    return RelaxedControl(g.grid, g.actions, P)
