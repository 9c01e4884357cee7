"""Control problem coefficients.

Drift and running-reward callables are vectorized over the action grid:
``b(t, x, u)`` returns (J, m) for the action points ``u`` of shape (J,).
Measures enter as weight vectors ``p`` over those points.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import InvalidInput
from .measures import ActionGrid, entropy_weights

FD_REL = 1e-6


def _fd(f, x, h_rel=FD_REL):
    """Central differences of f at x, derivative index appended last."""
    x = np.asarray(x, dtype=float)
    h = h_rel * (1 + np.abs(x))
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h[k]))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class EntropicSpec:
    """Running reward ∫R dγ + λ·entropy(γ)."""

    R: Callable  # (t, x, u) -> (J,)
    DR: Callable  # (t, x, u) -> (J, m)
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidInput("temperature must be positive")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    m: int
    d: int
    T: float
    actions: ActionGrid
    b: Callable
    sigma: Callable  # (t, x) -> (m, d)
    G: Callable
    Db: Callable | None = None
    Dsigma: Callable | None = None  # (t, x) -> (m, d, m), [i, j, k] = ∂_k σ^{ij}
    D2sigma: Callable | None = None  # (t, x) -> (m, d, m, m)
    DG: Callable | None = None
    F: Callable | None = None  # (t, x, p) -> float, affine in p
    DF: Callable | None = None  # (t, x, p) -> (m,)
    entropic: EntropicSpec | None = None
    name: str = ""
    fd_derivatives: tuple = field(default=(), init=False)

    def __post_init__(self):
        flagged = []
        if self.Db is None:
            flagged.append("Db")
            object.__setattr__(self, "Db", lambda t, x, u: _fd(lambda y: self.b(t, y, u), x))
        if self.Dsigma is None:
            flagged.append("Dsigma")
            object.__setattr__(self, "Dsigma", lambda t, x: _fd(lambda y: self.sigma(t, y), x))
        if self.D2sigma is None:
            flagged.append("D2sigma")
            object.__setattr__(self, "D2sigma", lambda t, x: _fd(lambda y: self.Dsigma(t, y), x))
        if self.DG is None:
            flagged.append("DG")
            object.__setattr__(self, "DG", lambda x: _fd(self.G, x))
        if self.F is not None and self.DF is None and self.entropic is None:
            flagged.append("DF")
            object.__setattr__(self, "DF", lambda t, x, p: _fd(lambda y: self.F(t, y, p), x))
        object.__setattr__(self, "fd_derivatives", tuple(flagged))

    # drift -----------------------------------------------------------
    def drift_table(self, t, x) -> np.ndarray:
        return np.asarray(self.b(t, x, self.actions.u), dtype=float).reshape(self.actions.J, self.m)

    def bbar(self, t, x, p) -> np.ndarray:
        return p @ self.drift_table(t, x)

    def Dbbar(self, t, x, p) -> np.ndarray:
        D = np.asarray(self.Db(t, x, self.actions.u), dtype=float).reshape(self.actions.J, self.m, self.m)
        return np.einsum("j,jab->ab", p, D)

    # running reward ----------------------------------------------------
    def reward_rate(self, t, x, p) -> float:
        if self.entropic is not None:
            e = self.entropic
            return float(p @ e.R(t, x, self.actions.u) + e.lam * entropy_weights(p, self.actions.du))
        if self.F is None:
            return 0.0
        return float(self.F(t, x, p))

    def reward_grad(self, t, x, p) -> np.ndarray:
        if self.entropic is not None:
            return p @ np.asarray(self.entropic.DR(t, x, self.actions.u)).reshape(self.actions.J, self.m)
        if self.F is None:
            return np.zeros(self.m)
        return np.asarray(self.DF(t, x, p), dtype=float).reshape(self.m)

    def dirac_rate(self, t, x) -> np.ndarray:
        """Running reward at each Dirac action; the entropy term is set to 0."""
        if self.entropic is not None:
            return np.asarray(self.entropic.R(t, x, self.actions.u), dtype=float)
        if self.F is None:
            return np.zeros(self.actions.J)
        eye = np.eye(self.actions.J)
        return np.array([self.F(t, x, e) for e in eye], dtype=float)

    def without_drift(self) -> "ProblemSpec":
        return replace(self, b=lambda t, x, u: np.zeros((np.size(u), self.m)),
                       Db=lambda t, x, u: np.zeros((np.size(u), self.m, self.m)),
                       name=self.name + "/noise")

    def with_entropy(self, espec: EntropicSpec) -> "ProblemSpec":
        return replace(self, entropic=espec, F=None, DF=None)
