"""Controlled paths and rough integration by compensated sums.

Index convention for second-level coefficients: ``z_zeta2[k, a, i, j]``
multiplies ``area[k, j, i]`` (the area ∫ δζ^j dζ^i), so the increment
expansion reads

    δz_k ≈ z_zeta[k] @ δζ_k + Σ_ij z_zeta2[k, :, i, j] area[k, j, i] + z_tau[k] Δt.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInput
from .rough import RoughPath, TimeGrid, pair_sup


@dataclass(frozen=True, eq=False)
class ControlledPath:
    grid: TimeGrid
    z: np.ndarray  # (N, n)
    z_zeta: np.ndarray | None  # (N, n, d)
    z_zeta2: np.ndarray | None = None  # (N, n, d, d)
    z_tau: np.ndarray | None = None  # (N, n)
    kappa: float = 1.0

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != self.grid.n + 1:
            raise InvalidInput("controlled path does not match its grid")
        object.__setattr__(self, "z", z)
        for name, extra in (("z_zeta", 1), ("z_zeta2", 2), ("z_tau", 0)):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float)
            if v.shape[:2] != z.shape or v.ndim != 2 + extra:
                raise InvalidInput(f"{name} has shape {v.shape}, incompatible with z {z.shape}")
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.z.shape[1]

    @classmethod
    def from_driver(cls, rp: RoughPath) -> "ControlledPath":
        """ζ itself: unit Gubinelli derivative, no second level, no drift."""
        N, d = rp.zeta.shape
        return cls(rp.grid, rp.zeta, np.broadcast_to(np.eye(d), (N, d, d)),
                   np.zeros((N, d, d, d)), np.zeros((N, d)), rp.alpha)

    def to_csv(self, path) -> None:
        N, n = self.z.shape
        cols, blocks = ["t"], [self.grid.t[:, None]]
        cols += [f"z_{i + 1}" for i in range(n)]
        blocks.append(self.z)
        if self.z_zeta is not None:
            d = self.z_zeta.shape[2]
            cols += [f"zzeta_{i + 1}{j + 1}" for i in range(n) for j in range(d)]
            blocks.append(self.z_zeta.reshape(N, -1))
        if self.z_tau is not None:
            cols += [f"ztau_{i + 1}" for i in range(n)]
            blocks.append(self.z_tau)
        np.savetxt(path, np.hstack(blocks), delimiter=",", header=",".join(cols),
                   comments="", fmt="%.17g", encoding="utf-8")


@dataclass(frozen=True)
class ControlledNorm:
    sup_z: float
    holder_z: float
    sup_zeta: float
    holder_zeta: float
    remainder: float

    @property
    def total(self) -> float:
        return self.sup_z + self.holder_z + self.sup_zeta + self.holder_zeta + self.remainder


def _check_grid(z: ControlledPath, rp: RoughPath):
    if not z.grid == rp.grid:
        raise InvalidInput("controlled path and driver live on different grids")


def _second_level(z2, area):
    return np.einsum("...aij,...ji->...a", z2, area)


def remainder_norm(z: ControlledPath, rp: RoughPath, mu: float, level: int = 1) -> float:
    """Discrete Hölder norm of the expansion remainder.

    level 1: δz - z^ζ δζ. level 2 also removes the second-level and drift
    terms.
    """
    _check_grid(z, rp)
    if z.z_zeta is None:
        raise InvalidInput("remainder needs a Gubinelli derivative")
    zeta, t = rp.zeta, rp.grid.t

    def rem(i, j):
        r = z.z[j] - z.z[i] - np.einsum("kab,kb->ka", z.z_zeta[i], zeta[j] - zeta[i])
        if level == 2:
            if z.z_zeta2 is not None:
                r = r - _second_level(z.z_zeta2[i], rp.area_between(i, j))
            if z.z_tau is not None:
                r = r - z.z_tau[i] * (t[j] - t[i])[:, None]
        return r

    return pair_sup(rem, t, mu).norm


def controlled_norm(z: ControlledPath, rp: RoughPath, kappa: float | None = None) -> ControlledNorm:
    k = z.kappa if kappa is None else kappa
    t = rp.grid.t
    hz = pair_sup(lambda i, j: z.z[j] - z.z[i], t, k).norm
    hzz = pair_sup(lambda i, j: z.z_zeta[j] - z.z_zeta[i], t, k).norm
    return ControlledNorm(float(np.abs(z.z).max()), hz, float(np.abs(z.z_zeta).max()), hzz,
                          remainder_norm(z, rp, 2 * k))


def compose_smooth(L: Callable, dL: Callable | None, z: ControlledPath,
                   d2L: Callable | None = None, dtL: Callable | None = None) -> ControlledPath:
    """ẑ_t = L(t, z_t) with ẑ^ζ = ∇L z^ζ.

    When ``d2L`` is given and z carries a second level, ẑ gets one too; the
    drift is ∇L z^τ (+ ∂_t L when ``dtL`` is given).
    """
    if dL is None:
        raise InvalidInput("compose_smooth needs the space derivative of L")
    if z.z_zeta is None:
        raise InvalidInput("compose_smooth needs a Gubinelli derivative")
    t = z.grid.t
    vals, jz, j2, tau = [], [], [], []
    for k in range(t.size):
        x = z.z[k]
        D = np.atleast_2d(np.asarray(dL(t[k], x), dtype=float))
        vals.append(np.atleast_1d(L(t[k], x)))
        jz.append(D @ z.z_zeta[k])
        if z.z_zeta2 is not None and d2L is not None:
            D2 = np.asarray(d2L(t[k], x), dtype=float).reshape(D.shape[0], x.size, x.size)
            j2.append(np.einsum("ok,kij->oij", D, z.z_zeta2[k])
                      + np.einsum("okl,ki,lj->oij", D2, z.z_zeta[k], z.z_zeta[k]))
        if z.z_tau is not None:
            tv = D @ z.z_tau[k]
            if dtL is not None:
                tv = tv + np.atleast_1d(dtL(t[k], x))
            tau.append(tv)
    return ControlledPath(z.grid, np.array(vals), np.array(jz), np.array(j2) if j2 else None,
                          np.array(tau) if tau else None, z.kappa)


def _drift_values(eta, grid: TimeGrid, shape) -> np.ndarray:
    """Drift samples on the grid from None, a scalar, an array or a callable of t."""
    if eta is None:
        return np.zeros(shape)
    v = np.asarray(eta(grid.t) if callable(eta) else eta, dtype=float)
    if v.ndim == 1 and len(shape) == 2 and v.shape[0] == shape[0]:
        v = v[:, None]
    return np.broadcast_to(v, shape).copy()


def rough_integral_mixed(mu: ControlledPath, eta, rp: RoughPath, y0: float = 0.0) -> ControlledPath:
    """∫ μ dζ + ∫ η dt for an R^d-valued controlled integrand μ.

    Steps: δz_k = μ_k·δζ_k + η_k Δt + Σ_{i,i1} μ^{ζ;i i1}_k ζ²^{i1 i}_k.
    """
    _check_grid(mu, rp)
    if mu.z_zeta is None:
        raise InvalidInput("the integrand needs a Gubinelli derivative")
    if mu.n != rp.d:
        raise InvalidInput(f"integrand has {mu.n} components for a {rp.d}-dimensional driver")
    N = rp.grid.n + 1
    eta = _drift_values(eta, rp.grid, (N,))
    steps = (np.einsum("ki,ki->k", mu.z[:-1], rp.dz) + eta[:-1] * rp.grid.dt
             + np.einsum("kij,kji->k", mu.z_zeta[:-1], rp.area))
    z = y0 + np.concatenate([[0.0], np.cumsum(steps)])
    return ControlledPath(rp.grid, z[:, None], mu.z[:, None, :], mu.z_zeta[:, None, :, :],
                          eta[:, None], mu.kappa)


def rough_integral_pair(mu: ControlledPath, nu: ControlledPath, eta, rp: RoughPath,
                        y0=0.0) -> ControlledPath:
    """∫ μ^i dν^j for weakly controlled μ and strongly controlled ν.

    The result is flattened over (i, j) and carries its own first and
    second levels, so it is strongly controlled again. A drift ν^τ of ν
    contributes μ ν^τ dt.
    """
    _check_grid(mu, rp)
    _check_grid(nu, rp)
    if nu.z_zeta is None or nu.z_zeta2 is None:
        raise InvalidInput("the integrator needs first and second level derivatives")
    if mu.z_zeta is None:
        raise InvalidInput("the integrand needs a Gubinelli derivative")
    N = rp.grid.n + 1
    m, n, d = mu.n, nu.n, rp.d
    zz = np.einsum("ki,kja->kija", mu.z, nu.z_zeta).reshape(N, m * n, d)
    z2 = (np.einsum("ki,kjab->kijab", mu.z, nu.z_zeta2)
          + np.einsum("kib,kja->kijab", mu.z_zeta, nu.z_zeta)).reshape(N, m * n, d, d)
    tau = _drift_values(eta, rp.grid, (N, m * n))
    if nu.z_tau is not None:
        tau = tau + np.einsum("ki,kj->kij", mu.z, nu.z_tau).reshape(N, m * n)
    steps = (np.einsum("kpa,ka->kp", zz[:-1], rp.dz) + _second_level(z2[:-1], rp.area)
             + tau[:-1] * rp.grid.dt[:, None])
    z = np.zeros((N, m * n))
    z[1:] = np.cumsum(steps, axis=0)
    z += np.asarray(y0, dtype=float)
    return ControlledPath(rp.grid, z, zz, z2, tau, min(mu.kappa, nu.kappa))


def time_derivative(z: ControlledPath, rp: RoughPath) -> np.ndarray:
    """Drift identification ż_k = (δz - z^ζ δζ - z^{ζ²} ζ²)/Δt on adjacent pairs.

    The final node repeats the last interval's value.
    """
    _check_grid(z, rp)
    if z.z_zeta is None or z.z_zeta2 is None:
        raise InvalidInput("time_derivative needs first and second level derivatives")
    r = (np.diff(z.z, axis=0) - np.einsum("kab,kb->ka", z.z_zeta[:-1], rp.dz)
         - _second_level(z.z_zeta2[:-1], rp.area))
    dot = r / rp.grid.dt[:, None]
    return np.concatenate([dot, dot[-1:]])


# ------------------------------------------------------ composition of fields

def _fd_jac(f, theta, h_rel=1e-5):
    theta = np.asarray(theta, dtype=float)
    h = h_rel * (1 + np.abs(theta))
    cols = []
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h[k]
        cols.append((np.asarray(f(theta + e)) - np.asarray(f(theta - e))) / (2 * h[k]))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class StrongField:
    """A strongly controlled field θ ↦ (value, first level, second level) at one time.

    ``value``: θ -> (m,), ``zeta``: θ -> (m, d), ``zeta2``: θ -> (m, d, d).
    ``jac`` (∂_θ value, (m, k)) is required for composition as the outer
    field; ``zeta_jac`` ((m, d, k)) and ``hess`` ((m, k, k)) fall back to
    central differences.
    """

    value: Callable
    zeta: Callable
    zeta2: Callable
    jac: Callable | None = None
    zeta_jac: Callable | None = None
    hess: Callable | None = None

    def D(self, theta):
        if self.jac is None:
            raise InvalidInput("missing spatial derivative of the field")
        return np.atleast_2d(self.jac(theta))

    def Dzeta(self, theta):
        if self.zeta_jac is not None:
            return np.asarray(self.zeta_jac(theta))
        return _fd_jac(self.zeta, theta)

    def D2(self, theta):
        if self.hess is not None:
            return np.asarray(self.hess(theta))
        return _fd_jac(self.D, theta)


def compose_strong(mu: StrongField, nu: StrongField) -> StrongField:
    """Decomposition of θ ↦ μ(ν(θ)) for strongly controlled fields."""
    if mu.jac is None:
        raise InvalidInput("missing spatial derivative of the outer field")

    def value(th):
        return np.asarray(mu.value(np.asarray(nu.value(th))))

    def zeta(th):
        x = np.asarray(nu.value(th))
        return np.asarray(mu.zeta(x)) + mu.D(x) @ np.asarray(nu.zeta(th))

    def zeta2(th):
        x = np.asarray(nu.value(th))
        nz, nz2 = np.asarray(nu.zeta(th)), np.asarray(nu.zeta2(th))
        dmz = mu.Dzeta(x)  # (m, d, k)
        return (np.asarray(mu.zeta2(x)) + np.einsum("jk,kab->jab", mu.D(x), nz2)
                + np.einsum("jbk,ka->jab", dmz, nz) + np.einsum("jak,kb->jab", dmz, nz)
                + np.einsum("jkl,ka,lb->jab", mu.D2(x), nz, nz))

    jac = None
    if nu.jac is not None:
        def jac(th):
            return mu.D(np.asarray(nu.value(th))) @ nu.D(th)

    return StrongField(value, zeta, zeta2, jac)
