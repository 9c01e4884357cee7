"""Discrete rough-path calculus on a time grid.

Increments, the coboundary operators, discrete Hölder norms, compensated
(sewing) sums and geometric lifts of smooth paths and fractional Brownian
motion. Areas are stored per adjacent interval; every other pair of times
goes through the Chen reconstruction.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import cholesky, toeplitz

from .errors import InvalidInput, UnsupportedRegularity

_TIME_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time nodes 0 = t_0 < ... < t_n = T."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise InvalidInput("a time grid needs at least two nodes")
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) <= 0):
            raise InvalidInput("grid times must be finite and strictly increasing")
        if t[0] != 0:
            raise InvalidInput("grid times must start at 0")
        object.__setattr__(self, "t", _frozen(t))

    @classmethod
    def uniform(cls, T: float, n: int) -> "TimeGrid":
        if n < 1 or T <= 0:
            raise InvalidInput(f"need n >= 1 and T > 0, got n={n}, T={T}")
        return cls(np.linspace(0.0, T, n + 1))

    @property
    def n(self) -> int:
        return self.t.size - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @cached_property
    def dt(self) -> np.ndarray:
        return _frozen(np.diff(self.t))

    @property
    def mesh(self) -> float:
        return float(self.dt.max())

    def index(self, s: float) -> int:
        """Index of the node equal to ``s``; off-grid times are rejected."""
        k = int(np.searchsorted(self.t, s - _TIME_TOL * max(1.0, self.T)))
        if k > self.n or abs(self.t[k] - s) > _TIME_TOL * max(1.0, self.T):
            raise InvalidInput(f"time {s!r} is not a grid node")
        return k

    def floor_index(self, s: float) -> int:
        """Largest node index with t_k <= s (up to rounding)."""
        if s < self.t[0] - _TIME_TOL or s > self.T + _TIME_TOL:
            raise InvalidInput(f"time {s!r} outside [{self.t[0]}, {self.T}]")
        k = int(np.searchsorted(self.t, s + _TIME_TOL * max(1.0, self.T), side="right")) - 1
        return max(k, 0)

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.n % factor:
            raise InvalidInput(f"cannot coarsen {self.n} intervals by {factor}")
        return TimeGrid(self.t[::factor])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.t, other.t)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Increment2:
    """Two-index increment stored densely: ``values[i, j]`` for i <= j."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def dim(self) -> tuple:
        return self.values.shape[2:]

    def __post_init__(self):
        N = self.grid.n + 1
        if self.values.shape[:2] != (N, N):
            raise InvalidInput("increment values must be indexed by grid pairs")


@dataclass(frozen=True, eq=False)
class Increment3:
    """Three-index increment ``values[i, u, j]`` for i <= u <= j."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def dim(self) -> tuple:
        return self.values.shape[3:]


def _as_path(f, grid: TimeGrid) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[0] == 0:
        raise InvalidInput("empty path")
    if f.shape[0] != grid.n + 1:
        raise InvalidInput(f"path has {f.shape[0]} samples for {grid.n + 1} nodes")
    return f


def delta1(f, grid: TimeGrid) -> Increment2:
    """δf_{st} = f_t - f_s on all grid pairs."""
    f = _as_path(f, grid)
    v = f[None, :] - f[:, None]
    return Increment2(grid, v)


def delta2(h: Increment2) -> Increment3:
    """δh_{sut} = h_{st} - h_{su} - h_{ut} on all grid triples."""
    v = h.values
    out = v[:, None, :] - v[:, :, None] - v[None, :, :]
    return Increment3(h.grid, out)


def _times(a, b, lead):
    """Pointwise product of path values ``a`` with increment values ``b``.

    Both carry ``lead`` index axes. Scalars multiply, a matrix acts on a
    vector, and a scalar scales a vector.
    """
    ra, rb = a.ndim - lead, b.ndim - lead
    if ra == 0 or rb == 0:
        if ra == 0:
            return a.reshape(a.shape + (1,) * rb) * b
        return a * b.reshape(b.shape + (1,) * ra)
    if ra == 2 and rb == 1 and a.shape[-1] == b.shape[-1]:
        return np.einsum("...ij,...j->...i", a, b)
    if ra == rb == 1 and a.shape[-1] == b.shape[-1]:
        return np.einsum("...i,...i->...", a, b)
    raise InvalidInput(f"incompatible value shapes {a.shape[lead:]} and {b.shape[lead:]}")


class ProductResult(NamedTuple):
    increment: Increment2
    residual: float


def product_c1_c2(g, h: Increment2) -> ProductResult:
    """(gh)_{st} = g_s h_{st}, with the residual of δ(gh) = -δg h + g δh."""
    grid = h.grid
    g = _as_path(g, grid)
    N = grid.n + 1
    gv = g.reshape((N, 1) + g.shape[1:])
    try:
        gh = _times(np.broadcast_to(gv, (N, N) + g.shape[1:]), h.values, 2)
    except ValueError as exc:
        raise InvalidInput(f"dimension mismatch: {exc}") from None
    prod = Increment2(grid, gh)
    lhs = delta2(prod).values
    dg = delta1(g, grid).values  # dg[s, u]
    dh = delta2(h).values
    # (δg h)_{sut} = δg_{su} h_{ut};  (g δh)_{sut} = g_s δh_{sut}
    a = _times(np.broadcast_to(dg[:, :, None], (N, N, N) + g.shape[1:]),
               np.broadcast_to(h.values[None], (N, N, N) + h.dim), 3)
    b = _times(np.broadcast_to(g.reshape((N, 1, 1) + g.shape[1:]), (N, N, N) + g.shape[1:]), dh, 3)
    res = lhs - (-a + b)
    i, u, j = np.indices((N, N, N))
    mask = (i <= u) & (u <= j)
    scale = max(1.0, float(np.max(np.abs(lhs[mask]))) if mask.any() else 1.0)
    return ProductResult(prod, float(np.max(np.abs(res[mask]))) / scale if mask.any() else 0.0)


@dataclass(frozen=True)
class HolderReport:
    mu: float
    norm: float
    argmax: tuple


def _vnorm(v, nlead):
    v = np.asarray(v, dtype=float)
    if v.ndim == nlead:
        return np.abs(v)
    return np.sqrt(np.sum(v.reshape(v.shape[:nlead] + (-1,)) ** 2, axis=-1))


def holder_norm(x, mu: float, split: bool = False) -> HolderReport:
    """Discrete Hölder seminorm of a 2- or 3-index increment.

    For triples the default denominator is |t - s|^mu. With ``split=True``
    it is |u - s|^{mu/2} |t - u|^{mu/2}, the form under which the dyadic
    sewing constant 1/(2^mu - 2) applies.
    """
    if mu <= 0:
        raise InvalidInput("Hölder exponent must be positive")
    t = x.grid.t
    N = t.size
    if isinstance(x, Increment2):
        i, j = np.triu_indices(N, 1)
        r = _vnorm(x.values[i, j], 1) / (t[j] - t[i]) ** mu
        if r.size == 0:
            return HolderReport(mu, 0.0, ())
        k = int(np.argmax(r))
        return HolderReport(mu, float(r[k]), (int(i[k]), int(j[k])))
    if isinstance(x, Increment3):
        i, u, j = np.indices((N, N, N))
        mask = (i < u) & (u < j)
        i, u, j = i[mask], u[mask], j[mask]
        if i.size == 0:
            return HolderReport(mu, 0.0, ())
        if split:
            den = ((t[u] - t[i]) * (t[j] - t[u])) ** (mu / 2)
        else:
            den = (t[j] - t[i]) ** mu
        r = _vnorm(x.values[i, u, j], 1) / den
        k = int(np.argmax(r))
        return HolderReport(mu, float(r[k]), (int(i[k]), int(u[k]), int(j[k])))
    raise InvalidInput("holder_norm expects an Increment2 or Increment3")


def pair_sup(incr: Callable, t: np.ndarray, mu: float) -> HolderReport:
    """sup over pairs of |incr(i, j)| / |t_j - t_i|^mu without storing all pairs.

    ``incr`` receives index arrays (i, i + lag) and returns values with the
    pair axis first.
    """
    best, arg = 0.0, ()
    n = t.size - 1
    for lag in range(1, n + 1):
        i = np.arange(0, n + 1 - lag)
        j = i + lag
        r = _vnorm(incr(i, j), 1) / (t[j] - t[i]) ** mu
        k = int(np.argmax(r))
        if r[k] > best:
            best, arg = float(r[k]), (int(i[k]), int(j[k]))
    return HolderReport(mu, best, arg)


def path_holder(f, grid: TimeGrid, mu: float) -> HolderReport:
    """Hölder seminorm of a sampled path, O(n) memory."""
    f = _as_path(f, grid)
    return pair_sup(lambda i, j: f[j] - f[i], grid.t, mu)


# ---------------------------------------------------------------- sewing

def _germ_fn(germ):
    if isinstance(germ, Increment2):
        return lambda i, j: germ.values[i, j]
    return germ


def sewing_sum(germ, grid: TimeGrid, s: float, t: float, step: int = 1):
    """Σ_k A_{t_k t_{k+1}} over the partition of [s, t] by every ``step``-th node.

    ``germ`` is an Increment2 or a vectorized callable ``A(i, j)`` taking
    index arrays.
    """
    if s > t:
        raise InvalidInput(f"need s <= t, got s={s}, t={t}")
    i0, i1 = grid.index(s), grid.index(t)
    if (i1 - i0) % step:
        raise InvalidInput("the partition step must divide the interval")
    A = _germ_fn(germ)
    if i1 == i0:
        return np.zeros_like(np.asarray(A(np.array([i0]), np.array([i0])))[0])
    idx = np.arange(i0, i1 + 1, step)
    return np.sum(A(idx[:-1], idx[1:]), axis=0)


def loglog_slope(h, err) -> float:
    """Least-squares slope of log(err) against log(h), ignoring zero errors."""
    h, err = np.asarray(h, float), np.asarray(err, float)
    ok = err > 0
    if ok.sum() < 2:
        return np.inf
    return float(np.polyfit(np.log(h[ok]), np.log(err[ok]), 1)[0])


@dataclass(frozen=True)
class SewingReport:
    meshes: np.ndarray
    sums: np.ndarray
    diffs: np.ndarray
    slope: float


def sewing_refinement(germ, grid: TimeGrid, s: float, t: float, levels: int) -> SewingReport:
    """Compensated sums on dyadic sub-partitions and their Cauchy slope.

    Level 0 uses every node; level l uses every 2^l-th node.
    """
    sums, meshes = [], []
    for lev in range(levels):
        step = 2 ** lev
        sums.append(sewing_sum(germ, grid, s, t, step=step))
        meshes.append(grid.mesh * step)
    sums = np.array(sums)
    diffs = _vnorm(sums[:-1] - sums[1:], 1)
    return SewingReport(np.array(meshes), sums, diffs, loglog_slope(meshes[1:], diffs))


@dataclass(frozen=True)
class SewingBound:
    lhs: float
    rhs: float
    ok: bool


def sewing_bound_check(germ: Increment2, mu: float) -> SewingBound:
    """‖g - A‖_mu over dyadic intervals against ‖δA‖_mu / (2^mu - 2).

    g is the sum of adjacent germs; the 3-index norm uses the split
    denominator (see ``holder_norm``).
    """
    if mu <= 1:
        raise InvalidInput("sewing needs mu > 1")
    grid = germ.grid
    n = grid.n
    if n & (n - 1):
        raise InvalidInput("sewing bound check needs a dyadic grid")
    v = germ.values
    adj = v[np.arange(n), np.arange(1, n + 1)]
    pref = np.concatenate([np.zeros((1,) + adj.shape[1:]), np.cumsum(adj, axis=0)])
    t = grid.t
    lhs = 0.0
    size = 1
    while size <= n:
        i = np.arange(0, n, size)
        j = i + size
        gap = _vnorm(pref[j] - pref[i] - v[i, j], 1) / (t[j] - t[i]) ** mu
        lhs = max(lhs, float(gap.max()))
        size *= 2
    rhs = holder_norm(delta2(germ), mu, split=True).norm / (2 ** mu - 2)
    return SewingBound(lhs, rhs, lhs <= rhs * (1 + 1e-12) + 1e-15)


# ---------------------------------------------------------- rough paths

@dataclass(frozen=True, eq=False)
class RoughPath:
    """Sampled driver ζ (ζ_0 = 0) with the area of each adjacent interval.

    ``area[k, i, j]`` is ∫ (ζ^i_r - ζ^i_{t_k}) dζ^j_r over [t_k, t_{k+1}].
    """

    grid: TimeGrid
    zeta: np.ndarray
    area: np.ndarray
    alpha: float

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n = self.grid.n
        if z.shape[0] != n + 1:
            raise InvalidInput("driver samples do not match the grid")
        a = np.asarray(self.area, dtype=float)
        if a.shape != (n, z.shape[1], z.shape[1]):
            raise InvalidInput(f"area must have shape {(n, z.shape[1], z.shape[1])}")
        if np.any(z[0] != 0):
            raise InvalidInput("driver must start at zero")
        if not (1 / 3 < self.alpha <= 1):
            raise UnsupportedRegularity(f"alpha={self.alpha} outside (1/3, 1]")
        object.__setattr__(self, "zeta", _frozen(z))
        object.__setattr__(self, "area", _frozen(a))

    @property
    def d(self) -> int:
        return self.zeta.shape[1]

    @cached_property
    def dz(self) -> np.ndarray:
        return _frozen(np.diff(self.zeta, axis=0))

    @cached_property
    def _prefix(self) -> np.ndarray:
        step = self.area + np.einsum("ki,kj->kij", self.zeta[:-1], self.dz)
        c = np.zeros((self.grid.n + 1, self.d, self.d))
        np.cumsum(step, axis=0, out=c[1:])
        c.setflags(write=False)
        return c

    def area_between(self, i, j) -> np.ndarray:
        """Chen-reconstructed area over [t_i, t_j]; vectorized in (i, j)."""
        i, j = np.asarray(i), np.asarray(j)
        z = self.zeta
        dz = z[j] - z[i]
        raw = self._prefix[j] - self._prefix[i] - np.einsum("...i,...j->...ij", z[i], dz)
        anti = 0.5 * (raw - np.swapaxes(raw, -1, -2))
        return anti + 0.5 * np.einsum("...i,...j->...ij", dz, dz)

    def coarsen(self, factor: int) -> "RoughPath":
        """Same driver seen on every ``factor``-th node, areas by Chen."""
        g = self.grid.coarsen(factor)
        idx = np.arange(0, self.grid.n + 1, factor)
        return RoughPath(g, self.zeta[idx], self.area_between(idx[:-1], idx[1:]), self.alpha)

    def scaled(self, c: float) -> "RoughPath":
        """The dilated path cζ with area c²ζ²."""
        return RoughPath(self.grid, c * self.zeta, c * c * self.area, self.alpha)


def chen_area(rp: RoughPath, s: float, t: float) -> np.ndarray:
    if s > t:
        raise InvalidInput(f"need s <= t, got s={s}, t={t}")
    return rp.area_between(rp.grid.index(s), rp.grid.index(t))


def rough_norm(rp: RoughPath, alpha: float | None = None) -> float:
    """‖ζ‖_α + ‖ζ²‖_{2α} by discrete suprema."""
    a = rp.alpha if alpha is None else alpha
    t = rp.grid.t
    first = pair_sup(lambda i, j: rp.zeta[j] - rp.zeta[i], t, a).norm
    second = pair_sup(rp.area_between, t, 2 * a).norm
    return first + second


def polyline_area(fine: np.ndarray, refine: int) -> np.ndarray:
    """Per coarse interval area of the piecewise-linear path through ``fine``.

    ``fine`` holds n*refine + 1 samples; the result has shape (n, d, d) and
    its symmetric part is exactly half the outer square of the increment.
    """
    fine = np.asarray(fine, dtype=float)
    d = fine.shape[1]
    n = (fine.shape[0] - 1) // refine
    D = np.diff(fine, axis=0).reshape(n, refine, d)
    X = np.cumsum(D, axis=1) - D
    raw = np.einsum("nki,nkj->nij", X, D) + 0.5 * np.einsum("nki,nkj->nij", D, D)
    dz = fine[refine::refine] - fine[:-refine:refine]
    return 0.5 * (raw - np.swapaxes(raw, 1, 2)) + 0.5 * np.einsum("ni,nj->nij", dz, dz)


def lift_smooth(path, grid: TimeGrid, refine: int = 32, alpha: float = 1.0) -> RoughPath:
    """Geometric lift of a smooth path through its piecewise-linear interpolant.

    ``path`` is either a callable t -> (len(t), d) (or (len(t),) for d = 1)
    or an array of samples on the grid refined ``refine`` times.
    """
    if refine < 1:
        raise InvalidInput("refine must be >= 1")
    n = grid.n
    if callable(path):
        t = grid.t
        tf = np.concatenate([np.linspace(t[k], t[k + 1], refine + 1)[:-1] for k in range(n)] + [t[-1:]])
        fine = np.asarray(path(tf), dtype=float)
    else:
        fine = np.asarray(path, dtype=float)
    if fine.ndim == 1:
        fine = fine[:, None]
    if fine.shape[0] < 2:
        raise InvalidInput("a lift needs at least two samples")
    if fine.shape[0] != n * refine + 1:
        raise InvalidInput(f"expected {n * refine + 1} samples, got {fine.shape[0]}")
    fine = fine - fine[0]
    return RoughPath(grid, fine[::refine], polyline_area(fine, refine), alpha)


# ------------------------------------------------------------------- fBm

def _fgn_autocov(H: float, n: int) -> np.ndarray:
    k = np.arange(n, dtype=float)
    return 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))


@lru_cache(maxsize=8)
def _fgn_factor(H: float, n: int) -> np.ndarray:
    f = cholesky(toeplitz(_fgn_autocov(H, n)), lower=True)
    f.setflags(write=False)
    return f


@lru_cache(maxsize=8)
def _circulant_eigs(H: float, n: int) -> np.ndarray:
    c = _fgn_autocov(H, n + 1)
    row = np.concatenate([c, c[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-8 * lam.max():
        raise InvalidInput("circulant embedding is not non-negative")
    lam = np.clip(lam, 0.0, None)
    lam.setflags(write=False)
    return lam


def fgn(H: float, n: int, d: int, rng: np.random.Generator, method: str = "auto") -> np.ndarray:
    """Exact fractional Gaussian noise with unit step, shape (n, d)."""
    if H == 1.0:
        return np.repeat(rng.standard_normal((1, d)), n, axis=0)
    if method == "auto":
        method = "cholesky" if n <= 1024 else "circulant"
    if method == "cholesky":
        return _fgn_factor(H, n) @ rng.standard_normal((n, d))
    if method != "circulant":
        raise InvalidInput(f"unknown fGn method {method!r}")
    lam = _circulant_eigs(H, n)
    m = 2 * n
    w = np.zeros((m, d), dtype=complex)
    w[0] = np.sqrt(lam[0] / m) * rng.standard_normal(d)
    w[n] = np.sqrt(lam[n] / m) * rng.standard_normal(d)
    a = rng.standard_normal((n - 1, d))
    b = rng.standard_normal((n - 1, d))
    w[1:n] = np.sqrt(lam[1:n, None] / (2 * m)) * (a + 1j * b)
    w[n + 1:] = np.conj(w[1:n][::-1])
    return np.fft.fft(w, axis=0).real[:n]


def fbm_alpha(H: float) -> float:
    """Nominal Hölder exponent attached to an fBm lift, just below H."""
    return min(H, 1.0) - min(0.05, (H - 1 / 3) / 2)


def lift_fbm(H: float, d: int, n: int, seed, T: float = 1.0, refine: int = 8,
             method: str = "auto") -> RoughPath:
    """Geometric lift of a d-dimensional fBm sample on a uniform n-step grid.

    Components are independent. For d = 1 the area is exactly (δζ)²/2; for
    d >= 2 the path is sampled ``refine`` times finer and the areas are
    those of the piecewise-linear interpolant.
    """
    if not (1 / 3 < H <= 1):
        raise UnsupportedRegularity(f"Hurst index {H} must lie in (1/3, 1]")
    if d < 1 or n < 1:
        raise InvalidInput("need d >= 1 and n >= 1")
    rng = np.random.default_rng(seed)
    r = 1 if d == 1 else refine
    nf = n * r
    steps = fgn(H, nf, d, rng, method) * (T / nf) ** H
    fine = np.concatenate([np.zeros((1, d)), np.cumsum(steps, axis=0)])
    grid = TimeGrid.uniform(T, n)
    return RoughPath(grid, fine[::r], polyline_area(fine, r), fbm_alpha(H))


# ------------------------------------------------------------------- I/O

def rough_path_to_csv(rp: RoughPath, path) -> None:
    d = rp.d
    cols = ["t"] + [f"zeta_{i + 1}" for i in range(d)]
    cols += [f"area_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    area = np.zeros((rp.grid.n + 1, d * d))
    area[:-1] = rp.area.reshape(rp.grid.n, d * d)
    data = np.column_stack([rp.grid.t, rp.zeta, area])
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g",
               encoding="utf-8")


def rough_path_from_csv(path, alpha: float) -> RoughPath:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    ncol = data.shape[1] - 1
    d = int(round((-1 + np.sqrt(1 + 4 * ncol)) / 2))
    if d + d * d != ncol:
        raise InvalidInput("malformed rough path CSV")
    grid = TimeGrid(data[:, 0])
    area = data[:-1, 1 + d:].reshape(-1, d, d)
    return RoughPath(grid, data[:, 1:1 + d], area, alpha)
