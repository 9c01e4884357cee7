"""Reference problems with known optimal controls, and reference drivers."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import adjoint, integrate_rde
from .errors import InvalidInput
from .measures import ActionGrid, DiscreteMeasure, RelaxedControl
from .problem import EntropicSpec, ProblemSpec
from .rough import RoughPath, TimeGrid, lift_fbm, lift_smooth


def named_seed(root: int, name: str) -> np.random.SeedSequence:
    """Independent sub-stream of ``root`` keyed by a name."""
    return np.random.SeedSequence([int(root), zlib.crc32(name.encode("utf-8"))])


# ------------------------------------------------------------------ drivers

def smooth_signal(d: int) -> Callable:
    def f(t):
        t = np.asarray(t, dtype=float)
        cols = [0.5 * np.sin(2 * np.pi * t) + 0.4 * t, t * t - 0.5 * t]
        for i in range(2, d):
            cols.append(0.4 * np.sin((i + 1) * t) * np.cos(t))
        return np.stack(cols[:d], axis=-1)
    return f


def make_driver(kind: str, d: int, n: int, T: float = 1.0, H: float = 0.45, seed=0,
                refine: int | None = None) -> RoughPath:
    if kind == "smooth":
        return lift_smooth(smooth_signal(d), TimeGrid.uniform(T, n), refine or 32)
    if kind == "fbm":
        return lift_fbm(H, d, n, seed, T=T, refine=refine or 8)
    raise InvalidInput(f"unknown driver kind {kind!r}")


# ----------------------------------------------------------------- problems

@dataclass(frozen=True, eq=False)
class CatalogProblem:
    spec: ProblemSpec
    y0: np.ndarray
    optimal: Callable  # rp -> RelaxedControl (non-entropic problem)
    suboptimal: Callable  # rp -> RelaxedControl


def _const(a):
    return lambda spec, rp: RelaxedControl.constant(rp.grid, DiscreteMeasure.dirac(spec.actions, a))


def _zeros_R(m):
    return EntropicSpec(lambda t, x, u: np.zeros(np.size(u)),
                        lambda t, x, u: np.zeros((np.size(u), m)), 1.0)


def _linear_additive(J):
    acts = ActionGrid.uniform(-1.0, 1.0, J)
    spec = ProblemSpec(
        m=1, d=1, T=1.0, actions=acts,
        b=lambda t, x, u: np.asarray(u, float)[:, None],
        Db=lambda t, x, u: np.zeros((np.size(u), 1, 1)),
        sigma=lambda t, x: np.array([[0.3]]),
        Dsigma=lambda t, x: np.zeros((1, 1, 1)),
        D2sigma=lambda t, x: np.zeros((1, 1, 1, 1)),
        G=lambda x: float(x[0]), DG=lambda x: np.ones(1),
        name="linear-additive")
    return spec, np.array([0.0]), _const(1.0), _const(0.0), _zeros_R(1)


def _bilinear_noise(J):
    acts = ActionGrid.uniform(0.0, 1.0, J)
    c = 0.3
    spec = ProblemSpec(
        m=1, d=1, T=1.0, actions=acts,
        b=lambda t, x, u: np.asarray(u, float)[:, None] * x[0],
        Db=lambda t, x, u: np.asarray(u, float).reshape(-1, 1, 1),
        sigma=lambda t, x: np.array([[c * x[0]]]),
        Dsigma=lambda t, x: np.full((1, 1, 1), c),
        D2sigma=lambda t, x: np.zeros((1, 1, 1, 1)),
        G=lambda x: float(x[0]), DG=lambda x: np.ones(1),
        name="bilinear-noise")
    return spec, np.array([1.0]), _const(1.0), _const(0.0), _zeros_R(1)


def _sine_drift(J):
    acts = ActionGrid.uniform(-1.0, 1.0, J)

    def R(t, x, u):
        return np.full(np.size(u), np.tanh(x[0]))

    def DR(t, x, u):
        return np.full((np.size(u), 1), 1 - np.tanh(x[0]) ** 2)

    spec = ProblemSpec(
        m=1, d=1, T=1.0, actions=acts,
        b=lambda t, x, u: (np.asarray(u, float) + 0.5 * np.sin(x[0]))[:, None],
        Db=lambda t, x, u: np.full((np.size(u), 1, 1), 0.5 * np.cos(x[0])),
        sigma=lambda t, x: np.array([[0.3 + 0.1 * np.cos(x[0])]]),
        Dsigma=lambda t, x: np.full((1, 1, 1), -0.1 * np.sin(x[0])),
        D2sigma=lambda t, x: np.full((1, 1, 1, 1), -0.1 * np.cos(x[0])),
        F=lambda t, x, p: float(np.tanh(x[0])),
        DF=lambda t, x, p: np.array([1 - np.tanh(x[0]) ** 2]),
        G=lambda x: float(x[0]), DG=lambda x: np.ones(1),
        name="sine-drift")
    return spec, np.array([0.2]), _const(1.0), _const(-1.0), EntropicSpec(R, DR, 1.0)


_ROT = 0.5 * np.array([[0.0, -1.0], [1.0, 0.0]])
_S = np.array([[[0.2, 0.0], [0.0, -0.2]], [[0.0, 0.2], [-0.1, 0.0]]])  # S_j
_OFFSET = np.array([[0.3, 0.0], [0.0, 0.3]])  # column j is the constant part of σ_j
_C = np.array([1.0, 0.5])


def _rotation_2d(J):
    acts = ActionGrid.uniform(-1.0, 1.0, J)
    e1 = np.array([1.0, 0.0])

    def b(t, x, u):
        return np.asarray(u, float)[:, None] * e1 + _ROT @ x

    spec = ProblemSpec(
        m=2, d=2, T=1.0, actions=acts, b=b,
        Db=lambda t, x, u: np.broadcast_to(_ROT, (np.size(u), 2, 2)),
        sigma=lambda t, x: np.einsum("jab,b->aj", _S, x) + _OFFSET,
        Dsigma=lambda t, x: np.transpose(_S, (1, 0, 2)),
        D2sigma=lambda t, x: np.zeros((2, 2, 2, 2)),
        G=lambda x: float(_C @ x), DG=lambda x: _C.copy(),
        name="rotation-2d")

    def optimal(spec, rp):
        # the costate does not depend on the control for this linear problem
        g0 = RelaxedControl.constant(rp.grid, DiscreteMeasure.uniform(spec.actions))
        p = adjoint(spec, integrate_rde(spec, np.zeros(2), 0.0, g0, rp), g0, rp).p
        P = np.zeros((rp.grid.n + 1, spec.actions.J))
        P[:, -1] = p[:, 0] >= 0
        P[:, 0] = p[:, 0] < 0
        return RelaxedControl(rp.grid, spec.actions, P)

    def suboptimal(spec, rp):
        g = optimal(spec, rp)
        return RelaxedControl(rp.grid, spec.actions, g.P[:, ::-1])

    return spec, np.array([0.5, -0.2]), optimal, suboptimal, _zeros_R(2)


def _zero(J):
    acts = ActionGrid.uniform(0.0, 1.0, J)
    spec = ProblemSpec(
        m=1, d=1, T=1.0, actions=acts,
        b=lambda t, x, u: np.zeros((np.size(u), 1)),
        Db=lambda t, x, u: np.zeros((np.size(u), 1, 1)),
        sigma=lambda t, x: np.zeros((1, 1)),
        Dsigma=lambda t, x: np.zeros((1, 1, 1)),
        D2sigma=lambda t, x: np.zeros((1, 1, 1, 1)),
        G=lambda x: 0.0, DG=lambda x: np.zeros(1),
        name="zero")
    return spec, np.array([1.0]), _const(0.0), _const(1.0), _zeros_R(1)


_BUILDERS = {
    "linear-additive": _linear_additive,
    "bilinear-noise": _bilinear_noise,
    "sine-drift": _sine_drift,
    "rotation-2d": _rotation_2d,
    "zero": _zero,
}

CATALOG = ("linear-additive", "bilinear-noise", "sine-drift", "rotation-2d")


def make_problem(name: str, lam: float | None = None, J: int = 21) -> CatalogProblem:
    """Catalog problem by name; ``lam`` switches to the entropy-regularized reward."""
    if name not in _BUILDERS:
        raise InvalidInput(f"unknown problem {name!r}; known: {sorted(_BUILDERS)}")
    spec, y0, opt, sub, espec = _BUILDERS[name](J)
    if lam is not None:
        spec = spec.with_entropy(EntropicSpec(espec.R, espec.DR, lam))
    return CatalogProblem(spec, y0, lambda rp: opt(spec, rp), lambda rp: sub(spec, rp))
