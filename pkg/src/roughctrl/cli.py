"""Command-line harness: one subcommand per verification suite.

    roughctrl <simulate|pontryagin|qfunc|improve> --config cfg.json [--seed N] [--grid N] [--out DIR]

Output directory precedence: --out, then $ROUGHCTRL_OUT, then the config's
"out", then ./roughctrl-out. Exit codes: 0 ok, 2 config error, 3 numerical
divergence, 4 monotonicity failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import CatalogProblem, make_driver, make_problem, named_seed
from .dynamics import integrate_rde, reward_of
from .errors import ConfigError, DivergenceError, InvalidInput, MonotonicityError, UnsupportedRegularity
from .io import ArtifactWriter
from .measures import DiscreteMeasure, RelaxedControl, SpikeConfig
from .pontryagin import (approx_derivative_check, duality_check, dyadic_betas, pmp_check, snap_t0,
                         state_gap_sweep, taylor_reward_check)
from .qfunction import evaluate_q, q_limit
from .rough import RoughPath
from .softpolicy import open_loop_policy, policy_iteration, q_policy_identity_check, random_policy

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_MONOTONICITY = 0, 2, 3, 4
PMP_TOL = 1e-8
COMMANDS = ("simulate", "pontryagin", "qfunc", "improve")

_SECTIONS = {
    "driver": {"kind": "fbm", "H": 0.45, "refine": None},
    "simulate": {"control": "optimal", "levels": 4},
    "pontryagin": {"control": "optimal", "t0": 0.25, "mu_action": None, "beta_first": 3, "beta_last": 8},
    "qfunc": {"control": "uniform", "t0": [0.25, 0.5, 0.75], "actions": None},
    "improve": {"lam": None, "start": "uniform", "iters": 20, "tol": 1e-6, "stop": 1e-8,
                "compare_open_loop": True},
}
_TOP = {"problem", "lam", "n_actions", "grid", "seed", "out", *_SECTIONS}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    grid: int = 256
    seed: int = 0
    lam: float | None = None
    n_actions: int = 21
    out: str | None = None
    driver: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    pontryagin: dict = field(default_factory=dict)
    qfunc: dict = field(default_factory=dict)
    improve: dict = field(default_factory=dict)

    def hashed(self) -> dict:
        """Everything that influences the numbers; the output location does not."""
        d = asdict(self)
        d.pop("out")
        return d


def _is_pow2(n) -> bool:
    return isinstance(n, int) and n >= 2 and n & (n - 1) == 0


def build_config(raw: dict, seed=None, grid=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "problem" not in raw:
        raise ConfigError("config needs a 'problem'")
    sections = {}
    for name, defaults in _SECTIONS.items():
        given = raw.get(name) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"'{name}' must be an object")
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
        sections[name] = {**defaults, **given}
    cfg = ExperimentConfig(
        problem=raw["problem"],
        grid=int(grid if grid is not None else raw.get("grid", 256)),
        seed=int(seed if seed is not None else raw.get("seed", 0)),
        lam=raw.get("lam"),
        n_actions=int(raw.get("n_actions", 21)),
        out=raw.get("out"),
        **sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        make_problem(cfg.problem)
    except InvalidInput as e:
        raise ConfigError(str(e)) from None
    if not _is_pow2(cfg.grid):
        raise ConfigError(f"grid size {cfg.grid} must be a power of two")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if cfg.n_actions < 2:
        raise ConfigError("need at least two actions")
    if cfg.lam is not None and not float(cfg.lam) > 0:
        raise ConfigError("lam must be positive")
    kind = cfg.driver["kind"]
    if kind not in ("smooth", "fbm"):
        raise ConfigError(f"unknown driver kind {kind!r}")
    if kind == "fbm" and not 1 / 3 < float(cfg.driver["H"]) <= 1:
        raise ConfigError(f"Hurst index {cfg.driver['H']} must lie in (1/3, 1]")
    for sec in ("simulate", "pontryagin", "qfunc"):
        if getattr(cfg, sec)["control"] not in ("optimal", "suboptimal", "uniform"):
            raise ConfigError(f"{sec}.control must be optimal, suboptimal or uniform")
    pc = cfg.pontryagin
    if not 0 < int(pc["beta_first"]) < int(pc["beta_last"]):
        raise ConfigError("need 0 < beta_first < beta_last")
    if not 0 <= float(pc["t0"]) < 1 - 2.0 ** -int(pc["beta_first"]):
        raise ConfigError("pontryagin.t0 leaves no room for the β sweep")
    if cfg.improve["start"] not in ("uniform", "random", "fixpoint"):
        raise ConfigError("improve.start must be uniform, random or fixpoint")
    if int(cfg.improve["iters"]) < 1:
        raise ConfigError("improve.iters must be positive")
    if int(cfg.simulate["levels"]) < 1 or 2 ** (int(cfg.simulate["levels"]) - 1) > cfg.grid:
        raise ConfigError("simulate.levels does not fit the grid")


def load_config(path, seed=None, grid=None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return build_config(raw, seed, grid)


def resolve_out(cfg: ExperimentConfig, flag: str | None) -> Path:
    return Path(flag or os.environ.get("ROUGHCTRL_OUT") or cfg.out or "roughctrl-out")


# ---------------------------------------------------------------- helpers

def _problem(cfg: ExperimentConfig, lam=None) -> CatalogProblem:
    return make_problem(cfg.problem, lam=lam if lam is not None else cfg.lam, J=cfg.n_actions)


def _driver(cfg: ExperimentConfig, d: int) -> RoughPath:
    dv = cfg.driver
    return make_driver(dv["kind"], d, cfg.grid, H=float(dv["H"]), seed=named_seed(cfg.seed, "driver"),
                       refine=dv["refine"])


def _control(prob: CatalogProblem, rp: RoughPath, which: str) -> RelaxedControl:
    if which == "optimal":
        if prob.spec.entropic is not None:
            return open_loop_policy(prob.spec, prob.y0, rp, tol=1e-8).gamma
        return prob.optimal(rp)
    if which == "suboptimal":
        return prob.suboptimal(rp)
    return RelaxedControl.constant(rp.grid, DiscreteMeasure.uniform(prob.spec.actions))


def _ratio_rows(sweep):
    ratios = np.concatenate([[np.nan], sweep.ratios])
    return [(b, v, r) for b, v, r in zip(sweep.betas, sweep.values, ratios)]


def _even_node(grid, t0: float) -> int:
    k = grid.index(snap_t0(grid, t0)[0])
    return min(k - k % 2, grid.n - 2)


# -------------------------------------------------------------- commands

def cmd_simulate(cfg: ExperimentConfig, w: ArtifactWriter) -> dict:
    prob = _problem(cfg)
    spec = prob.spec
    rp = _driver(cfg, spec.d)
    gamma = _control(prob, rp, cfg.simulate["control"])
    traj = integrate_rde(spec, prob.y0, 0.0, gamma, rp)
    value = reward_of(spec, traj, gamma, rp)
    w.dump("trajectory.csv", traj.to_csv)
    rows = []
    for lev in range(int(cfg.simulate["levels"])):
        f = 2 ** lev
        rc = rp.coarsen(f)
        gc = RelaxedControl(rc.grid, gamma.actions, gamma.P[::f])
        tc = integrate_rde(spec, prob.y0, 0.0, gc, rc)
        err = float(np.max(np.abs(tc.x - traj.x[::f])))
        rows.append((rc.grid.n, rc.grid.T / rc.grid.n, reward_of(spec, tc, gc, rc), err))
    w.table("convergence.csv", ["n", "mesh", "reward", "sup_error_vs_finest"], rows)
    summary = {"reward": value, "terminal": traj.terminal, "n": cfg.grid}
    w.summary("summary.json", summary)
    print(f"reward={value:.12g}")
    return summary


def cmd_pontryagin(cfg: ExperimentConfig, w: ArtifactWriter) -> dict:
    pc = cfg.pontryagin
    prob = _problem(cfg)
    spec = prob.spec
    rp = _driver(cfg, spec.d)
    gamma = _control(prob, rp, pc["control"])
    rep = pmp_check(spec, gamma, rp, prob.y0)
    w.dump("residual.csv", rep.to_csv)

    a = spec.actions.u[0] if pc["mu_action"] is None else float(pc["mu_action"])
    try:
        mu = DiscreteMeasure.dirac(spec.actions, a)
    except InvalidInput as e:
        raise ConfigError(str(e)) from None
    betas = dyadic_betas(spec.T, int(pc["beta_first"]), int(pc["beta_last"]))
    t0 = float(pc["t0"])
    state = state_gap_sweep(spec, t0, mu, gamma, rp, prob.y0, betas)
    rem = approx_derivative_check(spec, t0, mu, gamma, rp, prob.y0, betas)
    tay = taylor_reward_check(spec, t0, mu, gamma, rp, prob.y0, betas)
    header = ["beta", "sup_gap", "ratio"]
    w.table("sweep_state.csv", header, _ratio_rows(state))
    w.table("sweep_remainder.csv", header, _ratio_rows(rem))
    w.table("sweep_taylor.csv", header, _ratio_rows(tay))

    xbar = integrate_rde(spec, prob.y0, 0.0, gamma, rp)
    dual = duality_check(spec, SpikeConfig(state.t0, betas[0], mu), xbar, gamma, rp)
    verdict = "PASS" if rep.max <= PMP_TOL else "FAIL"
    summary = {
        "verdict": verdict, "max_residual": rep.max, "tolerance": PMP_TOL, "control": pc["control"],
        "t0": state.t0, "t0_snapped": state.snapped, "mu_action": a,
        "state_gap_order_one": state.within(2.0, 0.2) or state.decreasing(1.5),
        "remainder_vanishing": rem.decreasing(1.5), "taylor_vanishing": tay.decreasing(1.5),
        "duality_exact_gap": dual.exact_gap, "duality_left_gap": dual.left_gap, "duality_bound": dual.bound,
    }
    w.summary("summary.json", summary)
    print(f"{verdict} max residual={rep.max:.3e}")
    return summary


def cmd_qfunc(cfg: ExperimentConfig, w: ArtifactWriter) -> dict:
    qc = cfg.qfunc
    prob = _problem(cfg)
    spec = prob.spec
    rp = _driver(cfg, spec.d)
    gamma = _control(prob, rp, qc["control"])
    traj = integrate_rde(spec, prob.y0, 0.0, gamma, rp)
    acts = spec.actions.u
    chosen = [acts[0], acts[acts.size // 2], acts[-1]] if qc["actions"] is None else qc["actions"]
    try:
        mus = [(f"{float(a):.6g}", DiscreteMeasure.dirac(spec.actions, float(a))) for a in chosen]
    except InvalidInput as e:
        raise ConfigError(str(e)) from None
    rows, spreads, tols, sweep = [], [], [], None
    for t0 in qc["t0"]:
        k = _even_node(rp.grid, float(t0))
        t, y = rp.grid.t[k], traj.x[k]
        cells = [("gamma", gamma.measure(k))] + mus
        for name, mu in cells:
            e = evaluate_q(spec, t, y, mu, gamma, rp)
            rows.append((t, name, e.q_limit, e.q_derivative, e.q_hamiltonian, e.q_drift, e.spread,
                         e.limit_residual, e.scheme_error))
            if name != "gamma":
                spreads.append(e.spread)
                tols.append(max(1e-3, 5 * e.scheme_error))
                if sweep is None:
                    sweep = (t, y, mu)
    w.table("q_table.csv", ["t0", "a_or_mu_id", "q_limit", "q_derivative", "q_hamiltonian", "q_drift",
                            "spread", "limit_residual", "scheme_error"], rows)
    if sweep is not None:
        t, y, mu = sweep
        lim = q_limit(spec, t, y, mu, gamma, rp)
        betas = rp.grid.dt[rp.grid.index(t)] / 2.0 ** np.arange(lim.quotients.size)
        res = [abs(lim.quotients[i] - lim.quotients[i - 1]) if i else np.nan for i in range(betas.size)]
        w.table("q_limit_sweep.csv", ["beta", "quotient", "residual"], list(zip(betas, lim.quotients, res)))
    ok = bool(np.all(np.array(spreads) <= np.array(tols)))
    summary = {"max_spread": max(spreads, default=0.0), "all_within_tolerance": ok, "cells": len(rows)}
    w.summary("summary.json", summary)
    print(f"max spread={summary['max_spread']:.3e} within tolerance={ok}")
    return summary


def _start_policy(cfg: ExperimentConfig, prob: CatalogProblem, rp: RoughPath):
    ic = cfg.improve
    if ic["start"] == "random":
        return random_policy(prob.spec.actions, rp.grid, named_seed(cfg.seed, "policy-init"))
    if ic["start"] == "fixpoint":
        return open_loop_policy(prob.spec, prob.y0, rp, tol=float(ic["stop"])).gamma
    return RelaxedControl.constant(rp.grid, DiscreteMeasure.uniform(prob.spec.actions))


def cmd_improve(cfg: ExperimentConfig, w: ArtifactWriter) -> dict:
    ic = cfg.improve
    lam = ic["lam"] if ic["lam"] is not None else (cfg.lam if cfg.lam is not None else 1.0)
    if not float(lam) > 0:
        raise ConfigError("improve.lam must be positive")
    prob = _problem(cfg, lam=float(lam))
    spec = prob.spec
    rp = _driver(cfg, spec.d)
    gamma0 = _start_policy(cfg, prob, rp)
    header = ["iter", "J", "max_W2_step", "entropy_mean"]
    try:
        seq = policy_iteration(spec, gamma0, rp, prob.y0, iters=int(ic["iters"]), tol=float(ic["tol"]),
                               stop=float(ic["stop"]))
    except MonotonicityError as e:
        w.table("iterations.csv", ["iter", "J"], list(enumerate(e.values)))
        w.summary("summary.json", {"monotone": False, "failed_at": e.iteration, "values": e.values})
        raise
    w.table("iterations.csv", header,
            [(i, it.value, it.w2_step, it.entropy_mean) for i, it in enumerate(seq) if i > 0])
    for i, it in enumerate(seq):
        w.dump(f"policy_iter_{i:02d}.csv", it.gamma.to_csv)
    final = seq[-1]
    w.dump("policy.csv", final.gamma.to_csv)
    ident = q_policy_identity_check(spec, final.gamma, rp, prob.y0)
    summary = {"monotone": True, "start": ic["start"], "lam": float(lam), "initial_value": seq[0].value,
               "final_value": final.value, "iterations": len(seq) - 1, "last_w2_step": final.w2_step,
               "normalization_gap": ident.normalization_gap, "density_gap": ident.density_gap}
    if ic["compare_open_loop"]:
        ol = open_loop_policy(spec, prob.y0, rp, tol=1e-8)
        summary["open_loop_value"] = ol.value
        summary["open_loop_gap"] = abs(ol.value - final.value)
    w.summary("summary.json", summary)
    print(f"J: {seq[0].value:.12g} -> {final.value:.12g} in {len(seq) - 1} iterations")
    return summary


_COMMANDS = {"simulate": cmd_simulate, "pontryagin": cmd_pontryagin, "qfunc": cmd_qfunc,
             "improve": cmd_improve}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roughctrl", description="Rough-path relaxed control experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="root seed (overrides the config)")
    ap.add_argument("--grid", type=int, help="number of grid steps, a power of two")
    ap.add_argument("--out", help="output directory")
    return ap


def run(argv=None) -> int:
    try:
        args = parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed, args.grid)
        w = ArtifactWriter(resolve_out(cfg, args.out), cfg.hashed(), cfg.seed, args.command)
        _COMMANDS[args.command](cfg, w)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MonotonicityError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MONOTONICITY
    except (InvalidInput, UnsupportedRegularity) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())
