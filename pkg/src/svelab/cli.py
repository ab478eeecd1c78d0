"""
Experiment runner: plain-text sectioned configuration, canned experiments
(resolvent tables, Picard solves, bound verification, Wasserstein distances)
and CSV emission with reproducibility metadata.

Exit codes: 0 success / all pass, 1 internal error, 2 configuration or input
error, 3 verification failure or infeasibility.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .kernel_lab import (Constant, DomainError, TimeGrid, TransformedFractional, TriangularTable,
                         Zero, power_kernel, write_table_csv)

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------- config

SCHEMA: Dict[str, Dict[str, tuple]] = {
    "kernel": {
        "family": (str, "constant"),          # constant | zero | power | transformed_fractional
        "c": (float, 1.0),
        "alpha": (float, 1.0),
        "beta": (float, 0.0),
        "gamma": (float, 1.0),
        "scale": (float, 1.0),
    },
    "coefficients": {
        "family": (str, "zero"),              # zero | linear | mean_field
        "x0": (float, 0.0),
        "a": (float, 0.0),                    # drift factor on the state (or on its mean)
        "kappa": (float, 0.0),                # constant drift term
        "sigma": (float, 0.0),                # constant diffusion term
        "sigma_x": (float, 0.0),              # diffusion factor on the state
        "beta": (float, 1.0),                 # drift lag kernel u^(beta - 1)
        "gamma": (float, 0.5),                # diffusion lag kernel u^(gamma - 1/2)
    },
    "grid": {"T": (float, 1.0), "steps": (int, 256)},
    "mc": {
        "N": (int, 1000),
        "seed": (int, 0),
        "d": (int, 1),
        "max_iters": (int, 50),
        "drift_rule": (str, "trapezoid"),
        "diffusion_rule": (str, "point"),
        "seminorm": (str, "infty"),
    },
    "analysis": {
        "p": (float, 2.0),
        "w_p": (float, None),
        "tol": (float, 1e-6),
        "slack": (float, 1.05),
        "error_slack": (float, 1.01),
        "eps": (float, 0.5),
        "ledger_p": (float, 1.0),
        "m_max": (int, 4),
        "n_max": (int, 10),
        "n_terms": (int, 5),
        "series_tol": (float, 1e-10),
        "ineq_beta": (float, 1.0),
        "ineq_p": (float, 1.0),
        "ineq_v": (float, 1.0),
        "ineq_iters": (int, 6),
        "holder": (bool, False),
        "holder_lag_min": (int, 1),
        "holder_lag_max": (int, 0),
    },
    "output": {"dir": (str, "out"), "ensemble": (bool, False)},
}


def _convert(kind, raw, where):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    values: Dict[str, Dict[str, object]]
    present: List[str] = field(default_factory=list)
    source: str = "<string>"
    digest: str = ""

    def __getitem__(self, section):
        return self.values[section]

    def require(self, *sections):
        for s in sections:
            if s not in self.present:
                raise ConfigError(f"{self.source}: missing [{s}] section")


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse '[section]' headers and 'key = value' lines; '#' starts a comment."""
    found: Dict[str, Dict[str, object]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {s!r}")
            section = s[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            if section in found:
                raise ConfigError(f"{where}: duplicate section [{section}]")
            found[section] = {}
            continue
        if "=" not in s:
            raise ConfigError(f"{where}: expected 'key = value', got {s!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any section")
        key, raw = (x.strip() for x in s.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if key in found[section]:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        found[section][key] = _convert(SCHEMA[section][key][0], raw, where)
    values = {sec: {k: found.get(sec, {}).get(k, d) for k, (_, d) in keys.items()}
              for sec, keys in SCHEMA.items()}
    canon = "\n".join(f"{sec}.{k}={values[sec][k]!r}" for sec in sorted(values) for k in sorted(values[sec]))
    cfg = ExperimentConfig(values, list(found), source, hashlib.sha256(canon.encode()).hexdigest())
    _validate(cfg)
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path)


def _validate(cfg: ExperimentConfig):
    k, c, g, mc, an = (cfg[s] for s in ("kernel", "coefficients", "grid", "mc", "analysis"))
    checks = [
        (k["family"] in ("constant", "zero", "power", "transformed_fractional"),
         f"unknown kernel family {k['family']!r}"),
        (c["family"] in ("zero", "linear", "mean_field"), f"unknown coefficient family {c['family']!r}"),
        (g["steps"] >= 1, "grid.steps must be >= 1"),
        (g["T"] > 0, "grid.T must be positive"),
        (mc["N"] >= 1, "mc.N must be >= 1"),
        (mc["d"] == 1, "mc.d must be 1 for the scalar coefficient families"),
        (an["p"] >= 2, "analysis.p must be >= 2"),
        (an["w_p"] is None or an["w_p"] > 0, "analysis.w_p must be positive"),
        (mc["drift_rule"] in ("trapezoid", "left"), "mc.drift_rule must be trapezoid or left"),
        (mc["diffusion_rule"] in ("point", "cell"), "mc.diffusion_rule must be point or cell"),
        (mc["seminorm"] in ("infty", "int"), "mc.seminorm must be infty or int"),
        (c["beta"] > 0 and c["gamma"] > 0, "coefficients.beta and gamma must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(f"{cfg.source}: {msg}")


# ------------------------------------------------------------ builders

def build_grid(cfg) -> TimeGrid:
    return TimeGrid(cfg["grid"]["T"], cfg["grid"]["steps"])


def build_kernel(cfg):
    k = cfg["kernel"]
    fam = k["family"]
    if fam == "constant":
        return Constant(k["c"])
    if fam == "zero":
        return Zero()
    if fam == "power":
        return power_kernel(k["alpha"], k["scale"])
    return TransformedFractional(k["alpha"], k["beta"], k["gamma"])


def w_p_of(cfg) -> float:
    from .analysis import bdg_constant
    w = cfg["analysis"]["w_p"]
    return bdg_constant(cfg["analysis"]["p"]) if w is None else w


def _lag_specs(c):
    """(drift lag kernel, diffusion lag kernel) as KernelSpec-style convolution kernels."""
    return power_kernel(c["beta"]), power_kernel(c["gamma"] + 0.5)


def build_coefficients(cfg):
    from .sve_solver import ControlledMV, Exemplary, ZeroCoefficients, power_lag
    c = cfg["coefficients"]
    fam = c["family"]
    if fam == "zero":
        return ZeroCoefficients()
    drift_on = c["a"] != 0 or c["kappa"] != 0
    diff_on = c["sigma"] != 0 or c["sigma_x"] != 0
    f = power_lag(c["beta"] - 1.0) if drift_on else None
    g = power_lag(c["gamma"] - 0.5) if diff_on else None
    a, kap, sig, sx = c["a"], c["kappa"], c["sigma"], c["sigma_x"]
    if fam == "linear":
        return Exemplary(f=f, g=g, kappa=kap if kap else None, eta=sig if sig else None,
                         f1=lambda x, _a: a * x,
                         g1=(lambda x, _a: sx * x[..., None]) if sx else None)
    # mean field: drift on the ensemble mean
    b = (lambda s, x, _a, law: kap + a * law.mean()[None]) if drift_on else None
    sigma = (lambda s, x, _a, law: (sig + sx * x)[..., None]) if diff_on else None
    return ControlledMV(b=b, sigma=sigma,
                        drift_kernel=f if f is not None else 1.0,
                        diffusion_kernel=g if g is not None else 1.0)


def growth_kernels(cfg, grid: TimeGrid):
    """k0 on the nodes and the transformed kernel l for the affine coefficient families."""
    from .resolvent import transformed_kernel_l
    c = cfg["coefficients"]
    wp = w_p_of(cfg)
    fk, gk = _lag_specs(c)
    t = grid.nodes
    k0 = np.abs(c["kappa"]) * np.array([fk.row_integral(1.0, x) for x in t]) + \
        wp * np.abs(c["sigma"]) * np.sqrt([gk.row_integral(2.0, x) for x in t])
    if c["family"] == "zero":
        z = Zero().tabulate(grid)
        return 0 * k0, transformed_kernel_l(z, z, wp, grid)
    return k0, transformed_kernel_l(_scaled_table(fk, abs(c["a"]), grid),
                                    _scaled_table(gk, abs(c["sigma_x"]), grid), wp, grid)


def _scaled_table(spec, factor, grid):
    if factor == 0:
        return Zero().tabulate(grid)
    tab = spec.tabulate(grid)
    return TriangularTable(grid, factor * tab.values, tab.exponent)


# ------------------------------------------------------------- output

def _header(cfg, seed, command):
    return [f"config_hash={cfg.digest}", f"seed={seed}", f"version={__version__}", f"command={command}"]


def _outdir(cfg, args):
    d = args.out or cfg["output"]["dir"]
    os.makedirs(d, exist_ok=True)
    return d


def _write_rows(path, header, cols, rows):
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _seed(cfg, args):
    return cfg["mc"]["seed"] if args.seed is None else args.seed


# ----------------------------------------------------------- commands

def cmd_resolvent(cfg, args) -> int:
    from .resolvent import (function_series_I_l, iterated_kernels, l_np_and_c, resolvent,
                            volterra_residual)
    cfg.require("kernel", "grid")
    an = cfg["analysis"]
    grid = build_grid(cfg)
    spec = build_kernel(cfg)
    out = _outdir(cfg, args)
    head = _header(cfg, _seed(cfg, args), "resolvent")
    base = spec.tabulate(grid)
    stack = iterated_kernels(base, an["n_terms"])
    write_table_csv(os.path.join(out, "iterated_kernels.csv"), grid,
                    [(f"R_{i}", stack[i].values) for i in range(1, an["n_terms"] + 1)], head)
    res = resolvent(base, an["series_tol"])
    resid = volterra_residual(base, res)
    write_table_csv(os.path.join(out, "resolvent.csv"), grid,
                    [("value", res.values), ("residual", resid)], head)
    I = function_series_I_l(base, tol=an["series_tol"])
    _, c = l_np_and_c(base, an["p"], tol=an["series_tol"])
    _write_rows(os.path.join(out, "series.csv"), head, ["t", "I_l", f"c_l_{an['p']:g}"],
                zip(grid.nodes, I.values, c.values))
    print(f"resolvent(T, 0) = {res.values[-1, 0]:.10g}; max residual {np.max(resid):.3e}; "
          f"I_l(T) = {I.values[-1]:.6g}")
    return EXIT_OK


def _solve(cfg, args, keep_iterates=False):
    from .sve_solver import BrownianDriver, solve
    mc, an = cfg["mc"], cfg["analysis"]
    grid = build_grid(cfg)
    coef = build_coefficients(cfg)
    drv = BrownianDriver(mc["N"], grid, mc["d"], _seed(cfg, args), args.threads)
    return solve(cfg["coefficients"]["x0"], coef, drv, an["tol"], mc["max_iters"], an["p"],
                 mc["seminorm"], mc["drift_rule"], mc["diffusion_rule"], args.threads, keep_iterates)


def _error_report(cfg, result):
    from .analysis import check_error_vs_mc, moment_curve_from_states, picard_error_bound_table
    an = cfg["analysis"]
    its = result.iterates_kept
    grid = result.ensemble.grid
    D = moment_curve_from_states(its[1].states - its[0].states, grid, an["p"]).values
    nodes = grid.nodes

    def bound_on(g, n_max):
        _, lam = growth_kernels(cfg, g)
        return picard_error_bound_table(lam, lambda t: np.interp(t, nodes, D), n_max, an["series_tol"])

    return check_error_vs_mc(its, result.ensemble, bound_on, an["error_slack"], an["p"], w_p=w_p_of(cfg))


def _growth_report(cfg, result):
    from .analysis import check_growth_vs_mc, growth_bound_1
    an = cfg["analysis"]
    grid = result.ensemble.grid
    k0, l = growth_kernels(cfg, grid)
    x0 = abs(cfg["coefficients"]["x0"])
    b = growth_bound_1(k0, l, x0, tol=an["series_tol"])
    return check_growth_vs_mc(result.ensemble, b.values, an["slack"], an["p"],
                              xi=cfg["coefficients"]["x0"], w_p=w_p_of(cfg))


def _stamp(rep, cfg, seed):
    rep.config_hash, rep.seed = cfg.digest, seed
    return rep


def cmd_solve(cfg, args) -> int:
    from .analysis import holder_exponent, moment_function
    cfg.require("coefficients", "grid", "mc")
    an = cfg["analysis"]
    seed = _seed(cfg, args)
    out = _outdir(cfg, args)
    head = _header(cfg, seed, "solve")
    r = _solve(cfg, args, keep_iterates=True)
    X = r.ensemble
    grid = X.grid
    mean = X.mean()
    sd = X.states.std(axis=0, ddof=1) if X.N > 1 else np.zeros_like(mean)
    _write_rows(os.path.join(out, "summary.csv"), head,
                ["t"] + [f"mean_{k + 1}" for k in range(X.m)] + [f"sd_{k + 1}" for k in range(X.m)]
                + ["equation_residual"],
                ([t] + list(mean[j]) + list(sd[j]) + [r.equation_residual[j]] for j, t in enumerate(grid.nodes)))
    moment_function(X, an["p"]).to_csv(os.path.join(out, "moments.csv"), head)
    _write_rows(os.path.join(out, "picard_residuals.csv"), head, ["iteration", "seminorm"],
                ([k + 1, v] for k, v in enumerate(r.residuals)))
    _stamp(_error_report(cfg, r), cfg, seed).to_csv(os.path.join(out, "picard_error_report.csv"), head)
    if an["holder"]:
        hi = an["holder_lag_max"] or max(2, grid.n_steps // 8)
        h = holder_exponent(X, an["p"], (an["holder_lag_min"], hi))
        _write_rows(os.path.join(out, "holder.csv"), head, ["p", "lag_min", "lag_max", "exponent"],
                    [[an["p"], an["holder_lag_min"], hi, h]])
        print(f"moment-increment exponent {h:.4f}")
    if cfg["output"]["ensemble"]:
        X.to_csv(os.path.join(out, "ensemble.csv"), head)
    print(f"converged in {r.iterations} iterations; final seminorm {r.residuals[-1]:.3e}")
    return EXIT_OK


def cmd_verify(cfg, args) -> int:
    from .analysis import equality_sequence, resolvent_inequality_check
    from .resolvent import verify_bound_first_kind, verify_bound_second_kind
    an = cfg["analysis"]
    seed = _seed(cfg, args)
    out = _outdir(cfg, args)
    head = _header(cfg, seed, f"verify {args.which}")
    which = args.which
    if which in ("bounds_41", "bounds_42"):
        cfg.require("kernel", "grid")
        fn = verify_bound_first_kind if which == "bounds_41" else verify_bound_second_kind
        led = fn(build_kernel(cfg), an["ledger_p"], an["eps"], build_grid(cfg), an["m_max"], an["n_max"])
        led.to_csv(os.path.join(out, f"ledger_{which}.csv"), head)
        ok = led.all_satisfied
        print(f"{which}: delta={led.delta:.6g} c0={led.c0:.6g}; "
              f"{sum(e.satisfied for e in led.entries)}/{len(led.entries)} entries satisfied")
    elif which == "inequality_33":
        cfg.require("kernel", "grid")
        grid = build_grid(cfg)
        l = build_kernel(cfg).tabulate(grid)
        seq = equality_sequence(an["ineq_v"], l, an["ineq_beta"], 0.0, an["ineq_iters"])
        rep = _stamp(resolvent_inequality_check(an["ineq_v"], l, an["ineq_beta"], an["ineq_p"], seq), cfg, seed)
        rep.to_csv(os.path.join(out, "inequality_report.csv"), head)
        ok = rep.all_pass
        print(f"inequality_33: max |lhs - rhs| = {np.max(np.abs(rep.lhs - rep.rhs)):.3e}")
    elif which in ("growth", "error"):
        cfg.require("coefficients", "grid", "mc")
        r = _solve(cfg, args, keep_iterates=which == "error")
        rep = _growth_report(cfg, r) if which == "growth" else _error_report(cfg, r)
        _stamp(rep, cfg, seed).to_csv(os.path.join(out, f"{which}_report.csv"), head)
        ok = rep.all_pass
        print(f"{which}: {int(np.sum(rep.passed))}/{len(rep.passed)} rows pass")
    else:
        raise ConfigError(f"unknown verification {which!r}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_wasserstein(args) -> int:
    from .measures import DiscreteMeasure, wasserstein_p
    mu = DiscreteMeasure.from_csv(args.A)
    nu = DiscreteMeasure.from_csv(args.B)
    dist, plan = wasserstein_p(mu, nu, args.p)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    pi = plan.coupling
    _write_rows(os.path.join(out, "plan.csv"), [f"A={args.A}", f"B={args.B}", f"p={args.p!r}",
                                                f"version={__version__}"],
                ["i", "j", "mass"],
                ([i, j, pi[i, j]] for i in range(pi.shape[0]) for j in range(pi.shape[1]) if pi[i, j] > 0))
    print(repr(dist))
    return EXIT_OK


# -------------------------------------------------------------- entry

def build_parser():
    ap = argparse.ArgumentParser(prog="svelab", description="stochastic Volterra equation experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration file")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int, default=None, help="override mc.seed")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("resolvent", parents=[common], help="iterated kernels, resolvent, I_l and c_l,p")
    sub.add_parser("solve", parents=[common], help="Picard solve with moment and error reports")
    v = sub.add_parser("verify", parents=[common], help="bound ledgers and reports")
    v.add_argument("--which", required=True,
                   choices=["bounds_41", "bounds_42", "inequality_33", "growth", "error"])
    w = sub.add_parser("wasserstein", parents=[common], help="W_p between two measure CSV files")
    w.add_argument("A")
    w.add_argument("B")
    w.add_argument("--p", type=float, default=1.0)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    from .resolvent import InfeasibleError
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "wasserstein":
            return cmd_wasserstein(args)
        if not args.config:
            raise ConfigError("--config is required")
        cfg = load_config(args.config)
        return {"resolvent": cmd_resolvent, "solve": cmd_solve, "verify": cmd_verify}[args.command](cfg, args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
