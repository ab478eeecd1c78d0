"""
Monte Carlo moment curves, deterministic growth / comparison / Picard-error
bounds built from iterated kernels, increment bounds, checks of the
resolvent sequence inequality, Hölder diagnostics and the two seminorms on
path ensembles.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .kernel_lab import DomainError, TimeGrid, TriangularTable, row_integrals
from .resolvent import (N_MAX, TOL, SeriesFunction, TruncationError, iterate_tables,
                        l_np_tables)

SLACK = 1.05
N_SE = 3.0


def bdg_constant(p: float) -> float:
    """Default w_p: 2 for p = 2, (p/(p-1)) (p(p-1)/2)^(1/2) otherwise."""
    if p < 2:
        raise DomainError(f"p must be >= 2, got {p}")
    if p == 2:
        return 2.0
    return p / (p - 1) * np.sqrt(p * (p - 1) / 2)


def _nodes_fn(x, grid: TimeGrid) -> np.ndarray:
    """Sample a function / scalar / array on the grid nodes."""
    t = grid.nodes
    if x is None:
        return np.zeros_like(t)
    if callable(x):
        v = np.asarray(x(t), dtype=float)
    else:
        v = np.asarray(x, dtype=float)
    return np.broadcast_to(v, t.shape).astype(float)


# ----------------------------------------------------------- moments

@dataclass
class MomentCurve:
    t: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    p: float
    N: int

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t", "moment", "stderr"])
            for a, b, c in zip(self.t, self.values, self.stderr):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


def _norms(states):
    return np.linalg.norm(states, axis=-1)


def moment_curve_from_states(states: np.ndarray, grid: TimeGrid, p: float) -> MomentCurve:
    N = states.shape[0]
    a = _norms(states) ** p
    mu = a.mean(axis=0)
    sd = a.std(axis=0, ddof=1) if N > 1 else np.zeros_like(mu)
    val = mu ** (1.0 / p)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(mu > 0, (1.0 / p) * mu ** (1.0 / p - 1.0) * sd / np.sqrt(N), 0.0)
    return MomentCurve(grid.nodes, val, se, p, N)


def moment_function(ensemble, p: float = 2.0) -> MomentCurve:
    """(E|X_t|^p)^(1/p) per node with delta-method standard errors."""
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    return moment_curve_from_states(np.asarray(ensemble.states), ensemble.grid, p)


def _diff_moments(A, B, p):
    d = np.asarray(A.states) - np.asarray(B.states)
    return np.mean(_norms(d) ** p, axis=0)


def seminorm_infty_p(A, B, p: float = 2.0, T: Optional[float] = None) -> float:
    """max over nodes t <= T of (E|X_t - Y_t|^p)^(1/p)."""
    grid = A.grid
    m = _diff_moments(A, B, p)
    keep = grid.nodes <= (grid.T if T is None else T) + 1e-12
    return float(np.max(m[keep]) ** (1.0 / p))


def seminorm_int_p(A, B, p: float = 2.0, T: Optional[float] = None) -> float:
    """(int_0^T E|X_t - Y_t|^p dt)^(1/p) by the trapezoid rule on the nodes."""
    grid = A.grid
    m = _diff_moments(A, B, p)
    keep = grid.nodes <= (grid.T if T is None else T) + 1e-12
    return float(integrate.trapezoid(m[keep], grid.nodes[keep]) ** (1.0 / p))


# ----------------------------------------------------------- reports

@dataclass
class BoundReport:
    t: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    slack: float
    passed: np.ndarray
    label: str = ""
    w_p: Optional[float] = None
    stderr: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None        # e.g. iterate number per row
    config_hash: str = ""
    seed: Optional[int] = None

    @property
    def all_pass(self) -> bool:
        return bool(np.all(self.passed))

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# report={self.label} slack={self.slack!r} w_p={self.w_p!r} "
                     f"config_hash={self.config_hash} seed={self.seed}\n")
            w = csv.writer(fh)
            cols = (["n"] if self.index is not None else []) + ["t", "lhs", "rhs"] + \
                (["stderr"] if self.stderr is not None else []) + ["pass"]
            w.writerow(cols)
            t = np.ravel(self.t)
            for k in range(len(t)):
                row = ([int(np.ravel(self.index)[k])] if self.index is not None else []) + \
                    [repr(float(t[k])), repr(float(np.ravel(self.lhs)[k])), repr(float(np.ravel(self.rhs)[k]))]
                if self.stderr is not None:
                    row.append(repr(float(np.ravel(self.stderr)[k])))
                row.append(str(bool(np.ravel(self.passed)[k])).lower())
                w.writerow(row)


def check_growth_vs_mc(solution, bound, slack: float = SLACK, p: float = 2.0, xi=None,
                       n_se: float = N_SE, w_p: Optional[float] = None) -> BoundReport:
    """Empirical (E|X_t - xi_t|^p)^(1/p) against a deterministic bound.

    A node passes when lhs <= slack * rhs + n_se * stderr.
    """
    states = np.asarray(solution.states, dtype=float)
    if xi is not None:
        from .sve_solver import as_process
        states = states - as_process(xi, states.shape[0], solution.grid, states.shape[2])
    mc = moment_curve_from_states(states, solution.grid, p)
    rhs = _nodes_fn(bound, solution.grid)
    ok = mc.values <= slack * rhs + n_se * mc.stderr + 1e-15
    return BoundReport(mc.t, mc.values, rhs, slack, ok, "growth_vs_mc", w_p, mc.stderr)


def refinement_gap(bound_on: Callable[[TimeGrid], np.ndarray], grid: TimeGrid) -> np.ndarray:
    """|b_{h/2} - b_h| on the nodes: quadrature error estimate of a grid-evaluated bound."""
    coarse = np.asarray(bound_on(grid), dtype=float)
    fine = np.asarray(bound_on(TimeGrid(grid.T, 2 * grid.n_steps)), dtype=float)[..., ::2]
    return np.abs(fine - coarse)


def check_error_vs_mc(iterates: Sequence, solution, bound_on: Callable, slack: float = 1.01,
                      p: float = 2.0, n_se: float = N_SE, refine: bool = True,
                      w_p: Optional[float] = None) -> BoundReport:
    """Measured Picard error (E|X^(n)_t - X_t|^p)^(1/p) against a bound per iterate.

    ``bound_on(grid, n_max)`` returns an (n_max, nodes) array whose row n-1
    bounds iterate n.  A row passes when lhs <= slack * rhs + n_se * stderr
    + gap, where gap is the refinement gap of the bound (zero with refine=False).
    """
    grid = solution.grid
    sol = np.asarray(solution.states)
    n_max = len(iterates) - 1
    B = np.asarray(bound_on(grid, n_max), dtype=float)
    gap = refinement_gap(lambda g: bound_on(g, n_max), grid) if refine else np.zeros_like(B)
    rows = {k: [] for k in ("n", "t", "lhs", "rhs", "se", "ok")}
    for n in range(1, n_max + 1):
        mc = moment_curve_from_states(np.asarray(iterates[n].states) - sol, grid, p)
        rhs = B[n - 1]
        ok = mc.values <= slack * rhs + n_se * mc.stderr + gap[n - 1] + 1e-15
        for k, v in zip(("n", "t", "lhs", "rhs", "se", "ok"),
                        (np.full(len(grid), n), grid.nodes, mc.values, rhs, n_se * mc.stderr + gap[n - 1], ok)):
            rows[k].append(v)
    cat = {k: np.concatenate(v) for k, v in rows.items()}
    return BoundReport(cat["t"], cat["lhs"], cat["rhs"], slack, cat["ok"], "picard_error_vs_mc",
                       w_p, cat["se"], cat["n"])


# ------------------------------------------------------ type 1 bounds

def _weighted_series(kernel: TriangularTable, weight_sq: np.ndarray, tol: float, n_max: int,
                     start: int = 1, what: str = "series"):
    """Terms (int_0^t R_{k,i}(t,s) weight_sq(s) ds)^(1/2) for i = 1, 2, ... until negligible.

    Returns (list of node arrays indexed from i = 1, sup-term list).
    """
    terms, sups = [], []
    for i, R in enumerate(iterate_tables(kernel), start=1):
        term = np.sqrt(np.maximum(row_integrals(R, weight_sq), 0.0))
        terms.append(term)
        sups.append(float(np.max(term)))
        if not np.isfinite(sups[-1]):
            raise TruncationError(f"{what}: term {i} is infinite", None, sups)
        if i >= start and (sups[-1] == 0 and (i == 1 or sups[-2] == 0) or
                           (i > 1 and sups[-1] < tol and (sups[-2] == 0 or sups[-1] < sups[-2]))):
            return terms, sups
        if i >= n_max + start:
            raise TruncationError(f"{what}: terms not below tol={tol} within {n_max} terms", None, sups)


def growth_bound_1(k0, l: TriangularTable, xi_moments, grid: Optional[TimeGrid] = None,
                   tol: float = TOL, n_max: int = N_MAX) -> SeriesFunction:
    """k0(t) + sum_n (int R_{l^2,n} k0^2)^(1/2) + sum_n (int R_{l^2,n} E|xi|^{2})^(1/2)."""
    grid = l.grid if grid is None else grid
    k = _nodes_fn(k0, grid)
    x = _nodes_fn(xi_moments, grid)
    l2 = l.power(2)
    t1, _ = _weighted_series(l2, k ** 2, tol, n_max, what="growth bound")
    t2, _ = _weighted_series(l2, x ** 2, tol, n_max, what="growth bound")
    vals = k + np.sum(t1, axis=0) + np.sum(t2, axis=0)
    return SeriesFunction(grid, vals, [t1, t2])


def comparison_bound_1(lam: TriangularTable, diff_moments, grid: Optional[TimeGrid] = None,
                       tol: float = TOL, n_max: int = N_MAX) -> SeriesFunction:
    """D(t) + sum_n (int R_{lam^2,n} D^2)^(1/2) with D the moment of xi - xi~."""
    grid = lam.grid if grid is None else grid
    d = _nodes_fn(diff_moments, grid)
    terms, _ = _weighted_series(lam.power(2), d ** 2, tol, n_max, what="comparison bound")
    return SeriesFunction(grid, d + np.sum(terms, axis=0), terms)


def picard_error_bound_1(lam: TriangularTable, Delta, n: int, grid: Optional[TimeGrid] = None,
                         tol: float = TOL, n_max: int = N_MAX) -> SeriesFunction:
    """sum_{i >= n} (int_0^t R_{lam^2,i}(t,s) Delta(s)^2 ds)^(1/2)."""
    if n < 1:
        raise DomainError("iterate index n must be >= 1")
    grid = lam.grid if grid is None else grid
    D = _nodes_fn(Delta, grid)
    terms, _ = _weighted_series(lam.power(2), D ** 2, tol, n_max + n, start=n, what="Picard error bound")
    tail = terms[n - 1:]
    vals = np.sum(tail, axis=0) if tail else np.zeros(len(grid))
    return SeriesFunction(grid, vals, tail)


def picard_error_bound_table(lam: TriangularTable, Delta, n_max: int, tol: float = TOL,
                             max_terms: int = N_MAX) -> np.ndarray:
    """Rows n = 1..n_max of picard_error_bound_1, sharing one pass over the iterated kernels."""
    grid = lam.grid
    D = _nodes_fn(Delta, grid)
    terms, _ = _weighted_series(lam.power(2), D ** 2, tol, max_terms + n_max, start=n_max,
                                what="Picard error bound")
    T = np.asarray(terms)
    tails = np.cumsum(T[::-1], axis=0)[::-1]
    out = np.zeros((n_max, len(grid)))
    k = min(n_max, len(T))
    out[:k] = tails[:k]
    return out


def picard_error_tail_coefficients(lam: TriangularTable, tol: float = TOL, n_max: int = N_MAX) -> np.ndarray:
    """c_n = sum_{i >= n} max_t (int_0^t R_{lam^2,i}(t,s) ds)^(1/2), n = 1, 2, ..."""
    terms, sups = _weighted_series(lam.power(2), np.ones(len(lam.grid)), tol, n_max,
                                   what="tail coefficients")
    return np.cumsum(np.asarray(sups)[::-1])[::-1]


# ------------------------------------------------------ type 2 bounds

def _lp_integral(L: np.ndarray, grid: TimeGrid, w: np.ndarray) -> np.ndarray:
    """int_0^t L(t,s) w(s) ds per node by the trapezoid rule (L has a finite diagonal)."""
    return row_integrals(TriangularTable(grid, np.tril(L), None), w)


def growth_bound_2(l: TriangularTable, p: float, k0, xi_moments=None, grid: Optional[TimeGrid] = None,
                   tol: float = TOL, n_max: int = N_MAX) -> SeriesFunction:
    """(int k0^p)^(1/p) + sum_n (int l_{n,p} k0^p)^(1/p) + sum_n (int l_{n,p} E|xi|^p)^(1/p)."""
    grid = l.grid if grid is None else grid
    kp = _nodes_fn(k0, grid) ** p
    xp = _nodes_fn(xi_moments, grid) ** p
    base = row_integrals(TriangularTable(grid, np.tril(np.ones((len(grid), len(grid)))), None), kp)
    vals = base ** (1.0 / p)
    terms = []
    for L in l_np_tables(l, p, n_max, tol):
        a = _lp_integral(L, grid, kp) ** (1.0 / p)
        b = _lp_integral(L, grid, xp) ** (1.0 / p)
        terms.append(a + b)
        vals = vals + a + b
    return SeriesFunction(grid, vals, terms)


def error_bound_2(lam: TriangularTable, p: float, Delta, n: int, grid: Optional[TimeGrid] = None,
                  tol: float = TOL, n_max: int = N_MAX) -> SeriesFunction:
    """sum_{i >= n} (int_0^t lam_{i,p}(t,s) Delta(s)^p ds)^(1/p)."""
    if n < 1:
        raise DomainError("iterate index n must be >= 1")
    grid = lam.grid if grid is None else grid
    dp = _nodes_fn(Delta, grid) ** p
    terms = [_lp_integral(L, grid, dp) ** (1.0 / p) for L in l_np_tables(lam, p, n_max + n, tol)]
    tail = terms[n - 1:]
    vals = np.sum(tail, axis=0) if tail else np.zeros(len(grid))
    return SeriesFunction(grid, vals, tail)


def growth_and_error_bounds_2(l: TriangularTable, p: float, k0=None, xi_moments=None,
                              lam: Optional[TriangularTable] = None, Delta=None, n: int = 1,
                              grid: Optional[TimeGrid] = None, tol: float = TOL, n_max: int = N_MAX):
    """(growth bound, Picard error bound) for integrable moment functions."""
    g = growth_bound_2(l, p, k0, xi_moments, grid, tol, n_max)
    e = error_bound_2(l if lam is None else lam, p, Delta, n, grid, tol, n_max)
    return g, e


# -------------------------------------------------- increment bound

def _quad(fn, a, b):
    if b <= a:
        return 0.0
    return float(integrate.quad(fn, a, b, limit=200)[0])


def increment_bound(s: float, t: float, xi_increment: float = 0.0, k1=None, k2=None,
                    l1=None, l2=None, f1=None, f2=None, g1=None, g2=None,
                    moments=None, w_p: float = 2.0) -> float:
    """Bound on (E|X_t - X_s|^p)^(1/p) for a Volterra process.

    k1, k2, l1, l2 are kernels (t, s) -> value; f1, f2, g1, g2 are functions of
    (t, s, r) bounding the increments of B and Sigma in the first variable;
    ``moments`` is r -> (E|X_r|^p)^(1/p).  Missing pieces count as zero.
    """
    if s > t:
        raise DomainError("need s <= t")
    M = (lambda r: 0.0) if moments is None else (
        moments if callable(moments) else (lambda r, c=float(moments): c))
    out = float(xi_increment)
    if s == t:
        return out
    if k1 is not None:
        out += _quad(lambda u: k1(t, u), s, t)
    if k2 is not None:
        out += w_p * np.sqrt(_quad(lambda u: k2(t, u) ** 2, s, t))
    if f1 is not None:
        out += _quad(lambda r: f1(t, s, r), 0.0, s)
    if f2 is not None:
        out += w_p * np.sqrt(_quad(lambda r: f2(t, s, r) ** 2, 0.0, s))
    if l1 is not None or l2 is not None:
        L1 = (lambda a, b: 0.0) if l1 is None else l1
        L2 = (lambda a, b: 0.0) if l2 is None else l2
        i1 = _quad(lambda u: L1(t, u), 0.0, t)
        i2 = _quad(lambda u: L1(t, u) ** 2, 0.0, t)

        def lker(u):
            return 2 * max(np.sqrt(min(L1(t, u) * i1, i2)), w_p * L2(t, u))

        out += np.sqrt(_quad(lambda u: lker(u) ** 2 * M(u) ** 2, s, t))
    if g1 is not None or g2 is not None:
        G1 = (lambda a, b, c: 0.0) if g1 is None else g1
        G2 = (lambda a, b, c: 0.0) if g2 is None else g2
        j1 = _quad(lambda r: G1(t, s, r), 0.0, s)
        j2 = _quad(lambda r: G1(t, s, r) ** 2, 0.0, s)

        def gker(r):
            return 2 * max(np.sqrt(min(G1(t, s, r) * j1, j2)), w_p * G2(t, s, r))

        out += np.sqrt(_quad(lambda r: gker(r) ** 2 * M(r) ** 2, 0.0, s))
    return float(out)


# ----------------------------------------- resolvent sequence inequality

def _grid_measure_operator(l: TriangularTable, beta: float) -> np.ndarray:
    """A with (A^i f)(t) = int_[0,t] R_{l^beta, mu, i}(t,s) f(s) mu(ds).

    mu puts mass h on each node t_1..t_n (none on t_0), so the iterated kernels
    relative to mu are exact matrix powers.
    """
    L = l.lower()
    if not np.all(np.isfinite(L)):
        raise DomainError("the grid measure needs a kernel that is finite on the diagonal")
    w = np.full(len(l.grid), l.grid.h)
    w[0] = 0.0
    return np.tril(L ** beta) * w[None, :]


def resolvent_sequence_rhs(v, l: TriangularTable, beta: float, M0, n: int) -> np.ndarray:
    """v + sum_{i<n} (A^i v^beta)^(1/beta) + (A^n M0^beta)^(1/beta) on the nodes."""
    grid = l.grid
    A = _grid_measure_operator(l, beta)
    vb = _nodes_fn(v, grid)
    out = vb.copy()
    x = vb ** beta
    for _ in range(1, n):
        x = A @ x
        out = out + x ** (1.0 / beta)
    y = _nodes_fn(M0, grid) ** beta
    for _ in range(n):
        y = A @ y
    return out + y ** (1.0 / beta)


def equality_sequence(v, l: TriangularTable, beta: float, M0, n_iters: int):
    """M_0, ..., M_n with M_k = v + (int l^beta M_{k-1}^beta dmu)^(1/beta) exactly."""
    grid = l.grid
    A = _grid_measure_operator(l, beta)
    vb = _nodes_fn(v, grid)
    seq = [_nodes_fn(M0, grid)]
    for _ in range(n_iters):
        seq.append(vb + (A @ seq[-1] ** beta) ** (1.0 / beta))
    return seq


def resolvent_inequality_check(v, l: TriangularTable, beta: float, p: float, X_moments: Sequence,
                               grid: Optional[TimeGrid] = None, rtol: float = 1e-12) -> BoundReport:
    """Check M_n <= v + sum_{i<n}(int R_i v^beta)^(1/beta) + (int R_n M_0^beta)^(1/beta).

    ``X_moments[k]`` holds (E[(X^(k))^p])^(1/p) on the nodes.  Rows are (n, t);
    ``lhs - rhs`` is the slack of each row and equality cases show up as
    zero gaps.  The hypothesis M_n <= v + (int l^beta M_{n-1}^beta)^(1/beta)
    is checked too and reported through ``label``.
    """
    grid = l.grid if grid is None else grid
    if beta < 1 or p < 1:
        raise DomainError("need beta >= 1 and p >= 1")
    Ms = [_nodes_fn(M, grid) for M in X_moments]
    if len(Ms) < 2:
        raise DomainError("need at least M_0 and M_1")
    A = _grid_measure_operator(l, beta)
    vb = _nodes_fn(v, grid)
    rows_n, rows_t, lhs, rhs = [], [], [], []
    hyp_ok = True
    for n in range(1, len(Ms)):
        hyp = vb + (A @ Ms[n - 1] ** beta) ** (1.0 / beta)
        hyp_ok &= bool(np.all(Ms[n] <= hyp * (1 + rtol) + rtol))
        r = resolvent_sequence_rhs(vb, l, beta, Ms[0], n)
        rows_n.append(np.full(len(grid), n))
        rows_t.append(grid.nodes)
        lhs.append(Ms[n])
        rhs.append(r)
    lhs, rhs = np.concatenate(lhs), np.concatenate(rhs)
    ok = lhs <= rhs * (1 + rtol) + rtol
    label = "resolvent_sequence_inequality" + ("" if hyp_ok else " (hypothesis violated)")
    return BoundReport(np.concatenate(rows_t), lhs, rhs, 1.0, ok, label, index=np.concatenate(rows_n))


# --------------------------------------------------------- Hölder

def increment_moments(ensemble, p: float, lags: Sequence[int]) -> np.ndarray:
    """mean over particles and start nodes of |X_{j+k} - X_j|^p for each lag k."""
    X = np.asarray(ensemble.states)
    out = []
    for k in lags:
        if k < 1 or k >= X.shape[1]:
            raise DomainError(f"lag {k} outside 1..{X.shape[1] - 1}")
        out.append(np.mean(_norms(X[:, k:] - X[:, :-k]) ** p))
    return np.asarray(out)


def holder_exponent(ensemble, p: float = 2.0, lag_range=None) -> float:
    """Slope of log E|X_{t+u} - X_t|^p against log u, divided by p.

    ``lag_range`` is (k_min, k_max) in grid steps; default 1 .. n/8.
    """
    n = ensemble.grid.n_steps
    k0, k1 = (1, max(2, n // 8)) if lag_range is None else lag_range
    lags = np.unique(np.round(np.geomspace(k0, k1, num=min(20, k1 - k0 + 1))).astype(int))
    m = increment_moments(ensemble, p, lags)
    if np.any(m <= 0):
        raise DomainError("increments vanish; exponent undefined")
    slope = np.polyfit(np.log(lags * ensemble.grid.h), np.log(m), 1)[0]
    return float(slope / p)
