"""
Iterated kernels R_n on a uniform grid, resolvents, the derived kernels l and
l_{n,p}, the function series I_l and c_{l,p}, and numeric ledgers for the
window estimates of iterated kernels.

Tables carry the exponent of (t - s) near the diagonal.  The composition
int_s^t A(t, u) B(u, s) du is a trapezoid rule on interior cells with
product-integration end cells wherever A or B is singular, so power-law
kernels are treated without losing accuracy at the diagonal.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import special

from .kernel_lab import (
    DomainError, KernelSpec, TimeGrid, TriangularTable, _reversed_cols, _reversed_rows,
    col_partial_integrals,
    q_integral, row_integrals, row_partial_integrals, window_modulus,
)

N_MAX = 40
TOL = 1e-10


class TruncationError(RuntimeError):
    """Series did not decay within n_max terms; ``partial`` holds the partial sum."""

    def __init__(self, msg, partial=None, terms=None):
        super().__init__(msg)
        self.partial = partial
        self.terms = terms


class InfeasibleError(ValueError):
    """No window length on the grid meets the requested smallness."""


# ------------------------------------------------------------ composition

def _exp(e):
    return 0.0 if e is None else float(e)


def _masked_matmul(A, B):
    """A @ B where inf * 0 counts as 0 and inf * positive as inf."""
    ia, ib = np.isinf(A), np.isinf(B)
    if not (ia.any() or ib.any()):
        return A @ B
    A0 = np.where(ia, 0.0, A)
    B0 = np.where(ib, 0.0, B)
    out = A0 @ B0
    hit = (ia.astype(float) @ (B > 0).astype(float)) + ((A > 0).astype(float) @ ib.astype(float))
    out[hit > 0] = np.inf
    return out


def _safe_mul(x, y):
    with np.errstate(invalid="ignore"):
        z = x * y
    return np.where((x == 0) | (y == 0), 0.0, z)


def composition_exponent(a, b):
    """Exponent of int_s^t A B when A ~ (t-s)^a and B ~ (t-s)^b."""
    if a is None and b is None:
        return 1.0
    return _exp(a) + _exp(b) + 1.0


@functools.lru_cache(maxsize=32)
def _node_weights(n_lags: int, a: float, b: float) -> np.ndarray:
    """W[L, c] = weight of node c in int_0^L (L - x)^a x^b phi(x) dx, phi piecewise linear.

    Moments come from the incomplete beta function, so phi = const is exact.
    """
    Ls, cs = np.tril_indices(n_lags + 1)
    Ls, cs = Ls[1:], cs[1:]                       # drop L = 0
    x = cs / Ls
    I0 = np.zeros((n_lags + 1, n_lags + 1))
    I1 = np.zeros((n_lags + 1, n_lags + 1))
    I0[Ls, cs] = Ls ** (a + b + 1.0) * special.beta(b + 1, a + 1) * special.betainc(b + 1, a + 1, x)
    I1[Ls, cs] = Ls ** (a + b + 2.0) * special.beta(b + 2, a + 1) * special.betainc(b + 2, a + 1, x)
    m0 = np.diff(I0, axis=1)                      # cell c of window L: m0[L, c]
    m1 = np.diff(I1, axis=1) - np.arange(n_lags)[None, :] * m0
    cell = np.tril(np.ones((n_lags + 1, n_lags), dtype=bool), -1)
    m0 = np.where(cell, m0, 0.0)
    m1 = np.where(cell, m1, 0.0)
    W = np.zeros((n_lags + 1, n_lags + 1))
    W[:, :-1] += m0 - m1
    W[:, 1:] += m1
    W.setflags(write=False)
    return W


def _scaled(tab: np.ndarray, e: float, h: float) -> np.ndarray:
    """tab / lag^e on the lower triangle with the diagonal filled by the limit."""
    n = tab.shape[0]
    lag = np.subtract.outer(np.arange(n), np.arange(n)) * h
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(lag > 0, tab / np.where(lag > 0, lag, 1.0) ** e, 0.0)
    if e != 0 and n > 1:
        idx = np.arange(1, n)
        out[idx, idx] = out[idx, idx - 1]
        out[0, 0] = out[1, 0]
    else:
        out[np.arange(n), np.arange(n)] = np.diag(tab)
    return np.tril(out)


def _compose_product(K, R, a, b, h):
    """Product integration against (t - u)^a (u - s)^b on every cell."""
    n = K.shape[0]
    Kv = _reversed_rows(_scaled(K, a, h))   # Kv[i, d] = K~(t_i, t_{i-d})
    Rc = _reversed_cols(_scaled(R, b, h))   # Rc[j, c] = R~(t_{j+c}, t_j)
    W = _node_weights(n - 1, a, b) * h ** (a + b + 1)
    out = np.zeros((n, n))
    for L in range(1, n):
        js = np.arange(n - L)
        Kpart = Kv[L:, L::-1]              # K~(t_{j+L}, t_{j+c}), c = 0..L
        with np.errstate(invalid="ignore"):
            P = Kpart * Rc[:n - L, :L + 1]
            out[js + L, js] = P @ W[L, :L + 1]
    return out


def compose(left: TriangularTable, right: TriangularTable) -> TriangularTable:
    """C(t_i, t_j) = int_{t_j}^{t_i} left(t_i, u) right(u, t_j) du on all grid pairs.

    Regular tables and integer power laws use the trapezoid rule (so the
    resolvent equation holds with the same discrete operator); if either factor
    is singular or a fractional power at the diagonal every cell is integrated
    against the exact power weights.
    """
    if left.grid != right.grid:
        raise DomainError("tables live on different grids")
    grid = left.grid
    h = grid.h
    n = grid.n_steps + 1
    K, R = left.lower(), right.lower()
    a, b = left.exponent, right.exponent
    rough = any(e is not None and (e < 0 or e != round(e)) for e in (a, b))
    for name, tab, e in (("left", K, a), ("right", R, b)):
        if not (e is not None and e < 0) and np.isinf(np.diag(tab)).any():
            raise DomainError(f"{name} table has an infinite diagonal but no singular exponent")

    if rough:
        out = _compose_product(K, R, _exp(a), _exp(b), h)
    else:
        out = h * _masked_matmul(np.tril(K, -1), np.tril(R, -1))
        i, j = np.tril_indices(n, -1)
        with np.errstate(invalid="ignore"):
            out[i, j] += 0.5 * h * (_safe_mul(K[i, i], R[i, j]) + _safe_mul(K[i, j], R[j, j]))
    out[np.isnan(out)] = np.inf
    out = np.tril(out)

    e = composition_exponent(a, b)
    d = np.zeros(n)
    if e < 0:
        d[:] = np.inf
    elif e == 0:
        d[:-1] = out[np.arange(1, n), np.arange(n - 1)]
        d[-1] = d[-2] if n > 1 else 0.0
    out[np.arange(n), np.arange(n)] = d
    return TriangularTable(grid, out, None if (a is None and b is None) else e)


# ------------------------------------------------------- iterated kernels

@dataclass
class IteratedKernelStack:
    base: TriangularTable
    tables: List[TriangularTable]
    grid: TimeGrid
    power: float = 1.0

    @property
    def n_max(self):
        return len(self.tables)

    def __getitem__(self, n: int) -> TriangularTable:
        """R_n for n >= 1."""
        if n < 1 or n > len(self.tables):
            raise IndexError(f"R_{n} not in stack (1..{len(self.tables)})")
        return self.tables[n - 1]


def _check_base(base: TriangularTable):
    v = base.lower()
    if np.any(v < 0) or np.isnan(v).any():
        raise DomainError("base kernel table has negative or undefined entries")


def iterate_tables(base: TriangularTable):
    """Generator of R_1, R_2, ... for the base table."""
    _check_base(base)
    R = base
    while True:
        yield R
        R = compose(base, R)


def iterated_kernels(base: TriangularTable, n_max: int = N_MAX, grid: Optional[TimeGrid] = None,
                     power: float = 1.0) -> IteratedKernelStack:
    if grid is not None and grid != base.grid:
        raise DomainError("grid does not match the base table")
    if n_max < 1:
        raise DomainError("n_max must be >= 1")
    gen = iterate_tables(base)
    tables = [next(gen) for _ in range(n_max)]
    return IteratedKernelStack(base, tables, base.grid, power)


def _finite_sup(v):
    v = np.asarray(v, dtype=float)
    return float(np.max(v)) if v.size else 0.0


def resolvent_sum(stack: IteratedKernelStack, tol: float = TOL) -> TriangularTable:
    """Sum of R_n, stopping at the first term with sup < tol and decaying ratio.

    Diagonal entries are excluded from the sup (they are limits, possibly inf).
    """
    grid = stack.grid
    n = grid.n_steps + 1
    i, j = np.tril_indices(n, -1)
    total = np.zeros((n, n))
    prev = None
    terms = []
    for k, R in enumerate(stack.tables, start=1):
        total = total + R.lower()
        cur = _finite_sup(R.values[i, j])
        terms.append(cur)
        ratio = 0.0 if prev == 0 else (cur / prev if prev is not None else np.inf)
        if k > 1 and cur < tol and ratio < 1:
            return TriangularTable(grid, total, stack.base.exponent, "resolvent")
        if k == 1 and cur == 0:
            return TriangularTable(grid, total, stack.base.exponent, "resolvent")
        prev = cur
    partial = TriangularTable(grid, total, stack.base.exponent, "resolvent (partial)")
    raise TruncationError(f"iterated kernels not below tol={tol} within n_max={len(stack.tables)}"
                          f" (last sup {terms[-1]:.3e})", partial, terms)


def resolvent(base: TriangularTable, tol: float = TOL, n_max: int = N_MAX) -> TriangularTable:
    return resolvent_sum(iterated_kernels(base, n_max), tol)


def volterra_residual(kernel: TriangularTable, res: TriangularTable) -> np.ndarray:
    """|R - k - int k R| on strictly lower grid pairs (zeros elsewhere)."""
    conv = compose(kernel, res)
    n = kernel.values.shape[0]
    i, j = np.tril_indices(n, -1)
    out = np.zeros((n, n))
    with np.errstate(invalid="ignore"):
        out[i, j] = np.abs(res.values[i, j] - kernel.values[i, j] - conv.values[i, j])
    return out


# ------------------------------------------------------ derived kernels

def _min_exponent(*es):
    es = [e for e in es if e is not None]
    if not es:
        return None
    m = min(es)
    return m if m < 0 else None


def transformed_kernel_l(l1: TriangularTable, l2: TriangularTable, w_p: float,
                         grid: Optional[TimeGrid] = None) -> TriangularTable:
    """l = 2 max{ min{l1 * int l1, int l1^2}^(1/2), w_p l2 }, inner integrals over [0, t]."""
    if not w_p > 0:
        raise DomainError(f"w_p must be positive, got {w_p}")
    if l1.grid != l2.grid or (grid is not None and grid != l1.grid):
        raise DomainError("tables live on different grids")
    I1 = row_integrals(l1)
    I2 = row_integrals(l1.power(2))
    v1 = l1.lower()
    prod = _safe_mul(v1, I1[:, None])
    first = np.sqrt(np.minimum(prod, I2[:, None]))
    second = w_p * l2.lower()
    val = 2.0 * np.tril(np.maximum(first, second))
    e1 = None
    if l1.exponent is not None and l1.exponent < 0 and np.isinf(I2[1:]).any():
        e1 = l1.exponent / 2.0
    return TriangularTable(l1.grid, val, _min_exponent(e1, l2.exponent), "l")


@dataclass
class SeriesFunction:
    """A non-negative function sampled on grid nodes, with its series terms."""

    grid: TimeGrid
    values: np.ndarray
    terms: list = field(default_factory=list)
    tail_bound: float = 0.0

    def __call__(self, t):
        return np.interp(t, self.grid.nodes, self.values)


def _series_stop(sups, tol):
    cur = sups[-1]
    if len(sups) == 1:
        return cur == 0
    prev = sups[-2]
    ratio = 0.0 if prev == 0 else cur / prev
    return cur < tol and ratio < 1


def _tail(sups):
    if len(sups) < 2 or sups[-2] == 0:
        return 0.0
    r = sups[-1] / sups[-2]
    return sups[-1] * r / (1 - r) if r < 1 else np.inf


def function_series_I_l(l: TriangularTable, grid: Optional[TimeGrid] = None, tol: float = TOL,
                        n_max: int = N_MAX) -> SeriesFunction:
    """I_l(t) = sum_n (int_0^t R_{l^2,n}(t, s) ds)^(1/2)."""
    grid = l.grid if grid is None else grid
    total = np.zeros(grid.n_steps + 1)
    terms, sups = [], []
    for k, R in enumerate(iterate_tables(l.power(2)), start=1):
        term = np.sqrt(row_integrals(R))
        terms.append(term)
        total = total + term
        sups.append(_finite_sup(term))
        if not np.isfinite(sups[-1]):
            raise TruncationError("I_l term is infinite", SeriesFunction(grid, total, terms), sups)
        if _series_stop(sups, tol):
            return SeriesFunction(grid, total, terms, _tail(sups))
        if k >= n_max:
            raise TruncationError(f"I_l terms not below tol={tol} within n_max={n_max}",
                                  SeriesFunction(grid, total, terms), sups)


def l_np_tables(l: TriangularTable, p: float, n_max: int = N_MAX, tol: float = TOL):
    """Yield l_{n,p} tables for n = 1, 2, ... until the sup falls below tol."""
    if p < 2:
        raise DomainError(f"p must be >= 2, got {p}")
    sups = []
    for k, R in enumerate(iterate_tables(l.power(2)), start=1):
        if p == 2:
            W = R
        else:
            inner = row_integrals(R)
            with np.errstate(divide="ignore"):
                wt = inner ** (p / 2.0 - 1.0)
            W = TriangularTable(R.grid, np.tril(_safe_mul(wt[:, None], R.lower())), R.exponent)
        L = col_partial_integrals(W)
        yield L
        sups.append(_finite_sup(L))
        if _series_stop(sups, tol):
            return
        if k >= n_max:
            raise TruncationError(f"l_(n,p) not below tol={tol} within n_max={n_max}", None, sups)


def l_np_and_c(l: TriangularTable, p: float, grid: Optional[TimeGrid] = None,
               n_max: int = N_MAX, tol: float = TOL):
    """Tables l_{n,p} (values[i, j] = l_{n,p}(t_i, t_j)) and c_{l,p} on the nodes."""
    grid = l.grid if grid is None else grid
    tables = []
    c = np.zeros(grid.n_steps + 1)
    for L in l_np_tables(l, p, n_max, tol):
        tables.append(TriangularTable(grid, L, None, f"l_{len(tables) + 1},{p:g}"))
        c = c + np.max(np.tril(L), axis=1) ** (1.0 / p)
    return tables, SeriesFunction(grid, c, [])


# ---------------------------------------------------------------- ledgers

@dataclass
class LedgerEntry:
    m: int
    n: int
    lhs: float
    rhs: float
    satisfied: bool


@dataclass
class BoundLedger:
    kind: str
    eps: float
    delta: float
    c0: float
    c_eps: float
    entries: List[LedgerEntry] = field(default_factory=list)

    @property
    def all_satisfied(self) -> bool:
        return all(e.satisfied for e in self.entries)

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# kind={self.kind} eps={self.eps!r} delta={self.delta!r} c0={self.c0!r} c_eps={self.c_eps!r}\n")
            w = csv.writer(fh)
            w.writerow(["m", "n", "lhs", "rhs", "satisfied"])
            for e in self.entries:
                w.writerow([e.m, e.n, repr(float(e.lhs)), repr(float(e.rhs)), str(bool(e.satisfied)).lower()])


def _largest_delta(spec, p, eps, grid, hat):
    """Largest grid multiple d*h with window modulus <= eps (bisection on d)."""
    ok = lambda d: window_modulus(spec, p, grid, d * grid.h, hat=hat) <= eps * (1 + 1e-9)
    if not ok(1):
        return None
    lo, hi = 1, grid.n_steps
    if ok(hi):
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _verify(spec: KernelSpec, p, eps, grid, m_max, n_max, kind):
    if not eps > 0:
        raise DomainError("eps must be positive")
    hat = kind == "second"
    if hat:
        c0 = max(spec.col_integral(p, r, grid.T) for r in grid.nodes[:-1])
    else:
        c0 = max(q_integral(spec, p, t, grid) for t in grid.nodes)
    if not np.isfinite(c0):
        raise InfeasibleError(f"kernel^{p} is not integrable: c0 = inf")
    d = _largest_delta(spec, p, eps, grid, hat)
    if d is None:
        raise InfeasibleError(f"no grid window meets eps={eps}; smallest window gives "
                              f"{window_modulus(spec, p, grid, grid.h, hat=hat):.6g}")
    delta = d * grid.h
    c_eps = max(1.0, c0 / eps)
    ledger = BoundLedger(kind, eps, delta, c0, c_eps)
    base = spec.tabulate(grid, power=p)
    n = grid.n_steps + 1
    lag = np.subtract.outer(np.arange(n), np.arange(n))
    gen = iterate_tables(base)
    for k in range(1, n_max + 1):
        R = next(gen)
        P = col_partial_integrals(R) if hat else row_partial_integrals(R)
        for m in range(1, m_max + 1):
            mask = (lag >= 0) & (lag <= m * d)
            lhs = float(np.max(P[mask]))
            rhs = (k * c_eps) ** (m - 1) * eps ** k
            ok = bool(lhs <= rhs * (1 + 1e-9) + 1e-12)
            ledger.entries.append(LedgerEntry(m, k, lhs, rhs, ok))
    ledger.entries.sort(key=lambda e: (e.m, e.n))
    return ledger


def verify_bound_first_kind(spec: KernelSpec, p: float, eps: float, grid: TimeGrid,
                            m_max: int = 4, n_max: int = 10) -> BoundLedger:
    """Ledger of sup_{r<=t<=r+m delta} int_r^t R_{k^p,n}(t,s) ds against (n c_eps)^(m-1) eps^n."""
    return _verify(spec, p, eps, grid, m_max, n_max, "first")


def verify_bound_second_kind(spec: KernelSpec, p: float, eps: float, grid: TimeGrid,
                             m_max: int = 4, n_max: int = 10) -> BoundLedger:
    """Mirror of the first kind with int_r^t R_{k^p,n}(s,r) ds."""
    return _verify(spec, p, eps, grid, m_max, n_max, "second")
