"""
Non-negative kernels on the triangle {0 <= s <= t}, singularity-aware
quadrature on uniform grids and numeric membership tests for the kernel
cones K^q_inf, K^q and K-hat^q.

A kernel may blow up on the diagonal like (t - s)^a with a < 0.  The
exponent a is carried as ``singular_exponent`` and every integral that
touches the diagonal is done by product integration against u^a, so pure
power laws come out exact up to roundoff.  Divergent integrals return
``np.inf`` rather than raising.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class EvaluationError(ArithmeticError):
    """A kernel produced a non-finite value where it must be finite."""


# ---------------------------------------------------------------- grids

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = j*T/n_steps on [0, T]."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.T > 0) or not np.isfinite(self.T):
            raise DomainError(f"horizon must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be an integer >= 1, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h

    def __len__(self):
        return self.n_steps + 1

    def index_of(self, t: float, rtol: float = 1e-9) -> int:
        """Index of the node equal to t; raises if t is not a node."""
        x = t / self.h
        j = int(round(x))
        if j < 0 or j > self.n_steps or abs(x - j) > rtol * max(1.0, abs(x)):
            raise DomainError(f"t={t} is not a node of the grid (h={self.h})")
        return j


# --------------------------------------------------------------- tables

@dataclass
class TriangularTable:
    """Kernel values on grid pairs (t_i, t_j), j <= i.

    ``values[i, j]`` holds k(t_i, t_j) for j < i, the diagonal limit (or inf
    when singular) for j == i, and zero above the diagonal.  ``exponent`` is
    the power of (t - s) governing the behaviour next to the diagonal; None
    means the diagonal entry is an ordinary finite value.
    """

    grid: TimeGrid
    values: np.ndarray
    exponent: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        n = self.grid.n_steps + 1
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (n, n):
            raise DomainError(f"table shape {self.values.shape} does not match grid ({n}, {n})")

    @property
    def singular(self) -> bool:
        return self.exponent is not None and self.exponent < 0

    def lower(self) -> np.ndarray:
        """Copy with entries above the diagonal forced to zero."""
        return np.tril(self.values)

    def at(self, t: float, s: float) -> float:
        return float(self.values[self.grid.index_of(t), self.grid.index_of(s)])

    def power(self, q: float) -> "TriangularTable":
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.tril(self.values) ** q
        e = None if self.exponent is None else q * self.exponent
        return TriangularTable(self.grid, np.tril(v), e, f"{self.label}^{q:g}" if self.label else "")

    def off_diagonal_max(self) -> float:
        n = self.grid.n_steps
        if n == 0:
            return 0.0
        i, j = np.tril_indices(n + 1, -1)
        return float(np.max(self.values[i, j])) if len(i) else 0.0

    def to_csv(self, path, header_lines: Sequence[str] = ()):
        write_table_csv(path, self.grid, [("value", self.values)], header_lines)


def write_table_csv(path, grid: TimeGrid, columns, header_lines=()):
    """Write lower-triangular tables as rows (t, s, col...) for s <= t."""
    t = grid.nodes
    i, j = np.tril_indices(len(t))
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["t", "s"] + [name for name, _ in columns])
        for a, b in zip(i, j):
            w.writerow([_fmt(t[a]), _fmt(t[b])] + [_fmt(v[a, b]) for _, v in columns])


def _fmt(x) -> str:
    x = float(x)
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


# -------------------------------------------------- product quadrature

def power_cell_weights(n_cells: int, e: float, h: float):
    """Weights for int_0^{n h} u^e phi(u) du with phi linear on each cell.

    Returns (a, b) with the cell [c h, (c+1) h] contributing
    a[c] * phi(c h) + b[c] * phi((c+1) h).  With e = 0 this is the
    trapezoid rule.
    """
    c = np.arange(n_cells, dtype=float)
    lo, hi = c, c + 1.0
    m0 = h ** (e + 1) * (hi ** (e + 1) - lo ** (e + 1)) / (e + 1)
    m1 = h ** (e + 2) * (hi ** (e + 2) - lo ** (e + 2)) / (e + 2)
    b = (m1 - c * h * m0) / h
    a = m0 - b
    return a, b


def product_cumulative(samples: np.ndarray, e: Optional[float], h: float) -> np.ndarray:
    """Cumulative integrals of a function sampled at u = 0, h, 2h, ...

    ``samples[..., c]`` is the value at u = c h; the function may behave like
    u^e at u = 0 (e < 0 allowed when e > -1).  Returns an array of the same
    shape with out[..., C] = int_0^{C h}.  Integration is along the last axis.
    Any non-zero e uses the u^e-weighted rule, exact for pure power laws.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[-1] - 1
    out = np.zeros_like(samples)
    if n <= 0:
        return out
    if e is not None and e != 0:
        if e <= -1:
            out[..., 1:] = np.inf
            return out
        u = np.arange(1, n + 1) * h
        phi = np.empty_like(samples)
        phi[..., 1:] = samples[..., 1:] / u ** e
        phi[..., 0] = phi[..., 1]
        a, b = power_cell_weights(n, e, h)
    else:
        phi = samples
        a = b = np.full(n, 0.5 * h)
    with np.errstate(invalid="ignore"):
        cells = a * phi[..., :-1] + b * phi[..., 1:]
    # 0 * inf from zero weights never happens (weights > 0); inf samples give inf cells
    out[..., 1:] = np.cumsum(cells, axis=-1)
    return out


def _quad(fun, a, b, **kw) -> float:
    if b <= a:
        return 0.0
    val, _ = integrate.quad(fun, a, b, limit=200, **kw)
    return float(val)


# --------------------------------------------------------------- kernels

class KernelSpec:
    """Base class of the kernel families.

    Subclasses implement ``_eval`` (vectorised, no checks), ``row_integral``
    (int_r^t k(t,s)^q ds) and ``col_integral`` (int_r^t k(s,r)^q ds).
    """

    singular_exponent: Optional[float] = None
    family = "abstract"

    def _eval(self, t, s):
        raise NotImplementedError

    def __call__(self, t, s):
        return self._eval(np.asarray(t, dtype=float), np.asarray(s, dtype=float))

    def row_integral(self, q: float, t: float, r: float = 0.0, n_cells: int = 256) -> float:
        raise NotImplementedError

    def col_integral(self, q: float, r: float, t: float, n_cells: int = 256) -> float:
        raise NotImplementedError

    def diagonal_value(self, t: float) -> float:
        e = self.singular_exponent
        if e is not None and e < 0:
            return np.inf
        if e is not None and e > 0:
            return 0.0
        with np.errstate(all="ignore"):
            v = float(self._eval(np.asarray(t, float), np.asarray(t, float)))
        return v if np.isfinite(v) else np.inf

    def tabulate(self, grid: TimeGrid, power: float = 1.0) -> TriangularTable:
        t = grid.nodes
        n = len(t)
        vals = np.zeros((n, n))
        i, j = np.tril_indices(n, -1)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v = np.asarray(self._eval(t[i], t[j]), dtype=float)
        v = np.broadcast_to(v, i.shape).copy()
        v[np.isnan(v)] = np.inf
        if np.any(v < 0):
            raise EvaluationError(f"{self.family} kernel is negative on the grid")
        vals[i, j] = v
        for k in range(n):
            vals[k, k] = self.diagonal_value(t[k])
        e = self.singular_exponent
        table = TriangularTable(grid, vals, e, self.family)
        return table if power == 1.0 else table.power(power)


@dataclass
class Constant(KernelSpec):
    c: float = 1.0
    family = "constant"

    def __post_init__(self):
        if self.c < 0 or not np.isfinite(self.c):
            raise DomainError(f"constant kernel needs c >= 0, got {self.c}")
        self.singular_exponent = 0.0

    def _eval(self, t, s):
        return np.full(np.broadcast(t, s).shape, float(self.c))

    def diagonal_value(self, t):
        return float(self.c)

    def row_integral(self, q, t, r=0.0, n_cells=256):
        return self.c ** q * max(t - r, 0.0)

    def col_integral(self, q, r, t, n_cells=256):
        return self.c ** q * max(t - r, 0.0)


def Zero() -> Constant:
    return Constant(0.0)


@dataclass
class Convolution(KernelSpec):
    """k(t, s) = f(t - s); ``exponent`` is the power of f at u = 0."""

    f: Callable = None
    exponent: Optional[float] = None
    family = "convolution"

    def __post_init__(self):
        if self.f is None:
            raise DomainError("convolution kernel needs a function f")
        self.singular_exponent = self.exponent

    def _eval(self, t, s):
        return self.f(t - s)

    def diagonal_value(self, t):
        e = self.exponent
        if e is not None and e != 0:
            return np.inf if e < 0 else 0.0
        with np.errstate(all="ignore"):
            v = float(self.f(np.asarray(0.0)))
        return v if np.isfinite(v) else np.inf

    def cumulative(self, q: float, x: float, n_cells: int = 256) -> float:
        """int_0^x f(u)^q du by product integration on n_cells cells."""
        if x <= 0:
            return 0.0
        e = None if self.exponent is None else q * self.exponent
        if e is not None and e <= -1:
            return np.inf
        u = np.linspace(0.0, x, n_cells + 1)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            vals = np.abs(np.asarray(self.f(u), dtype=float)) ** q
        vals = np.broadcast_to(vals, u.shape).copy()
        if (e is None or e >= 0) and not np.isfinite(vals[0]):
            # unknown singularity at 0: fall back to the midpoint value on the first cell
            vals[0] = vals[1]
        return float(product_cumulative(vals, e, x / n_cells)[-1])

    def cumulative_on_grid(self, q: float, grid: TimeGrid) -> np.ndarray:
        """F_q(t_j) = int_0^{t_j} f^q for every node; exact for power laws."""
        e = None if self.exponent is None else q * self.exponent
        if e is not None and e <= -1:
            out = np.full(len(grid), np.inf)
            out[0] = 0.0
            return out
        u = grid.nodes
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            vals = np.abs(np.asarray(self.f(u), dtype=float)) ** q
        vals = np.broadcast_to(vals, u.shape).copy()
        if (e is None or e >= 0) and not np.isfinite(vals[0]):
            vals[0] = vals[1]
        return product_cumulative(vals, e, grid.h)

    def row_integral(self, q, t, r=0.0, n_cells=256):
        return self.cumulative(q, t - r, n_cells)

    def col_integral(self, q, r, t, n_cells=256):
        return self.cumulative(q, t - r, n_cells)


def power_kernel(alpha: float, scale: float = 1.0) -> Convolution:
    """Convolution kernel scale * u^(alpha - 1) (fractional kernel)."""
    a = alpha - 1.0

    def f(u):
        u = np.asarray(u, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return scale * np.where(u > 0, u, np.nan) ** a if a != 0 else np.full(u.shape, float(scale))

    return Convolution(f, exponent=a)


@dataclass
class TransformedFractional(KernelSpec):
    """k(t,s) = gamma s^(gamma-1) (t^gamma - s^gamma)^(alpha-1) s^(-beta gamma)."""

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0
    family = "transformed_fractional"

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta >= 0 and self.gamma > 0):
            raise DomainError("need alpha > 0, beta >= 0, gamma > 0")
        self.singular_exponent = self.alpha - 1.0

    def _eval(self, t, s):
        a, b, g = self.alpha, self.beta, self.gamma
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return g * s ** (g - 1) * (t ** g - s ** g) ** (a - 1) * s ** (-b * g)

    def diagonal_value(self, t):
        if self.alpha < 1:
            return np.inf
        if self.alpha > 1:
            return 0.0
        g, b = self.gamma, self.beta
        with np.errstate(divide="ignore", over="ignore"):
            v = g * t ** (g - 1 - b * g) if t > 0 else (g if g - 1 - b * g == 0 else np.inf)
        return float(v)

    def _exponents(self, q):
        A = q * (self.alpha - 1.0)
        e = (self.gamma - 1.0) * (q - 1.0) / self.gamma - q * self.beta
        return A, e

    def row_integral(self, q, t, r=0.0, n_cells=256):
        # substitute v = s^gamma: gamma^(q-1) int_rho^tau (tau - v)^A v^e dv
        if t <= r:
            return 0.0
        A, e = self._exponents(q)
        if A <= -1:
            return np.inf
        tau, rho = t ** self.gamma, r ** self.gamma
        x = rho / tau
        pre = self.gamma ** (q - 1)
        if e > -1:
            tail = special.betainc(A + 1, e + 1, 1.0 - x) if x > 0 else 1.0
            return float(pre * tau ** (A + e + 1) * special.beta(e + 1, A + 1) * tail)
        if r <= 0:
            return np.inf
        val = _quad(lambda w: w ** e, x, 1.0, weight="alg", wvar=(0.0, A))
        return float(pre * tau ** (A + e + 1) * val)

    def col_integral(self, q, r, t, n_cells=256):
        # int_r^t k(x, r)^q dx
        if t <= r:
            return 0.0
        a, b, g = self.alpha, self.beta, self.gamma
        A = q * (a - 1.0)
        if A <= -1:
            return np.inf
        s_exp = q * (g - 1.0 - b * g)
        if r <= 0:
            if s_exp < 0:
                return np.inf
            if s_exp > 0:
                return 0.0
            if g * A <= -1:
                return np.inf
            return float(g ** q * t ** (g * A + 1) / (g * A + 1))
        pre = g ** q * r ** s_exp
        rg = r ** g
        if A == 0:
            return float(pre * (t - r))
        val = _quad(lambda x: ((x ** g - rg) / (x - r)) ** A, r, t, weight="alg", wvar=(A, 0.0))
        return float(pre * val)


@dataclass
class Separated(KernelSpec):
    """k(t, s) = k0(t) * k1(s); both factors vectorised callables."""

    k0: Callable = None
    k1: Callable = None
    family = "separated"

    def __post_init__(self):
        if self.k0 is None or self.k1 is None:
            raise DomainError("separated kernel needs k0 and k1")
        self.singular_exponent = None

    def _eval(self, t, s):
        return self.k0(t) * self.k1(s)

    def diagonal_value(self, t):
        with np.errstate(all="ignore"):
            v = float(self.k0(np.asarray(t, float)) * self.k1(np.asarray(t, float)))
        return v if np.isfinite(v) else np.inf

    def row_integral(self, q, t, r=0.0, n_cells=256):
        if t <= r:
            return 0.0
        head = float(self.k0(np.asarray(t, float))) ** q
        if head == 0:
            return 0.0
        return head * _quad(lambda s: float(self.k1(np.asarray(s))) ** q, r, t)

    def col_integral(self, q, r, t, n_cells=256):
        if t <= r:
            return 0.0
        head = float(self.k1(np.asarray(r, float))) ** q
        if head == 0:
            return 0.0
        return head * _quad(lambda x: float(self.k0(np.asarray(x))) ** q, r, t)


@dataclass
class Tabulated(KernelSpec):
    """Kernel known only on grid pairs; integrals use the table rules."""

    table: TriangularTable = None
    family = "tabulated"

    def __post_init__(self):
        if self.table is None:
            raise DomainError("tabulated kernel needs a table")
        self.singular_exponent = self.table.exponent

    def _eval(self, t, s):
        g = self.table.grid
        i = np.rint(np.asarray(t) / g.h).astype(int)
        j = np.rint(np.asarray(s) / g.h).astype(int)
        return self.table.values[i, j]

    def diagonal_value(self, t):
        j = self.table.grid.index_of(t)
        return float(self.table.values[j, j])

    def tabulate(self, grid, power=1.0):
        if grid != self.table.grid:
            raise DomainError("tabulated kernel lives on a different grid")
        return self.table if power == 1.0 else self.table.power(power)

    def row_integral(self, q, t, r=0.0, n_cells=256):
        g = self.table.grid
        i, j = g.index_of(t), g.index_of(r)
        return float(row_partial_integrals(self.table.power(q))[i, j])

    def col_integral(self, q, r, t, n_cells=256):
        g = self.table.grid
        i, j = g.index_of(t), g.index_of(r)
        return float(col_partial_integrals(self.table.power(q))[i, j])


def eval_kernel(spec: KernelSpec, t: float, s: float) -> float:
    """k(t, s) for 0 <= s < t; the diagonal itself is excluded."""
    if not (0 <= s < t):
        raise DomainError(f"need 0 <= s < t, got s={s}, t={t}")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        v = float(spec(t, s))
    if not np.isfinite(v) or v < 0:
        if s > 0:
            raise EvaluationError(f"{spec.family} kernel gives {v} at (t={t}, s={s})")
        if np.isnan(v) or v < 0:
            raise EvaluationError(f"{spec.family} kernel gives {v} at (t={t}, s=0)")
    return v


# ------------------------------------------------- integrals of tables

def _reversed_rows(values: np.ndarray) -> np.ndarray:
    """rv[i, c] = values[i, i - c] for c <= i, zero beyond."""
    n = values.shape[0]
    i = np.arange(n)[:, None]
    c = np.arange(n)[None, :]
    idx = i - c
    out = np.where(idx >= 0, values[i, np.clip(idx, 0, None)], 0.0)
    return out


def _reversed_cols(values: np.ndarray) -> np.ndarray:
    """cv[j, c] = values[j + c, j] for j + c < n, zero beyond."""
    n = values.shape[0]
    j = np.arange(n)[:, None]
    c = np.arange(n)[None, :]
    idx = j + c
    return np.where(idx < n, values[np.clip(idx, None, n - 1), j], 0.0)


def _diag_exponent(table: TriangularTable):
    e = table.exponent
    return e if (e is not None and e != 0) else None


def row_partial_integrals(table: TriangularTable) -> np.ndarray:
    """P[i, j] = int_{t_j}^{t_i} k(t_i, s) ds for j <= i."""
    n = table.values.shape[0]
    rv = _reversed_rows(table.lower())
    cum = product_cumulative(rv, _diag_exponent(table), table.grid.h)
    out = np.zeros((n, n))
    i, j = np.tril_indices(n)
    out[i, j] = cum[i, i - j]
    return out


def col_partial_integrals(table: TriangularTable) -> np.ndarray:
    """C[i, j] = int_{t_j}^{t_i} k(x, t_j) dx for j <= i."""
    n = table.values.shape[0]
    cv = _reversed_cols(table.lower())
    cum = product_cumulative(cv, _diag_exponent(table), table.grid.h)
    out = np.zeros((n, n))
    i, j = np.tril_indices(n)
    out[i, j] = cum[j, i - j]
    return out


def row_integrals(table: TriangularTable, weight=None) -> np.ndarray:
    """int_0^{t_i} k(t_i, s) w(s) ds for every node t_i (w sampled at nodes)."""
    v = table.lower()
    if weight is not None:
        w = np.asarray(weight, dtype=float)
        with np.errstate(invalid="ignore"):
            v = np.where(w[None, :] == 0, 0.0, v * w[None, :])
        v = np.tril(v)
    tab = TriangularTable(table.grid, v, table.exponent)
    return row_partial_integrals(tab)[:, 0]


# ------------------------------------------------------- cone membership

class Verdict(enum.Enum):
    Member = "Member"
    NotMember = "NotMember"
    Inconclusive = "Inconclusive"


@dataclass
class ClassReport:
    q: float
    sup_q_integral: float
    modulus: list
    verdict_Kinf: Verdict
    verdict_K: Verdict
    verdict_Khat: Verdict
    sup_hat_integral: float = np.nan
    modulus_hat: list = field(default_factory=list)


def q_integral(spec: KernelSpec, q: float, t: float, grid: TimeGrid) -> float:
    """int_0^t k(t, s)^q ds at a grid node t; +inf when divergent."""
    if q < 1:
        raise DomainError(f"q must be >= 1, got {q}")
    j = grid.index_of(t)
    if j == 0:
        return 0.0
    if isinstance(spec, Convolution):
        return float(spec.cumulative_on_grid(q, grid)[j])
    if isinstance(spec, Tabulated):
        return spec.row_integral(q, grid.nodes[j], 0.0)
    return float(spec.row_integral(q, grid.nodes[j], 0.0, n_cells=max(j, 64)))


def default_ladder(T: float, depth: int = 8):
    return [T * 10.0 ** (-k) for k in range(1, depth + 1)]


def window_modulus(spec: KernelSpec, q: float, grid: TimeGrid, delta: float, hat: bool = False) -> float:
    """sup over r <= t <= r + delta of the window integral (t sampled on nodes).

    The window integral is monotone in the free end, so the supremum over r is
    attained at r = t - delta (first kind) or at t = r + delta (second kind).
    """
    best = 0.0
    for x in grid.nodes:
        if hat:
            top = min(x + delta, grid.T)
            if top <= x:
                continue
            v = spec.col_integral(q, x, top)
        else:
            if x <= 0:
                continue
            v = spec.row_integral(q, x, max(x - delta, 0.0))
        if np.isnan(v):
            v = np.inf
        best = max(best, v)
        if best == np.inf:
            break
    return float(best)


def _modulus_verdict(values, tol):
    vals = np.asarray(values, dtype=float)
    if len(vals) == 0:
        return Verdict.Inconclusive
    if not np.isfinite(vals[-1]):
        return Verdict.NotMember
    nonincreasing = np.all(np.diff(vals) <= 1e-12 * np.maximum(1.0, np.abs(vals[:-1])))
    if vals[-1] < tol and nonincreasing:
        return Verdict.Member
    return Verdict.Inconclusive


def class_membership(spec: KernelSpec, q: float, T: float, grid: TimeGrid,
                     delta_ladder=None, tol: float = 1e-3) -> ClassReport:
    """Numeric witness of membership in K^q_inf, K^q and K-hat^q on [0, T]."""
    if q < 1:
        raise DomainError(f"q must be >= 1, got {q}")
    ladder = default_ladder(T) if delta_ladder is None else list(delta_ladder)
    if any(d > T for d in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise DomainError("delta ladder must be strictly decreasing and bounded by T")
    nodes = grid.nodes[grid.nodes <= T + 1e-12]
    sup = 0.0
    for x in nodes[1:]:
        v = q_integral(spec, q, x, grid)
        sup = max(sup, v if np.isfinite(v) else np.inf)
        if sup == np.inf:
            break
    sup_hat = 0.0
    for x in nodes[:-1]:
        v = spec.col_integral(q, x, T)
        sup_hat = max(sup_hat, v if np.isfinite(v) else np.inf)
        if sup_hat == np.inf:
            break
    sub = TimeGrid(T, grid.index_of(T)) if abs(T - grid.T) > 1e-12 else grid
    modulus = [(d, window_modulus(spec, q, sub, d)) for d in ladder]
    modulus_hat = [(d, window_modulus(spec, q, sub, d, hat=True)) for d in ladder]

    v_inf = Verdict.Member if np.isfinite(sup) else Verdict.NotMember
    v_k = _modulus_verdict([m for _, m in modulus], tol) if v_inf is Verdict.Member else Verdict.NotMember
    if np.isfinite(sup_hat):
        v_hat = _modulus_verdict([m for _, m in modulus_hat], tol)
    else:
        v_hat = Verdict.NotMember
    return ClassReport(q, sup, modulus, v_inf, v_k, v_hat, sup_hat, modulus_hat)


# ---------------------------------------------------- Hölder condition

def _as_function(f):
    if f is None:
        return lambda u: np.zeros_like(np.asarray(u, dtype=float))
    if np.isscalar(f):
        c = float(f)
        return lambda u: np.full(np.shape(u), c)
    return f


def holder_condition_constant(f, g, beta_hat: float, T: float, grid: TimeGrid) -> float:
    """Smallest c with the four-term increment integral <= c (t - s)^beta_hat
    over grid pairs s < t <= T.  f and g are functions of the lag u > 0
    (scalars are read as constants); returns inf if some term diverges.
    """
    if not (0 < beta_hat <= 0.5):
        raise DomainError(f"beta_hat must lie in (0, 1/2], got {beta_hat}")
    f = _as_function(f)
    g = _as_function(g)
    fa = lambda u: abs(float(f(np.asarray(u, float))))
    g2 = lambda u: float(g(np.asarray(u, float))) ** 2
    nodes = grid.nodes[grid.nodes <= T + 1e-12]
    h = grid.h
    n = len(nodes) - 1
    # integrals from 0 to a lag depend on the lag only
    F = np.zeros(n + 1)
    G = np.zeros(n + 1)
    for k in range(1, n + 1):
        F[k] = F[k - 1] + _quad(fa, (k - 1) * h, k * h)
        G[k] = G[k - 1] + _quad(g2, (k - 1) * h, k * h)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(G))):
        return np.inf
    c = 0.0
    for j in range(n + 1):          # s = t_j
        s = nodes[j]
        for k in range(1, n + 1 - j):   # lag d = k h
            d = k * h
            lhs = F[k] + np.sqrt(G[k])
            if s > 0:
                lhs += _quad(lambda u: abs(float(f(np.asarray(d + u))) - float(f(np.asarray(u)))), 0.0, s)
                lhs += np.sqrt(_quad(lambda u: (float(g(np.asarray(d + u))) - float(g(np.asarray(u)))) ** 2, 0.0, s))
            if not np.isfinite(lhs):
                return np.inf
            c = max(c, lhs / d ** beta_hat)
    return float(c)
