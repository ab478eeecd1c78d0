"""
Particle discretisation of stochastic Volterra equations

    X_t = xi_t + int_0^t B_{t,s}(X_s) ds + int_0^t Sigma_{t,s}(X_s) dW_s

on a uniform grid, and the Picard iteration driving it.

Every coefficient family factors as  lag-kernel(t - s) * inner(s, X_s, alpha_s, law_s)
plus an optional deterministic (t, s) offset.  The inner part is evaluated
once per node, so one Picard sweep is two lower-triangular matrix products
per particle chunk.  Laws (means, expectations) are always taken over the
whole ensemble before the chunked particle work starts.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .kernel_lab import DomainError, TimeGrid

CHUNK = 2048          # particles per work unit; fixed so results do not depend on threads
RNG_BLOCK = 256       # particles per random stream
BINARY_MAGIC = b"SVEE"
BINARY_VERSION = 1


class IntegrabilityError(ArithmeticError):
    """A kernel cell weight is infinite."""


class DivergenceError(ArithmeticError):
    """A Picard iterate produced non-finite states."""


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, residuals=None, last=None):
        super().__init__(msg)
        self.residuals = residuals or []
        self.last = last


# ------------------------------------------------------------ noise

@dataclass
class BrownianDriver:
    """Brownian increments N(0, h) for N particles and d components.

    Each block of RNG_BLOCK particles draws from its own Philox stream keyed by
    (seed, block index), so any particle's path depends only on the seed and
    its index, never on N or on the number of worker threads.
    """

    N: int
    grid: TimeGrid
    d: int = 1
    seed: int = 0
    threads: int = 1
    _inc: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.N < 1 or self.d < 1:
            raise DomainError("need N >= 1 and d >= 1")
        self.seed = int(self.seed) % 2 ** 64

    def _block(self, b):
        gen = np.random.Generator(np.random.Philox(key=(self.seed << 64) | b))
        return gen.standard_normal((RNG_BLOCK, self.grid.n_steps, self.d))

    @property
    def increments(self) -> np.ndarray:
        """Array N x n_steps x d."""
        if self._inc is None:
            n_blocks = -(-self.N // RNG_BLOCK)
            out = np.empty((n_blocks * RNG_BLOCK, self.grid.n_steps, self.d))
            scale = np.sqrt(self.grid.h)

            def fill(b):
                out[b * RNG_BLOCK:(b + 1) * RNG_BLOCK] = self._block(b) * scale

            _run(fill, range(n_blocks), self.threads)
            self._inc = out[:self.N]
        return self._inc

    def paths(self) -> np.ndarray:
        """W at the nodes, N x (n_steps + 1) x d."""
        W = np.zeros((self.N, self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W


def _run(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        for it in items:
            fn(it)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(fn, items))


@dataclass
class RadonifyingMap:
    """Linear map R^d -> R^m; its Hilbert-Schmidt norm is the Frobenius norm."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))

    @property
    def hs_norm(self) -> float:
        return float(np.sqrt(np.trace(self.matrix.T @ self.matrix)))

    def __call__(self, v):
        return self.matrix @ v


# --------------------------------------------------------- ensembles

@dataclass
class PathEnsemble:
    states: np.ndarray                  # N x (n_steps + 1) x m
    driver: Optional[BrownianDriver]
    grid: TimeGrid
    control: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3 or self.states.shape[1] != self.grid.n_steps + 1:
            raise DomainError(f"states must be N x {self.grid.n_steps + 1} x m, got {self.states.shape}")

    @property
    def N(self):
        return self.states.shape[0]

    @property
    def m(self):
        return self.states.shape[2]

    def mean(self) -> np.ndarray:
        return self.states.mean(axis=0)

    def csv_rows(self):
        t = self.grid.nodes
        for k in range(self.N):
            for j in range(len(t)):
                yield [k, repr(float(t[j]))] + [repr(float(v)) for v in self.states[k, j]]

    def to_csv(self, path, header_lines=()):
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(",".join(["particle", "t"] + [f"coord_{c + 1}" for c in range(self.m)]) + "\n")
            for row in self.csv_rows():
                fh.write(",".join(map(str, row)) + "\n")

    def to_binary(self, path):
        N, n1, m = self.states.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sHIIH", BINARY_MAGIC, BINARY_VERSION, N, n1 - 1, m))
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path, T: float = 1.0):
        with open(path, "rb") as fh:
            head = fh.read(16)
            if len(head) != 16:
                raise DomainError("truncated ensemble header")
            magic, version, N, steps, m = struct.unpack("<4sHIIH", head)
            if magic != BINARY_MAGIC or version != BINARY_VERSION:
                raise DomainError(f"not an ensemble file (magic {magic!r}, version {version})")
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != N * (steps + 1) * m:
            raise DomainError("ensemble payload size does not match header")
        return cls(data.reshape(N, steps + 1, m).copy(), None, TimeGrid(T, steps))


def as_process(x, N: int, grid: TimeGrid, m: int) -> np.ndarray:
    """Normalise a process to an array broadcastable to N x (n+1) x m.

    Accepts a scalar, a vector of length m, an array (n+1) x m or N x (n+1) x m,
    or a callable of the node array returning one of those.
    """
    if x is None:
        return np.zeros((1, grid.n_steps + 1, m))
    if callable(x):
        x = x(grid.nodes)
    a = np.asarray(x, dtype=float)
    n1 = grid.n_steps + 1
    if a.ndim == 0 or (a.ndim == 1 and len(a) == m and len(a) != n1):
        return np.broadcast_to(a.reshape(1, 1, -1), (1, n1, m))
    if a.ndim == 1 and len(a) == n1:
        return np.broadcast_to(a[None, :, None], (1, n1, m))
    if a.ndim == 2 and a.shape == (n1, m):
        return a[None]
    if a.ndim == 3 and a.shape[1:] == (n1, m) and a.shape[0] in (1, N):
        return a
    raise DomainError(f"cannot read process of shape {a.shape} on {N} x {n1} x {m}")


# ----------------------------------------------------- kernel weights

@dataclass
class LagKernel:
    """f(u) for u = t - s > 0; ``exponent`` is its power-law order at u = 0."""

    f: Callable
    exponent: Optional[float] = None

    @classmethod
    def make(cls, f, exponent=None):
        if isinstance(f, LagKernel):
            return f
        if f is None:
            return cls(lambda u: np.ones_like(np.asarray(u, dtype=float)), None)
        if np.isscalar(f):
            c = float(f)
            return cls(lambda u: np.full(np.shape(u), c), None)
        if hasattr(f, "singular_exponent") and hasattr(f, "f"):   # kernel_lab Convolution
            return cls(f.f, f.singular_exponent if exponent is None else exponent)
        return cls(f, exponent)

    def __call__(self, u):
        return np.asarray(self.f(np.asarray(u, dtype=float)), dtype=float) * np.ones(np.shape(u))


def power_lag(exponent: float, scale: float = 1.0) -> LagKernel:
    """scale * u^exponent."""
    e = float(exponent)
    return LagKernel(lambda u: scale * np.asarray(u, dtype=float) ** e, e if e != 0 else None)


def _cell_moments(k: LagKernel, n: int, h: float, power: float = 1.0):
    """int over lag cells [(d-1)h, dh] of k^power and u k^power, d = 1..n."""
    d = np.arange(1, n + 1, dtype=float)
    lo, hi, mid = (d - 1) * h, d * h, (d - 0.5) * h
    e = None if k.exponent in (None, 0) else power * k.exponent
    with np.errstate(all="ignore"):
        if e is not None:
            if e <= -1:
                raise IntegrabilityError(
                    f"kernel^{power:g} is not integrable on the cell [t - {h:g}, t] (exponent {e:g})")
            c = np.sign(k(mid)) * np.abs(k(mid)) ** power / mid ** e
            m0 = c * (hi ** (e + 1) - lo ** (e + 1)) / (e + 1)
            m1 = c * (hi ** (e + 2) - lo ** (e + 2)) / (e + 2)
        else:
            fl, fm, fh = (np.abs(k(x)) ** power * (np.sign(k(x)) if power == 1 else 1) for x in (lo, mid, hi))
            m0 = h / 6 * (fl + 4 * fm + fh)
            m1 = h / 6 * (lo * fl + 4 * mid * fm + hi * fh)
    bad = ~(np.isfinite(m0) & np.isfinite(m1))
    if bad.any():
        c = int(np.argmax(bad)) + 1
        raise IntegrabilityError(f"kernel weight diverges on lag cell [{(c - 1) * h:g}, {c * h:g}]")
    return m0, m1


def drift_weights(kernel: LagKernel, grid: TimeGrid, rule: str = "trapezoid") -> np.ndarray:
    """Matrix W with int_0^{t_i} f(t_i - s) b(s) ds ~ sum_j W[i, j] b(t_j).

    "left" holds b constant on each cell at its left node; "trapezoid" takes b
    piecewise linear.  Both integrate the kernel exactly per cell for power laws.
    """
    n, h = grid.n_steps, grid.h
    m0, m1 = _cell_moments(kernel, n, h)
    d = np.arange(1, n + 1)
    lag = np.subtract.outer(np.arange(n + 1), np.arange(n + 1))
    W = np.zeros((n + 1, n + 1))
    if rule == "left":
        w_left = m0
        w_right = np.zeros(n)
    elif rule == "trapezoid":
        w_left = (m1 - (d - 1) * h * m0) / h
        w_right = (d * h * m0 - m1) / h
    else:
        raise DomainError(f"unknown drift rule {rule!r}")
    # node j is the left end of the cell with lag index i - j, right end of lag i - j + 1
    L = lag >= 1
    W[L] += w_left[lag[L] - 1]
    R = (lag >= 0) & (lag + 1 <= n) & (np.arange(n + 1)[None, :] >= 1)
    W[R] += w_right[lag[R]]
    return W


def diffusion_weights(kernel: LagKernel, grid: TimeGrid, rule: str = "point") -> np.ndarray:
    """Matrix G (n+1) x n with sum_j G[i, j] s_j dW_j ~ int_0^{t_i} g(t_i - s) s(s) dW_s.

    "point" uses g at the left node of each increment; "cell" uses the root
    mean square of g over the cell, which makes variances exact.
    """
    n, h = grid.n_steps, grid.h
    m0, _ = _cell_moments(kernel, n, h, power=2.0)     # flags divergent g^2 cells
    d = np.arange(1, n + 1)
    if rule == "point":
        with np.errstate(all="ignore"):
            w = kernel(d * h)
    elif rule == "cell":
        with np.errstate(all="ignore"):
            w = np.sign(kernel((d - 0.5) * h)) * np.sqrt(m0 / h)
    else:
        raise DomainError(f"unknown diffusion rule {rule!r}")
    if not np.all(np.isfinite(w)):
        c = int(np.argmax(~np.isfinite(w))) + 1
        raise IntegrabilityError(f"diffusion weight diverges on lag cell [{(c - 1) * h:g}, {c * h:g}]")
    lag = np.subtract.outer(np.arange(n + 1), np.arange(n))
    G = np.zeros((n + 1, n))
    mask = lag >= 1
    G[mask] = w[lag[mask] - 1]
    return G


def _offset_drift(kappa, grid: TimeGrid, m: int) -> np.ndarray:
    """int_0^{t_i} kappa(t_i, s) ds by the trapezoid rule; kappa(t, s) -> (..., m)."""
    t = grid.nodes
    T, S = np.meshgrid(t, t, indexing="ij")
    vals = np.asarray(kappa(T[..., None], S[..., None]), dtype=float)
    vals = np.broadcast_to(vals, T.shape + (m,)) * np.tril(np.ones(T.shape))[..., None]
    w = np.tril(np.full(T.shape, grid.h))
    w[np.arange(len(t)), np.arange(len(t))] *= 0.5
    w[:, 0] *= 0.5
    w[0, 0] = 0.0
    return np.einsum("ij,ijm->im", w, vals)


def _offset_diffusion(eta, grid: TimeGrid, m: int, d: int) -> np.ndarray:
    """eta(t_i, t_j) for j < i as an (n+1) x n x m x d table."""
    t = grid.nodes
    T, S = np.meshgrid(t, t[:-1], indexing="ij")
    vals = np.asarray(eta(T[..., None, None], S[..., None, None]), dtype=float)
    vals = np.broadcast_to(vals, T.shape + (m, d)).copy()
    vals[~(S < T)] = 0.0
    return vals


# ------------------------------------------------------------- laws

class EnsembleLaw:
    """Empirical law of the ensemble at every node (synchronous coupling)."""

    def __init__(self, states, control=None, grid=None):
        self.states = states
        self.control = control
        self.grid = grid
        self._cache = {}

    def mean(self) -> np.ndarray:
        if "mean" not in self._cache:
            self._cache["mean"] = self.states.mean(axis=0)
        return self._cache["mean"]

    def expect(self, fn) -> np.ndarray:
        """Mean over particles of fn(states, control), per node."""
        key = ("expect", id(fn))
        if key not in self._cache:
            self._cache[key] = np.asarray(fn(self.states, self.control), dtype=float).mean(axis=0)
        return self._cache[key]

    def moment(self, p: float) -> np.ndarray:
        return np.mean(np.linalg.norm(self.states, axis=-1) ** p, axis=0) ** (1.0 / p)

    def measure(self, j: int, include_control: bool = False):
        from .measures import empirical_law
        return empirical_law(self, j, include_control)


# ------------------------------------------------------ coefficients

class CoefficientSpec:
    """Common interface: kernels, inner parts and deterministic offsets."""

    m = 1
    d = 1
    drift_kernel: Optional[LagKernel] = None
    diffusion_kernel: Optional[LagKernel] = None
    control = None

    def has_drift(self):
        return self.drift_kernel is not None

    def has_diffusion(self):
        return self.diffusion_kernel is not None

    def drift_inner(self, s, X, A, law):
        raise NotImplementedError

    def diffusion_inner(self, s, X, A, law):
        raise NotImplementedError

    def drift_offset(self, grid):
        return None

    def diffusion_offset(self, grid):
        return None

    def prepare_law(self, law):
        law.mean()

    def lipschitz_checks(self):
        """(name, fn(x, a), declared constant, state dim, control dim) tuples for sampling."""
        return []

    def verify_lipschitz(self, samples: int = 2000, seed: int = 0, scale: float = 3.0):
        """Largest sampled two-point ratio per declared map; raises if above the constant."""
        rng = np.random.default_rng(seed)
        out = {}
        for name, fn, const, dim, adim in self.lipschitz_checks():
            x, y = rng.normal(scale=scale, size=(2, samples, dim))
            a = rng.normal(scale=scale, size=(samples, adim)) if adim else None
            b = rng.normal(scale=scale, size=(samples, adim)) if adim else None
            fx, fy = np.asarray(fn(x, a), float), np.asarray(fn(y, b), float)
            num = np.sqrt(((fx - fy) ** 2).reshape(samples, -1).sum(1))
            den = np.sqrt(((x - y) ** 2).sum(1) + (((a - b) ** 2).sum(1) if adim else 0))
            ratio = float(np.max(num / den))
            out[name] = ratio
            if ratio > const + 1e-6:
                raise DomainError(f"{name} is not {const}-Lipschitz (sampled ratio {ratio:.6g})")
        return out


class ZeroCoefficients(CoefficientSpec):
    def __init__(self, m=1, d=1):
        self.m, self.d = m, d


def _matrix_process(eta, s, m, d):
    """Deterministic matrix-valued process at the nodes s, shape (n+1) x m x d."""
    e = np.asarray(eta(s) if callable(eta) else eta, dtype=float)
    if e.ndim >= 1 and e.shape[0] == len(s) and e.size == len(s) * m * d:
        return e.reshape(len(s), m, d)
    if e.size == m * d:
        return np.broadcast_to(e.reshape(1, m, d), (len(s), m, d))
    raise DomainError(f"cannot read matrix process of shape {e.shape} as {m} x {d}")


def _zero_map(m):
    return lambda x, a: np.zeros(x.shape[:-1] + (m,))


class Exemplary(CoefficientSpec):
    """B = f(t-s)(kappa_s + f1(X_s, a_s) + E f2(X_s, a_s)),
    Sigma = g(t-s)(eta_s + g1(X_s, a_s) + E g2(X_s, a_s)).

    Maps act on the last axis: f1(x, a) takes x of shape (..., m) and returns
    (..., m); g1 returns (..., m, d).  kappa, eta and the control alpha are
    processes in the sense of ``as_process`` (eta: nodes -> m x d values).
    Pass f=None (resp. g=None) to switch the drift (diffusion) off.
    """

    def __init__(self, f=None, g=None, kappa=None, eta=None, alpha=None,
                 f1=None, f2=None, g1=None, g2=None, m=1, d=1,
                 f_exponent=None, g_exponent=None, lipschitz=None):
        self.m, self.d = m, d
        self.drift_kernel = None if f is None else LagKernel.make(f, f_exponent)
        self.diffusion_kernel = None if g is None else LagKernel.make(g, g_exponent)
        self.kappa, self.eta, self.control = kappa, eta, alpha
        self.f1 = f1 or _zero_map(m)
        self.f2 = f2
        self.g1 = g1
        self.g2 = g2
        self.lipschitz = lipschitz or {}

    def drift_inner(self, s, X, A, law):
        grid = law.grid
        out = self.f1(X, A) + as_process(self.kappa, 1, grid, self.m)
        if self.f2 is not None:
            out = out + law.expect(self.f2)[None]
        return np.broadcast_to(out, X.shape[:2] + (self.m,))

    def prepare_law(self, law):
        for fn in (self.f2, self.g2):
            if fn is not None:
                law.expect(fn)

    def diffusion_inner(self, s, X, A, law):
        out = np.zeros(X.shape[:2] + (self.m, self.d))
        if self.eta is not None:
            out = out + _matrix_process(self.eta, s, self.m, self.d)[None]
        if self.g1 is not None:
            out = out + self.g1(X, A)
        if self.g2 is not None:
            out = out + law.expect(self.g2)[None]
        return out

    def lipschitz_checks(self):
        adim = 0 if self.control is None else np.shape(self.control)[-1]
        return [(k, getattr(self, k), c, self.m, adim) for k, c in self.lipschitz.items()]


class ControlledMV(CoefficientSpec):
    """B_{t,s} = f(t-s) b(s, X_s, a_s, law_s), Sigma_{t,s} = g(t-s) sigma(s, X_s, a_s, law_s).

    b and sigma are vectorised over nodes: s is the node array, x has shape
    (chunk, n+1, m), a the matching control slice or None, and law an
    ``EnsembleLaw`` whose methods return per-node arrays.  The t-dependence
    enters through the lag kernels only.
    """

    def __init__(self, b=None, sigma=None, m=1, d=1, drift_kernel=1.0, diffusion_kernel=1.0,
                 drift_exponent=None, diffusion_exponent=None, control=None):
        self.m, self.d = m, d
        self.b, self.sigma, self.control = b, sigma, control
        self.drift_kernel = None if b is None else LagKernel.make(drift_kernel, drift_exponent)
        self.diffusion_kernel = None if sigma is None else LagKernel.make(diffusion_kernel, diffusion_exponent)

    def drift_inner(self, s, X, A, law):
        return np.broadcast_to(np.asarray(self.b(s, X, A, law), dtype=float), X.shape[:2] + (self.m,))

    def diffusion_inner(self, s, X, A, law):
        return np.broadcast_to(np.asarray(self.sigma(s, X, A, law), dtype=float),
                               X.shape[:2] + (self.m, self.d))


def _lip1_default(m):
    return lambda x: x


class AffineRandom(CoefficientSpec):
    """B_{t,s} = kappa(t,s) + f(t-s)(beta1 f1(X_s) + beta2 f2(E X_s)),
    Sigma_{t,s} = eta(t,s) + g(t-s)(sigma1 g1(X_s) + sigma2 g2(E X_s)).

    beta1, beta2 are m x m matrices; sigma1, sigma2 are m x d x m tensors
    (sigma . v has shape m x d).  f1, f2, g1, g2 map R^m -> R^m, vanish at 0
    and are 1-Lipschitz (checked by ``verify_lipschitz``).
    """

    def __init__(self, m=1, d=1, kappa=None, eta=None, beta1=None, beta2=None,
                 sigma1=None, sigma2=None, f1=None, f2=None, g1=None, g2=None,
                 f=1.0, g=1.0, f_exponent=None, g_exponent=None):
        self.m, self.d = m, d
        self.kappa, self.eta = kappa, eta
        z2, z3 = np.zeros((m, m)), np.zeros((m, d, m))
        self.beta1 = z2 if beta1 is None else np.asarray(beta1, float).reshape(m, m)
        self.beta2 = z2 if beta2 is None else np.asarray(beta2, float).reshape(m, m)
        self.sigma1 = z3 if sigma1 is None else np.asarray(sigma1, float).reshape(m, d, m)
        self.sigma2 = z3 if sigma2 is None else np.asarray(sigma2, float).reshape(m, d, m)
        self.f1, self.f2 = f1 or _lip1_default(m), f2 or _lip1_default(m)
        self.g1, self.g2 = g1 or _lip1_default(m), g2 or _lip1_default(m)
        has_b = np.any(self.beta1) or np.any(self.beta2)
        has_s = np.any(self.sigma1) or np.any(self.sigma2)
        self.drift_kernel = LagKernel.make(f, f_exponent) if has_b else None
        self.diffusion_kernel = LagKernel.make(g, g_exponent) if has_s else None
        self._offset_b = kappa is not None
        self._offset_s = eta is not None

    def has_drift(self):
        return self.drift_kernel is not None or self._offset_b

    def has_diffusion(self):
        return self.diffusion_kernel is not None or self._offset_s

    def drift_inner(self, s, X, A, law):
        mean = law.mean()
        return self.f1(X) @ self.beta1.T + (self.f2(mean) @ self.beta2.T)[None]

    def diffusion_inner(self, s, X, A, law):
        mean = law.mean()
        return np.einsum("idk,...k->...id", self.sigma1, self.g1(X)) + \
            np.einsum("idk,...k->...id", self.sigma2, self.g2(mean))[None]

    def drift_offset(self, grid):
        return None if self.kappa is None else _offset_drift(self.kappa, grid, self.m)

    def diffusion_offset(self, grid):
        return None if self.eta is None else _offset_diffusion(self.eta, grid, self.m, self.d)

    def lipschitz_checks(self):
        out = []
        for name in ("f1", "f2", "g1", "g2"):
            fn = getattr(self, name)
            z = np.asarray(fn(np.zeros((1, self.m))), float)
            if np.any(np.abs(z) > 1e-12):
                raise DomainError(f"{name} must vanish at 0")
            out.append((name, (lambda fn: lambda x, a: fn(x))(fn), 1.0, self.m, 0))
        return out


# ------------------------------------------------------------- scheme

@dataclass
class Scheme:
    """Precomputed weights for one (coefficients, grid) pair."""

    coef: CoefficientSpec
    grid: TimeGrid
    drift_rule: str = "trapezoid"
    diffusion_rule: str = "point"
    W: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    b_off: Optional[np.ndarray] = None
    s_off: Optional[np.ndarray] = None

    def __post_init__(self):
        c, g = self.coef, self.grid
        if c.drift_kernel is not None:
            self.W = drift_weights(c.drift_kernel, g, self.drift_rule)
        if c.diffusion_kernel is not None:
            self.G = diffusion_weights(c.diffusion_kernel, g, self.diffusion_rule)
        self.b_off = c.drift_offset(g)
        self.s_off = c.diffusion_offset(g)


def _control_of(coef, ensemble):
    if ensemble.control is not None:
        return ensemble.control
    if coef.control is None:
        return None
    a = np.asarray(coef.control(ensemble.grid.nodes) if callable(coef.control) else coef.control, float)
    if a.ndim == 2:
        a = a[None]
    return np.broadcast_to(a, (ensemble.N,) + a.shape[1:])


def _chunks(N):
    return [slice(k, min(k + CHUNK, N)) for k in range(0, N, CHUNK)]


def volterra_terms(scheme: Scheme, ensemble: PathEnsemble, threads: int = 1, rows=None):
    """(drift, stochastic) integrals at every node (or at the node indices ``rows``)."""
    coef, grid = scheme.coef, scheme.grid
    X = ensemble.states
    N, n1, m = X.shape
    A = _control_of(coef, ensemble)
    law = EnsembleLaw(X, A, grid)
    s = grid.nodes
    idx = slice(None) if rows is None else np.atleast_1d(rows)
    nr = n1 if rows is None else len(idx)
    drift = np.zeros((N, nr, m))
    stoch = np.zeros((N, nr, m))
    if coef.has_diffusion() and ensemble.driver is None:
        raise DomainError("ensemble has no Brownian driver")
    dW = ensemble.driver.increments if coef.has_diffusion() else None
    coef.prepare_law(law)     # laws are fixed before the particle work starts
    W = None if scheme.W is None else scheme.W[idx]
    G = None if scheme.G is None else scheme.G[idx]
    Eoff = None if scheme.s_off is None else scheme.s_off[idx]

    def work(sl):
        Xc = X[sl]
        Ac = None if A is None else A[sl]
        nc = Xc.shape[0]
        if W is not None:
            inner = np.asarray(coef.drift_inner(s, Xc, Ac, law), dtype=float)
            flat = np.ascontiguousarray(inner.transpose(1, 0, 2)).reshape(n1, nc * m)
            drift[sl] = (W @ flat).reshape(nr, nc, m).transpose(1, 0, 2)
        if G is not None:
            sig = np.asarray(coef.diffusion_inner(s, Xc, Ac, law), dtype=float)
            sig = np.broadcast_to(sig, (nc, n1, m, coef.d))
            Y = np.einsum("njmd,njd->njm", sig[:, :-1], dW[sl])
            flat = np.ascontiguousarray(Y.transpose(1, 0, 2)).reshape(n1 - 1, nc * m)
            stoch[sl] = (G @ flat).reshape(nr, nc, m).transpose(1, 0, 2)
        if Eoff is not None:
            E2 = Eoff.transpose(0, 2, 1, 3).reshape(nr * m, (n1 - 1) * coef.d)
            stoch[sl] += (dW[sl].reshape(nc, -1) @ E2.T).reshape(nc, nr, m)

    _run(work, _chunks(N), threads)
    if scheme.b_off is not None:
        drift += scheme.b_off[idx][None]
    return drift, stoch


def drift_integral(coef: CoefficientSpec, ensemble: PathEnsemble, t_index: int,
                   rule: str = "trapezoid") -> np.ndarray:
    """int_0^{t} B_{t,s}(X_s) ds at one node, N x m."""
    if not coef.has_drift():
        return np.zeros((ensemble.N, ensemble.m))
    sch = Scheme(_drift_only(coef), ensemble.grid, drift_rule=rule)
    return volterra_terms(sch, ensemble, rows=[t_index])[0][:, 0]


def stochastic_integral(coef: CoefficientSpec, ensemble: PathEnsemble, t_index: int,
                        rule: str = "point") -> np.ndarray:
    """int_0^{t} Sigma_{t,s}(X_s) dW_s at one node, N x m (left-point Ito sum)."""
    if not coef.has_diffusion():
        return np.zeros((ensemble.N, ensemble.m))
    sch = Scheme(_diffusion_only(coef), ensemble.grid, diffusion_rule=rule)
    return volterra_terms(sch, ensemble, rows=[t_index])[1][:, 0]


class _Restricted(CoefficientSpec):
    def __init__(self, base, keep_drift):
        self.base, self.keep_drift = base, keep_drift
        self.m, self.d, self.control = base.m, base.d, base.control
        self.drift_kernel = base.drift_kernel if keep_drift else None
        self.diffusion_kernel = None if keep_drift else base.diffusion_kernel

    def has_drift(self):
        return self.keep_drift and self.base.has_drift()

    def has_diffusion(self):
        return (not self.keep_drift) and self.base.has_diffusion()

    def drift_inner(self, *a):
        return self.base.drift_inner(*a)

    def diffusion_inner(self, *a):
        return self.base.diffusion_inner(*a)

    def drift_offset(self, grid):
        return self.base.drift_offset(grid) if self.keep_drift else None

    def diffusion_offset(self, grid):
        return None if self.keep_drift else self.base.diffusion_offset(grid)


def _drift_only(c):
    return _Restricted(c, True)


def _diffusion_only(c):
    return _Restricted(c, False)


# ----------------------------------------------------------- Picard

def initial_ensemble(xi, driver: BrownianDriver, m: int = 1, control=None) -> PathEnsemble:
    """The process xi as an ensemble (the usual starting iterate)."""
    grid = driver.grid
    X = np.broadcast_to(as_process(xi, driver.N, grid, m), (driver.N, grid.n_steps + 1, m)).copy()
    return PathEnsemble(X, driver, grid, control)


def picard_step(xi_arr, scheme: Scheme, X: PathEnsemble, threads: int = 1, iterate: int = 0) -> PathEnsemble:
    drift, stoch = volterra_terms(scheme, X, threads)
    new = xi_arr + drift + stoch
    bad = ~np.isfinite(new)
    if bad.any():
        k, j, _ = np.argwhere(bad)[0]
        raise DivergenceError(f"iterate {iterate} is not finite at node {j} (t={X.grid.nodes[j]:g}), particle {k}")
    return PathEnsemble(new, X.driver, X.grid, X.control)


def picard_iterate(xi, coef: CoefficientSpec, driver: BrownianDriver, X0: Optional[PathEnsemble] = None,
                   n_iters: int = 1, drift_rule: str = "trapezoid", diffusion_rule: str = "point",
                   threads: int = 1) -> List[PathEnsemble]:
    """[X0, X1, ..., X_{n_iters}] with common random numbers throughout."""
    grid = driver.grid
    if X0 is None:
        X0 = initial_ensemble(xi, driver, coef.m)
    if X0.driver is not driver or X0.grid != grid:
        X0 = PathEnsemble(X0.states, driver, grid, X0.control)
    xi_arr = as_process(xi, driver.N, grid, coef.m)
    scheme = Scheme(coef, grid, drift_rule, diffusion_rule)
    out = [X0]
    for k in range(1, n_iters + 1):
        out.append(picard_step(xi_arr, scheme, out[-1], threads, k))
    return out


@dataclass
class SolveResult:
    ensemble: PathEnsemble
    iterations: int
    residuals: List[float]
    equation_residual: np.ndarray      # per node, p-th moment norm of X - xi - integrals(X)
    iterates_kept: List[PathEnsemble] = field(default_factory=list)


def solve(xi, coef: CoefficientSpec, driver: BrownianDriver, tol: float = 1e-6, max_iters: int = 50,
          p: float = 2.0, seminorm: str = "infty", drift_rule: str = "trapezoid",
          diffusion_rule: str = "point", threads: int = 1, keep_iterates: bool = False,
          X0: Optional[PathEnsemble] = None) -> SolveResult:
    """Picard iteration until the seminorm of successive differences is below tol."""
    from .analysis import seminorm_infty_p, seminorm_int_p
    norm = {"infty": seminorm_infty_p, "int": seminorm_int_p}.get(seminorm)
    if norm is None:
        raise DomainError(f"unknown seminorm {seminorm!r}")
    grid = driver.grid
    xi_arr = as_process(xi, driver.N, grid, coef.m)
    scheme = Scheme(coef, grid, drift_rule, diffusion_rule)
    X = initial_ensemble(xi, driver, coef.m) if X0 is None else X0
    kept = [X] if keep_iterates else []
    residuals = []
    for k in range(1, max_iters + 1):
        Xn = picard_step(xi_arr, scheme, X, threads, k)
        r = norm(Xn, X, p, grid.T)
        residuals.append(r)
        if keep_iterates:
            kept.append(Xn)
        X = Xn
        if r < tol:
            drift, stoch = volterra_terms(scheme, X, threads)
            gap = X.states - xi_arr - drift - stoch
            eq = np.mean(np.linalg.norm(gap, axis=-1) ** p, axis=0) ** (1.0 / p)
            return SolveResult(X, k, residuals, eq, kept)
    raise NonConvergenceError(
        f"no convergence to tol={tol} within {max_iters} iterations; last residuals "
        + ", ".join(f"{r:.3e}" for r in residuals[-5:]), residuals, X)
