"""
Discrete probability measures, the Wasserstein-p distance as a transport LP,
nested quantizer codebooks, empirical laws of particle ensembles and the
geometric functional metric built from horizon seminorms.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .kernel_lab import DomainError

WEIGHT_TOL = 1e-12
MARGINAL_TOL = 1e-9
MERGE_TOL = 1e-12


@dataclass
class DiscreteMeasure:
    """Finite convex combination of Dirac masses in R^m."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if atoms.ndim != 2 or len(atoms) != len(w) or len(w) == 0:
            raise DomainError("atoms and weights must be non-empty and of equal length")
        if not np.all(np.isfinite(atoms)) or not np.all(np.isfinite(w)):
            raise DomainError("atoms and weights must be finite")
        if np.any(w <= 0):
            raise DomainError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise DomainError(f"weights sum to {w.sum()!r}, not 1")
        if len(w) > 1:
            gaps = np.max(np.abs(atoms[:, None, :] - atoms[None, :, :]), axis=-1)
            np.fill_diagonal(gaps, np.inf)
            if np.min(gaps) == 0:
                raise DomainError("atoms must be pairwise distinct")
        self.atoms, self.weights = atoms, w

    @property
    def dim(self):
        return self.atoms.shape[1]

    def __len__(self):
        return len(self.weights)

    @classmethod
    def dirac(cls, x):
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), [1.0])

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["weight"] + [f"coord_{k + 1}" for k in range(self.dim)])
            for wt, x in zip(self.weights, self.atoms):
                w.writerow([repr(float(wt))] + [repr(float(v)) for v in x])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None or header[0].strip() != "weight" or len(header) < 2:
            raise DomainError(f"{path}: expected header 'weight,coord_1,...'")
        for k, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DomainError(f"{path}: row {k} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DomainError(f"{path}: row {k}: {exc}") from None
        if not rows:
            raise DomainError(f"{path}: no atoms")
        arr = np.array(rows)
        return cls(arr[:, 1:], arr[:, 0])


@dataclass
class TransportPlan:
    """A[i, j] = pi[i, j] / (alpha_i beta_j); cost = sum alpha_i A_ij beta_j d^p."""

    A: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    cost: float

    @property
    def coupling(self):
        return self.alpha[:, None] * self.A * self.beta[None, :]

    def marginal_defect(self) -> float:
        r1 = np.abs(self.A.T @ self.alpha - 1.0).max()
        r2 = np.abs(self.A @ self.beta - 1.0).max()
        return float(max(r1, r2))


def _pot():
    # only the numpy backend is needed; skipping the others keeps import fast
    for name in ("JAX", "TENSORFLOW", "PYTORCH", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
    import ot
    return ot


def cost_matrix(x: np.ndarray, y: np.ndarray, p: float) -> np.ndarray:
    d = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))
    return d ** p


def wasserstein_p(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 1.0):
    """(W_p(mu, nu), optimal plan) via the network simplex transport solver."""
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    for m in (mu, nu):
        if not isinstance(m, DiscreteMeasure):
            raise DomainError("arguments must be DiscreteMeasure")
    if mu.dim != nu.dim:
        raise DomainError(f"dimension mismatch {mu.dim} vs {nu.dim}")
    M = cost_matrix(mu.atoms, nu.atoms, p)
    a, b = mu.weights, nu.weights
    if len(a) == 1 or len(b) == 1:
        pi = np.outer(a, b)
    else:
        ot = _pot()
        # renormalise away the <= 1e-12 mass defect the solver would complain about
        pi = ot.emd(a / a.sum(), b / b.sum(), M, numItermax=1_000_000)
    cost = float(np.sum(pi * M))
    A = pi / np.outer(a, b)
    plan = TransportPlan(A, a, b, cost)
    if plan.marginal_defect() > MARGINAL_TOL:
        raise ArithmeticError(f"transport plan violates marginals by {plan.marginal_defect():.3e}")
    return max(cost, 0.0) ** (1.0 / p), plan


# ---------------------------------------------------------------- quantizer

@dataclass
class Codebook:
    """Nested finite point sets D_1 c D_2 c ... around a center x0.

    ``levels[k]`` lists the points of D_{k+1}; each list extends the previous
    one, so point indices are stable across levels.
    """

    center: np.ndarray
    levels: List[np.ndarray]
    mesh: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        lv = []
        for k, pts in enumerate(self.levels):
            pts = np.asarray(pts, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            if pts.shape[1] != len(self.center):
                raise DomainError(f"level {k + 1} has dimension {pts.shape[1]}")
            if not np.any(np.all(pts == self.center, axis=1)):
                raise DomainError(f"center missing from level {k + 1}")
            if k > 0 and not (len(pts) >= len(lv[-1]) and np.array_equal(pts[:len(lv[-1])], lv[-1])):
                raise DomainError(f"level {k + 1} does not extend level {k}")
            lv.append(pts)
        self.levels = lv

    @property
    def depth(self):
        return len(self.levels)


def dyadic_codebook(dim: int, depth: int, half_width: float = 1.0, center=None) -> Codebook:
    """Codebook of dyadic convex combinations (1 - q) x0 + q z.

    z runs over the lattice of spacing 2 L / 2^n in the box [-L, L]^dim and q over
    {k / 2^(n-1)}; both refine with n so the levels are nested.  The recorded
    mesh of level n is the lattice cell diameter sqrt(dim) 2 L / 2^n.
    """
    if dim < 1 or depth < 1 or not half_width > 0:
        raise DomainError("need dim >= 1, depth >= 1, half_width > 0")
    x0 = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    pts = np.empty((0, dim))
    seen = set()
    levels, mesh = [], []
    for n in range(1, depth + 1):
        ticks = np.linspace(-half_width, half_width, 2 ** n + 1)
        Z = np.stack(np.meshgrid(*([ticks] * dim), indexing="ij"), -1).reshape(-1, dim)
        qs = np.arange(2 ** (n - 1) + 1) / 2 ** (n - 1)
        cand = [x0[None, :]] + [(1 - q) * x0[None, :] + q * Z for q in qs[1:]]
        new = []
        for y in np.concatenate(cand):
            key = tuple(np.round(y, 12))
            if key not in seen:
                seen.add(key)
                new.append(y)
        if new:
            pts = np.vstack([pts, np.array(new)])
        levels.append(pts.copy())
        mesh.append(float(np.sqrt(dim) * 2 * half_width / 2 ** n))
    return Codebook(x0, levels, mesh)


def quantize(x, level: int, book: Codebook) -> np.ndarray:
    """Nearest point of D_level among those no farther from x0 than x.

    Ties go to the smallest index.  x may be a single point or an array of
    points (one per row).
    """
    if not 1 <= level <= book.depth:
        raise DomainError(f"level {level} outside 1..{book.depth}")
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] != len(book.center):
        X = X.reshape(-1, len(book.center))
    D = book.levels[level - 1]
    rx = np.linalg.norm(X - book.center, axis=1)
    ry = np.linalg.norm(D - book.center, axis=1)
    out = np.empty_like(X)
    for s in range(0, len(X), 256):
        blk = X[s:s + 256]
        dist = np.linalg.norm(blk[:, None, :] - D[None, :, :], axis=-1)
        dist[ry[None, :] > rx[s:s + 256, None]] = np.inf
        out[s:s + 256] = D[np.argmin(dist, axis=1)]
    return out[0] if np.ndim(x) == 1 or np.ndim(x) == 0 else out


# ----------------------------------------------------------- empirical laws

def merge_atoms(points: np.ndarray, weights: np.ndarray, tol: float = MERGE_TOL) -> DiscreteMeasure:
    """Merge points within tol in the max norm, summing their weights."""
    pts = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.lexsort(pts.T[::-1])
    pts, w = pts[order], w[order]
    keep_pts, keep_w = [], []
    for x, wt in zip(pts, w):
        for k, y in enumerate(keep_pts):
            if np.max(np.abs(x - y)) <= tol:
                keep_w[k] += wt
                break
        else:
            keep_pts.append(x)
            keep_w.append(wt)
    kw = np.array(keep_w)
    return DiscreteMeasure(np.array(keep_pts), kw / kw.sum())


def empirical_law(ensemble, t_index: int, include_control: bool = False) -> DiscreteMeasure:
    """Uniform measure on the particle states at one node, duplicates merged."""
    X = np.asarray(ensemble.states)
    if X.size == 0 or X.shape[0] == 0:
        raise DomainError("empty ensemble")
    if not -X.shape[1] <= t_index < X.shape[1]:
        raise DomainError(f"t_index {t_index} outside 0..{X.shape[1] - 1}")
    pts = X[:, t_index, :]
    if include_control:
        ctrl = getattr(ensemble, "control", None)
        if ctrl is None:
            raise DomainError("ensemble carries no control")
        pts = np.concatenate([pts, np.asarray(ctrl)[:, t_index, :]], axis=1)
    N = len(pts)
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    w = np.bincount(inv.ravel(), minlength=len(uniq)) / N
    if len(uniq) > 1:
        gaps = np.max(np.abs(np.diff(uniq, axis=0)), axis=1)
        if np.min(gaps) <= MERGE_TOL:
            return merge_atoms(uniq, w)
    return DiscreteMeasure(uniq, w)


def functional_metric(seminorms, q: float = 0.5) -> float:
    """sum_n q^(n-1) min{1, a_n}."""
    if not 0 < q < 1:
        raise DomainError(f"q must lie in (0, 1), got {q}")
    a = np.asarray(list(seminorms), dtype=float)
    if np.any(a < 0):
        raise DomainError("seminorm values must be non-negative")
    if a.size == 0:
        return 0.0
    return float(np.sum(q ** np.arange(len(a)) * np.minimum(1.0, a)))
