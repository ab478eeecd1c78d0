import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svelab.kernel_lab import DomainError, TimeGrid
from svelab.measures import (Codebook, DiscreteMeasure, dyadic_codebook, empirical_law,
                             functional_metric, quantize, wasserstein_p)
from svelab.sve_solver import PathEnsemble


def quantile_oracle(x, a, y, b, p):
    """1-D W_p from the quantile functions: int_0^1 |F^-1(u) - G^-1(u)|^p du."""
    ox, oy = np.argsort(x), np.argsort(y)
    x, a, y, b = x[ox], a[ox], y[oy], b[oy]
    cuts = np.unique(np.concatenate([[0.0], np.cumsum(a), np.cumsum(b)]))
    cuts = cuts[cuts <= 1.0]
    cuts[-1] = 1.0
    total = 0.0
    ca, cb = np.cumsum(a), np.cumsum(b)
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= lo:
            continue
        mid = 0.5 * (lo + hi)
        i = min(np.searchsorted(ca, mid), len(x) - 1)
        j = min(np.searchsorted(cb, mid), len(y) - 1)
        total += (hi - lo) * abs(x[i] - y[j]) ** p
    return total ** (1.0 / p)


def random_measure(rng, n, dim=1):
    w = rng.random(n) + 0.05
    w /= w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return DiscreteMeasure(rng.normal(size=(n, dim)), w)


# ------------------------------------------------------------ measures

def test_measure_validation():
    with pytest.raises(DomainError):
        DiscreteMeasure([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(DomainError):
        DiscreteMeasure([[0.0], [1.0]], [1.0, 0.0])
    with pytest.raises(DomainError):
        DiscreteMeasure([[0.0], [0.0]], [0.5, 0.5])


def test_measure_csv_roundtrip(tmp_path):
    m = DiscreteMeasure([[0.0, 1.0], [2.0, 3.0]], [0.25, 0.75])
    m.to_csv(tmp_path / "m.csv", ["seed=0"])
    back = DiscreteMeasure.from_csv(tmp_path / "m.csv")
    assert np.array_equal(back.atoms, m.atoms) and np.array_equal(back.weights, m.weights)


def test_measure_csv_bad_row(tmp_path):
    (tmp_path / "m.csv").write_text("weight,coord_1\n0.5,0\nabc,1\n")
    with pytest.raises(DomainError, match="row 3"):
        DiscreteMeasure.from_csv(tmp_path / "m.csv")


# ------------------------------------------------------------ Wasserstein

def test_dirac_pair():
    d, plan = wasserstein_p(DiscreteMeasure.dirac([0.0, 0.0]), DiscreteMeasure.dirac([3.0, 4.0]), 2)
    assert d == pytest.approx(5.0)
    assert plan.marginal_defect() < 1e-12


@pytest.mark.parametrize("p", [1, 2, 3])
def test_two_point_vs_midpoint(p):
    mu = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
    nu = DiscreteMeasure.dirac([0.5])
    assert wasserstein_p(mu, nu, p)[0] == pytest.approx(0.5, abs=1e-12)


def test_identical_measures_zero():
    rng = np.random.default_rng(0)
    m = random_measure(rng, 5, 2)
    assert wasserstein_p(m, m, 1)[0] == pytest.approx(0.0, abs=1e-12)


def test_brute_force_small_plan():
    # 2 x 2 transport: the feasible plans form a segment; scan it
    mu = DiscreteMeasure([[0.0], [2.0]], [0.3, 0.7])
    nu = DiscreteMeasure([[1.0], [5.0]], [0.6, 0.4])
    C = np.abs(mu.atoms - nu.atoms.T) ** 2
    best = np.inf
    for x in np.linspace(0, 0.3, 3001):
        pi = np.array([[x, 0.3 - x], [0.6 - x, 0.4 - 0.3 + x]])
        if np.all(pi >= -1e-15):
            best = min(best, float(np.sum(pi * C)))
    assert wasserstein_p(mu, nu, 2)[0] == pytest.approx(best ** 0.5, rel=1e-9)


def test_random_1d_against_quantiles():
    rng = np.random.default_rng(1)
    for _ in range(40):
        mu, nu = random_measure(rng, rng.integers(1, 9)), random_measure(rng, rng.integers(1, 9))
        for p in (1, 2):
            d, plan = wasserstein_p(mu, nu, p)
            ref = quantile_oracle(mu.atoms[:, 0], mu.weights, nu.atoms[:, 0], nu.weights, p)
            assert d == pytest.approx(ref, abs=1e-9)
            assert plan.cost ** (1 / p) == pytest.approx(d, abs=1e-12)
            assert plan.marginal_defect() < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_measure(rng, rng.integers(1, 6), 2) for _ in range(3))
    for p in (1, 2):
        dab, dba = wasserstein_p(a, b, p)[0], wasserstein_p(b, a, p)[0]
        assert dab == pytest.approx(dba, abs=1e-9)
        assert dab <= wasserstein_p(a, c, p)[0] + wasserstein_p(c, b, p)[0] + 1e-9


def test_dimension_mismatch():
    with pytest.raises(DomainError):
        wasserstein_p(DiscreteMeasure.dirac([0.0]), DiscreteMeasure.dirac([0.0, 1.0]))


# ------------------------------------------------------------ quantizer

def test_quantizer_rule_examples():
    book = Codebook([0.0], [np.array([[0.0], [1.0]])])
    assert quantize([0.6], 1, book)[0] == 0.0
    assert quantize([1.4], 1, book)[0] == 1.0
    assert quantize([1.0], 1, book)[0] == 1.0


def test_quantizer_tie_smallest_index():
    book = Codebook([0.0], [np.array([[0.0], [1.0], [-1.0]])])
    assert quantize([0.0], 1, book)[0] == 0.0
    assert quantize([1.5], 1, book)[0] == 1.0
    book = Codebook([0.0], [np.array([[0.0], [-1.0], [1.0]])])
    # x = 3: 1 and -1 are both feasible; 1 is nearer
    assert quantize([3.0], 1, book)[0] == 1.0


def test_codebook_validation():
    with pytest.raises(DomainError):
        Codebook([0.0], [np.array([[1.0]])])
    with pytest.raises(DomainError):
        Codebook([0.0], [np.array([[0.0], [1.0]]), np.array([[0.0], [2.0]])])


def test_dyadic_codebook_properties():
    rng = np.random.default_rng(2)
    book = dyadic_codebook(3, 4)
    X = rng.uniform(-1, 1, size=(1000, 3))
    errs = []
    prev = None
    for k in range(1, 5):
        Q = quantize(X, k, book)
        assert np.all(np.linalg.norm(Q, axis=1) <= np.linalg.norm(X, axis=1))
        e = np.linalg.norm(Q - X, axis=1)
        if prev is not None:
            assert np.all(e <= prev)
        prev = e
        errs.append(e.max())
    assert errs[-1] < book.mesh[-1]


# ------------------------------------------------------------ empirical law

def _ens(values):
    v = np.asarray(values, dtype=float).reshape(len(values), 1, -1)
    return PathEnsemble(np.repeat(v, 2, axis=1), None, TimeGrid(1.0, 1))


def test_empirical_single():
    m = empirical_law(_ens([[2.0]]), 0)
    assert len(m) == 1 and m.atoms[0, 0] == 2.0


def test_empirical_two_distinct():
    m = empirical_law(_ens([[1.0], [3.0]]), 1)
    assert np.allclose(m.weights, [0.5, 0.5])


def test_empirical_merge_duplicates():
    m = empirical_law(_ens([[1.0], [3.0], [1.0], [3.0]]), 0)
    assert len(m) == 2 and np.allclose(m.weights, [0.5, 0.5])


def test_empirical_merge_near_duplicates():
    m = empirical_law(_ens([[1.0], [1.0 + 1e-14], [3.0]]), 0)
    assert len(m) == 2 and np.allclose(sorted(m.weights), [1 / 3, 2 / 3])


def test_empirical_bad_index():
    with pytest.raises(DomainError):
        empirical_law(_ens([[1.0]]), 5)


# ------------------------------------------------------------ functional metric

def test_functional_metric_examples():
    assert functional_metric([0.0] * 5) == 0.0
    assert functional_metric([1.0] * 60, 0.5) == pytest.approx(2.0, abs=1e-12)
    assert functional_metric([0.5, 0, 0], 0.5) == 0.5


def test_functional_metric_bad_q():
    with pytest.raises(DomainError):
        functional_metric([1.0], 1.0)


@settings(max_examples=50, deadline=None)
@given(a=st.lists(st.floats(0, 3), min_size=1, max_size=8),
       b=st.lists(st.floats(0, 3), min_size=8, max_size=8))
def test_functional_metric_monotone_subadditive(a, b):
    b = b[:len(a)]
    s = [x + y for x, y in zip(a, b)]
    assert functional_metric(s) <= functional_metric(a) + functional_metric(b) + 1e-12
    bigger = [max(x, y) for x, y in zip(a, b)]
    assert functional_metric(bigger) >= functional_metric(a) - 1e-12
