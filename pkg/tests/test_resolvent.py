import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import gamma as G

from svelab.kernel_lab import Constant, DomainError, TimeGrid, TriangularTable, Zero, power_kernel
from svelab.resolvent import (InfeasibleError, TruncationError, compose, function_series_I_l,
                              iterated_kernels, l_np_and_c, resolvent, transformed_kernel_l,
                              verify_bound_first_kind, verify_bound_second_kind,
                              volterra_residual)


def series_oracle(c=1.0, t=1.0, n_terms=80):
    """sum_n c^n (t^n / n!)^(1/2), computed independently of the tables."""
    return sum(c ** n * math.sqrt(t ** n / math.factorial(n)) for n in range(1, n_terms))


# ------------------------------------------------------------ iterated kernels

def test_constant_iterates_closed_form():
    g = TimeGrid(1.0, 64)
    st_ = iterated_kernels(Constant(1.0).tabulate(g), 5)
    t = g.nodes
    i, j = np.tril_indices(len(t), -1)
    for n in range(1, 6):
        expect = np.subtract.outer(t, t) ** (n - 1) / math.factorial(n - 1)
        # trapezoid composition: exact up to linear integrands, O(h^2) beyond
        atol = 1e-12 if n <= 3 else g.h ** 2
        assert np.allclose(st_[n].values[i, j], expect[i, j], rtol=0, atol=atol)
    assert st_[3].at(1.0, 0.0) == pytest.approx(0.5, abs=1e-12)


def test_first_iterate_is_base():
    g = TimeGrid(1.0, 8)
    base = power_kernel(0.75).tabulate(g)
    assert iterated_kernels(base, 1)[1] is base


def test_zero_kernel_iterates_vanish():
    g = TimeGrid(1.0, 8)
    st_ = iterated_kernels(Zero().tabulate(g), 4)
    for n in range(1, 5):
        assert np.all(st_[n].lower() == 0)


def test_negative_base_rejected():
    g = TimeGrid(1.0, 4)
    bad = TriangularTable(g, -np.tril(np.ones((5, 5))))
    with pytest.raises(DomainError):
        iterated_kernels(bad, 2)


@pytest.mark.parametrize("a", [-0.5, -0.25])
def test_singular_iterates_match_gamma_formula(a):
    # R_n(t, s) = Gamma(a+1)^n / Gamma(n(a+1)) (t-s)^(n(a+1)-1) for k = u^a
    g = TimeGrid(1.0, 128)
    st_ = iterated_kernels(power_kernel(a + 1).tabulate(g), 6)
    for n in range(1, 7):
        expect = G(a + 1) ** n / G(n * (a + 1))
        assert st_[n].values[-1, 0] == pytest.approx(expect, rel=1e-9)


def test_semigroup_identity():
    g = TimeGrid(1.0, 64)
    st_ = iterated_kernels(power_kernel(0.75).tabulate(g), 5)
    lhs = st_[5].values
    rhs = compose(st_[2], st_[3]).values
    i, j = np.tril_indices(65, -1)
    assert np.max(np.abs(lhs[i, j] - rhs[i, j])) < 1e-9


@settings(max_examples=15, deadline=None)
@given(c1=st.floats(0.0, 2.0), bump=st.floats(0.0, 1.0))
def test_iterates_monotone_in_kernel(c1, bump):
    g = TimeGrid(1.0, 16)
    a = iterated_kernels(Constant(c1).tabulate(g), 4)
    b = iterated_kernels(Constant(c1 + bump).tabulate(g), 4)
    for n in range(1, 5):
        assert np.all(b[n].lower() >= a[n].lower() - 1e-14)


# ------------------------------------------------------------ resolvent

@pytest.mark.parametrize("c", [1.0, 2.0])
def test_resolvent_constant(c):
    g = TimeGrid(1.0, 512)
    base = Constant(c).tabulate(g)
    R = resolvent(base)
    assert R.at(1.0, 0.0) == pytest.approx(c * math.exp(c), rel=5e-3)
    assert np.max(volterra_residual(base, R)) <= 1e-6


def test_resolvent_zero():
    g = TimeGrid(1.0, 8)
    R = resolvent(Zero().tabulate(g))
    assert np.all(R.lower() == 0)


def test_resolvent_truncation_error_carries_partial():
    g = TimeGrid(1.0, 16)
    with pytest.raises(TruncationError) as exc:
        resolvent(Constant(50.0).tabulate(g), n_max=5)
    assert exc.value.partial is not None


# ------------------------------------------------------------ l, I_l, l_np

def test_transformed_kernel_unit():
    g = TimeGrid(1.0, 32)
    l = transformed_kernel_l(Constant(1.0).tabulate(g), Zero().tabulate(g), 2.0, g)
    i, j = np.tril_indices(33)
    assert np.allclose(l.values[i, j], 2 * np.sqrt(g.nodes[i]))


def test_transformed_kernel_degenerate():
    g = TimeGrid(1.0, 8)
    z = Zero().tabulate(g)
    l2 = Constant(0.7).tabulate(g)
    l = transformed_kernel_l(z, l2, 3.0, g)
    assert np.allclose(np.tril(l.values), np.tril(2 * 3.0 * l2.values))
    assert np.all(transformed_kernel_l(z, z, 2.0, g).values == 0)


def test_transformed_kernel_rejects_w_p():
    g = TimeGrid(1.0, 4)
    z = Zero().tabulate(g)
    with pytest.raises(DomainError):
        transformed_kernel_l(z, z, 0.0, g)


def test_I_l_unit_constant():
    g = TimeGrid(1.0, 128)
    I = function_series_I_l(Constant(1.0).tabulate(g))
    assert I.values[-1] == pytest.approx(series_oracle(), abs=1e-3)


@pytest.mark.parametrize("c", [0.5, 1.5])
def test_I_l_scaled_constant(c):
    g = TimeGrid(1.0, 128)
    I = function_series_I_l(Constant(c).tabulate(g))
    assert I.values[-1] == pytest.approx(series_oracle(c), abs=2e-3)
    assert I(0.5) == pytest.approx(series_oracle(c, 0.5), abs=2e-3)


def test_I_l_zero():
    g = TimeGrid(1.0, 8)
    assert np.all(function_series_I_l(Zero().tabulate(g)).values == 0)


def test_l_np_unit_constant_p2():
    g = TimeGrid(1.0, 64)
    tables, c = l_np_and_c(Constant(1.0).tabulate(g), 2.0)
    t = g.nodes
    i, j = np.tril_indices(65)
    for n in (1, 2, 3):
        expect = (t[i] - t[j]) ** n / math.factorial(n)
        assert np.allclose(tables[n - 1].values[i, j], expect, atol=1e-6)
    assert c.values[-1] == pytest.approx(series_oracle(), abs=1e-3)


def test_l_np_zero_and_domain():
    g = TimeGrid(1.0, 8)
    tables, c = l_np_and_c(Zero().tabulate(g), 3.0)
    assert np.all(c.values == 0)
    with pytest.raises(DomainError):
        l_np_and_c(Constant(1.0).tabulate(g), 1.5)


def test_l_np_p_above_two_finite():
    g = TimeGrid(1.0, 32)
    tables, c = l_np_and_c(Constant(1.0).tabulate(g), 3.0)
    assert np.all(np.isfinite(c.values)) and c.values[-1] > 0


# ------------------------------------------------------------ ledgers

def test_ledger_constant_first_kind():
    g = TimeGrid(1.0, 256)
    led = verify_bound_first_kind(Constant(1.0), 1.0, 0.5, g)
    assert led.delta == pytest.approx(0.5)
    assert led.all_satisfied
    e12 = next(e for e in led.entries if (e.m, e.n) == (1, 2))
    assert e12.lhs <= 0.25 + 1e-12


def test_ledger_constant_second_kind_matches_first():
    g = TimeGrid(1.0, 128)
    a = verify_bound_first_kind(Constant(1.0), 1.0, 0.5, g)
    b = verify_bound_second_kind(Constant(1.0), 1.0, 0.5, g)
    assert b.all_satisfied
    assert np.allclose([e.lhs for e in a.entries], [e.lhs for e in b.entries], rtol=1e-9)


def test_ledger_quarter_power():
    g = TimeGrid(1.0, 256)
    led = verify_bound_first_kind(power_kernel(0.75), 2.0, 0.5, g)
    # window integral 2 sqrt(delta) <= 1/2 gives delta = 1/16
    assert led.delta == pytest.approx(1 / 16)
    assert led.c0 == pytest.approx(2.0)
    assert led.all_satisfied
    assert verify_bound_second_kind(power_kernel(0.75), 2.0, 0.5, g).all_satisfied


def test_ledger_zero_kernel():
    assert verify_bound_first_kind(Zero(), 1.0, 0.5, TimeGrid(1.0, 32)).all_satisfied


def test_ledger_infeasible():
    with pytest.raises(InfeasibleError):
        verify_bound_first_kind(power_kernel(0.5), 2.0, 0.5, TimeGrid(1.0, 32))
    with pytest.raises(InfeasibleError):
        verify_bound_first_kind(Constant(100.0), 1.0, 0.1, TimeGrid(1.0, 32))


def test_ledger_csv(tmp_path):
    led = verify_bound_first_kind(Constant(1.0), 1.0, 0.5, TimeGrid(1.0, 16), 2, 2)
    led.to_csv(tmp_path / "l.csv", ["seed=1"])
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[2] == "m,n,lhs,rhs,satisfied"
    assert len(lines) == 3 + 4
