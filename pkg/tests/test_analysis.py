import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svelab.analysis import (BoundReport, bdg_constant, check_growth_vs_mc, comparison_bound_1,
                             equality_sequence, error_bound_2, growth_and_error_bounds_2,
                             growth_bound_1, growth_bound_2, holder_exponent, increment_bound,
                             moment_function, picard_error_bound_1, picard_error_bound_table,
                             picard_error_tail_coefficients, refinement_gap,
                             resolvent_inequality_check, resolvent_sequence_rhs, seminorm_infty_p,
                             seminorm_int_p)
from svelab.kernel_lab import Constant, DomainError, TimeGrid, Zero
from svelab.sve_solver import BrownianDriver, PathEnsemble


def sqrt_series(t=1.0, start=1, n_terms=80):
    """sum_{n >= start} (t^n / n!)^(1/2)."""
    return sum(math.sqrt(t ** n / math.factorial(n)) for n in range(start, n_terms))


def const_ens(values, grid):
    v = np.asarray(values, dtype=float)
    return PathEnsemble(np.broadcast_to(v.reshape(1, -1, 1), (2, len(grid), 1)).copy(), None, grid)


# ------------------------------------------------------------ constants and moments

def test_bdg_constant():
    assert bdg_constant(2) == 2.0
    assert bdg_constant(4) == pytest.approx(4 / 3 * math.sqrt(6))
    with pytest.raises(DomainError):
        bdg_constant(1.5)


def test_moment_of_constant_paths():
    g = TimeGrid(1.0, 4)
    mc = moment_function(const_ens(np.full(5, -2.0), g), 3.0)
    assert np.allclose(mc.values, 2.0) and np.all(mc.stderr == 0)


@pytest.mark.parametrize("p,expect", [(2.0, 1.0), (4.0, 3 ** 0.25)])
def test_moment_of_gaussian(p, expect):
    g = TimeGrid(1.0, 1)
    x = np.random.default_rng(0).standard_normal(200000)
    states = np.stack([np.zeros_like(x), x], axis=1)[..., None]
    mc = moment_function(PathEnsemble(states, None, g), p)
    assert abs(mc.values[1] - expect) < 3 * mc.stderr[1]
    assert mc.values[0] == 0


def test_moment_csv(tmp_path):
    g = TimeGrid(1.0, 2)
    moment_function(const_ens([1.0, 2.0, 3.0], g)).to_csv(tmp_path / "m.csv", ["seed=3"])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[1] == "t,moment,stderr" and len(lines) == 5


# ------------------------------------------------------------ seminorms

def test_seminorm_spike():
    g = TimeGrid(1.0, 10)
    spike = np.zeros(11)
    spike[4] = 3.0
    A, B = const_ens(spike, g), const_ens(np.zeros(11), g)
    assert seminorm_infty_p(A, B, 2.0) == pytest.approx(3.0)
    assert seminorm_int_p(A, B, 2.0) == pytest.approx(3.0 * g.h ** 0.5)


def test_seminorm_offset():
    g = TimeGrid(2.0, 8)
    A, B = const_ens(np.full(9, 1.5), g), const_ens(np.zeros(9), g)
    assert seminorm_infty_p(A, B, 3.0) == pytest.approx(1.5)
    assert seminorm_int_p(A, B, 3.0) == pytest.approx(1.5 * 2.0 ** (1 / 3))
    assert seminorm_int_p(A, B, 3.0, T=1.0) == pytest.approx(1.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), p=st.floats(1.0, 4.0), T=st.floats(0.1, 5.0))
def test_int_seminorm_below_sup(seed, p, T):
    g = TimeGrid(T, 6)
    rng = np.random.default_rng(seed)
    A = PathEnsemble(rng.normal(size=(5, 7, 2)), None, g)
    B = PathEnsemble(rng.normal(size=(5, 7, 2)), None, g)
    assert seminorm_int_p(A, B, p) <= T ** (1 / p) * seminorm_infty_p(A, B, p) * (1 + 1e-12)


# ------------------------------------------------------------ type 1 bounds

def test_growth_bound_unit_kernel():
    g = TimeGrid(1.0, 128)
    b = growth_bound_1(1.0, Constant(1.0).tabulate(g), 0.0)
    assert b.values[-1] == pytest.approx(1 + sqrt_series(), abs=2e-3)
    assert b.values[-1] == pytest.approx(3.4695, abs=2e-3)


def test_growth_bound_zero_cases():
    g = TimeGrid(1.0, 16)
    assert np.all(growth_bound_1(0.0, Constant(1.0).tabulate(g), 0.0).values == 0)
    z = growth_bound_1(lambda t: 1 + t, Zero().tabulate(g), 5.0)
    assert np.allclose(z.values, 1 + g.nodes)


def test_growth_bound_xi_term():
    g = TimeGrid(1.0, 128)
    b = growth_bound_1(0.0, Constant(1.0).tabulate(g), 2.0)
    assert b.values[-1] == pytest.approx(2 * sqrt_series(), abs=4e-3)


def test_comparison_bound():
    g = TimeGrid(1.0, 128)
    b = comparison_bound_1(Constant(1.0).tabulate(g), 1.0)
    assert b.values[-1] == pytest.approx(1 + sqrt_series(), abs=2e-3)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_picard_error_bound_tail(n):
    g = TimeGrid(1.0, 128)
    b = picard_error_bound_1(Constant(1.0).tabulate(g), 1.0, n)
    assert b.values[-1] == pytest.approx(sqrt_series(start=n), abs=2e-3)


def test_picard_error_bound_table_matches_single():
    g = TimeGrid(1.0, 64)
    lam = Constant(1.5).tabulate(g)
    D = lambda t: t
    tab = picard_error_bound_table(lam, D, 4)
    for n in range(1, 5):
        assert np.allclose(tab[n - 1], picard_error_bound_1(lam, D, n).values, rtol=1e-9, atol=1e-14)


def test_picard_error_bound_rejects_n0():
    g = TimeGrid(1.0, 8)
    with pytest.raises(DomainError):
        picard_error_bound_1(Constant(1.0).tabulate(g), 1.0, 0)


def test_tail_coefficients_decrease():
    g = TimeGrid(1.0, 64)
    c = picard_error_tail_coefficients(Constant(2.0).tabulate(g))
    assert np.all(np.diff(c) < 0) and c[-1] > 0
    assert c[0] == pytest.approx(sum(math.sqrt(4 ** n / math.factorial(n)) for n in range(1, 80)),
                                 rel=2e-3)


def test_refinement_gap_zero_for_exact_bound():
    g = TimeGrid(1.0, 8)
    assert np.all(refinement_gap(lambda gr: gr.nodes ** 2, g) == 0)


# ------------------------------------------------------------ type 2 bounds

def test_growth_bound_2_unit_kernel():
    # l_{n,2}(t,s) = (t-s)^n / n!, so the terms are (t^(n+1)/(n+1)!)^(1/2)
    g = TimeGrid(1.0, 128)
    b = growth_bound_2(Constant(1.0).tabulate(g), 2.0, 1.0)
    assert b.values[-1] == pytest.approx(sqrt_series(), abs=2e-3)


def test_growth_bound_2_zero_and_k0_only():
    g = TimeGrid(1.0, 16)
    assert np.all(growth_bound_2(Constant(1.0).tabulate(g), 2.0, 0.0).values == 0)
    b = growth_bound_2(Zero().tabulate(g), 3.0, 2.0)
    assert np.allclose(b.values, 2.0 * g.nodes ** (1 / 3))


def test_error_bound_2_and_pair():
    g = TimeGrid(1.0, 64)
    l = Constant(1.0).tabulate(g)
    e = error_bound_2(l, 2.0, 1.0, 1)
    assert e.values[-1] == pytest.approx(sqrt_series(start=2), abs=2e-3)
    gb, eb = growth_and_error_bounds_2(l, 2.0, k0=1.0, Delta=1.0, n=2)
    assert eb.values[-1] == pytest.approx(sqrt_series(start=3), abs=2e-3)
    assert gb.values[-1] > eb.values[-1]


# ------------------------------------------------------------ increment bound

def test_increment_bound_drift_kernel():
    assert increment_bound(0.25, 1.0, k1=lambda t, u: 1.0) == pytest.approx(0.75)
    assert increment_bound(0.5, 0.5, xi_increment=0.1, k1=lambda t, u: 1.0) == pytest.approx(0.1)


def test_increment_bound_diffusion_kernel():
    assert increment_bound(0.0, 0.64, k2=lambda t, u: 1.0, w_p=2.0) == pytest.approx(1.6)


def test_increment_bound_reversed():
    with pytest.raises(DomainError):
        increment_bound(1.0, 0.5)


# ------------------------------------------------------------ growth vs Monte Carlo

def test_check_growth_vs_mc():
    g = TimeGrid(1.0, 4)
    ens = const_ens(np.ones(5), g)
    assert check_growth_vs_mc(ens, 1.0).all_pass
    rep = check_growth_vs_mc(ens, 0.5)
    assert not rep.all_pass
    assert check_growth_vs_mc(ens, 0.0, xi=1.0).all_pass


def test_report_csv(tmp_path):
    rep = BoundReport(np.array([0.0, 1.0]), np.array([1.0, 2.0]), np.array([2.0, 1.0]), 1.05,
                      np.array([True, False]), "demo", 2.0, index=np.array([1, 1]), config_hash="ab", seed=4)
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("# report=demo slack=1.05 w_p=2.0 config_hash=ab seed=4")
    assert lines[1] == "n,t,lhs,rhs,pass"
    assert lines[3].endswith("false")


# ------------------------------------------------------------ resolvent sequence inequality

def test_inequality_equality_case():
    g = TimeGrid(1.0, 32)
    l = Constant(1.0).tabulate(g)
    seq = equality_sequence(1.0, l, 1.0, 0.5, 6)
    rep = resolvent_inequality_check(1.0, l, 1.0, 1.0, seq)
    assert rep.all_pass and "violated" not in rep.label
    assert np.max(np.abs(rep.lhs - rep.rhs)) < 1e-12


def test_inequality_strict_for_beta_two():
    g = TimeGrid(1.0, 32)
    l = Constant(1.0).tabulate(g)
    seq = equality_sequence(1.0, l, 2.0, 0.5, 5)
    rep = resolvent_inequality_check(1.0, l, 2.0, 2.0, seq)
    assert rep.all_pass
    # from t_2 on the grid measure has two or more atoms below t, so Minkowski is strict
    late = (rep.index >= 2) & (rep.t > 1.5 * g.h)
    assert np.all(rep.lhs[late] < rep.rhs[late])


def test_inequality_flags_hypothesis_violation():
    g = TimeGrid(1.0, 8)
    l = Constant(1.0).tabulate(g)
    rep = resolvent_inequality_check(1.0, l, 1.0, 1.0, [np.zeros(9), np.full(9, 10.0)])
    assert "violated" in rep.label and not rep.all_pass


def test_sequence_rhs_zero_kernel():
    g = TimeGrid(1.0, 8)
    r = resolvent_sequence_rhs(2.0, Zero().tabulate(g), 1.5, 7.0, 3)
    assert np.allclose(r, 2.0)


# ------------------------------------------------------------ Hölder

def test_holder_linear_paths():
    g = TimeGrid(1.0, 64)
    assert holder_exponent(const_ens(g.nodes, g)) == pytest.approx(1.0, abs=1e-9)


def test_holder_brownian():
    g = TimeGrid(1.0, 256)
    W = BrownianDriver(2000, g, seed=11).paths()
    assert holder_exponent(PathEnsemble(W, None, g)) == pytest.approx(0.5, abs=0.05)


def test_holder_constant_paths_undefined():
    g = TimeGrid(1.0, 16)
    with pytest.raises(DomainError):
        holder_exponent(const_ens(np.ones(17), g))
