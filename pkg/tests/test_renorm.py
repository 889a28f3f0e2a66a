import math
from dataclasses import replace

import pytest

from depinning.dynamics import Lipschitz2
from depinning.environment import BernoulliTrap, Constant
from depinning.renorm import (
    InfeasibleParams,
    LogValue,
    ScaleParams,
    check_assumptions,
    empirical_supT_check,
    iterate_recursion,
    minimal_L0,
    rk_sequence,
    scale_sequence,
    speed_lower_bound,
    suggest_params,
    two_scale_geometry,
)

BASE = ScaleParams(d=2, a=1, h=2, gamma=5, D=5, alpha=89, rho=89, L0=100, r0=10.0)


def test_log_value_arithmetic():
    a, b = LogValue.of(3.0), LogValue.of(5.0)
    assert (a * b).value == pytest.approx(15.0)
    assert (a + b).value == pytest.approx(8.0)
    assert (a**2).value == pytest.approx(9.0)
    assert (b / a).value == pytest.approx(5 / 3)
    zero = LogValue.of(0.0)
    assert (zero + a).value == pytest.approx(3.0)
    assert (zero**3).log == -math.inf


def test_scale_sequence():
    logs = scale_sequence(BASE, 4)
    assert logs[0] == pytest.approx(math.log(100))
    assert logs[1] == pytest.approx(5 * math.log(100))
    assert all(b > a for a, b in zip(logs, logs[1:]))


def test_rk_sequence_example():
    rk = rk_sequence(BASE, 6)
    assert rk.r[1] == pytest.approx(11.8)
    assert all(b < a for a, b in zip(rk.increments, rk.increments[1:]) if a > 0)
    assert all(b >= a for a, b in zip(rk.r, rk.r[1:]))
    assert rk.sup == pytest.approx(rk.r[-1], rel=1e-15)
    assert rk.sup <= rk.sup_bound
    assert rk.sup == pytest.approx(rk.sup_bound, rel=1e-12)


def test_check_assumptions_example():
    p = replace(BASE, D=11, L0=4 * 3**22)
    rep = check_assumptions(p)
    by = {c.name: c for c in rep.constraints}
    assert by["rho > d (gamma-1)(1+2 gamma)"].ok and by["rho > d (gamma-1)(1+2 gamma)"].rhs == 88
    assert by["alpha (a+1) > 2 D d (gamma-1)"].ok and by["alpha (a+1) > 2 D d (gamma-1)"].rhs == 176
    assert rep.ok


def test_check_assumptions_flags_D():
    rep = check_assumptions(replace(BASE, D=10))
    assert not {c.name: c for c in rep.constraints}["D > 2 gamma"].ok


def solve_l0_by_bisection(p):
    """Independent oracle: smallest integer L0 >= 100 with both L0-bound exponents satisfied."""
    e1 = (p.gamma - 1) * p.d * (p.D - 2 * p.gamma)
    e2 = p.rho - p.d * (p.gamma - 1) * (1 + 2 * p.gamma)
    target = math.log(4) + p.D * p.d * math.log(3)

    def ok(L):
        return e1 * math.log(L) >= target and e2 * math.log(L) >= target

    lo, hi = 100, 100
    while not ok(hi):
        hi *= 2
    if ok(lo):
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi


def test_minimal_L0_against_bisection():
    p = replace(BASE, D=11)
    log_req, L0 = minimal_L0(p)
    assert L0 == solve_l0_by_bisection(p)
    rep = check_assumptions(replace(p, L0=L0 - 1))
    assert not rep.ok and rep.required_L0 == L0
    assert check_assumptions(replace(p, L0=L0)).ok


def test_suggest_params_d2():
    p = suggest_params(2, 1)
    assert (p.gamma, p.D, p.rho, p.alpha) == (5, 11, 89, 89)
    assert check_assumptions(p).ok


@pytest.mark.parametrize("field", ["gamma", "D", "rho", "alpha", "L0"])
def test_suggest_params_minimal(field):
    p = suggest_params(2, 1)
    assert not check_assumptions(replace(p, **{field: getattr(p, field) - 1})).ok


@pytest.mark.parametrize("d,a", [(2, 1), (2, 2), (3, 1)])
def test_suggested_params_pass(d, a):
    assert check_assumptions(suggest_params(d, a)).ok


def test_suggest_params_infeasible_alpha():
    with pytest.raises(InfeasibleParams) as exc:
        suggest_params(2, 1, alpha=1)
    assert exc.value.report["alpha_lower_bound"] == 88


def test_recursion_passes_and_fails():
    p = suggest_params(2, 1)
    boundary = -2 * p.d * (p.gamma - 1) * p.log_L0
    res = iterate_recursion(p, boundary, k_max=10)
    assert res.passed and len(res.log_w) == 11
    assert all(w <= t for w, t in zip(res.log_w, res.log_targets))
    bad = iterate_recursion(p, boundary, rho=88, k_max=10)
    assert not bad.passed and bad.failed_at == 1


def test_recursion_zero_start_keeps_additive_terms():
    p = suggest_params(2, 1)
    res = iterate_recursion(p, -math.inf, k_max=1)
    lL = p.log_L0
    boxes = math.log(3) + (p.gamma - 1) * lL
    slow = p.d * p.D * boxes - p.alpha * (p.a + 1) * lL
    blocked = p.d * boxes - p.rho * lL
    assert res.log_w[1] == pytest.approx(math.log(math.exp(slow - blocked) + 1) + blocked)


def test_speed_lower_bound_positive():
    assert 0 < speed_lower_bound(BASE) < 1 / (2 * BASE.h * BASE.r0)


def test_two_scale_geometry_counts():
    geo = two_scale_geometry(4, 2, 2)
    assert geo["L1"] == 16
    assert len(geo["layers"]) == 4
    assert all(len(v) == 10 for v in geo["layers"].values())
    big = geo["big"]
    for subs in geo["layers"].values():
        for g in subs:
            assert big.c_box.intersect(g.c_box) == g.c_box


def test_supT_large_positive_field():
    rep = empirical_supT_check(Constant(100.0), Lipschitz2(), n_instances=2)
    assert rep.n_checked == 2 and rep.violations == 0
    assert rep.records[0]["T"] == 16 and rep.records[0]["bound"] == 16


def test_supT_all_trap_skipped():
    rep = empirical_supT_check(BernoulliTrap(1.0), Lipschitz2(), n_instances=3)
    assert rep.n_skipped == 3 and rep.n_checked == 0


def test_supT_random_small_p():
    rep = empirical_supT_check(BernoulliTrap(0.1), Lipschitz2(), n_instances=30, seed=2)
    assert rep.violations == 0 and rep.n_checked > 0
