import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depinning.dynamics import (
    NEG_INF_EXTERIOR,
    PERIODIC,
    GeneralMonotone,
    LaplacianThreshold,
    Lipschitz2,
    SoftLaplacian,
    Surface,
    divergence_check,
    evolve_until,
    laplacian,
    rule_lipschitz,
    rule_soft,
    run_active,
    step,
    velocity_estimate,
    velocity_sweep,
)
from depinning.environment import (
    NEG_INF,
    BernoulliTrap,
    Box,
    Constant,
    EnergyField,
    Gaussian,
    UsageError,
    overlay_field,
)


def random_lipschitz(rng, shape, bound=2, start=0):
    """Random walk surface with increments in [-bound, bound] along axis 0, then along axis 1."""
    h = np.zeros(shape)
    h[0, ...] = start
    if len(shape) == 2:
        h[0, 1:] = start + np.cumsum(rng.integers(-1, 2, shape[1] - 1))
    for i in range(1, shape[0]):
        h[i] = h[i - 1] + rng.integers(-1, 2, h[i].shape)
    if len(shape) == 1:
        h = start + np.concatenate([[0], np.cumsum(rng.integers(-bound, bound + 1, shape[0] - 1))])
    return h


def rules_for(d, rng):
    out = [Lipschitz2(), LaplacianThreshold()] + [GeneralMonotone.random(d, rng) for _ in range(2)]
    if d == 2:
        out.append(SoftLaplacian())
    return out


# --- rule examples


def test_rule_lipschitz_examples():
    assert rule_lipschitz((2, 0), -3.0) == 1
    assert rule_lipschitz((-2, 1), 100.0) == 0
    assert rule_lipschitz((1, 0), 0.5) == 1
    assert rule_lipschitz((0, 0), -0.5) == 0


def test_rule_soft_examples():
    assert rule_soft(1, 1, -1.5) == 1
    assert rule_soft(0, 0, 0.0) == 0
    assert rule_soft(5, 5, NEG_INF) == 0


def test_pinned_energy_overrides_forced_move():
    assert rule_lipschitz((2, 2), NEG_INF) == 0


def test_soft_rule_is_d2_only():
    with pytest.raises(UsageError):
        SoftLaplacian().encode(3)


def test_general_monotone_from_predicate_matches_lipschitz():
    def pred(a, w):
        return rule_lipschitz(a, w)

    g = GeneralMonotone.from_predicate(pred, 2)
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = tuple(int(v) for v in rng.integers(-2, 3, 2))
        w = float(rng.normal(0, 3))
        assert g(a, w) == rule_lipschitz(a, w)
    assert g.audit()


def test_audit_detects_non_monotone_table():
    t = np.zeros((5, 5))
    t[4, 2] = 10.0
    assert not GeneralMonotone(t).audit(np.random.default_rng(1), 5000)


# --- single steps


def test_flat_surface_large_positive_moves_up():
    base = Box((0,), (10,))
    s = Surface.flat(base, 3)
    out = step(s, EnergyField(2, Constant(100.0)), SoftLaplacian())
    np.testing.assert_array_equal(out.heights[1:-1], 4)


def test_pinned_field_leaves_surface_unchanged():
    rng = np.random.default_rng(2)
    s = Surface(Box((0,), (12,)), random_lipschitz(rng, (12,)), PERIODIC)
    for rule in (Lipschitz2(), SoftLaplacian(), LaplacianThreshold()):
        assert step(s, EnergyField(2, Constant(NEG_INF)), rule) == s


def test_lipschitz_minus_two_gradient_blocks():
    s = Surface(Box((0,), (3,)), [0.0, 2.0, 2.0], PERIODIC)
    out = step(s, EnergyField(2, Constant(100.0)), Lipschitz2())
    assert out.heights[1] == 2.0  # gradient towards x=0 is -2
    assert out.heights[0] == 1.0  # forced


def test_exterior_stays_neg_inf():
    base = Box((0,), (5,))
    s = Surface(base, [0.0, NEG_INF, 0.0, 0.0, 0.0])
    out = step(s, EnergyField(2, Constant(100.0)), SoftLaplacian())
    assert out.heights[1] == NEG_INF
    assert out.heights[0] == 0.0 and out.heights[2] == 0.0
    assert out.heights[3] == 1.0
    assert out.height((7,)) == NEG_INF


def test_surface_validation():
    with pytest.raises(UsageError):
        Surface(Box((0,), (3,)), [0.0, 0.5, 1.0])
    with pytest.raises(UsageError):
        Surface(Box((0,), (3,)), [0.0, 1.0])


# --- Laplacian and divergence


def test_laplacian_examples():
    s = Surface(Box((0,), (5,)), [0.0, 0.0, 0.0, 1.0, 0.0])
    assert laplacian(s, (1,)) == 0
    assert laplacian(s, (3,)) == -2
    assert laplacian(s, (0,)) == NEG_INF


def test_divergence_examples():
    flat = Surface.flat(Box((0, 0), (6, 6)))
    assert divergence_check(flat, Box((1, 1), (4, 5))) == (0, 0)
    ramp = Surface(Box((0,), (10,)), np.arange(10.0))
    assert divergence_check(ramp, Box((2,), (7,))) == (0, 0)


def direct_divergence(h, lo, hi):
    """Independent 1-d/2-d sum of the Laplacian and of outward boundary differences."""
    lhs = 0
    rhs = 0
    for x in np.ndindex(*h.shape):
        if not all(l <= xi < u for xi, l, u in zip(x, lo, hi)):
            continue
        for axis in range(h.ndim):
            for s in (1, -1):
                y = list(x)
                y[axis] += s
                diff = int(h[tuple(y)] - h[x])
                lhs += diff
                if not lo[axis] <= y[axis] < hi[axis]:
                    rhs += diff
    return lhs, rhs


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_divergence_random(seed, dim):
    rng = np.random.default_rng(seed)
    shape = (9,) * dim
    h = random_lipschitz(rng, shape)
    lo = tuple(int(v) for v in rng.integers(1, 4, dim))
    hi = tuple(int(l + v) for l, v in zip(lo, rng.integers(1, 5, dim)))
    s = Surface(Box((0,) * dim, shape), h)
    lhs, rhs = divergence_check(s, Box(lo, hi))
    assert lhs == rhs
    assert (lhs, rhs) == direct_divergence(h, lo, hi)


def test_divergence_rejects_box_outside():
    with pytest.raises(UsageError):
        divergence_check(Surface.flat(Box((0,), (4,))), Box((2,), (6,)))


# --- properties of the dynamics


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.sampled_from([NEG_INF_EXTERIOR, PERIODIC]))
def test_attractiveness(seed, d, boundary):
    rng = np.random.default_rng(seed)
    shape = (7,) * (d - 1)
    field = EnergyField(d, Gaussian(0.0, 4.0), seed)
    for rule in rules_for(d, rng):
        low = random_lipschitz(rng, shape)
        high = low + rng.integers(0, 3, shape)
        low = np.where(rng.random(shape) < 0.1, NEG_INF, low)
        a = Surface(Box((0,) * (d - 1), shape), low, boundary)
        b = Surface(Box((0,) * (d - 1), shape), high, boundary)
        for _ in range(10):
            a, b = step(a, field, rule), step(b, field, rule)
            assert a <= b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_increments_are_zero_or_one(seed):
    rng = np.random.default_rng(seed)
    s = Surface(Box((0,), (15,)), random_lipschitz(rng, (15,)), PERIODIC)
    f = EnergyField(2, BernoulliTrap(0.4), seed)
    for rule in (Lipschitz2(), SoftLaplacian()):
        nxt = step(s, f, rule)
        assert set(np.unique(nxt.heights - s.heights)) <= {0.0, 1.0}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-20, 20), st.integers(-20, 20))
def test_translation_covariance(seed, vx, vy):
    rng = np.random.default_rng(seed)
    vals = rng.choice([-3.0, 0.5], size=(12, 40))
    h0 = random_lipschitz(rng, (12,), start=10)
    f1 = overlay_field(2, Box((0, 0), (12, 40)), vals)
    f2 = overlay_field(2, Box((vx, vy), (vx + 12, vy + 40)), vals)
    s1 = Surface(Box((0,), (12,)), h0)
    s2 = Surface(Box((vx,), (vx + 12,)), h0 + vy)
    for _ in range(15):
        s1, s2 = step(s1, f1, Lipschitz2()), step(s2, f2, Lipschitz2())
        np.testing.assert_array_equal(s1.heights + vy, s2.heights)


def test_determinism():
    rng = np.random.default_rng(3)
    s = Surface(Box((0, 0), (6, 6)), random_lipschitz(rng, (6, 6)), PERIODIC)
    f = EnergyField(3, Gaussian(0.5, 1.0), 17)
    a, _, _ = run_active(s, f, Lipschitz2(), 50)
    b, _, _ = run_active(s, f, Lipschitz2(), 50)
    assert a == b


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
def test_active_runner_matches_full_sweeps(seed, d):
    rng = np.random.default_rng(seed)
    shape = (8,) * (d - 1)
    s = Surface(Box((0,) * (d - 1), shape), random_lipschitz(rng, shape))
    f = EnergyField(d, BernoulliTrap(0.3), seed).restrict(Box((0,) * d, shape + (30,)))
    rule = rules_for(d, rng)[rng.integers(0, 3)]
    ref = s
    t_halt = None
    for t in range(1, 40):
        nxt = step(ref, f, rule)
        if nxt == ref:
            t_halt = t
            break
        ref = nxt
    out, t, status = run_active(s, f, rule, 39)
    assert out == ref
    if t_halt is not None:
        assert t == t_halt


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lipschitz_closure(seed):
    rng = np.random.default_rng(seed)
    s = Surface(Box((0,), (40,)), random_lipschitz(rng, (40,)))
    assert s.is_lipschitz(2)
    f = EnergyField(2, BernoulliTrap(0.3), seed)
    for _ in range(30):
        s = step(s, f, Lipschitz2())
        assert s.is_lipschitz(2)


# --- trajectories


def test_evolve_until_stop_at_zero():
    s = Surface.flat(Box((0,), (4,)), 0, PERIODIC)
    tr = evolve_until(s, EnergyField(2, Constant(1.0)), SoftLaplacian(), lambda t, _: True, 10)
    assert tr.stopped and tr.t_final == 0 and tr.final == s


def test_evolve_until_pinned_halts_at_one():
    s = Surface.flat(Box((0,), (4,)), 0, PERIODIC)
    tr = evolve_until(s, EnergyField(2, Constant(NEG_INF)), SoftLaplacian(), lambda t, _: False, 10)
    assert tr.halted and tr.t_final == 1 and tr.final == s


def test_evolve_until_records():
    s = Surface.flat(Box((0,), (4,)), 0, PERIODIC)
    tr = evolve_until(s, EnergyField(2, Constant(1.0)), SoftLaplacian(), lambda t, x: t >= 6, 10, record_every=2)
    assert tr.t_final == 6 and tr.times == [0, 2, 4, 6]
    assert tr.to_records()[-1]["heights"] == [6, 6, 6, 6]


def test_velocity_examples():
    v = velocity_estimate(EnergyField(2, Constant(100.0)), SoftLaplacian(), 16, 200)
    assert v.velocity == 1
    v = velocity_estimate(EnergyField(2, BernoulliTrap(1.0)), Lipschitz2(), 16, 200)
    assert v.velocity == 0
    with pytest.raises(UsageError):
        velocity_estimate(EnergyField(2, Constant(1.0)), SoftLaplacian(), 16, 10, burn_in=10)


def test_velocity_sweep_positive():
    out = velocity_sweep(Gaussian(5.0, 1.0), SoftLaplacian(), 64, 300, 50, [1, 2, 3])
    assert all(v > 0 for v in out["velocities"])
