"""Finite-size blocking criterion on the boxes C^{h,L} and B^{h,L}.

Blocking is decided by running the platform dynamics restricted to the
C-box until it either lies above the B-box everywhere (crossed) or makes a
sweep without change (blocked). By attractiveness these are exhaustive:
the halted surface is itself a blocking surface, and any blocking surface
dominates the platform trajectory forever.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit
from scipy import optimize, stats

from ._hashing import as_seed, derive_seed
from .dynamics import (
    CROSSED,
    HALTED,
    Lipschitz2,
    Surface,
    UpdateRule,
    _run_active,
    _rule_value,
    base_coords,
    neighbor_table,
    run_active,
    step,
)
from .environment import BernoulliTrap, Box, EnergyField, LawSpec, UsageError

ORACLE_MAX_SITES = 24


@dataclass(frozen=True)
class BoxSpec:
    h: int
    L: int
    a: int = 1
    d: int = 2

    def __post_init__(self):
        if min(self.h, self.L, self.a) < 1 or self.d < 2:
            raise UsageError("need h, L, a >= 1 and d >= 2")

    @property
    def H(self) -> int:
        return self.L ** (self.a + 1)

    @property
    def base(self) -> Box:
        return Box((0,) * (self.d - 1), (3 * self.h * self.L,) * (self.d - 1))

    @property
    def b_base(self) -> Box:
        return Box((self.h * self.L,) * (self.d - 1), (2 * self.h * self.L,) * (self.d - 1))

    @property
    def c_box(self) -> Box:
        return Box(self.base.lo + (0,), self.base.hi + (self.H,))

    @property
    def b_box(self) -> Box:
        return Box(self.b_base.lo + (0,), self.b_base.hi + (self.L,))

    @property
    def n_sites(self) -> int:
        return self.c_box.size

    @property
    def time_bound(self) -> int:
        return (3 * self.h) ** (self.d - 1) * self.L ** (self.d + self.a)


@dataclass(frozen=True)
class PlatformGeometry:
    """A C-box, the platform level and the B-box that must be crossed.

    BoxSpec covers the origin-anchored case; the renormalisation checks use
    shifted copies at several scales.
    """

    c_box: Box
    level: int
    target_base: Box
    target_height: int

    @classmethod
    def from_spec(cls, spec: BoxSpec) -> "PlatformGeometry":
        return cls(spec.c_box, 0, spec.b_base, spec.L)

    @property
    def base(self) -> Box:
        return Box(self.c_box.lo[:-1], self.c_box.hi[:-1])

    @property
    def time_bound(self) -> int:
        return self.c_box.size

    def target_indices(self) -> np.ndarray:
        base = self.base
        rel = self.target_base.sites() - np.array(base.lo)
        return np.ravel_multi_index(tuple(rel.T), base.shape).astype(np.int64)


@dataclass(frozen=True)
class Crossed:
    T: int

    blocked = False


@dataclass(frozen=True, eq=False)
class Blocked:
    final: Surface
    halt_time: int

    blocked = True


CrossingOutcome = Union[Crossed, Blocked]


def platform_surface(spec: BoxSpec, level: int = 0) -> Surface:
    if not 0 <= level <= spec.H:
        raise UsageError("platform level must lie within the C-box heights")
    return Surface.flat(spec.base, level)


def _as_geometry(spec) -> PlatformGeometry:
    return spec if isinstance(spec, PlatformGeometry) else PlatformGeometry.from_spec(spec)


def crossing_time(field: EnergyField, rule: UpdateRule, spec: Union[BoxSpec, PlatformGeometry]) -> CrossingOutcome:
    """Run the platform dynamics under the field restricted to the C-box."""
    geo = _as_geometry(spec)
    restricted = field.restrict(geo.c_box)
    start = Surface.flat(geo.base, geo.level)
    final, t, status = run_active(
        start, restricted, rule, geo.time_bound + 1, geo.target_indices(), geo.target_height
    )
    if status == CROSSED:
        return Crossed(t)
    if status == HALTED:
        return Blocked(final, t)
    raise RuntimeError(f"platform dynamics neither crossed nor halted within {geo.time_bound + 1} sweeps")


def is_blocking(surface: Surface, field: EnergyField, rule: UpdateRule, spec: BoxSpec) -> bool:
    """The three blocking conditions, evaluated under the C-box restricted field."""
    if surface.base != spec.base:
        raise UsageError("surface must be defined on the C-box base")
    h = surface.heights
    rel = spec.b_base.sites() - np.array(spec.base.lo)
    on_b = h[tuple(rel.T)]
    meets_b = bool(np.any(np.isfinite(on_b) & (on_b >= 0) & (on_b < spec.L)))
    nonneg = bool(np.all(h >= 0))
    if not (meets_b and nonneg):
        return False
    moved = step(surface, field.restrict(spec.c_box), rule).heights != h
    return not bool(np.any(moved & (h <= spec.H)))


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class BlockingEstimate:
    p_hat: float
    ci_low: float
    ci_high: float
    n_blocked: int
    n_samples: int
    confidence: float = 0.95

    @property
    def std_error(self) -> float:
        p = self.p_hat
        return math.sqrt(p * (1 - p) / self.n_samples)


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple:
    """Exact binomial interval by root-finding on the binomial CDF."""
    alpha = 1.0 - confidence
    if k == 0:
        lo = 0.0
    else:
        lo = optimize.brentq(lambda p: stats.binom.sf(k - 1, n, p) - alpha / 2, 0.0, 1.0, xtol=1e-14)
    if k == n:
        hi = 1.0
    else:
        hi = optimize.brentq(lambda p: stats.binom.cdf(k, n, p) - alpha / 2, 0.0, 1.0, xtol=1e-14)
    return lo, hi


@njit(cache=True)
def _batch_outcomes(seeds, h0, nbr, xc, law, lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip, targets, target_height, t_max):
    n = seeds.shape[0]
    status = np.empty(n, dtype=np.int64)
    times = np.empty(n, dtype=np.int64)
    for s in range(n):
        h = h0.copy()
        t, st = _run_active(h, nbr, xc, law, seeds[s], lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip, targets, target_height, t_max)
        status[s] = st
        times[s] = t
    return status, times


def sample_seeds(seed: int, start: int, stop: int) -> list:
    return [derive_seed(seed, i) for i in range(start, stop)]


def sample_outcomes(
    law: LawSpec,
    rule: UpdateRule,
    spec: Union[BoxSpec, PlatformGeometry],
    seeds: Sequence[int],
    d: Optional[int] = None,
) -> tuple:
    """Blocked flags and stopping times for one field per seed.

    The seeds are used as given, so callers control coupling: the same seeds
    under two laws give monotonically coupled environments.
    """
    geo = _as_geometry(spec)
    d = d or geo.c_box.dim
    proto = EnergyField(d, law, 0).restrict(geo.c_box)
    law_arr, _, lo, hi, ov_lo, ov_shape, ov_vals = proto.kernel_args()
    kind, table, clip = rule.encode(d)
    base = geo.base
    h0 = np.full(base.size, float(geo.level))
    nbr = neighbor_table(base, "neg_inf")
    xc = base_coords(base)
    seed_arr = np.array([as_seed(s) for s in seeds], dtype=np.uint64)
    status, times = _batch_outcomes(
        seed_arr, h0, nbr, xc, law_arr, lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip,
        geo.target_indices(), float(geo.target_height), geo.time_bound + 1,
    )
    if np.any((status != CROSSED) & (status != HALTED)):
        raise RuntimeError("platform dynamics exceeded the sweep bound")
    return status == HALTED, times


def _chunk_job(args):
    law, rule, spec, seed, start, stop = args
    blocked, _ = sample_outcomes(law, rule, spec, sample_seeds(seed, start, stop))
    return int(blocked.sum())


def blocking_probability(
    law: LawSpec,
    rule: UpdateRule,
    spec: Union[BoxSpec, PlatformGeometry],
    n_samples: int,
    seed: int = 0,
    workers: int = 1,
    confidence: float = 0.95,
) -> BlockingEstimate:
    """Fraction of sampled environments in which the platform gets blocked."""
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    if workers <= 1:
        k = _chunk_job((law, rule, spec, seed, 0, n_samples))
    else:
        edges = np.linspace(0, n_samples, workers + 1).astype(int)
        jobs = [(law, rule, spec, seed, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        with ProcessPoolExecutor(workers) as pool:
            k = sum(pool.map(_chunk_job, jobs))
    lo, hi = clopper_pearson(k, n_samples, confidence)
    return BlockingEstimate(k / n_samples, lo, hi, k, n_samples, confidence)


# ---------------------------------------------------------------------------
# decay fits


@dataclass
class DecayFit:
    rho_hat: float
    rho_se: float
    kappa_hat: float
    kappa_se: float
    slope_L: float
    slope_L_se: float
    residuals_power: list
    residuals_stretched: list
    n_positive: int
    zeros: list = field(default_factory=list)
    degenerate: bool = False


def _wls(x, y, w):
    coef, cov = np.polyfit(x, y, 1, w=w, cov="unscaled")
    resid = y - np.polyval(coef, x)
    return coef, math.sqrt(cov[0, 0]), resid


def fit_decay(points: Sequence[tuple]) -> DecayFit:
    """Fit log p against log L (power law), sqrt(L) (stretched) and L (exponential).

    Points are ``(L, p_hat)`` or ``(L, p_hat, n_samples)``. With sample
    counts the fits are weighted by the binomial standard error of log p_hat
    and the reported slope errors are the resulting parameter errors;
    without them the fits are unweighted and errors come from the residuals.
    """
    pos = [p for p in points if p[1] > 0]
    zeros = [p[0] for p in points if p[1] <= 0]
    nan = float("nan")
    if len(pos) < 3:
        return DecayFit(nan, nan, nan, nan, nan, nan, [], [], len(pos), zeros, True)
    L = np.array([p[0] for p in pos], dtype=float)
    y = np.log([p[1] for p in pos])
    if all(len(p) > 2 for p in pos):
        ph = np.array([p[1] for p in pos])
        n = np.array([p[2] for p in pos], dtype=float)
        # half a count keeps p_hat = 1 from getting infinite weight
        w = 1.0 / np.sqrt((1 - ph + 0.5 / n) / (n * ph))
        fits = [_wls(x, y, w) for x in (np.log(L), np.sqrt(L), L)]
    else:
        fits = []
        for x in (np.log(L), np.sqrt(L), L):
            res = stats.linregress(x, y)
            fits.append(((res.slope, res.intercept), res.stderr, y - (res.slope * x + res.intercept)))
    (cp, sp, rp), (cs, ss, rs), (cl, sl, _) = fits
    return DecayFit(
        float(-cp[0]), float(sp), float(-cs[0]), float(ss), float(cl[0]), float(sl),
        [float(v) for v in rp], [float(v) for v in rs], len(pos), zeros, False,
    )


# ---------------------------------------------------------------------------
# d = 2 structure of blocked Lipschitz surfaces


@dataclass
class StructureReport:
    candidates: list
    x0: Optional[int]
    has_low_point: bool
    one_lipschitz: bool
    below_3L: bool
    max_trap_free_run: int
    window: tuple

    @property
    def all_pass(self) -> bool:
        return self.has_low_point and self.one_lipschitz and self.below_3L


def _window_checks(h: np.ndarray, traps: np.ndarray, x0: int, L: int) -> tuple:
    lo, hi = max(0, x0 - L), min(len(h) - 1, x0 + L)
    seg = h[lo : hi + 1]
    one_lip = bool(np.all(np.abs(np.diff(seg)) <= 1))
    below = bool(np.all(seg <= 3 * L))
    run = best = 0
    for is_trap in traps[lo : hi + 1]:
        run = 0 if is_trap else run + 1
        best = max(best, run)
    return (lo, hi), one_lip, below, best


def surface_traps(surface: Surface, field: EnergyField, trap_value: float) -> np.ndarray:
    """Whether omega(x, S(x)) equals the trap value, per base site (d = 2)."""
    h = surface.heights
    xs = base_coords(surface.base)[:, 0]
    sites = np.stack([xs, np.where(np.isfinite(h), h, 0).astype(np.int64)], axis=1)
    return (field.energies(sites) == trap_value) & np.isfinite(h)


def structure_checks_d2(blocked: Surface, field: EnergyField, spec: BoxSpec) -> StructureReport:
    """Low point in [hL, 2hL], 1-Lipschitz and below 3L on x0 + [-L, L], and the
    longest trap-free stretch of the surface there."""
    if spec.d != 2 or field.dimension != 2:
        raise UsageError("structure checks are for d = 2")
    restricted = field.restrict(spec.c_box)
    if step(blocked, restricted, Lipschitz2()) != blocked:
        raise UsageError("surface is not a fixed point of the restricted dynamics")
    law = field.law
    trap = law.trap if isinstance(law, BernoulliTrap) else -3.0
    h = blocked.heights
    traps = surface_traps(blocked, field, trap)
    L = spec.L
    cands = [x for x in range(spec.h * L, min(2 * spec.h * L, len(h) - 1) + 1) if h[x] <= L]
    if not cands:
        return StructureReport([], None, False, False, False, -1, (0, 0))
    chosen = None
    for x0 in cands:
        window, one_lip, below, run = _window_checks(h, traps, x0, L)
        if chosen is None or (one_lip and below and not (chosen[2] and chosen[3])):
            chosen = (x0, window, one_lip, below, run)
        if one_lip and below:
            break
    x0, window, one_lip, below, run = chosen
    return StructureReport(cands, x0, True, one_lip, below, run, window)


# ---------------------------------------------------------------------------
# exhaustive oracle


@njit(cache=True)
def _oracle_counts(n_sites, width, height, nbr, trap, free, kind, table, clip, targets, target_height):
    """Blocked-environment counts by number of traps, over all 2^n_sites environments.

    Site (x, y) of the C-box is bit x*height + y. Dynamics use full sweeps on
    a dense energy table, independently of the hashed active-set runner.
    """
    counts = np.zeros(n_sites + 1, dtype=np.int64)
    omega = np.empty(n_sites, dtype=np.float64)
    h = np.empty(width, dtype=np.float64)
    nxt = np.empty(width, dtype=np.float64)
    k = nbr.shape[1]
    grads = np.empty(k, dtype=np.float64)
    for mask in range(1 << n_sites):
        pop = 0
        for b in range(n_sites):
            if (mask >> b) & 1:
                omega[b] = trap
                pop += 1
            else:
                omega[b] = free
        for i in range(width):
            h[i] = 0.0
        blocked = False
        while True:
            crossed = True
            for t in targets:
                if h[t] < target_height:
                    crossed = False
                    break
            if crossed:
                break
            changed = False
            for i in range(width):
                nxt[i] = h[i]
                y = int(h[i])
                if y >= height:
                    continue
                ok = True
                for j in range(k):
                    q = nbr[i, j]
                    if q < 0:
                        ok = False
                        break
                    grads[j] = h[q] - h[i]
                if not ok:
                    continue
                if _rule_value(kind, table, clip, grads, k, omega[i * height + y]):
                    nxt[i] = h[i] + 1.0
                    changed = True
            if not changed:
                blocked = True
                break
            for i in range(width):
                h[i] = nxt[i]
        if blocked:
            counts[pop] += 1
    return counts


def oracle_counts(law: BernoulliTrap, rule: UpdateRule, spec: BoxSpec) -> np.ndarray:
    if spec.n_sites > ORACLE_MAX_SITES:
        raise UsageError(f"C-box has {spec.n_sites} sites; enumeration is limited to {ORACLE_MAX_SITES}")
    law = law.resolved(spec.d)
    kind, table, clip = rule.encode(spec.d)
    geo = PlatformGeometry.from_spec(spec)
    return _oracle_counts(
        spec.n_sites, spec.base.size, spec.H, neighbor_table(spec.base, "neg_inf"),
        float(law.trap), float(law.free), kind, table, clip,
        geo.target_indices(), float(spec.L),
    )


def brute_force_blocking_probability(law: BernoulliTrap, rule: UpdateRule, spec: BoxSpec) -> Fraction:
    """Exact blocking probability by enumerating every trap configuration of the C-box.

    ``law.p`` is converted through its decimal representation, so 0.3 means 3/10.
    """
    if not isinstance(law, BernoulliTrap):
        raise UsageError("enumeration needs a BernoulliTrap law")
    counts = oracle_counts(law, rule, spec)
    p = Fraction(str(law.p)) if isinstance(law.p, float) else Fraction(law.p)
    n = spec.n_sites
    return sum((int(c) * p**k * (1 - p) ** (n - k) for k, c in enumerate(counts)), Fraction(0))
