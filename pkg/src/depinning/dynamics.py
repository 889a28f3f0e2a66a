"""Surfaces and the synchronous update rule.

A surface lives on a finite base box in Z^{d-1}. Off-base heights are either
NEG_INF (restricted dynamics) or wrap around (periodic windows). Heights are
stored as float64 so that NEG_INF is native; finite heights stay exact
integers far beyond any reachable value.

Two execution paths exist on purpose. :func:`step` recomputes every site each
sweep and is the reference. :func:`run_active` only revisits sites next to a
site that moved in the previous sweep, which gives identical trajectories
(a site whose inputs did not change cannot change its decision) at a fraction
of the cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from .environment import NEG_INF, Box, EnergyField, UsageError, energy_at

NEG_INF_EXTERIOR = "neg_inf"
PERIODIC = "periodic"

_LIPSCHITZ, _LAPLACIAN, _TABLE = 0, 1, 2


# ---------------------------------------------------------------------------
# surfaces


@dataclass(frozen=True, eq=False)
class Surface:
    base: Box
    heights: np.ndarray
    boundary: str = NEG_INF_EXTERIOR

    def __post_init__(self):
        h = np.array(self.heights, dtype=np.float64)
        if h.shape != self.base.shape:
            raise UsageError(f"heights shape {h.shape} does not match base {self.base.shape}")
        if self.boundary not in (NEG_INF_EXTERIOR, PERIODIC):
            raise UsageError(f"unknown boundary mode {self.boundary!r}")
        finite = np.isfinite(h)
        if np.any(np.isposinf(h)) or np.any(h[finite] != np.round(h[finite])):
            raise UsageError("heights must be integers or NEG_INF")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)

    @classmethod
    def flat(cls, base: Box, level: int = 0, boundary: str = NEG_INF_EXTERIOR) -> "Surface":
        return cls(base, np.full(base.shape, float(level)), boundary)

    @property
    def dim(self) -> int:
        """Dimension d of the ambient lattice (base is d-1 dimensional)."""
        return self.base.dim + 1

    def with_heights(self, heights) -> "Surface":
        return Surface(self.base, heights, self.boundary)

    def height(self, x: Sequence[int]) -> float:
        x = self._resolve(x)
        if x is None:
            return NEG_INF
        return float(self.heights[x])

    def _resolve(self, x):
        rel = [xi - lo for xi, lo in zip(x, self.base.lo)]
        shape = self.base.shape
        if self.boundary == PERIODIC:
            return tuple(r % s for r, s in zip(rel, shape))
        if all(0 <= r < s for r, s in zip(rel, shape)):
            return tuple(rel)
        return None

    def __eq__(self, other):
        if not isinstance(other, Surface):
            return NotImplemented
        return (
            self.base == other.base
            and self.boundary == other.boundary
            and np.array_equal(self.heights, other.heights)
        )

    def __le__(self, other: "Surface") -> bool:
        return bool(np.all(self.heights <= other.heights))

    def is_lipschitz(self, bound: int = 2) -> bool:
        """All finite discrete gradients inside the base lie in [-bound, bound]."""
        h = self.heights
        for axis in range(h.ndim):
            if self.boundary == PERIODIC:
                g = np.roll(h, -1, axis=axis) - h
            else:
                g = np.diff(h, axis=axis)
            g = g[np.isfinite(g)]
            if g.size and np.abs(g).max() > bound:
                return False
        return True


def neighbor_table(base: Box, boundary: str) -> np.ndarray:
    """Flat neighbour indices in gradient order (+e1, -e1, +e2, -e2, ...); -1 off base."""
    shape = base.shape
    n = base.size
    idx = np.arange(n).reshape(shape)
    cols = []
    for axis in range(len(shape)):
        for shift in (1, -1):
            rolled = np.roll(idx, -shift, axis=axis)
            if boundary == NEG_INF_EXTERIOR:
                edge = [slice(None)] * len(shape)
                edge[axis] = -1 if shift == 1 else 0
                rolled = rolled.copy()
                rolled[tuple(edge)] = -1
            cols.append(rolled.ravel())
    return np.ascontiguousarray(np.stack(cols, axis=1).astype(np.int64))


def base_coords(base: Box) -> np.ndarray:
    return np.ascontiguousarray(base.sites())


# ---------------------------------------------------------------------------
# update rules


class UpdateRule:
    """Monotone update function F(gradients; omega) -> {0, 1}."""

    def encode(self, d: int) -> tuple:
        raise NotImplementedError

    def __call__(self, gradients: Sequence[float], omega: float) -> int:
        kind, table, clip = self.encode(len(gradients) // 2 + 1)
        g = np.asarray(gradients, dtype=np.float64)
        return int(_rule_value(kind, table, clip, g, g.shape[0], float(omega)))


@dataclass(frozen=True)
class Lipschitz2(UpdateRule):
    """2-Lipschitz rule: no move off a gradient <= -2, forced move off a gradient >= 2.

    On 2-Lipschitz surfaces this suppresses exactly the moves that would create
    a gradient of +-3; the inequalities keep the rule monotone on any surface.
    """

    def encode(self, d: int) -> tuple:
        return _LIPSCHITZ, np.zeros(1), 0


@dataclass(frozen=True)
class LaplacianThreshold(UpdateRule):
    """Move iff the discrete Laplacian plus the energy is positive."""

    def encode(self, d: int) -> tuple:
        return _LAPLACIAN, np.zeros(1), 0


@dataclass(frozen=True)
class SoftLaplacian(UpdateRule):
    """The d = 2 rule F(a, b, omega) = 1{a + b + omega > 0}."""

    def encode(self, d: int) -> tuple:
        if d != 2:
            raise UsageError("SoftLaplacian is defined for d = 2 only")
        return _LAPLACIAN, np.zeros(1), 0


@dataclass(frozen=True, eq=False)
class GeneralMonotone(UpdateRule):
    """Tabulated rule F(a; omega) = 1{omega > thresholds[clip(a)]}.

    ``thresholds`` has one axis of length ``2*clip + 1`` per gradient, in the
    order (+e1, -e1, ..., +e_{d-1}, -e_{d-1}); gradients are clipped into
    ``[-clip, clip]``. F is monotone iff the table is non-increasing along
    every axis, which :meth:`audit` checks.
    """

    thresholds: np.ndarray
    clip: int = 2

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if any(s != 2 * self.clip + 1 for s in t.shape):
            raise UsageError("every table axis must have length 2*clip+1")
        object.__setattr__(self, "thresholds", t)

    @property
    def n_gradients(self) -> int:
        return self.thresholds.ndim

    def encode(self, d: int) -> tuple:
        if self.n_gradients != 2 * (d - 1):
            raise UsageError(f"table has {self.n_gradients} gradient axes, dimension {d} needs {2 * (d - 1)}")
        return _TABLE, np.ascontiguousarray(self.thresholds.ravel()), self.clip

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, clip: int = 2) -> "GeneralMonotone":
        k = 2 * (d - 1)
        t = rng.normal(0.0, 2.0, size=(2 * clip + 1,) * k)
        for axis in range(k):
            t = np.minimum.accumulate(t, axis=axis)
        return cls(t, clip)

    @classmethod
    def from_predicate(
        cls,
        predicate: Callable[[tuple, float], int],
        d: int,
        clip: int = 2,
        omega_range: tuple = (-50.0, 50.0),
        tol: float = 1e-9,
    ) -> "GeneralMonotone":
        """Tabulate a predicate monotone in omega by bisecting its switch point."""
        k = 2 * (d - 1)
        lo0, hi0 = omega_range
        t = np.empty((2 * clip + 1,) * k)
        for idx in np.ndindex(*t.shape):
            a = tuple(i - clip for i in idx)
            if predicate(a, lo0):
                t[idx] = -np.inf
                continue
            if not predicate(a, hi0):
                t[idx] = np.inf
                continue
            lo, hi = lo0, hi0
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                lo, hi = (lo, mid) if predicate(a, mid) else (mid, hi)
            t[idx] = lo
        return cls(t, clip)

    def audit(self, rng: Optional[np.random.Generator] = None, n: int = 1000) -> bool:
        """Randomised check that F is non-decreasing in every coordinate."""
        rng = rng or np.random.default_rng(0)
        c, k = self.clip, self.n_gradients
        for _ in range(n):
            a = rng.integers(-c - 1, c + 2, size=k).astype(float)
            j = rng.integers(k)
            b = a.copy()
            b[j] += rng.integers(1, 3)
            w1 = rng.normal(0, 3)
            w2 = w1 + abs(rng.normal(0, 1))
            if self(tuple(a), w1) > self(tuple(b), w1) or self(tuple(a), w1) > self(tuple(a), w2):
                return False
        return True


@njit(cache=True)
def _rule_value(kind, table, clip, grads, k, omega):
    if omega == -np.inf:
        return 0
    lap = 0.0
    for j in range(k):
        if grads[j] == -np.inf:
            return 0
        lap += grads[j]
    if kind == 0:
        forced = False
        for j in range(k):
            if grads[j] <= -2.0:
                return 0
            if grads[j] >= 2.0:
                forced = True
        if forced:
            return 1
        return 1 if lap + omega > 0.0 else 0
    if kind == 1:
        return 1 if lap + omega > 0.0 else 0
    flat = 0
    width = 2 * clip + 1
    for j in range(k):
        g = grads[j]
        if g < -clip:
            g = -clip
        elif g > clip:
            g = clip
        flat = flat * width + int(g) + clip
    return 1 if omega > table[flat] else 0


def rule_lipschitz(gradients: Sequence[float], omega: float) -> int:
    return Lipschitz2()(gradients, omega)


def rule_soft(a: float, b: float, omega: float) -> int:
    return SoftLaplacian()((a, b), omega)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _site_move(i, h, nbr, xc, law, seed, lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip, grads, coords):
    s = h[i]
    if s == -np.inf:
        return 0
    k = nbr.shape[1]
    for j in range(k):
        n = nbr[i, j]
        if n < 0 or h[n] == -np.inf:
            return 0
        grads[j] = h[n] - s
    dm1 = xc.shape[1]
    for j in range(dm1):
        coords[j] = xc[i, j]
    coords[dm1] = np.int64(s)
    omega = energy_at(law, seed, lo, hi, ov_lo, ov_shape, ov_vals, coords)
    return _rule_value(kind, table, clip, grads, k, omega)


@njit(cache=True)
def _step_kernel(h, nbr, xc, law, seed, lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip):
    n = h.shape[0]
    out = h.copy()
    grads = np.empty(nbr.shape[1], dtype=np.float64)
    coords = np.empty(xc.shape[1] + 1, dtype=np.int64)
    for i in range(n):
        if _site_move(i, h, nbr, xc, law, seed, lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip, grads, coords):
            out[i] = h[i] + 1.0
    return out


# run_active status codes
RUNNING, CROSSED, HALTED = 0, 1, 2


@njit(cache=True)
def _run_active(h, nbr, xc, law, seed, lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip, targets, target_height, t_max):
    n = h.shape[0]
    grads = np.empty(nbr.shape[1], dtype=np.float64)
    coords = np.empty(xc.shape[1] + 1, dtype=np.int64)
    is_target = np.zeros(n, dtype=np.bool_)
    remaining = 0
    for t in targets:
        is_target[t] = True
        if h[t] < target_height:
            remaining += 1
    if targets.shape[0] > 0 and remaining == 0:
        return 0, CROSSED
    active = np.arange(n)
    n_active = n
    nxt = np.empty(n, dtype=np.int64)
    marked = np.zeros(n, dtype=np.bool_)
    movers = np.empty(n, dtype=np.int64)
    t = 0
    while t < t_max:
        t += 1
        nm = 0
        for a in range(n_active):
            i = active[a]
            if _site_move(i, h, nbr, xc, law, seed, lo, hi, ov_lo, ov_shape, ov_vals, kind, table, clip, grads, coords):
                movers[nm] = i
                nm += 1
        if nm == 0:
            return t, HALTED
        for m in range(nm):
            i = movers[m]
            h[i] += 1.0
            if is_target[i] and h[i] == target_height:
                remaining -= 1
        if targets.shape[0] > 0 and remaining == 0:
            return t, CROSSED
        n_next = 0
        for m in range(nm):
            i = movers[m]
            if not marked[i]:
                marked[i] = True
                nxt[n_next] = i
                n_next += 1
            for j in range(nbr.shape[1]):
                q = nbr[i, j]
                if q >= 0 and not marked[q]:
                    marked[q] = True
                    nxt[n_next] = q
                    n_next += 1
        for a in range(n_next):
            marked[nxt[a]] = False
        active, nxt = nxt, active
        n_active = n_next
    return t, RUNNING


def _check_dims(surface: Surface, field: EnergyField):
    if surface.dim != field.dimension:
        raise UsageError(f"surface lives in d={surface.dim}, field has d={field.dimension}")


def _prepare(surface: Surface, field: EnergyField, rule: UpdateRule):
    _check_dims(surface, field)
    kind, table, clip = rule.encode(field.dimension)
    nbr = neighbor_table(surface.base, surface.boundary)
    xc = base_coords(surface.base)
    return nbr, xc, field.kernel_args(), (kind, table, clip)


def step(surface: Surface, field: EnergyField, rule: UpdateRule) -> Surface:
    """One synchronous sweep: every site reads the pre-step surface."""
    nbr, xc, fargs, rargs = _prepare(surface, field, rule)
    h = np.ascontiguousarray(surface.heights.ravel())
    out = _step_kernel(h, nbr, xc, *fargs, *rargs)
    return surface.with_heights(out.reshape(surface.base.shape))


def run_active(
    surface: Surface,
    field: EnergyField,
    rule: UpdateRule,
    t_max: int,
    targets: Optional[np.ndarray] = None,
    target_height: float = 0.0,
) -> tuple:
    """Advance up to ``t_max`` sweeps, stopping early on a fixed point or when
    every flat index in ``targets`` reaches ``target_height``.

    Returns ``(surface, t, status)`` with status one of RUNNING, CROSSED, HALTED.
    For HALTED, ``t`` is the sweep that produced no change.
    """
    nbr, xc, fargs, rargs = _prepare(surface, field, rule)
    h = np.array(surface.heights.ravel(), dtype=np.float64)
    tg = np.zeros(0, dtype=np.int64) if targets is None else np.ascontiguousarray(targets, dtype=np.int64)
    t, status = _run_active(h, nbr, xc, *fargs, *rargs, tg, float(target_height), int(t_max))
    return surface.with_heights(h.reshape(surface.base.shape)), int(t), int(status)


# ---------------------------------------------------------------------------
# derived quantities


def laplacian(surface: Surface, x: Sequence[int]) -> float:
    s = surface.height(x)
    if s == NEG_INF:
        return NEG_INF
    total = 0.0
    for axis in range(surface.base.dim):
        for shift in (1, -1):
            y = list(x)
            y[axis] += shift
            sy = surface.height(y)
            if sy == NEG_INF:
                return NEG_INF
            total += sy - s
    return total


def gradients(surface: Surface, x: Sequence[int]) -> tuple:
    """Discrete derivatives in the order (+e1, -e1, ..., +e_{d-1}, -e_{d-1})."""
    s = surface.height(x)
    out = []
    for axis in range(surface.base.dim):
        for shift in (1, -1):
            y = list(x)
            y[axis] += shift
            out.append(surface.height(y) - s if s != NEG_INF else NEG_INF)
    return tuple(out)


def divergence_check(surface: Surface, box: Box) -> tuple:
    """Both sides of sum_{x in box} Laplacian(x) = boundary flux, as integers."""
    base = surface.base
    if box.dim != base.dim or any(b < a for a, b in zip(base.lo, box.lo)) or any(b > a for a, b in zip(base.hi, box.hi)):
        raise UsageError("box must lie inside the surface base")
    lhs = 0
    rhs = 0
    for x in map(tuple, box.sites()):
        lap = laplacian(surface, x)
        if lap == NEG_INF:
            raise UsageError(f"NEG_INF height next to {x}")
        lhs += int(lap)
        sx = surface.height(x)
        for axis in range(box.dim):
            for shift in (1, -1):
                y = list(x)
                y[axis] += shift
                if not box.contains(y):
                    rhs += int(surface.height(y) - sx)
    return lhs, rhs


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    initial: Surface
    rule: UpdateRule
    field: EnergyField
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    final: Optional[Surface] = None
    t_final: int = 0
    halted: bool = False
    stopped: bool = False

    def to_records(self) -> list:
        """Snapshot rows for serialisation: time and flattened heights."""
        return [
            {"t": t, "heights": [None if v == NEG_INF else int(v) for v in s.heights.ravel()]}
            for t, s in zip(self.times, self.snapshots)
        ]


def evolve_until(
    surface: Surface,
    field: EnergyField,
    rule: UpdateRule,
    stop: Callable[[int, Surface], bool],
    t_max: int,
    record_every: int = 1,
) -> Trajectory:
    """Sweep until ``stop(t, S_t)``, a no-change sweep, or ``t_max``."""
    if t_max < 0:
        raise UsageError("t_max must be >= 0")
    traj = Trajectory(surface, rule, field, [0], [surface])
    s = surface
    if stop(0, s):
        traj.final, traj.stopped = s, True
        return traj
    for t in range(1, t_max + 1):
        nxt = step(s, field, rule)
        if nxt == s:
            traj.final, traj.t_final, traj.halted = s, t, True
            traj.times.append(t)
            traj.snapshots.append(s)
            return traj
        s = nxt
        if record_every and t % record_every == 0:
            traj.times.append(t)
            traj.snapshots.append(s)
        if stop(t, s):
            traj.final, traj.t_final, traj.stopped = s, t, True
            return traj
    traj.final, traj.t_final = s, t_max
    return traj


@dataclass
class VelocityEstimate:
    velocity: Fraction
    height_burn_in: int
    height_final: int
    times: list
    heights_at_origin: list

    def __float__(self):
        return float(self.velocity)


def velocity_estimate(
    field: EnergyField,
    rule: UpdateRule,
    window,
    T: int,
    burn_in: int = 0,
    n_samples: int = 10,
) -> VelocityEstimate:
    """(S_T(0) - S_burn(0)) / (T - burn) from a flat start on a periodic window.

    ``window`` is a side length or a tuple of side lengths of the base.
    """
    if T <= burn_in:
        raise UsageError("T must exceed burn_in")
    d = field.dimension
    sides = (window,) * (d - 1) if isinstance(window, (int, np.integer)) else tuple(window)
    base = Box((0,) * (d - 1), sides)
    s = Surface.flat(base, 0, PERIODIC)
    checkpoints = sorted({burn_in, T} | {int(v) for v in np.linspace(0, T, n_samples + 1)[1:]})
    times, heights = [0], [0]
    t = 0
    h_burn = 0
    for cp in checkpoints:
        if cp > t:
            s, _, _ = run_active(s, field, rule, cp - t)
            t = cp
        h0 = int(s.heights.flat[0])
        if cp == burn_in:
            h_burn = h0
        if cp > 0:
            times.append(cp)
            heights.append(h0)
    h_final = heights[-1]
    return VelocityEstimate(Fraction(h_final - h_burn, T - burn_in), h_burn, h_final, times, heights)


def velocity_sweep(law, rule: UpdateRule, window, T: int, burn_in: int, seeds: Sequence[int], d: int = 2) -> dict:
    """Velocity per seed plus mean and relative spread (std / mean)."""
    vals = [float(velocity_estimate(EnergyField(d, law, s), rule, window, T, burn_in)) for s in seeds]
    arr = np.asarray(vals)
    mean = float(arr.mean())
    spread = float(arr.std(ddof=1) / mean) if len(arr) > 1 and mean > 0 else math.nan
    return {"velocities": vals, "mean": mean, "relative_spread": spread}
