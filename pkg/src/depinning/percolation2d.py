"""Oriented site percolation behind blocked 2-Lipschitz interfaces in d = 2.

Consecutive traps on a blocked 1-Lipschitz interface are joined by one of
seven forward displacements, so a blocked interface is an occupied oriented
path. Occupation uses the same uniforms as :class:`BernoulliTrap`, so
``u < p`` here is exactly "omega is the trap value" there.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from numba import njit

from ._hashing import as_seed, derive_seed, site_uniform
from .dynamics import Surface
from .environment import BernoulliTrap, Box, EnergyField, UsageError

OFFSETS = ((1, 1), (2, 1), (3, 0), (2, 0), (1, 0), (2, -1), (1, -1))
_OFFSETS_ARR = np.array(OFFSETS, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class OccupiedConfig:
    region: Box
    occupied: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupied, dtype=bool)
        if self.region.dim != 2 or occ.shape != self.region.shape:
            raise UsageError("occupied mask must match a 2-d region")
        object.__setattr__(self, "occupied", occ)

    @classmethod
    def from_sites(cls, region: Box, sites: Iterable[tuple]) -> "OccupiedConfig":
        occ = np.zeros(region.shape, dtype=bool)
        for x, y in sites:
            if region.contains((x, y)):
                occ[x - region.lo[0], y - region.lo[1]] = True
        return cls(region, occ)

    def is_occupied(self, site) -> bool:
        if not self.region.contains(site):
            return False
        return bool(self.occupied[site[0] - self.region.lo[0], site[1] - self.region.lo[1]])

    @property
    def sites(self) -> set:
        xs, ys = np.nonzero(self.occupied)
        return {(int(x) + self.region.lo[0], int(y) + self.region.lo[1]) for x, y in zip(xs, ys)}


def blocked_sites(field: EnergyField, region: Box) -> OccupiedConfig:
    if field.dimension != 2 or not isinstance(field.law, BernoulliTrap):
        raise UsageError("blocking sites are defined for d = 2 BernoulliTrap fields")
    vals = field.box_energies(region)
    return OccupiedConfig(region, vals == field.law.trap)


@dataclass
class ReachResult:
    reached: bool
    distance: int
    frontier: set
    visited: set


def reach(config: OccupiedConfig, sources: Iterable[tuple], distance: int) -> ReachResult:
    """Breadth-first oriented reachability through occupied sites.

    Horizontal distance is measured from the leftmost occupied source.
    """
    start = [tuple(s) for s in sources if config.is_occupied(tuple(s))]
    if not start:
        return ReachResult(False, 0, set(), set())
    x_ref = min(s[0] for s in start)
    seen = set(start)
    queue = deque(start)
    while queue:
        x, y = queue.popleft()
        for dx, dy in OFFSETS:
            nxt = (x + dx, y + dy)
            if nxt not in seen and config.is_occupied(nxt):
                seen.add(nxt)
                queue.append(nxt)
    far = max(s[0] for s in seen)
    frontier = {s for s in seen if s[0] == far}
    return ReachResult(far - x_ref >= distance, far - x_ref, frontier, seen)


# ---------------------------------------------------------------------------
# critical point


@njit(cache=True)
def _strip_uniforms(seed, length, height):
    u = np.empty((length, height))
    c = np.empty(2, dtype=np.int64)
    for x in range(length):
        for y in range(height):
            c[0] = x
            c[1] = y
            u[x, y] = site_uniform(seed, 0, c)
    return u


@njit(cache=True)
def _bottleneck(u, offsets, target_x):
    """Smallest p at which some oriented path from column 0 reaches x >= target_x.

    A path is occupied at p iff the largest uniform on it is below p, so the
    answer is the min over paths of the max uniform, found by one pass in
    increasing x (every offset advances x).
    """
    length, height = u.shape
    best = np.full((length, height), np.inf)
    for y in range(height):
        best[0, y] = u[0, y]
    for x in range(1, length):
        for y in range(height):
            m = np.inf
            for k in range(offsets.shape[0]):
                px = x - offsets[k, 0]
                py = y - offsets[k, 1]
                if px >= 0 and 0 <= py < height and best[px, py] < m:
                    m = best[px, py]
            best[x, y] = max(u[x, y], m)
    out = np.inf
    for x in range(target_x, length):
        for y in range(height):
            if best[x, y] < out:
                out = best[x, y]
    return out


def strip_region(L: int) -> Box:
    """Columns [0, L+3) and rows [0, 2L); overshooting jumps past x = L still count."""
    return Box((0, 0), (L + 3, 2 * L))


def crossing_thresholds(L: int, seeds: Sequence[int]) -> np.ndarray:
    """Per-sample critical p for crossing the strip of size L (coupled in p)."""
    region = strip_region(L)
    out = np.empty(len(seeds))
    for i, s in enumerate(seeds):
        u = _strip_uniforms(as_seed(s), region.shape[0], region.shape[1])
        out[i] = _bottleneck(u, _OFFSETS_ARR, L)
    return out


def strip_config(L: int, p: float, seed: int) -> OccupiedConfig:
    region = strip_region(L)
    u = _strip_uniforms(as_seed(seed), region.shape[0], region.shape[1])
    return OccupiedConfig(region, u < p)


def strip_crossed(config: OccupiedConfig, L: int) -> bool:
    sources = [(0, y) for y in range(config.region.shape[1])]
    return reach(config, sources, L).reached


@dataclass
class PcEstimate:
    L_list: list
    p_grid: list
    curves: dict
    pair_crossings: list
    pair_errors: list
    p_c: float
    p_c_error: float
    monotone: bool


def _curve_crossing(p_grid, lower, upper) -> float:
    diff = np.asarray(upper) - np.asarray(lower)
    for i in range(len(diff) - 1):
        if diff[i] <= 0 < diff[i + 1] or diff[i] < 0 <= diff[i + 1]:
            a, b = diff[i], diff[i + 1]
            return float(p_grid[i] + (p_grid[i + 1] - p_grid[i]) * (-a) / (b - a))
    return math.nan


def estimate_pc(
    L_list: Sequence[int],
    p_grid: Sequence[float],
    n_samples: int,
    seed: int = 0,
    n_boot: int = 200,
) -> PcEstimate:
    """Strip-crossing curves per size and their pairwise intersections.

    Sample i uses the same uniforms at every p, so each curve is a
    non-decreasing step function of p. Errors are bootstrap standard
    deviations of each pair's intersection.
    """
    if len(L_list) < 2 or len(p_grid) < 3:
        raise UsageError("need at least 2 sizes and 3 grid points")
    seeds = [derive_seed(seed, i) for i in range(n_samples)]
    thresholds = {L: crossing_thresholds(L, seeds) for L in L_list}
    return pc_from_thresholds(L_list, p_grid, thresholds, seed, n_boot)


def pc_from_thresholds(
    L_list: Sequence[int],
    p_grid: Sequence[float],
    thresholds: dict,
    seed: int = 0,
    n_boot: int = 200,
) -> PcEstimate:
    """Curves and crossings from per-sample thresholds (same sample order for every L)."""
    if len(L_list) < 2 or len(p_grid) < 3:
        raise UsageError("need at least 2 sizes and 3 grid points")
    grid = np.asarray(sorted(p_grid), dtype=float)
    thresholds = {L: np.asarray(thresholds[L], dtype=float) for L in L_list}
    n_samples = len(thresholds[L_list[0]])
    curves = {L: [float(np.mean(th < p)) for p in grid] for L, th in thresholds.items()}
    monotone = all(np.all(np.diff(c) >= 0) for c in curves.values())
    rng = np.random.default_rng(seed)
    crossings, errors = [], []
    for L1, L2 in zip(L_list[:-1], L_list[1:]):
        pc = _curve_crossing(grid, curves[L1], curves[L2])
        boots = []
        for _ in range(n_boot):
            idx = rng.integers(0, n_samples, n_samples)
            c1 = [np.mean(thresholds[L1][idx] < p) for p in grid]
            c2 = [np.mean(thresholds[L2][idx] < p) for p in grid]
            boots.append(_curve_crossing(grid, c1, c2))
        boots = np.asarray(boots)
        boots = boots[np.isfinite(boots)]
        crossings.append(pc)
        errors.append(float(boots.std(ddof=1)) if boots.size > 1 else math.nan)
    finite = [c for c in crossings if math.isfinite(c)]
    p_c = float(np.mean(finite)) if finite else math.nan
    spread = float(np.std(finite, ddof=1)) if len(finite) > 1 else math.nan
    err = float(np.sqrt(np.nanmean(np.square(errors)) + (spread if math.isfinite(spread) else 0.0) ** 2))
    return PcEstimate(list(L_list), grid.tolist(), curves, crossings, errors, p_c, err, monotone)


# ---------------------------------------------------------------------------
# interface to path


@dataclass
class PathResult:
    ok: bool
    path: list
    violation: Optional[tuple] = None


def interface_to_path(blocked: Surface, field: EnergyField, window: tuple) -> PathResult:
    """Left-to-right traps on the graph of ``blocked`` inside ``window`` = (x_lo, x_hi),
    checked to be linked by the seven oriented offsets.

    The surface should be a fixed point of the restricted Lipschitz dynamics.
    """
    if blocked.dim != 2:
        raise UsageError("interface_to_path is for d = 2")
    x_lo, x_hi = window
    base_lo = blocked.base.lo[0]
    h = blocked.heights[x_lo - base_lo : x_hi - base_lo + 1]
    if not np.all(np.isfinite(h)) or np.any(np.abs(np.diff(h)) > 1):
        raise UsageError("surface is not 1-Lipschitz on the window")
    trap = field.law.trap if isinstance(field.law, BernoulliTrap) else -3.0
    xs = np.arange(x_lo, x_hi + 1)
    vals = field.energies(np.stack([xs, h.astype(np.int64)], axis=1))
    path = [(int(x), int(y)) for x, y, v in zip(xs, h, vals) if v == trap]
    allowed = set(OFFSETS)
    for a, b in zip(path[:-1], path[1:]):
        if (b[0] - a[0], b[1] - a[1]) not in allowed:
            return PathResult(False, path, (a, b))
    return PathResult(bool(path), path, None)
