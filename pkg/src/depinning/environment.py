"""Random energy landscapes on Z^d.

Fields are never materialised: the energy at a site is recomputed on demand
from a counter-based hash of ``(seed, site)``. A field may be restricted to an
axis-aligned box (energies outside are ``NEG_INF``) and may carry a dense
overlay that replaces hashed values inside a box, which is how synthetic and
enumerated environments are expressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from ._hashing import as_seed, derive_seed, site_uniform

NEG_INF = float("-inf")

_I64_MIN = np.iinfo(np.int64).min
_I64_MAX = np.iinfo(np.int64).max

# law encoding shared with the numba kernels
_BERNOULLI, _GAUSSIAN, _MOVING_AVERAGE, _CONSTANT = 0, 1, 2, 3
_LAW_LEN = 9


class UsageError(ValueError):
    """Raised when an operation is called outside its contract."""


@dataclass(frozen=True)
class Box:
    """Half-open axis-aligned box ``[lo, hi)`` in Z^n."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise UsageError("box corners have different dimensions")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return tuple(max(0, b - a) for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def is_empty(self) -> bool:
        return self.size == 0

    def contains(self, site: Sequence[int]) -> bool:
        return all(a <= s < b for a, s, b in zip(self.lo, site, self.hi))

    def intersect(self, other: "Box") -> "Box":
        return Box(
            tuple(max(a, b) for a, b in zip(self.lo, other.lo)),
            tuple(min(a, b) for a, b in zip(self.hi, other.hi)),
        )

    def sites(self) -> np.ndarray:
        """All sites in row-major order, shape ``(size, dim)``."""
        axes = [np.arange(a, b, dtype=np.int64) for a, b in zip(self.lo, self.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)


# ---------------------------------------------------------------------------
# laws


@dataclass(frozen=True)
class BernoulliTrap:
    """Independent two-valued energies: ``trap`` with probability p, else ``free``.

    ``trap`` defaults to ``-3(d-1)`` once the dimension is known.
    """

    p: float
    trap: Optional[float] = None
    free: float = 0.5

    def resolved(self, d: int) -> "BernoulliTrap":
        if self.trap is not None:
            return self
        return replace(self, trap=-3.0 * (d - 1))

    def encode(self) -> np.ndarray:
        if self.trap is None:
            raise UsageError("BernoulliTrap.trap unresolved; call resolved(d) first")
        return _pad([_BERNOULLI, self.p, self.trap, self.free])


@dataclass(frozen=True)
class Gaussian:
    """Independent Gaussian energies with mean ``f`` and variance ``sigma``."""

    f: float
    sigma: float = 1.0

    def resolved(self, d: int) -> "Gaussian":
        return self

    def encode(self) -> np.ndarray:
        return _pad([_GAUSSIAN, self.f, self.sigma])


@dataclass(frozen=True)
class Constant:
    """Deterministic energy ``value`` at every site (may be ``NEG_INF``)."""

    value: float

    def resolved(self, d: int) -> "Constant":
        return self

    def encode(self) -> np.ndarray:
        return _pad([_CONSTANT, self.value])


@dataclass(frozen=True)
class MovingAverage:
    """Average of ``base`` over the cube ``site + [0, window]^d``.

    Sites at L-infinity distance greater than ``window`` share no base
    variables, so their energies are exactly independent.
    """

    window: int
    base: Union[BernoulliTrap, Gaussian]

    def __post_init__(self):
        if self.window < 1:
            raise UsageError("MovingAverage window must be >= 1")
        if isinstance(self.base, (MovingAverage, Constant)):
            raise UsageError("MovingAverage base must be BernoulliTrap or Gaussian")

    def resolved(self, d: int) -> "MovingAverage":
        return replace(self, base=self.base.resolved(d))

    def encode(self) -> np.ndarray:
        b = self.base.encode()
        return _pad([_MOVING_AVERAGE, 0.0, 0.0, 0.0, self.window, b[0], b[1], b[2], b[3]])


LawSpec = Union[BernoulliTrap, Gaussian, MovingAverage, Constant]


def _pad(values) -> np.ndarray:
    out = np.zeros(_LAW_LEN, dtype=np.float64)
    out[: len(values)] = values
    return out


def law_to_config(law: LawSpec) -> str:
    """Canonical text form, e.g. ``bernoulli(p=0.3,trap=-3.0,free=0.5)``."""
    if isinstance(law, BernoulliTrap):
        trap = "auto" if law.trap is None else repr(float(law.trap))
        return f"bernoulli(p={float(law.p)!r},trap={trap},free={float(law.free)!r})"
    if isinstance(law, Gaussian):
        return f"gaussian(f={float(law.f)!r},sigma={float(law.sigma)!r})"
    if isinstance(law, Constant):
        return f"constant(value={float(law.value)!r})"
    if isinstance(law, MovingAverage):
        return f"moving_average(window={law.window},base={law_to_config(law.base)})"
    raise UsageError(f"unknown law {law!r}")


def law_from_config(text: str) -> LawSpec:
    text = text.strip().replace(" ", "")
    name, _, rest = text.partition("(")
    if not rest.endswith(")"):
        raise UsageError(f"malformed law {text!r}")
    args = _split_args(rest[:-1])
    if name == "moving_average":
        return MovingAverage(int(args["window"]), law_from_config(args["base"]))
    if name == "bernoulli":
        trap = args.get("trap", "auto")
        return BernoulliTrap(
            float(args["p"]),
            None if trap == "auto" else float(trap),
            float(args.get("free", 0.5)),
        )
    if name == "gaussian":
        return Gaussian(float(args["f"]), float(args.get("sigma", 1.0)))
    if name == "constant":
        return Constant(float(args["value"]))
    raise UsageError(f"unknown law {name!r}; valid: bernoulli, gaussian, constant, moving_average")


def _split_args(body: str) -> dict:
    out, depth, start = {}, 0, 0
    parts = []
    for i, ch in enumerate(body):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(body[start:i])
            start = i + 1
    parts.append(body[start:])
    for part in filter(None, parts):
        key, _, value = part.partition("=")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# numba energy evaluation


@njit(cache=True)
def _base_energy(kind, a, b, c, seed, coords):
    if kind == 0:
        return b if site_uniform(seed, 0, coords) < a else c
    if kind == 1:
        u1 = site_uniform(seed, 1, coords)
        u2 = site_uniform(seed, 2, coords)
        z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
        return a + math.sqrt(b) * z
    return a


@njit(cache=True)
def energy_at(law, seed, lo, hi, ov_lo, ov_shape, ov_vals, coords):
    """Energy at ``coords`` for an encoded field (restriction, overlay, law)."""
    d = coords.shape[0]
    for i in range(d):
        if coords[i] < lo[i] or coords[i] >= hi[i]:
            return -np.inf
    if ov_vals.shape[0] > 0:
        inside = True
        flat = 0
        for i in range(d):
            r = coords[i] - ov_lo[i]
            if r < 0 or r >= ov_shape[i]:
                inside = False
                break
            flat = flat * ov_shape[i] + r
        if inside:
            return ov_vals[flat]
    kind = int(law[0])
    if kind != 2:
        return _base_energy(kind, law[1], law[2], law[3], seed, coords)
    w = int(law[4])
    bkind = int(law[5])
    off = np.zeros(d, dtype=np.int64)
    pt = np.empty(d, dtype=np.int64)
    total = 0.0
    count = 0
    while True:
        for i in range(d):
            pt[i] = coords[i] + off[i]
        total += _base_energy(bkind, law[6], law[7], law[8], seed, pt)
        count += 1
        i = d - 1
        while i >= 0:
            off[i] += 1
            if off[i] <= w:
                break
            off[i] = 0
            i -= 1
        if i < 0:
            break
    return total / count


@njit(cache=True)
def energies_at(law, seed, lo, hi, ov_lo, ov_shape, ov_vals, sites):
    out = np.empty(sites.shape[0], dtype=np.float64)
    for n in range(sites.shape[0]):
        out[n] = energy_at(law, seed, lo, hi, ov_lo, ov_shape, ov_vals, sites[n])
    return out


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True)
class EnergyField:
    """A reproducible energy landscape on Z^d.

    ``overlay`` is an optional ``(Box, array)`` pair whose values replace the
    law inside that box. ``restriction`` masks everything outside to NEG_INF.
    """

    dimension: int
    law: LawSpec
    seed: int = 0
    restriction: Optional[Box] = None
    overlay: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        if self.dimension < 2:
            raise UsageError("dimension must be >= 2")
        object.__setattr__(self, "law", self.law.resolved(self.dimension))
        if self.restriction is not None and self.restriction.dim != self.dimension:
            raise UsageError("restriction box dimension mismatch")
        if self.overlay is not None:
            box, values = self.overlay
            values = np.ascontiguousarray(values, dtype=np.float64)
            if box.dim != self.dimension or values.shape != box.shape:
                raise UsageError("overlay array shape must match its box")
            object.__setattr__(self, "overlay", (box, values))

    def restrict(self, box: Box) -> "EnergyField":
        return restrict(self, box)

    def with_seed(self, seed: int) -> "EnergyField":
        return replace(self, seed=seed)

    def kernel_args(self) -> tuple:
        d = self.dimension
        if self.restriction is None:
            lo = np.full(d, _I64_MIN, dtype=np.int64)
            hi = np.full(d, _I64_MAX, dtype=np.int64)
        else:
            lo = np.array(self.restriction.lo, dtype=np.int64)
            hi = np.array(self.restriction.hi, dtype=np.int64)
        if self.overlay is None:
            ov_lo = np.zeros(d, dtype=np.int64)
            ov_shape = np.zeros(d, dtype=np.int64)
            ov_vals = np.empty(0, dtype=np.float64)
        else:
            box, values = self.overlay
            ov_lo = np.array(box.lo, dtype=np.int64)
            ov_shape = np.array(box.shape, dtype=np.int64)
            ov_vals = values.ravel()
        return (self.law.encode(), as_seed(self.seed), lo, hi, ov_lo, ov_shape, ov_vals)

    def energies(self, sites) -> np.ndarray:
        """Vectorised ``sample_energy`` over an ``(n, d)`` integer array."""
        sites = np.ascontiguousarray(np.atleast_2d(np.asarray(sites, dtype=np.int64)))
        if sites.shape[1] != self.dimension:
            raise UsageError(f"sites have {sites.shape[1]} coordinates, field has dimension {self.dimension}")
        return energies_at(*self.kernel_args(), sites)

    def box_energies(self, box: Box) -> np.ndarray:
        return self.energies(box.sites()).reshape(box.shape)


def sample_energy(field: EnergyField, site: Sequence[int]) -> float:
    if len(site) != field.dimension:
        raise UsageError(f"site has {len(site)} coordinates, field has dimension {field.dimension}")
    coords = np.asarray(site, dtype=np.int64)
    return float(energy_at(*field.kernel_args(), coords))


def restrict(field: EnergyField, box: Box) -> EnergyField:
    if box.is_empty():
        raise UsageError("cannot restrict to an empty box")
    if field.restriction is not None:
        box = field.restriction.intersect(box)
    return replace(field, restriction=box)


def overlay_field(dimension: int, box: Box, values, law: LawSpec = Constant(NEG_INF), seed: int = 0) -> EnergyField:
    """Field equal to ``values`` inside ``box`` and to ``law`` elsewhere."""
    return EnergyField(dimension, law, seed, overlay=(box, np.asarray(values, dtype=np.float64)))


# ---------------------------------------------------------------------------
# mixing estimator


@dataclass
class CovarianceReport:
    """Empirical decorrelation of box test functions.

    ``scales``/``covariances``: pair covariance of boxes of side 3l at gap l.
    ``gaps``/``gap_covariances``: pair covariance at the requested gaps for
    boxes of side 3L. ``product_gaps``: E[f_1...f_D] - E[f_1]...E[f_D] per scale.
    """

    L: int
    D: int
    n_samples: int
    scales: list
    covariances: list
    covariance_se: list
    product_gaps: list
    product_se: list
    gaps: list
    gap_covariances: list
    gap_se: list
    alpha_hat: float
    zero_consistent: bool


def _law_bounds(law: LawSpec) -> tuple:
    if isinstance(law, MovingAverage):
        return _law_bounds(law.base)
    if isinstance(law, BernoulliTrap):
        return min(law.trap, law.free), max(law.trap, law.free)
    if isinstance(law, Gaussian):
        s = 4.0 * math.sqrt(law.sigma)
        return law.f - s, law.f + s
    return law.value - 1.0, law.value + 1.0


def box_test_function(field: EnergyField, box: Box) -> float:
    """Bounded local observable: box mean rescaled into [0, 1] by the law's range."""
    lo, hi = _law_bounds(field.law)
    mean = float(field.box_energies(box).mean())
    return min(1.0, max(0.0, (mean - lo) / (hi - lo)))


def _row_boxes(d: int, side: int, gap: int, count: int) -> list:
    boxes = []
    for i in range(count):
        start = i * (side + gap)
        boxes.append(Box((start,) + (0,) * (d - 1), (start + side,) + (side,) * (d - 1)))
    return boxes


def _box_values(field: EnergyField, boxes: list, n_samples: int) -> np.ndarray:
    lo, hi = _law_bounds(field.law)
    sites = [b.sites() for b in boxes]
    out = np.empty((n_samples, len(boxes)))
    for n in range(n_samples):
        f = replace(field, seed=derive_seed(field.seed, n))
        for j, s in enumerate(sites):
            out[n, j] = f.energies(s).mean()
    return np.clip((out - lo) / (hi - lo), 0.0, 1.0)


def _cov_with_se(x: np.ndarray, y: np.ndarray) -> tuple:
    n = len(x)
    prod = (x - x.mean()) * (y - y.mean())
    cov = prod.sum() / (n - 1)
    return float(cov), float(prod.std(ddof=1) / math.sqrt(n))


def estimate_mixing(
    field: EnergyField,
    L: int,
    D: int = 2,
    n_samples: int = 2000,
    gaps: Optional[Sequence[int]] = None,
) -> CovarianceReport:
    """Covariance and D-fold product gap of box observables, per scale and per gap.

    Each sample re-seeds the field; boxes of side 3l lie in a row with gap l,
    matching the two-box and D-box decoupling bounds. ``alpha_hat`` is the
    least-squares slope of -log|cov| against log l over the scales whose
    covariance is resolved from zero (NaN when none is).
    """
    if n_samples < 2:
        raise UsageError("n_samples must be >= 2")
    if L < 1 or D < 2:
        raise UsageError("need L >= 1 and D >= 2")
    d = field.dimension
    scales, covs, cov_se, prods, prod_se = [], [], [], [], []
    for ell in range(1, L + 1):
        vals = _box_values(field, _row_boxes(d, 3 * ell, ell, D), n_samples)
        c, se = _cov_with_se(vals[:, 0], vals[:, 1])
        prod = vals.prod(axis=1)
        gap = float(prod.mean() - np.prod(vals.mean(axis=0)))
        scales.append(ell)
        covs.append(c)
        cov_se.append(se)
        prods.append(gap)
        prod_se.append(float(prod.std(ddof=1) / math.sqrt(n_samples)))

    gap_list = list(gaps) if gaps is not None else []
    gcov, gse = [], []
    for g in gap_list:
        vals = _box_values(field, _row_boxes(d, 3 * L, g, 2), n_samples)
        c, se = _cov_with_se(vals[:, 0], vals[:, 1])
        gcov.append(c)
        gse.append(se)

    resolved = [(s, c) for s, c, e in zip(scales, covs, cov_se) if c > 3 * e]
    if len(resolved) >= 2:
        xs = np.log([s for s, _ in resolved])
        ys = np.log([c for _, c in resolved])
        alpha_hat = float(-np.polyfit(xs, ys, 1)[0])
    else:
        alpha_hat = float("nan")
    zero_consistent = all(abs(c) <= 3 * e for c, e in zip(covs, cov_se))
    return CovarianceReport(
        L, D, n_samples, scales, covs, cov_se, prods, prod_se, gap_list, gcov, gse, alpha_hat, zero_consistent
    )
