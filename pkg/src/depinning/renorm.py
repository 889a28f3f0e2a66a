"""Multi-scale bookkeeping: scales L_{k+1} = L_k^gamma, the r_k sequence,
parameter constraints, the slow-box recursion, and a direct check of the
layer inequality T_m <= sum_j sup T_{m'} on small two-scale boxes.

Anything involving L_k for k >= 1 is carried as a natural logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._hashing import derive_seed
from .criterion import Blocked, PlatformGeometry, crossing_time
from .dynamics import UpdateRule
from .environment import Box, EnergyField, LawSpec, UsageError

LOG3 = math.log(3.0)


@dataclass(frozen=True, order=True)
class LogValue:
    """A non-negative quantity stored as its natural log (``-inf`` is zero)."""

    log: float

    @classmethod
    def of(cls, value: float) -> "LogValue":
        return cls(math.log(value) if value > 0 else -math.inf)

    def __mul__(self, other: "LogValue") -> "LogValue":
        return LogValue(self.log + other.log)

    def __truediv__(self, other: "LogValue") -> "LogValue":
        return LogValue(self.log - other.log)

    def __pow__(self, k: float) -> "LogValue":
        if self.log == -math.inf:
            return LogValue(-math.inf if k > 0 else 0.0)
        return LogValue(self.log * k)

    def __add__(self, other: "LogValue") -> "LogValue":
        return LogValue(float(np.logaddexp(self.log, other.log)))

    @property
    def value(self) -> float:
        return math.exp(self.log)


@dataclass(frozen=True)
class ScaleParams:
    d: int
    a: int
    h: int
    gamma: int
    D: int
    alpha: float
    rho: float
    L0: int
    r0: float

    @property
    def log_L0(self) -> float:
        return math.log(self.L0)


def scale_sequence(params: ScaleParams, k_max: int) -> list:
    """log L_k = gamma^k log L_0 for k = 0..k_max."""
    return [params.gamma**k * params.log_L0 for k in range(k_max + 1)]


@dataclass
class RkReport:
    r: list
    increments: list
    sup: float
    sup_bound: float


def rk_sequence(params: ScaleParams, k_max: int) -> RkReport:
    """r_k = r_{k-1} + D (3h)^d L_{k-1}^{d+2a} / L_k, plus its limit.

    ``sup`` sums increments until they no longer change the total;
    ``sup_bound`` is r0 + c L0^{-g} / (1 - L0^{-g(gamma-1)}) with
    g = gamma - d - 2a, from gamma^j >= 1 + j(gamma - 1).
    """
    p = params
    logs = scale_sequence(p, k_max)
    coef = p.D * (3 * p.h) ** p.d
    incs = [coef * math.exp((p.d + 2 * p.a) * logs[k - 1] - logs[k]) for k in range(1, k_max + 1)]
    r = [p.r0]
    for inc in incs:
        r.append(r[-1] + inc)
    g = p.gamma - p.d - 2 * p.a
    if g <= 0:
        return RkReport(r, incs, math.inf, math.inf)
    total, k, log_prev = p.r0, 1, p.log_L0
    while True:
        inc = coef * math.exp(-g * log_prev)
        if total + inc == total:
            break
        total += inc
        log_prev *= p.gamma
        k += 1
    bound = p.r0 + coef * math.exp(-g * p.log_L0) / (1.0 - math.exp(-g * (p.gamma - 1) * p.log_L0))
    return RkReport(r, incs, total, bound)


@dataclass
class Constraint:
    name: str
    lhs: float
    rhs: float
    ok: bool

    @property
    def margin(self) -> float:
        return self.lhs - self.rhs


@dataclass
class AssumptionReport:
    constraints: list
    required_log_L0: float
    required_L0: Optional[int]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.constraints)

    def rows(self) -> list:
        return [
            {"constraint": c.name, "lhs": c.lhs, "rhs": c.rhs, "margin": c.margin, "ok": c.ok}
            for c in self.constraints
        ]


def _l0_exponents(p: ScaleParams) -> tuple:
    e1 = (p.gamma - 1) * p.d * (p.D - 2 * p.gamma)
    e2 = p.rho - p.d * (p.gamma - 1) * (1 + 2 * p.gamma)
    return e1, e2


def _log_l0_target(p: ScaleParams) -> float:
    return math.log(4.0) + p.D * p.d * LOG3


def minimal_L0(p: ScaleParams) -> tuple:
    """Smallest admissible L0 (>= 100) for the L0 lower bound; returns (log, integer or None)."""
    e1, e2 = _l0_exponents(p)
    if e1 <= 0 or e2 <= 0:
        return math.inf, None
    target = _log_l0_target(p)
    log_req = max(math.log(100.0), target / e1, target / e2)
    if log_req > 700:
        return log_req, None
    L0 = max(100, math.ceil(math.exp(log_req) * (1 - 1e-12)))
    while min(e1, e2) * math.log(L0) < target:
        L0 += 1
    while L0 > 100 and min(e1, e2) * math.log(L0 - 1) >= target:
        L0 -= 1
    return math.log(L0), L0


def check_assumptions(params: ScaleParams) -> AssumptionReport:
    p = params
    e1, e2 = _l0_exponents(p)
    target = _log_l0_target(p)
    log_l0 = p.log_L0
    cs = [
        Constraint("gamma > d + 2a", p.gamma, p.d + 2 * p.a, p.gamma > p.d + 2 * p.a),
        Constraint("D > 2 gamma", p.D, 2 * p.gamma, p.D > 2 * p.gamma),
        Constraint("alpha (a+1) > 2 D d (gamma-1)", p.alpha * (p.a + 1), 2 * p.D * p.d * (p.gamma - 1),
                   p.alpha * (p.a + 1) > 2 * p.D * p.d * (p.gamma - 1)),
        Constraint("rho > d (gamma-1)(1+2 gamma)", p.rho, p.d * (p.gamma - 1) * (1 + 2 * p.gamma),
                   p.rho > p.d * (p.gamma - 1) * (1 + 2 * p.gamma)),
        Constraint("L0 >= 100", p.L0, 100, p.L0 >= 100),
        Constraint("log L0^{(gamma-1)d(D-2gamma)} >= log(4*3^{Dd})", e1 * log_l0, target, e1 * log_l0 >= target),
        Constraint("log L0^{rho-d(gamma-1)(1+2gamma)} >= log(4*3^{Dd})", e2 * log_l0, target, e2 * log_l0 >= target),
    ]
    log_req, L0_req = minimal_L0(p)
    return AssumptionReport(cs, log_req, L0_req)


class InfeasibleParams(UsageError):
    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


def suggest_params(d: int, a: int, alpha: Optional[float] = None, rho: Optional[float] = None, h: int = 2) -> ScaleParams:
    """Minimal integer gamma, then D, then rho and alpha, then L0 and r0.

    A supplied ``alpha`` or ``rho`` is kept if it satisfies its constraint at
    the minimal gamma and D; both constraints only tighten as gamma and D
    grow, so failure there is infeasibility.
    """
    gamma = d + 2 * a + 1
    D = 2 * gamma + 1
    alpha_min = 2 * D * d * (gamma - 1) / (a + 1)
    rho_min = d * (gamma - 1) * (1 + 2 * gamma)
    if alpha is not None and not alpha > alpha_min:
        raise InfeasibleParams(
            f"alpha = {alpha} cannot satisfy alpha (a+1) > 2 D d (gamma-1); needs alpha > {alpha_min} even at gamma={gamma}, D={D}",
            {"gamma": gamma, "D": D, "alpha_lower_bound": alpha_min},
        )
    if rho is not None and not rho > rho_min:
        raise InfeasibleParams(
            f"rho = {rho} cannot satisfy rho > d (gamma-1)(1+2 gamma); needs rho > {rho_min} even at gamma={gamma}",
            {"gamma": gamma, "D": D, "rho_lower_bound": rho_min},
        )
    if alpha is None:
        alpha = math.floor(alpha_min) + 1
    if rho is None:
        rho = math.floor(rho_min) + 1
    draft = ScaleParams(d, a, h, gamma, D, alpha, rho, 100, 1.0)
    _, L0 = minimal_L0(draft)
    if L0 is None:
        raise InfeasibleParams("minimal L0 overflows", {"gamma": gamma, "D": D})
    # r0 large enough that any non-blocked box is fast: the sweep bound divided by L0
    r0 = float((3 * h) ** (d - 1)) * float(L0) ** (d + a - 1)
    return replace(draft, L0=L0, r0=r0)


@dataclass
class RecursionResult:
    log_w: list
    log_targets: list
    passed: bool
    failed_at: Optional[int] = None
    margins: list = field(default_factory=list)


def iterate_recursion(params: ScaleParams, log_w0: float, rho: Optional[float] = None, k_max: int = 10) -> RecursionResult:
    """Upper-bound sequence w_k from the slow-box recursion with v_{k-1} = L_{k-1}^{-rho},
    checked against w_k <= L_k^{-2d(gamma-1)} at every step.
    """
    p = params
    rho = p.rho if rho is None else rho
    logs = scale_sequence(p, k_max)
    expo = 2 * p.d * (p.gamma - 1)
    targets = [-expo * lg for lg in logs]
    if log_w0 > targets[0] + 1e-12:
        raise UsageError("w_0 must satisfy w_0 <= L_0^{-2d(gamma-1)}")
    w = [LogValue(log_w0)]
    margins = [targets[0] - log_w0]
    for k in range(1, k_max + 1):
        Lp = LogValue(logs[k - 1])
        boxes = LogValue(LOG3) * Lp ** (p.gamma - 1)
        slow = boxes ** (p.d * p.D) * (w[-1] ** p.D + Lp ** (-p.alpha * (p.a + 1)))
        blocked = boxes ** p.d * Lp ** (-rho)
        w.append(slow + blocked)
        margins.append(targets[k] - w[-1].log)
        if w[-1].log > targets[k]:
            return RecursionResult([v.log for v in w], targets[: k + 1], False, k, margins)
    return RecursionResult([v.log for v in w], targets, True, None, margins)


# ---------------------------------------------------------------------------
# layer inequality on a two-scale geometry


@dataclass
class SupTReport:
    n_instances: int
    n_checked: int
    n_skipped: int
    violations: int
    records: list


def two_scale_geometry(L0: int, gamma: int, h: int, a: int = 1, d: int = 2) -> dict:
    """The scale-1 box m = (1, 0) and, per layer j, its admissible scale-0 boxes."""
    L1 = L0**gamma
    n = L1 // L0
    big = PlatformGeometry(
        Box((-h * L1,) * (d - 1) + (0,), (2 * h * L1,) * (d - 1) + (L1 ** (a + 1),)),
        0,
        Box((0,) * (d - 1), (h * L1,) * (d - 1)),
        L1,
    )
    lo_i, hi_i = 1 - n, 2 * n - 2
    layers = {}
    for j in range(n):
        subs = []
        for idx in np.ndindex(*((hi_i - lo_i + 1,) * (d - 1))):
            i = [lo_i + v for v in idx]
            c_box = Box(
                tuple((ic - 1) * h * L0 for ic in i) + (j * L0,),
                tuple((ic + 2) * h * L0 for ic in i) + (j * L0 + L0 ** (a + 1),),
            )
            b_base = Box(tuple(ic * h * L0 for ic in i), tuple((ic + 1) * h * L0 for ic in i))
            subs.append(PlatformGeometry(c_box, j * L0, b_base, (j + 1) * L0))
        layers[j] = subs
    return {"L1": L1, "big": big, "layers": layers}


def empirical_supT_check(
    law: LawSpec,
    rule: UpdateRule,
    L0: int = 4,
    gamma: int = 2,
    h: int = 2,
    a: int = 1,
    d: int = 2,
    n_instances: int = 50,
    seed: int = 0,
) -> SupTReport:
    """Count environments where the scale-1 crossing time exceeds the sum over
    layers of the slowest scale-0 crossing time. Instances with an infinite
    time on either side are skipped."""
    geo = two_scale_geometry(L0, gamma, h, a, d)
    records = []
    checked = skipped = violations = 0
    for n in range(n_instances):
        field = EnergyField(d, law, derive_seed(seed, n))
        big = crossing_time(field, rule, geo["big"])
        sups = []
        infinite = isinstance(big, Blocked)
        if not infinite:
            for j, subs in geo["layers"].items():
                times = []
                for g in subs:
                    out = crossing_time(field, rule, g)
                    if isinstance(out, Blocked):
                        infinite = True
                        break
                    times.append(out.T)
                if infinite:
                    break
                sups.append(max(times))
        if infinite:
            skipped += 1
            records.append({"instance": n, "skipped": True})
            continue
        checked += 1
        rhs = sum(sups)
        bad = big.T > rhs
        violations += bad
        records.append({"instance": n, "skipped": False, "T": big.T, "bound": rhs, "violated": bool(bad)})
    return SupTReport(n_instances, checked, skipped, violations, records)


def speed_lower_bound(params: ScaleParams, k_max: int = 50) -> float:
    """1 / (2 h sup_k r_k): the asymptotic velocity bound implied by the r_k sequence.

    Reported for comparison with measured velocities, not asserted.
    """
    return 1.0 / (2 * params.h * rk_sequence(params, k_max).sup)
