"""Command-line experiments.

    depinning SUBCOMMAND [--config PATH] [--out PATH] [--workers N] [--resume] [key=value ...]

Subcommands: simulate, criterion, percolation, renorm-check, soft-check,
mixing-check. A config file holds one ``key = value`` per line (``#``
starts a comment); ``key=value`` arguments after the flags override it.
``DEPINNING_SEED`` and ``DEPINNING_WORKERS`` override ``seed`` and the
worker count.

Output is JSON lines, one record per Monte Carlo sample and metric plus
aggregate and report records, with fields in the order of ``FIELDS``.
Aggregates are computed from sample records sorted by index, so results do
not depend on the worker count or on interruption and ``--resume``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ._hashing import derive_seed
from .criterion import BoxSpec, clopper_pearson, fit_decay, sample_outcomes
from .dynamics import LaplacianThreshold, Lipschitz2, SoftLaplacian, velocity_estimate
from .environment import EnergyField, Gaussian, UsageError, estimate_mixing, law_from_config, law_to_config
from .percolation2d import crossing_thresholds, pc_from_thresholds
from .renorm import InfeasibleParams, check_assumptions, iterate_recursion, rk_sequence, speed_lower_bound, suggest_params
from .soft_model import decay_ratio, deep_trap_probability_bound, find_lambda

FIELDS = (
    "experiment", "subcommand", "kind", "group", "seed", "sample_index",
    "metric", "value", "uncertainty", "n", "wall_time",
)
CHUNK = 50

RULES = {"lipschitz2": Lipschitz2, "laplacian": LaplacianThreshold, "soft": SoftLaplacian}


# ---------------------------------------------------------------------------
# config


def _int_list(text: str) -> tuple:
    vals = tuple(int(v) for v in text.replace(",", " ").split())
    if not vals:
        raise ValueError("empty list")
    return vals


def _float_opt(text: str) -> Optional[float]:
    return None if text in ("", "auto", "none") else float(text)


def _rule(text: str) -> str:
    if text not in RULES:
        raise ValueError(f"rule must be one of {sorted(RULES)}")
    return text


def _law(text: str) -> str:
    return law_to_config(law_from_config(text))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


SCHEMAS = {
    "simulate": {
        "law": (_law, "gaussian(f=5.0,sigma=1.0)"),
        "rule": (_rule, "soft"),
        "d": (int, 2),
        "window": (_int_list, (64,)),
        "T": (int, 1000),
        "burn_in": (int, 0),
        "n_samples": (int, 4),
        "seed": (int, 0),
    },
    "criterion": {
        "law": (_law, "bernoulli(p=0.3,trap=auto,free=0.5)"),
        "rule": (_rule, "lipschitz2"),
        "d": (int, 2),
        "h": (int, 2),
        "a": (int, 1),
        "L": (_int_list, (8,)),
        "n_samples": (int, 100),
        "seed": (int, 0),
    },
    "percolation": {
        "L": (_int_list, (16, 32, 64)),
        "p_min": (float, 0.2),
        "p_max": (float, 0.36),
        "p_step": (float, 0.005),
        "n_samples": (int, 200),
        "n_boot": (int, 100),
        "seed": (int, 0),
    },
    "renorm-check": {
        "d": (int, 2),
        "a": (int, 1),
        "h": (int, 2),
        "alpha": (_float_opt, None),
        "rho": (_float_opt, None),
        "k_max": (int, 10),
    },
    "soft-check": {
        "f": (float, 5.0),
        "sigma": (float, 1.0),
        "h": (int, 4),
        "a": (int, 2),
        "L": (_int_list, (4, 9, 16, 25)),
        "n_samples": (int, 100),
        "seed": (int, 0),
    },
    "mixing-check": {
        "law": (_law, "moving_average(window=2,base=gaussian(f=0.0,sigma=1.0))"),
        "d": (int, 2),
        "L": (int, 3),
        "D": (int, 2),
        "n_samples": (int, 2000),
        "seed": (int, 0),
    },
}

ENV_OVERRIDES = {"seed": "DEPINNING_SEED"}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def build_config(subcommand: str, raw: dict, env: Optional[dict] = None) -> dict:
    """Validate and type raw string values against the subcommand schema."""
    if subcommand not in SCHEMAS:
        raise UsageError(f"unknown subcommand {subcommand!r}; valid: {', '.join(SCHEMAS)}")
    schema = SCHEMAS[subcommand]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"invalid config key(s) {unknown} for {subcommand}; valid keys: {', '.join(schema)}")
    env = os.environ if env is None else env
    cfg = {}
    for key, (conv, default) in schema.items():
        text = raw.get(key)
        if key in ENV_OVERRIDES and env.get(ENV_OVERRIDES[key]) is not None:
            text = env[ENV_OVERRIDES[key]]
        if text is None:
            cfg[key] = default
            continue
        try:
            cfg[key] = conv(str(text))
        except (ValueError, UsageError) as exc:
            raise UsageError(f"invalid value for {key!r}: {text!r} ({exc})") from None
    if cfg.get("n_samples", 1) < 1:
        raise UsageError("n_samples must be >= 1")
    return cfg


def canonical(subcommand: str, cfg: dict) -> str:
    lines = [f"subcommand = {subcommand}"] + [f"{k} = {_fmt(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(subcommand: str, cfg: dict) -> str:
    return hashlib.sha256(canonical(subcommand, cfg).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# experiments
#
# An experiment lists groups of samples; ``evaluate(cfg, group, indices)``
# returns one {metric: value} dict per index (run in worker processes), and
# ``aggregate(cfg, samples)`` turns {group: [metrics sorted by index]} into
# rows. ``report(cfg)`` produces rows needing no sampling.


@dataclass
class Experiment:
    groups: Callable
    evaluate: Optional[Callable]
    aggregate: Optional[Callable]
    report: Optional[Callable] = None


def _row(metric, value, group="", uncertainty=None, n=None) -> dict:
    return {"group": group, "metric": metric, "value": value, "uncertainty": uncertainty, "n": n}


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _criterion_eval(law, rule, spec, cfg, indices):
    seeds = [derive_seed(cfg["seed"], i) for i in indices]
    blocked, times = sample_outcomes(law, rule, spec, seeds, spec.d)
    return [{"blocked": int(b), "time": int(t)} for b, t in zip(blocked, times)]


def _blocking_rows(samples: dict, L_list) -> list:
    rows, points = [], []
    for L in L_list:
        vals = samples[f"L={L}"]
        k, n = sum(v["blocked"] for v in vals), len(vals)
        lo, hi = clopper_pearson(k, n)
        rows.append(_row("p_hat", k / n, f"L={L}", [lo, hi], n))
        points.append((L, k / n, n))
    if len(L_list) >= 3:
        fit = fit_decay(points)
        rows.append(_row("rho_hat", _num(fit.rho_hat), "fit", _num(fit.rho_se), fit.n_positive))
        rows.append(_row("kappa_hat", _num(fit.kappa_hat), "fit", _num(fit.kappa_se), fit.n_positive))
        rows.append(_row("slope_L", _num(fit.slope_L), "fit", _num(fit.slope_L_se), fit.n_positive))
    return rows


def _criterion() -> Experiment:
    def groups(cfg):
        return [(f"L={L}", cfg["n_samples"]) for L in cfg["L"]]

    def evaluate(cfg, group, indices):
        L = int(group.split("=")[1])
        spec = BoxSpec(cfg["h"], L, cfg["a"], cfg["d"])
        return _criterion_eval(law_from_config(cfg["law"]), RULES[cfg["rule"]](), spec, cfg, indices)

    return Experiment(groups, evaluate, lambda cfg, s: _blocking_rows(s, cfg["L"]))


def _soft() -> Experiment:
    def groups(cfg):
        return [(f"L={L}", cfg["n_samples"]) for L in cfg["L"]]

    def evaluate(cfg, group, indices):
        L = int(group.split("=")[1])
        spec = BoxSpec(cfg["h"], L, cfg["a"], 2)
        return _criterion_eval(Gaussian(cfg["f"], cfg["sigma"]), SoftLaplacian(), spec, cfg, indices)

    def report(cfg):
        law = Gaussian(cfg["f"], cfg["sigma"])
        search = find_lambda(law)
        rows = [
            _row("lambda_feasible", search.feasible, "moment"),
            _row("lambda0", search.lam, "moment"),
            _row("moment_lhs", search.condition.lhs, "moment"),
            _row("moment_rhs", search.condition.rhs, "moment"),
            _row("decay_ratio", decay_ratio(law, search.lam), "moment"),
        ]
        for L in cfg["L"]:
            b = deep_trap_probability_bound(cfg["h"], L, search.lam if search.feasible else 0.0)
            rows.append(_row("deep_trap_bound", b.bound, f"L={L}"))
        return rows

    return Experiment(groups, evaluate, lambda cfg, s: _blocking_rows(s, cfg["L"]), report)


def _simulate() -> Experiment:
    def groups(cfg):
        return [("velocity", cfg["n_samples"])]

    def evaluate(cfg, group, indices):
        law = law_from_config(cfg["law"])
        rule = RULES[cfg["rule"]]()
        window = cfg["window"] if len(cfg["window"]) > 1 else cfg["window"][0]
        out = []
        for i in indices:
            field = EnergyField(cfg["d"], law, derive_seed(cfg["seed"], i))
            v = velocity_estimate(field, rule, window, cfg["T"], cfg["burn_in"])
            out.append({"velocity": float(v.velocity), "height": v.height_final})
        return out

    def aggregate(cfg, samples):
        v = np.array([s["velocity"] for s in samples["velocity"]])
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
        spread = float(v.std(ddof=1) / v.mean()) if v.size > 1 and v.mean() > 0 else None
        return [
            _row("mean_velocity", float(v.mean()), "velocity", se, int(v.size)),
            _row("relative_spread", spread, "velocity", None, int(v.size)),
        ]

    return Experiment(groups, evaluate, aggregate)


def _percolation_grid(cfg) -> list:
    n = int(round((cfg["p_max"] - cfg["p_min"]) / cfg["p_step"])) + 1
    return [round(cfg["p_min"] + k * cfg["p_step"], 12) for k in range(n)]


def _percolation() -> Experiment:
    def groups(cfg):
        return [(f"L={L}", cfg["n_samples"]) for L in cfg["L"]]

    def evaluate(cfg, group, indices):
        L = int(group.split("=")[1])
        th = crossing_thresholds(L, [derive_seed(cfg["seed"], i) for i in indices])
        return [{"threshold": float(t)} for t in th]

    def aggregate(cfg, samples):
        L_list = list(cfg["L"])
        th = {L: [s["threshold"] for s in samples[f"L={L}"]] for L in L_list}
        grid = _percolation_grid(cfg)
        est = pc_from_thresholds(L_list, grid, th, cfg["seed"], cfg["n_boot"])
        rows = []
        for L in L_list:
            for p, c in zip(grid, est.curves[L]):
                rows.append(_row("crossing_probability", c, f"L={L};p={p}", None, cfg["n_samples"]))
        for (L1, L2), pc, err in zip(zip(L_list[:-1], L_list[1:]), est.pair_crossings, est.pair_errors):
            rows.append(_row("pair_crossing", _num(pc), f"L={L1}/{L2}", _num(err), cfg["n_samples"]))
        rows.append(_row("p_c", _num(est.p_c), "all", _num(est.p_c_error), cfg["n_samples"]))
        rows.append(_row("monotone", bool(est.monotone), "all"))
        return rows

    return Experiment(groups, evaluate, aggregate)


def _renorm() -> Experiment:
    def report(cfg):
        try:
            params = suggest_params(cfg["d"], cfg["a"], cfg["alpha"], cfg["rho"], cfg["h"])
        except InfeasibleParams as exc:
            return [_row("feasible", False, "params"), _row("reason", str(exc), "params")]
        rows = [_row("feasible", True, "params")]
        for key in ("gamma", "D", "alpha", "rho", "L0", "r0"):
            rows.append(_row(key, getattr(params, key), "params"))
        rep = check_assumptions(params)
        for c in rep.constraints:
            rows.append(_row("constraint_ok", c.ok, c.name, c.margin))
        rows.append(_row("required_log_L0", rep.required_log_L0, "params"))
        rk = rk_sequence(params, cfg["k_max"])
        rows.append(_row("r_sup", rk.sup, "r_k", rk.sup_bound))
        rows.append(_row("speed_lower_bound", speed_lower_bound(params), "r_k"))
        rec = iterate_recursion(params, -math.inf, k_max=cfg["k_max"])
        for k, (lw, lt) in enumerate(zip(rec.log_w, rec.log_targets)):
            rows.append(_row("log_w", _num(lw), f"k={k}", lt))
        rows.append(_row("induction_passed", rec.passed, "recursion", None, rec.failed_at))
        return rows

    return Experiment(lambda cfg: [], None, None, report)


def _mixing() -> Experiment:
    def report(cfg):
        field = EnergyField(cfg["d"], law_from_config(cfg["law"]), cfg["seed"])
        rep = estimate_mixing(field, cfg["L"], cfg["D"], cfg["n_samples"])
        rows = []
        for ell, c, se, g, gse in zip(rep.scales, rep.covariances, rep.covariance_se, rep.product_gaps, rep.product_se):
            rows.append(_row("covariance", c, f"l={ell}", se, rep.n_samples))
            rows.append(_row("product_gap", g, f"l={ell}", gse, rep.n_samples))
        rows.append(_row("alpha_hat", _num(rep.alpha_hat), "fit"))
        rows.append(_row("zero_consistent", bool(rep.zero_consistent), "fit"))
        return rows

    return Experiment(lambda cfg: [], None, None, report)


EXPERIMENTS = {
    "simulate": _simulate,
    "criterion": _criterion,
    "percolation": _percolation,
    "renorm-check": _renorm,
    "soft-check": _soft,
    "mixing-check": _mixing,
}


# ---------------------------------------------------------------------------
# runner


def _eval_job(args):
    subcommand, cfg, group, indices = args
    t0 = time.perf_counter()
    vals = EXPERIMENTS[subcommand]().evaluate(cfg, group, indices)
    return group, indices, vals, time.perf_counter() - t0


def _record(base: dict, row: dict, wall: float, kind: str, seed=None, index=None) -> str:
    rec = dict(base, kind=kind, seed=seed, sample_index=index, wall_time=round(wall, 6), **row)
    return json.dumps({k: rec.get(k) for k in FIELDS})


def _load_completed(path: str, experiment: str) -> tuple:
    """Sample values already in ``path`` for this experiment, and whether aggregates were written."""
    done: dict = {}
    has_aggregate = False
    if not os.path.exists(path):
        return done, has_aggregate
    with open(path) as fh:
        for line in fh:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue
            if rec.get("experiment") != experiment:
                continue
            if rec["kind"] == "sample":
                done.setdefault((rec["group"], rec["sample_index"]), {})[rec["metric"]] = rec["value"]
            elif rec["kind"] in ("aggregate", "report"):
                has_aggregate = True
    return done, has_aggregate


def _drop_torn_tail(path: str) -> None:
    """Cut a partially written last line so appended records start on a fresh line."""
    if not os.path.exists(path):
        return
    with open(path, "rb+") as fh:
        data = fh.read()
        if data and not data.endswith(b"\n"):
            fh.truncate(data.rfind(b"\n") + 1)


def run(subcommand: str, cfg: dict, out_path: str, workers: int = 1, resume: bool = False) -> int:
    exp = EXPERIMENTS[subcommand]()
    exp_hash = config_hash(subcommand, cfg)
    base = {"experiment": exp_hash, "subcommand": subcommand}
    if resume:
        _drop_torn_tail(out_path)
    done, has_aggregate = _load_completed(out_path, exp_hash) if resume else ({}, False)
    groups = exp.groups(cfg)
    # a sample cut off mid-write has fewer metrics than its neighbours
    width = max((len(v) for v in done.values()), default=0)
    jobs = []
    for group, n in groups:
        todo = [i for i in range(n) if len(done.get((group, i), ())) < width or (group, i) not in done]
        for k in range(0, len(todo), CHUNK):
            jobs.append((subcommand, cfg, group, todo[k : k + CHUNK]))
    if resume and not jobs and has_aggregate:
        return 0
    with open(out_path, "a" if resume else "w") as fh:
        if exp.report is not None:
            t0 = time.perf_counter()
            rows = exp.report(cfg)
            wall = time.perf_counter() - t0
            fh.write("".join(_record(base, r, wall, "report") + "\n" for r in rows))
            fh.flush()
        if workers > 1 and len(jobs) > 1:
            pool = ProcessPoolExecutor(workers)
            results = pool.map(_eval_job, jobs)
        else:
            pool = None
            results = map(_eval_job, jobs)
        try:
            for group, indices, vals, wall in results:
                lines = []
                for i, metrics in zip(indices, vals):
                    done[(group, i)] = metrics
                    for m, v in metrics.items():
                        lines.append(_record(base, _row(m, v, group), wall / len(indices), "sample", cfg.get("seed"), i))
                fh.write("".join(line + "\n" for line in lines))
                fh.flush()
        finally:
            if pool is not None:
                pool.shutdown()
        if exp.aggregate is not None and groups:
            t0 = time.perf_counter()
            samples = {g: [done[(g, i)] for i in range(n)] for g, n in groups}
            rows = exp.aggregate(cfg, samples)
            wall = time.perf_counter() - t0
            fh.write("".join(_record(base, r, wall, "aggregate") + "\n" for r in rows))
    return 0


def metric_values(path: str) -> list:
    """(kind, group, sample_index, metric, value, uncertainty) tuples, for comparing runs."""
    out = []
    with open(path) as fh:
        for line in fh:
            r = json.loads(line)
            out.append((r["kind"], r["group"], r["sample_index"], r["metric"], r["value"], r["uncertainty"]))
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="depinning", description="Interface depinning experiments.")
    parser.add_argument("subcommand", choices=list(SCHEMAS))
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    parser.add_argument("--config", metavar="PATH")
    parser.add_argument("--out", metavar="PATH", default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--resume", action="store_true")
    args = parser.parse_args(argv)
    try:
        raw = {}
        if args.config:
            with open(args.config) as fh:
                raw.update(parse_config_text(fh.read()))
        for item in args.overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"expected key=value, got {item!r}")
            raw[key.strip()] = value.strip()
        cfg = build_config(args.subcommand, raw)
        workers = args.workers
        if workers is None:
            workers = int(os.environ.get("DEPINNING_WORKERS", "1"))
        out = args.out or f"{args.subcommand}-{config_hash(args.subcommand, cfg)}.jsonl"
        status = run(args.subcommand, cfg, out, max(1, workers), args.resume)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return status


if __name__ == "__main__":
    sys.exit(main())
