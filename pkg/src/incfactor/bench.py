"""Benchmark harnesses: semantics convergence and the materialization
tradeoff space, on synthetic graphs at desk scale.

Synthetic pairwise graphs follow the tradeoff study's setup: factor
weights drawn uniformly from a configurable interval (default
[-0.5, 0.5]), with a sparsity knob that zeroes a random fraction of the
weights.  The "amount of change" knob perturbs a fraction of the factor
weights, searching the perturbation magnitude until the measured MH
acceptance rate lands near a target value.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import EnumerationCapError
from .graph import FactorGraph, enumerate_marginals
from .grounding import UpdateDelta
from .incremental import (MaterializationBundle, materialize_samples,
                          materialize_strawman, materialize_variational,
                          mh_infer, variational_infer)
from .inference import GibbsConfig, run_gibbs, sweeps_to_epsilon
from .rules import LINEAR, LOGICAL, RATIO


# -- graph generators -----------------------------------------------------------


def voting_graph(n_votes, kind, up_weight=1.0, down_weight=-1.0):
    """The up/down voting program over free vote variables: one factor per
    direction on the query head, counting the direction's true votes."""
    fg = FactorGraph()
    half = n_votes // 2
    ups = [fg.add_variable("Up", (f"u{i}",)).id for i in range(half)]
    downs = [fg.add_variable("Down", (f"d{i}",)).id for i in range(n_votes - half)]
    q = fg.add_variable("Q", ()).id
    wu = fg.add_weight(up_weight, key=("up", ()))
    wd = fg.add_weight(down_weight, key=("down", ()))
    fg.add_factor("up", q, [[(v, True)] for v in ups], wu.id, kind)
    fg.add_factor("down", q, [[(v, True)] for v in downs], wd.id, kind)
    return fg, q


def pairwise_graph(n_vars, n_factors=None, weight_range=0.5, sparsity=1.0,
                   seed=0, semantics=LINEAR):
    """Random pairwise graph; a (1 - sparsity) fraction of the factor
    weights is set to zero."""
    rng = np.random.default_rng(seed)
    fg = FactorGraph()
    for i in range(n_vars):
        fg.add_variable("X", (str(i),))
    if n_factors is None:
        n_factors = 2 * n_vars
    weights = rng.uniform(-weight_range, weight_range, size=n_factors)
    zero = rng.random(n_factors) >= sparsity
    weights[zero] = 0.0
    for k in range(n_factors):
        i = int(rng.integers(1, n_vars + 1))
        j = int(rng.integers(1, n_vars + 1))
        while j == i:
            j = int(rng.integers(1, n_vars + 1))
        w = fg.add_weight(float(weights[k]), key=("pw", (str(k),)))
        fg.add_factor(f"pw{k}", i, [[(j, True)]], w.id, semantics)
    return fg


# -- semantics convergence bench ----------------------------------------------------


def semantics_bench(sizes=(4, 8, 16), seeds=20, epsilon=0.01, max_sweeps=100_000,
                    window=64, base_seed=0):
    """Sweeps-to-epsilon of the voting head marginal per semantics and
    size; exhausted runs are recorded at max_sweeps."""
    rows = []
    for kind in (LINEAR, RATIO, LOGICAL):
        for n in sizes:
            fg, q = voting_graph(n, kind)
            target = enumerate_marginals(fg)[q]
            for s in range(seeds):
                res = sweeps_to_epsilon(fg, target, epsilon, max_sweeps,
                                        var=q, seed=base_seed + s,
                                        window=window)
                rows.append({
                    "semantics": kind,
                    "n_votes": n,
                    "seed": base_seed + s,
                    "sweeps": res.sweeps if res.sweeps is not None else max_sweeps,
                    "converged": 0 if res.exhausted else 1,
                    "estimate": res.estimate,
                    "target": target,
                })
    return rows


def semantics_medians(rows):
    med = {}
    for row in rows:
        med.setdefault((row["semantics"], row["n_votes"]), []).append(row["sweeps"])
    return {k: float(np.median(v)) for k, v in med.items()}


# -- tradeoff bench -------------------------------------------------------------------


def perturbation_delta(graph: FactorGraph, fraction, magnitude, seed=0) -> UpdateDelta:
    """Weight perturbation on a random fraction of the factors' weights."""
    rng = np.random.default_rng(seed)
    wids = sorted({f.weight_ref for f in graph.factors.values()})
    k = max(1, int(round(fraction * len(wids))))
    chosen = rng.choice(len(wids), size=min(k, len(wids)), replace=False)
    changes = {}
    for ix in sorted(chosen):
        wid = wids[ix]
        old = graph.weights[wid].value
        changes[wid] = (old, old + float(rng.normal(0.0, magnitude)))
    return UpdateDelta(weight_changes=changes)


def apply_weight_delta(graph: FactorGraph, delta: UpdateDelta) -> FactorGraph:
    g = graph.copy()
    for wid, (_old, new) in delta.weight_changes.items():
        g.set_weight(wid, new)
    return g


def tune_acceptance(graph, bundle, target_rate, fraction=0.5, seed=0,
                    probe=400, iters=14):
    """Search the perturbation magnitude whose measured acceptance rate is
    closest to the target (acceptance falls as the magnitude grows)."""
    if target_rate >= 1.0:
        return UpdateDelta(), 1.0
    lo, hi = 1e-4, 64.0
    best = None
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        delta = perturbation_delta(graph, fraction, mid, seed=seed)
        after = apply_weight_delta(graph, delta)
        res = mh_infer(bundle, after, delta, sweeps=probe, seed=seed + 1)
        rate = res.acceptance_rate
        if best is None or abs(rate - target_rate) < abs(best[1] - target_rate):
            best = (delta, rate, mid)
        if rate > target_rate:
            lo = mid
        else:
            hi = mid
    return best[0], best[1]


@dataclass
class TradeoffCell:
    axis: str
    n_vars: int
    knob: float
    sampling_seconds: float | None = None
    variational_seconds: float | None = None
    sampling_err: float | None = None
    variational_err: float | None = None
    acceptance_rate: float | None = None
    exhausted: bool | None = None
    original_fetches: int | None = None
    approx_fetches: int | None = None
    fetch_ratio: float | None = None
    original_factors: int | None = None
    approx_factors: int | None = None
    strawman_feasible: bool | None = None
    note: str = ""


def _reference_marginals(graph, seed=0):
    try:
        return enumerate_marginals(graph)
    except EnumerationCapError:
        res = run_gibbs(graph, GibbsConfig(sweeps=20_000, burn_in=2_000,
                                           chains=2, seed=seed))
        return res.marginals


def _max_err(reference, marginals):
    common = [v for v in reference if v in marginals]
    if not common:
        return float("nan")
    return max(abs(reference[v] - marginals[v]) for v in common)


def acceptance_axis(n_vars_list=(17, 100), rates=(1.0, 0.5, 0.1, 0.01),
                    n_samples=2000, lam=0.1, seed=0, weight_range=0.5):
    cells = []
    for n_vars in n_vars_list:
        graph = pairwise_graph(n_vars, weight_range=weight_range, seed=seed)
        bundle = materialize_samples(graph, n_samples=n_samples, seed=seed)
        approx, _est, _X, rep = materialize_variational(
            graph, None, lam, samples=bundle.samples, var_ids=bundle.var_ids)
        bundle = MaterializationBundle(
            bundle.var_ids, bundle.samples, bundle.seed, bundle.thin,
            bundle.burn_in, bundle.fingerprint, approx_graph=approx, lam=lam,
            solver_meta={"pg_norm": rep.pg_norm})
        for rate in rates:
            delta, measured = tune_acceptance(graph, bundle, rate, seed=seed)
            after = apply_weight_delta(graph, delta)
            reference = _reference_marginals(after, seed=seed + 7)

            t0 = time.perf_counter()
            mh = mh_infer(bundle, after, delta, sweeps=n_samples, seed=seed + 3)
            t_sampling = time.perf_counter() - t0

            t0 = time.perf_counter()
            vmarg, _ = variational_infer(bundle, delta, sweeps=n_samples,
                                         graph_after=after, seed=seed + 4,
                                         chains=1)
            t_variational = time.perf_counter() - t0

            cells.append(TradeoffCell(
                axis="acceptance", n_vars=n_vars, knob=rate,
                sampling_seconds=t_sampling, variational_seconds=t_variational,
                sampling_err=_max_err(reference, mh.marginals),
                variational_err=_max_err(reference, vmarg),
                acceptance_rate=mh.acceptance_rate if delta.weight_changes
                else measured,
                exhausted=mh.exhausted))
    return cells


def sparsity_axis(n_vars_list=(100,), sparsities=(0.1, 0.2, 0.3, 0.4, 0.5, 1.0),
                  n_samples=2000, lam=0.1, sweeps=2000, seed=0):
    cells = []
    for n_vars in n_vars_list:
        for sp in sparsities:
            graph = pairwise_graph(n_vars, sparsity=sp, seed=seed)
            bundle = materialize_samples(graph, n_samples=n_samples, seed=seed)
            approx, _est, _X, _rep = materialize_variational(
                graph, None, lam, samples=bundle.samples, var_ids=bundle.var_ids)
            cfg = GibbsConfig(sweeps=sweeps, burn_in=0, chains=1, seed=seed + 2)
            orig = run_gibbs(graph, cfg)
            ap = run_gibbs(approx, cfg)
            cells.append(TradeoffCell(
                axis="sparsity", n_vars=n_vars, knob=sp,
                original_fetches=orig.factor_fetches,
                approx_fetches=ap.factor_fetches,
                fetch_ratio=ap.factor_fetches / max(1, orig.factor_fetches),
                original_factors=len(graph.factors),
                approx_factors=len(approx.factors)))
    return cells


def strawman_axis(n_vars_list=(2, 10, 17, 25), seed=0):
    cells = []
    for n_vars in n_vars_list:
        graph = pairwise_graph(n_vars, seed=seed)
        try:
            t0 = time.perf_counter()
            materialize_strawman(graph)
            dt = time.perf_counter() - t0
            cells.append(TradeoffCell(axis="strawman", n_vars=n_vars, knob=0.0,
                                      strawman_feasible=True,
                                      sampling_seconds=dt))
        except EnumerationCapError as exc:
            cells.append(TradeoffCell(axis="strawman", n_vars=n_vars, knob=0.0,
                                      strawman_feasible=False, note=str(exc)))
    return cells


# -- CSV -------------------------------------------------------------------------------


def write_semantics_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("semantics,n_votes,seed,sweeps,converged,estimate,target\n")
        for r in rows:
            fh.write("%s,%d,%d,%d,%d,%.6f,%.6f\n" % (
                r["semantics"], r["n_votes"], r["seed"], r["sweeps"],
                r["converged"], r["estimate"], r["target"]))


def write_tradeoff_csv(path, cells):
    cols = ["axis", "n_vars", "knob", "sampling_seconds", "variational_seconds",
            "sampling_err", "variational_err", "acceptance_rate", "exhausted",
            "original_fetches", "approx_fetches", "fetch_ratio",
            "original_factors", "approx_factors", "strawman_feasible", "note"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for c in cells:
            vals = []
            for col in cols:
                v = getattr(c, col)
                if v is None:
                    vals.append("")
                elif isinstance(v, bool):
                    vals.append("1" if v else "0")
                elif isinstance(v, float):
                    vals.append("%.6g" % v)
                else:
                    vals.append(str(v))
            fh.write(",".join(vals) + "\n")
