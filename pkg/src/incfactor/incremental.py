"""Materialization strategies and their incremental inference phases.

Three ways to precompute against future updates:

* strawman: the full world table (exponential; capped),
* sampling: stored Gibbs worlds reused as independent Metropolis-Hastings
  proposals, with the acceptance test evaluated from the delta factors
  alone,
* variational: a sparse pairwise surrogate graph fitted from sampled spin
  moments by box-constrained log-determinant maximization; updates are
  spliced into the surrogate as original-form correction factors.

The MH acceptance ratio for stored-world proposals reduces to
``exp(D(proposal) - D(current))`` with ``D(I) = sum over changed factors
of [w_new(f,I) - w_old(f,I)]``; when the update adds variables, proposals
are extended by sampling the new variables one Gibbs pass conditioned on
the stored world, and the acceptance ratio carries the extension kernel's
density so the chain still targets the updated distribution exactly.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (BundleError, ConvergenceError, IncfactorError,
                     LambdaSearchError)
from .graph import (ENUMERATION_CAP, EV_NEG, EV_POS, QUERY, FactorGraph,
                    enumerate_log_weights, enumerate_worlds, g_eval,
                    graph_fingerprint, satisfied_groundings)
from .grounding import UpdateDelta
from .inference import (GibbsConfig, GraphArrays, chain_rng, read_sample_log,
                        run_gibbs, write_sample_log)
from .rules import LINEAR

MH_STREAM = 0xACCE97
LAMBDA_LADDER = (0.001, 0.01, 0.1, 1.0)


# -- strawman --------------------------------------------------------------------


@dataclass
class WorldTable:
    free_ids: list
    probabilities: np.ndarray  # indexed by world bitmask over free_ids

    def as_dict(self):
        return {int(i): float(p) for i, p in enumerate(self.probabilities)}

    def probability(self, world):
        idx = 0
        for j, vid in enumerate(self.free_ids):
            if world[vid]:
                idx |= 1 << j
        return float(self.probabilities[idx])


def materialize_strawman(graph: FactorGraph, cap=ENUMERATION_CAP) -> WorldTable:
    """Pr[I] for every evidence-respecting world; infeasible past the cap."""
    free_ids, probs = enumerate_worlds(graph, cap)
    return WorldTable(free_ids, probs)


# -- sample bundles ----------------------------------------------------------------


@dataclass
class MaterializationBundle:
    var_ids: list
    samples: np.ndarray  # (N, ceil(|V|/8)) uint8, bitorder little
    seed: int
    thin: int
    burn_in: int
    fingerprint: str
    approx_graph: FactorGraph | None = None
    lam: float | None = None
    solver_meta: dict = field(default_factory=dict)
    strawman: WorldTable | None = None

    @property
    def n_samples(self):
        return int(self.samples.shape[0]) if self.samples.size else 0

    def storage_bytes(self):
        header = 8 + 16
        return header + self.n_samples * ((len(self.var_ids) + 7) // 8)

    def world(self, i) -> dict:
        bits = np.unpackbits(self.samples[i], count=len(self.var_ids),
                             bitorder="little")
        return {vid: bool(bits[j]) for j, vid in enumerate(self.var_ids)}


def materialize_samples(graph: FactorGraph, n_samples=None, time_budget=None,
                        seed=0, burn_in=200, thin=4) -> MaterializationBundle:
    """Draw stored worlds from the graph's distribution by Gibbs with a
    fixed thinning interval.  Either a sample count or a wall-clock budget
    (seconds) must be given; with a budget, as many samples as possible are
    drawn before it runs out."""
    if (n_samples is None) == (time_budget is None):
        raise IncfactorError("give exactly one of n_samples / time_budget")
    fingerprint = graph_fingerprint(graph)
    arrays = GraphArrays(graph)
    ids = arrays.ids
    if n_samples is not None and n_samples == 0:
        return MaterializationBundle(ids, np.zeros((0, (len(ids) + 7) // 8),
                                                   dtype=np.uint8),
                                     seed, thin, burn_in, fingerprint)
    rng = chain_rng(seed, 0)
    state = arrays.init_state(rng)
    q = arrays.query.size
    counts = np.zeros(len(ids), dtype=np.int64)
    rows = []

    def sweep(n):
        if q == 0 or n == 0:
            return
        arrays.run_block(state, rng.random(n * q), n, counts)

    deadline = None if time_budget is None else time.monotonic() + time_budget
    sweep(burn_in)
    if n_samples is not None:
        for _ in range(n_samples):
            sweep(thin)
            rows.append(arrays.pack_world(state[0]))
    else:
        while time.monotonic() < deadline:
            sweep(thin)
            rows.append(arrays.pack_world(state[0]))
    samples = np.array(rows, dtype=np.uint8) if rows else \
        np.zeros((0, (len(ids) + 7) // 8), dtype=np.uint8)
    return MaterializationBundle(ids, samples, seed, thin, burn_in, fingerprint)


# -- delta factor evaluation ---------------------------------------------------------


@dataclass
class DeltaFactorView:
    """One changed factor: payloads and weight values on both sides.

    w_old is zero for factors new in the update, w_new is zero for removed
    ones; a weight-only change keeps the payload and changes the values.
    """
    fid: int
    old_payload: object | None
    old_weight: float
    new_payload: object | None
    new_weight: float


def _payload_weight(factor, world, w) -> float:
    if factor is None or w == 0.0:
        return 0.0
    if factor.head is None:
        sign = 1.0
    else:
        sign = 1.0 if world[factor.head] else -1.0
    return w * sign * g_eval(factor.g_kind, satisfied_groundings(factor, world))


def delta_factor_views(graph_after: FactorGraph, delta: UpdateDelta) -> list:
    views = []
    changed = delta.weight_changes

    def old_w(wid):
        if wid in changed:
            return changed[wid][0]
        if wid in delta.removed_weights:
            return delta.removed_weights[wid].value
        if wid in delta.new_weights:
            return 0.0
        return graph_after.weights[wid].value

    def new_w(wid):
        if wid in graph_after.weights:
            return graph_after.weights[wid].value
        return 0.0

    for fid in sorted(delta.delta_factor_ids(graph_after)):
        if fid in delta.new_factors:
            fac = delta.new_factors[fid]
            views.append(DeltaFactorView(fid, None, 0.0, fac, new_w(fac.weight_ref)))
        elif fid in delta.removed_factors:
            fac = delta.removed_factors[fid]
            views.append(DeltaFactorView(fid, fac, old_w(fac.weight_ref), None, 0.0))
        elif fid in delta.modified_factors:
            old, new = delta.modified_factors[fid]
            views.append(DeltaFactorView(fid, old, old_w(old.weight_ref),
                                         new, new_w(new.weight_ref)))
        else:  # weight-only change
            fac = graph_after.factors[fid]
            views.append(DeltaFactorView(fid, fac, old_w(fac.weight_ref),
                                         fac, new_w(fac.weight_ref)))
    return views


# -- Metropolis-Hastings over stored samples -------------------------------------------


@dataclass
class MHResult:
    marginals: dict
    acceptance_rate: float
    exhausted: bool
    samples_used: int
    proposals: int
    accepted: int
    d_factor_fetches: int


class _DeltaEvaluator:
    def __init__(self, graph_after, delta):
        self.views = delta_factor_views(graph_after, delta)
        self.evidence = {
            vid: new_role for vid, (_old, new_role) in delta.evidence_changes.items()
            if new_role in (EV_POS, EV_NEG)}
        self.fetches = 0

    def evaluate(self, world) -> float:
        """D(I); -inf when the world violates evidence added by the update."""
        for vid, role in self.evidence.items():
            val = world[vid]
            if role == EV_POS and not val:
                return -math.inf
            if role == EV_NEG and val:
                return -math.inf
        d = 0.0
        for view in self.views:
            self.fetches += 1
            d += _payload_weight(view.new_payload, world, view.new_weight)
            d -= _payload_weight(view.old_payload, world, view.old_weight)
        return d


def _extend_world(graph_after, new_var_ids, world, rng):
    """Sample the update's new variables one ordered Gibbs pass conditioned
    on the stored world; returns the extension's log density."""
    from .inference import gibbs_conditional

    logq = 0.0
    for vid in new_var_ids:
        role = graph_after.variables[vid].role
        if role == EV_POS:
            world[vid] = True
            continue
        if role == EV_NEG:
            world[vid] = False
            continue
        world[vid] = False
    for vid in new_var_ids:
        if graph_after.variables[vid].role != QUERY:
            continue
        p = gibbs_conditional(graph_after, world, vid)
        val = bool(rng.random() < p)
        world[vid] = val
        logq += math.log(p if val else 1.0 - p)
    return logq


def mh_infer(bundle: MaterializationBundle, graph_after: FactorGraph,
             delta: UpdateDelta, sweeps, seed=0,
             expect_fingerprint=None) -> MHResult:
    """Independent MH with stored worlds as proposals, targeting the
    updated distribution.  `sweeps` counts requested chain states (the
    initializing world included); each state consumes one stored world.
    """
    if expect_fingerprint is not None and bundle.fingerprint != expect_fingerprint:
        raise BundleError("sample bundle was materialized for a different graph")
    if (not delta.new_vars and not delta.evidence_changes
            and not delta.delta_factor_ids(graph_after)):
        return _mh_reuse_verbatim(bundle, graph_after, sweeps)
    new_var_ids = sorted(delta.new_vars)
    report_ids = graph_after.var_ids()
    evaluator = _DeltaEvaluator(graph_after, delta)
    rng = chain_rng(seed, MH_STREAM)

    counts = {vid: 0 for vid in report_ids}
    states = 0
    accepted = 0
    proposals = 0
    used = 0
    current = None
    current_score = None  # D - logq

    def count_state(world):
        nonlocal states
        states += 1
        for vid in report_ids:
            if world[vid]:
                counts[vid] += 1

    n_avail = bundle.n_samples
    while used < n_avail and states < sweeps:
        world = bundle.world(used)
        used += 1
        logq = _extend_world(graph_after, new_var_ids, world, rng)
        d = evaluator.evaluate(world)
        if current is None:
            if d == -math.inf:
                continue  # stored world conflicts with new evidence
            current, current_score = world, d - logq
            count_state(current)
            continue
        proposals += 1
        score = d - logq
        log_alpha = score - current_score
        if log_alpha >= 0 or rng.random() < math.exp(log_alpha):
            accepted += 1
            current, current_score = world, score
        count_state(current)

    exhausted = states < sweeps
    marginals = {}
    if states:
        for vid in report_ids:
            role = graph_after.variables[vid].role
            if role == EV_POS:
                marginals[vid] = 1.0
            elif role == EV_NEG:
                marginals[vid] = 0.0
            else:
                marginals[vid] = counts[vid] / states
    return MHResult(
        marginals=marginals,
        acceptance_rate=(accepted / proposals) if proposals else 1.0,
        exhausted=exhausted,
        samples_used=used,
        proposals=proposals,
        accepted=accepted,
        d_factor_fetches=evaluator.fetches,
    )


def _mh_reuse_verbatim(bundle, graph_after, sweeps):
    """Distribution unchanged: every proposal is accepted and no random
    number is drawn, so the stored worlds are replayed directly."""
    used = min(bundle.n_samples, sweeps)
    exhausted = used < sweeps
    marginals = {}
    if used:
        bits = np.unpackbits(bundle.samples[:used], axis=1,
                             count=len(bundle.var_ids), bitorder="little")
        freq = bits.mean(axis=0)
        lookup = {vid: freq[i] for i, vid in enumerate(bundle.var_ids)}
        for vid in graph_after.var_ids():
            role = graph_after.variables[vid].role
            if role == EV_POS:
                marginals[vid] = 1.0
            elif role == EV_NEG:
                marginals[vid] = 0.0
            else:
                marginals[vid] = float(lookup[vid])
    return MHResult(marginals=marginals, acceptance_rate=1.0,
                    exhausted=exhausted, samples_used=used,
                    proposals=max(0, used - 1), accepted=max(0, used - 1),
                    d_factor_fetches=0)


# -- spin moments -------------------------------------------------------------------


@dataclass
class CovarianceEstimate:
    var_ids: list  # free query variables, id order
    M: np.ndarray  # spin covariance, zeroed outside NZ
    NZ: set  # frozen pairs (i, j) of positions, i < j
    means: np.ndarray  # spin means


def _sample_spins(graph, bundle_samples, var_ids, free_ids):
    cols = {vid: i for i, vid in enumerate(var_ids)}
    bits = np.unpackbits(bundle_samples, axis=1, count=len(var_ids),
                         bitorder="little")
    take = [cols[vid] for vid in free_ids]
    x = bits[:, take].astype(np.float64)
    return 2.0 * x - 1.0


def nonzero_pairs(graph: FactorGraph, free_ids) -> set:
    """Positions (into free_ids) of variable pairs co-occurring in a factor."""
    pos = {vid: i for i, vid in enumerate(free_ids)}
    nz = set()
    for fac in graph.factors.values():
        members = sorted({pos[v] for v in fac.variables() if v in pos})
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                nz.add((members[a], members[b]))
    return nz


def estimate_spin_covariance(graph: FactorGraph, samples, var_ids) -> CovarianceEstimate:
    free_ids = graph.free_query_vars()
    spins = _sample_spins(graph, samples, var_ids, free_ids)
    n = spins.shape[0]
    if n < 2:
        raise IncfactorError("need at least 2 samples to estimate covariance")
    means = spins.mean(axis=0)
    ds = spins - means
    M = ds.T @ ds / n
    nz = nonzero_pairs(graph, free_ids)
    mask = np.zeros_like(M, dtype=bool)
    np.fill_diagonal(mask, True)
    for i, j in nz:
        mask[i, j] = mask[j, i] = True
    M = np.where(mask, M, 0.0)
    return CovarianceEstimate(free_ids, M, nz, means)


# -- box-constrained log-det solver ----------------------------------------------------


@dataclass
class SolverReport:
    iterations: int
    pg_norm: float
    duality_gap: float
    objective: float


def _project(X, center, lam, nz_mask, diag):
    Y = np.clip(X, center - lam, center + lam)
    Y[~nz_mask] = 0.0
    np.fill_diagonal(Y, diag)
    return (Y + Y.T) / 2.0


def _chol_logdet(X):
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return None
    return 2.0 * np.log(np.diag(L)).sum()


def solve_logdet_box(M, nz, lam, tol=1e-6, max_iter=10_000):
    """maximize log det X  s.t.  X_kk = M_kk + 1/3,  |X_kj - M_kj| <= lam on
    NZ pairs,  X_kj = 0 elsewhere.  Projected gradient ascent (gradient is
    X^-1) with backtracking that keeps the iterate positive definite.

    Returns (X, SolverReport); raises ConvergenceError with the last duality
    gap when the projected-gradient norm fails to reach tol."""
    k = M.shape[0]
    diag = np.diag(M) + 1.0 / 3.0
    nz_mask = np.zeros((k, k), dtype=bool)
    for i, j in nz:
        nz_mask[i, j] = nz_mask[j, i] = True
    center = np.where(nz_mask, M, 0.0)
    np.fill_diagonal(center, 0.0)

    X = _project(center.copy(), center, lam, nz_mask, diag)
    logdet = _chol_logdet(X)
    if logdet is None:
        # shrink off-diagonals toward zero until positive definite
        for t in np.linspace(1.0, 0.0, 21):
            cand = _project(center * t, center, lam, nz_mask, diag)
            logdet = _chol_logdet(cand)
            if logdet is not None:
                X = cand
                break
        if logdet is None:
            raise ConvergenceError(
                "no positive definite point found in the constraint box",
                duality_gap=math.inf)

    def dual_gap(X):
        theta = np.linalg.inv(X)
        mt = center + np.diag(diag)
        off = np.abs(theta * nz_mask)
        np.fill_diagonal(off, 0.0)
        return float((theta * mt).sum() - k + lam * off.sum())

    eta = 1.0
    pg = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        G = np.linalg.inv(X)
        G = (G + G.T) / 2.0
        pg = float(np.linalg.norm(_project(X + G, center, lam, nz_mask, diag) - X))
        if pg < tol:
            break
        moved = False
        step = eta
        while step > 1e-18:
            Y = _project(X + step * G, center, lam, nz_mask, diag)
            ld = _chol_logdet(Y)
            if ld is not None and ld >= logdet and np.linalg.norm(Y - X) > 0:
                X, logdet = Y, ld
                moved = True
                break
            step /= 2.0
        if not moved:
            break
        eta = min(step * 2.0, 1e3)
    else:
        raise ConvergenceError(
            f"projected gradient stalled after {max_iter} iterations "
            f"(pg norm {pg:.3e})", duality_gap=dual_gap(X))
    if pg >= tol:
        # loop exited via stall: report honestly
        raise ConvergenceError(
            f"projected gradient stalled at step underflow (pg norm {pg:.3e})",
            duality_gap=dual_gap(X))
    return X, SolverReport(it, pg, dual_gap(X), float(logdet))


# -- variational materialization ---------------------------------------------------------


# couplings below this are numerical zeros of the solver (pg tolerance is
# 1e-6); sampling noise in the moments sits orders of magnitude above it
PRECISION_ZERO_TOL = 1e-5


def build_pairwise_graph(graph: FactorGraph, est: CovarianceEstimate,
                         X: np.ndarray) -> FactorGraph:
    """Surrogate graph from the solved matrix: couplings are the negated
    off-diagonal entries of X^-1 (the estimated inverse covariance), unary
    weights invert the sample means with a mean-field correction so an
    independent graph is reproduced exactly."""
    theta = np.linalg.inv(X)
    k = theta.shape[0]
    couplings = {}
    for i, j in sorted(est.NZ):
        c = -theta[i, j]
        if abs(c) > PRECISION_ZERO_TOL:
            couplings[(i, j)] = c

    n_samp_guard = 1e-9
    mu = np.clip(est.means, -1.0 + n_samp_guard, 1.0 - n_samp_guard)
    h = np.arctanh(mu)
    for (i, j), c in couplings.items():
        h[i] -= c * mu[j]
        h[j] -= c * mu[i]

    approx = FactorGraph()
    for vid in graph.var_ids():
        var = graph.variables[vid]
        approx.add_variable(var.relation, var.values, var.role, id=vid)
    # one pairwise factor per nonzero coupling: weight 2c on head=i with
    # grounding [j], which contributes c*s_i*s_j once c is folded out of
    # the unary term below
    unary = {i: h[i] for i in range(k)}
    for (i, j), c in sorted(couplings.items()):
        unary[i] -= c
    for i in range(k):
        vid = est.var_ids[i]
        w = approx.add_weight(float(unary[i]), True, key=("approx_unary", (str(vid),)))
        approx.add_factor("approx_unary", vid, [[]], w.id, LINEAR)
    for (i, j), c in sorted(couplings.items()):
        vi, vj = est.var_ids[i], est.var_ids[j]
        w = approx.add_weight(2.0 * float(c), True,
                              key=("approx_pair", (str(vi), str(vj))))
        approx.add_factor("approx_pair", vi, [[(vj, True)]], w.id, LINEAR)
    return approx


def materialize_variational(graph: FactorGraph, n_samples, lam, seed=0,
                            burn_in=200, thin=4, samples=None, var_ids=None,
                            tol=1e-6, max_iter=10_000):
    """Algorithm: draw N Gibbs worlds, estimate the spin covariance zeroed
    outside co-occurring pairs, solve the box-constrained log-det problem,
    emit one pairwise factor per nonzero inverse-covariance entry plus one
    unary factor per variable.

    Returns (approx_graph, CovarianceEstimate, X, SolverReport)."""
    if lam <= 0:
        raise IncfactorError("lambda must be positive")
    if samples is None:
        if n_samples is None or n_samples < 2:
            raise IncfactorError("need at least 2 samples for the approximation")
        bundle = materialize_samples(graph, n_samples=n_samples, seed=seed,
                                     burn_in=burn_in, thin=thin)
        samples, var_ids = bundle.samples, bundle.var_ids
    elif samples.shape[0] < 2:
        raise IncfactorError("need at least 2 samples for the approximation")
    est = estimate_spin_covariance(graph, samples, var_ids)
    if est.M.shape[0] == 0:
        return build_pairwise_graph(graph, est, np.zeros((0, 0))), est, \
            np.zeros((0, 0)), SolverReport(0, 0.0, 0.0, 0.0)
    X, report = solve_logdet_box(est.M, est.NZ, lam, tol=tol, max_iter=max_iter)
    return build_pairwise_graph(graph, est, X), est, X, report


# -- KL divergence ----------------------------------------------------------------------


def kl_exact(p_graph: FactorGraph, q_graph: FactorGraph, cap=ENUMERATION_CAP) -> float:
    """KL(p || q) by enumeration; both graphs must share variables/roles."""
    p_free, Wp = enumerate_log_weights(p_graph, cap)
    q_free, Wq = enumerate_log_weights(q_graph, cap)
    if p_free != q_free:
        raise IncfactorError("graphs do not share a free-variable set")
    lp = Wp - _logsumexp(Wp)
    lq = Wq - _logsumexp(Wq)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def kl_from_samples(p_graph, q_graph, samples, var_ids):
    """KL(p || q) estimated from stored p-samples:
    mean(Wp - Wq) + log mean(exp(Wq - Wp)); returns (estimate, stderr)."""
    bits = np.unpackbits(samples, axis=1, count=len(var_ids), bitorder="little")
    values = bits.astype(bool)
    col = {vid: i for i, vid in enumerate(var_ids)}
    Wp = _log_weights_for(p_graph, values, col)
    Wq = _log_weights_for(q_graph, values, col)
    d = Wp - Wq
    n = d.shape[0]
    ratio = Wq - Wp
    shift = ratio.max()
    log_mean_ratio = shift + np.log(np.mean(np.exp(ratio - shift)))
    est = float(d.mean() + log_mean_ratio)
    return est, float(d.std(ddof=1) / math.sqrt(n))


def _log_weights_for(graph, values, col):
    n_worlds = values.shape[0]
    W = np.zeros(n_worlds)
    for fac in graph.factors.values():
        n = np.zeros(n_worlds, dtype=np.int64)
        for grounding in fac.groundings:
            if not grounding:
                n += 1
                continue
            sat = np.ones(n_worlds, dtype=bool)
            for vid, sign in grounding:
                sat &= values[:, col[vid]] == sign
            n += sat
        if fac.g_kind == "linear":
            g = n.astype(np.float64)
        elif fac.g_kind == "ratio":
            g = np.log1p(n.astype(np.float64))
        else:
            g = (n > 0).astype(np.float64)
        sign = 1.0 if fac.head is None else np.where(values[:, col[fac.head]], 1.0, -1.0)
        W += graph.weights[fac.weight_ref].value * sign * g
    return W


def _logsumexp(x):
    m = x.max()
    return m + np.log(np.exp(x - m).sum())


# -- lambda search ------------------------------------------------------------------------


def select_lambda(graph: FactorGraph, kl_threshold, n_samples, seed=0,
                  ladder=LAMBDA_LADDER, burn_in=200, thin=4,
                  cap=ENUMERATION_CAP):
    """Climb the regularization ladder from its smallest value, multiplying
    by 10, and return the last lambda whose KL(original || approx) stays
    within the threshold."""
    if kl_threshold <= 0:
        raise IncfactorError("KL threshold must be positive")
    bundle = materialize_samples(graph, n_samples=n_samples, seed=seed,
                                 burn_in=burn_in, thin=thin)
    chosen = None
    kls = {}
    for lam in ladder:
        approx, _est, _X, _rep = materialize_variational(
            graph, None, lam, samples=bundle.samples, var_ids=bundle.var_ids)
        if len(graph.free_query_vars()) <= cap:
            kl = kl_exact(graph, approx, cap)
        else:
            kl, _se = kl_from_samples(graph, approx, bundle.samples, bundle.var_ids)
        kls[lam] = kl
        if kl > kl_threshold:
            break
        chosen = lam
    if chosen is None:
        raise LambdaSearchError(
            f"KL {kls[ladder[0]]:.4f} at lambda={ladder[0]} already exceeds "
            f"threshold {kl_threshold}; rerun inference from scratch instead")
    return chosen, kls


# -- variational inference phase -----------------------------------------------------------


def splice_delta(approx_graph: FactorGraph, delta: UpdateDelta,
                 graph_after: FactorGraph) -> FactorGraph:
    """Apply an update to the surrogate graph.  New variables and factors
    enter in their original form; changes to factors the surrogate absorbed
    are expressed as additive correction factors carrying the weight
    difference, so the spliced graph represents approx(old) * exp(D)."""
    g = approx_graph.copy()
    for vid, var in sorted(delta.new_vars.items()):
        g.add_variable(var.relation, var.values, var.role, id=vid)
    for vid, (_old, new_role) in delta.evidence_changes.items():
        if vid in g.variables:
            g.set_role(vid, new_role)

    # original factor/weight ids may collide with the surrogate's own ids,
    # so every spliced factor gets a fresh weight carrying the right value
    def fresh_weight(value, tag):
        return g.add_weight(value, True, key=("splice", (tag,))).id

    for fid, fac in sorted(delta.new_factors.items()):
        g.add_factor(fac.rule, fac.head, fac.groundings,
                     fresh_weight(graph_after.weights[fac.weight_ref].value,
                                  f"nf{fid}"),
                     fac.g_kind)
    for fid, fac in sorted(delta.removed_factors.items()):
        if all(v in g.variables for v in fac.variables()):
            if fac.weight_ref in delta.weight_changes:
                old_w = delta.weight_changes[fac.weight_ref][0]
            elif fac.weight_ref in delta.removed_weights:
                old_w = delta.removed_weights[fac.weight_ref].value
            else:
                old_w = graph_after.weights[fac.weight_ref].value
            wid = fresh_weight(-old_w, f"rm{fid}")
            g.add_factor(fac.rule, fac.head, fac.groundings, wid, fac.g_kind)
    for fid, (old, new) in sorted(delta.modified_factors.items()):
        old_w = delta.weight_changes.get(old.weight_ref,
                                         (graph_after.weights[old.weight_ref].value,))[0]
        new_w = graph_after.weights[new.weight_ref].value
        g.add_factor(old.rule, old.head, old.groundings,
                     fresh_weight(-old_w, f"mo{fid}"), old.g_kind)
        g.add_factor(new.rule, new.head, new.groundings,
                     fresh_weight(new_w, f"mn{fid}"), new.g_kind)
    for wid, (old_w, new_w) in sorted(delta.weight_changes.items()):
        dv = new_w - old_w
        if dv == 0.0:
            continue
        for fid, fac in sorted(graph_after.factors.items()):
            if fac.weight_ref != wid:
                continue
            if fid in delta.new_factors or fid in delta.modified_factors:
                continue
            g.add_factor(fac.rule, fac.head, fac.groundings,
                         fresh_weight(dv, f"wc{fid}"), fac.g_kind)
    return g


def variational_infer(bundle: MaterializationBundle, delta: UpdateDelta,
                      sweeps, graph_after: FactorGraph, seed=0, burn_in=None,
                      chains=2):
    """Splice the update into the stored surrogate graph and run Gibbs."""
    if bundle.approx_graph is None:
        raise BundleError("bundle holds no variational approximation")
    spliced = splice_delta(bundle.approx_graph, delta, graph_after)
    if burn_in is None:
        burn_in = max(1, sweeps // 10)
    result = run_gibbs(spliced, GibbsConfig(sweeps=sweeps, burn_in=burn_in,
                                            chains=chains, seed=seed))
    marginals = {vid: p for vid, p in result.marginals.items()
                 if vid in graph_after.variables}
    for vid in graph_after.var_ids():
        role = graph_after.variables[vid].role
        if role == EV_POS:
            marginals[vid] = 1.0
        elif role == EV_NEG:
            marginals[vid] = 0.0
    return marginals, result


# -- bundle I/O ------------------------------------------------------------------------------


def save_bundle(bundle: MaterializationBundle, path):
    os.makedirs(path, exist_ok=True)
    write_sample_log(os.path.join(path, "samples.bin"), len(bundle.var_ids),
                     bundle.samples)
    if bundle.approx_graph is not None:
        from .graph import write_graph
        write_graph(bundle.approx_graph, os.path.join(path, "approx.jsonl"))
    meta = {
        "n_samples": bundle.n_samples,
        "seed": bundle.seed,
        "thin": bundle.thin,
        "burn_in": bundle.burn_in,
        "lambda": bundle.lam,
        "fingerprint": bundle.fingerprint,
        "var_ids": bundle.var_ids,
        "solver": bundle.solver_meta,
    }
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bundle(path) -> MaterializationBundle:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise BundleError(f"{path}: not a bundle directory (missing meta.json)")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    n_vars, samples = read_sample_log(os.path.join(path, "samples.bin"))
    if n_vars != len(meta["var_ids"]):
        raise BundleError(f"{path}: sample log does not match meta var_ids")
    approx = None
    approx_path = os.path.join(path, "approx.jsonl")
    if os.path.exists(approx_path):
        from .graph import read_graph
        approx = read_graph(approx_path)
    return MaterializationBundle(
        var_ids=list(meta["var_ids"]),
        samples=samples,
        seed=meta["seed"],
        thin=meta["thin"],
        burn_in=meta["burn_in"],
        fingerprint=meta["fingerprint"],
        approx_graph=approx,
        lam=meta.get("lambda"),
        solver_meta=meta.get("solver", {}),
    )
