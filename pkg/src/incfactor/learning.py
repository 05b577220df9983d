"""Weight learning: stochastic gradient ascent on the evidence likelihood.

The gradient of log Pr[evidence] for exponential-family weights is the
clamped feature expectation minus the free one, where the feature of
weight k in a world is the summed sign * g(n) over the factors tied to k.
Gradient samples come from persistent Gibbs chains (one clamped to the
evidence, one with the evidence released) that survive across epochs.

The recorded loss is the negative log-pseudo-likelihood of the evidence
variables given their Markov blankets, computed exactly for one
completion world drawn from the clamped chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, IncfactorError
from .graph import (EV_NEG, EV_POS, QUERY, FactorGraph, g_eval,
                    satisfied_groundings)
from .inference import GraphArrays, chain_rng

STEP_GRID = (1.0, 0.1, 0.01, 0.001, 0.0001)


@dataclass
class RandomInit:
    seed: int = 0
    scale: float = 0.1


@dataclass
class Warmstart:
    weights: dict  # wid -> value


@dataclass
class TrainConfig:
    step_sizes: tuple = STEP_GRID
    epochs: int = 30
    gradient_samples: int = 20  # worlds per expectation per epoch
    pcd_sweeps: int = 2  # sweeps between collected worlds
    chains: int = 2
    seed: int = 0
    init: object = field(default_factory=RandomInit)
    l2: float = 0.0  # optional ridge penalty on learnable weights

    def __post_init__(self):
        if not self.step_sizes:
            raise IncfactorError("step-size grid must be non-empty")
        if self.epochs < 1:
            raise IncfactorError("need at least one epoch")


@dataclass
class TrainResult:
    weights: dict  # wid -> value (all weights, fixed included)
    loss_trace: list  # (epoch, step_size, loss)
    best_step_size: float
    diverged: dict  # step size -> error message


def released_graph(graph: FactorGraph) -> FactorGraph:
    """Copy with every evidence variable turned back into a query variable."""
    g = graph.copy()
    for vid, var in g.variables.items():
        if var.role != QUERY:
            g.set_role(vid, QUERY)
    return g


def _weight_slots(graph):
    wids = sorted(graph.weights)
    return wids, {wid: i for i, wid in enumerate(wids)}


def _phi_matrix(graph: FactorGraph, values, col, wpos):
    """Feature vectors for a batch of worlds: phi[world, k] = sum over
    factors tied to weight k of sign * g(n)."""
    n_worlds = values.shape[0]
    phi = np.zeros((n_worlds, len(wpos)))
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
        phi[:, wpos[fac.weight_ref]] += sign * g
    return phi


def feature_expectation(graph: FactorGraph, weights, clamp_evidence, samples,
                        var_ids=None):
    """Average feature vector over sample worlds drawn at the given weights
    (clamped to evidence or free, per the flag the sampler used).

    samples: (N, |V|) boolean value matrix or a list of world dicts.
    Returns (wids, expectation vector).  The feature map itself does not
    depend on the weight values; they only define the sampling
    distribution, so `weights` is accepted for the contract and unused.
    """
    del weights, clamp_evidence
    wids, wpos = _weight_slots(graph)
    ids = var_ids if var_ids is not None else graph.var_ids()
    col = {vid: i for i, vid in enumerate(ids)}
    if isinstance(samples, np.ndarray):
        values = samples.astype(bool)
    else:
        values = np.array([[w[vid] for vid in ids] for w in samples], dtype=bool)
    if values.size == 0:
        return wids, np.zeros(len(wids))
    phi = _phi_matrix(graph, values, col, wpos)
    return wids, phi.mean(axis=0)


# -- exact quantities (enumeration; the oracle for gradient checks) -------------


def exact_expectation_and_logz(graph: FactorGraph, cap=20):
    """(wids, E[phi], log Z) over all evidence-respecting worlds."""
    from .graph import _world_matrix

    free_ids = graph.free_query_vars()
    if len(free_ids) > cap:
        raise IncfactorError("graph too large for exact expectations")
    values, col = _world_matrix(graph, free_ids)
    wids, wpos = _weight_slots(graph)
    phi = _phi_matrix(graph, values, col, wpos)
    w = np.array([graph.weights[wid].value for wid in wids])
    W = phi @ w
    m = W.max()
    logz = m + math.log(np.exp(W - m).sum())
    p = np.exp(W - logz)
    return wids, p @ phi, logz


def exact_log_likelihood(graph: FactorGraph, cap=20) -> float:
    """log Pr[evidence] = log Z_clamped - log Z_free at the graph weights."""
    _, _, logz_clamped = exact_expectation_and_logz(graph, cap)
    _, _, logz_free = exact_expectation_and_logz(released_graph(graph), cap)
    return logz_clamped - logz_free


def exact_gradient(graph: FactorGraph, cap=20):
    wids, e_clamped, _ = exact_expectation_and_logz(graph, cap)
    _, e_free, _ = exact_expectation_and_logz(released_graph(graph), cap)
    return wids, e_clamped - e_free


# -- pseudo-likelihood loss -------------------------------------------------------


def _conditional_logit(graph, weight_values, world, vid):
    logit = 0.0
    w1 = dict(world)
    w0 = dict(world)
    w1[vid] = True
    w0[vid] = False
    for fid in graph.adjacent_factors(vid):
        fac = graph.factors[fid]
        w = weight_values[fac.weight_ref]
        for wx, sgn in ((w1, 1.0), (w0, -1.0)):
            head_sign = 1.0 if fac.head is None else (1.0 if wx[fac.head] else -1.0)
            logit += sgn * w * head_sign * g_eval(
                fac.g_kind, satisfied_groundings(fac, wx))
    return logit


def estimate_loss(graph: FactorGraph, weights, completion) -> float:
    """Negative log-pseudo-likelihood of the evidence variables given their
    Markov blankets, exact for the given completion world."""
    weight_values = {
        wid: (w.value if hasattr(w, "value") else float(w))
        for wid, w in weights.items()}
    evidence = [(vid, var.role == EV_POS)
                for vid, var in sorted(graph.variables.items())
                if var.role in (EV_POS, EV_NEG)]
    if not evidence:
        raise IncfactorError("no evidence variables: loss undefined")
    world = dict(completion)
    for vid, val in evidence:
        world[vid] = val
    total = 0.0
    for vid, val in evidence:
        logit = _conditional_logit(graph, weight_values, world, vid)
        # -log P(v = val | blanket); logit is for v = True
        z = logit if val else -logit
        total += math.log1p(math.exp(-z)) if z > -500 else -z
    return total / len(evidence)


# -- persistent-chain SGD -----------------------------------------------------------


class _Chain:
    def __init__(self, graph, seed, stream):
        self.arrays = GraphArrays(graph)
        self.rng = chain_rng(seed, stream)
        self.state = self.arrays.init_state(self.rng)
        self.trash = np.zeros(len(self.arrays.ids), dtype=np.int64)

    def set_weights(self, weight_values):
        for i, wid in enumerate(self.arrays.wids):
            self.arrays.weights[i] = weight_values[wid]

    def collect(self, n_worlds, sweeps_between):
        q = self.arrays.query.size
        worlds = np.zeros((n_worlds, len(self.arrays.ids)), dtype=bool)
        for k in range(n_worlds):
            if q:
                u = self.rng.random(sweeps_between * q)
                self.arrays.run_block(self.state, u, sweeps_between, self.trash)
            worlds[k] = self.state[0].astype(bool)
        return worlds


def sgd_train(graph: FactorGraph, config: TrainConfig) -> TrainResult:
    """Grid-searched stochastic gradient ascent; the best step size by
    final loss wins.  A diverging step size is recorded and skipped; if
    every size diverges the error names them."""
    learnable = [wid for wid, w in sorted(graph.weights.items()) if not w.fixed]
    if not learnable:
        raise IncfactorError("no learnable weights in the graph")
    if not any(v.role != QUERY for v in graph.variables.values()):
        raise IncfactorError("no evidence to learn from")

    base_values = {wid: w.value for wid, w in graph.weights.items()}
    if isinstance(config.init, Warmstart):
        init_values = dict(base_values)
        init_values.update(config.init.weights)
    else:
        rng = chain_rng(config.init.seed, 0xBEEF)
        init_values = dict(base_values)
        for wid in learnable:
            init_values[wid] = float(rng.uniform(-config.init.scale,
                                                 config.init.scale))

    free = released_graph(graph)
    trace = []
    best = None
    diverged = {}
    for step in config.step_sizes:
        try:
            weights, losses = _train_one(graph, free, learnable, init_values,
                                         step, config)
        except DivergenceError as exc:
            diverged[step] = str(exc)
            continue
        trace.extend((epoch, step, loss) for epoch, loss in enumerate(losses))
        if best is None or losses[-1] < best[0]:
            best = (losses[-1], step, weights)
    if best is None:
        raise DivergenceError(tuple(diverged))
    return TrainResult(weights=best[2], loss_trace=trace,
                       best_step_size=best[1], diverged=diverged)


def _train_one(graph, free_graph, learnable, init_values, step, config):
    values = dict(init_values)
    clamped = _Chain(graph, config.seed, 0xC1A)
    released = _Chain(free_graph, config.seed, 0xF3EE)
    per_chain = max(1, config.gradient_samples // config.chains)
    wids, wpos = _weight_slots(graph)
    ids = clamped.arrays.ids
    col = {vid: i for i, vid in enumerate(ids)}

    losses = []

    def record_loss():
        completion = {vid: bool(clamped.state[0][i]) for i, vid in enumerate(ids)}
        loss = estimate_loss(graph, values, completion)
        if config.l2:
            loss += config.l2 * sum(values[w] ** 2 for w in learnable)
        if not math.isfinite(loss):
            raise DivergenceError(step)
        losses.append(loss)

    clamped.set_weights(values)
    released.set_weights(values)
    record_loss()  # epoch 0: loss at the initial weights
    for _epoch in range(config.epochs):
        clamped.set_weights(values)
        released.set_weights(values)
        grad = np.zeros(len(wids))
        for chain, sign in ((clamped, 1.0), (released, -1.0)):
            worlds = chain.collect(per_chain * config.chains, config.pcd_sweeps)
            phi = _phi_matrix(graph if sign > 0 else free_graph, worlds, col, wpos)
            grad += sign * phi.mean(axis=0)
        for wid in learnable:
            g = grad[wpos[wid]] - 2.0 * config.l2 * values[wid]
            values[wid] += step * g
            if not math.isfinite(values[wid]):
                raise DivergenceError(step)
        record_loss()
    return values, losses


# -- CSV writers ----------------------------------------------------------------------


def write_weights_csv(path, graph: FactorGraph, weights: dict):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("param_id,description,value\n")
        for wid in sorted(weights):
            desc = graph.weights[wid].description if wid in graph.weights else f"w{wid}"
            fh.write("%d,%s,%.10g\n" % (wid, desc, weights[wid]))


def read_weights_csv(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("param_id"):
            raise IncfactorError(f"{path}: not a weights CSV")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            out[int(parts[0])] = float(parts[-1])
    return out


def write_loss_trace_csv(path, trace):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,step_size,loss\n")
        for epoch, step, loss in trace:
            fh.write("%d,%.10g,%.10g\n" % (epoch, step, loss))
