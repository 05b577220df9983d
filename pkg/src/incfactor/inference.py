"""Gibbs sampling over factor graphs, plus the convergence harness.

Determinism contract: randomness comes from numpy's Philox counter-based
generator.  A run is keyed by (seed, chain index) -- chain c uses
``Philox(key=[seed, c])`` -- and every sweep consumes exactly one uniform
per query variable in ascending variable-id order, so identical (seed,
config) reproduce bit-identical sample logs on any platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import IncfactorError
from .graph import (EV_NEG, EV_POS, QUERY, FactorGraph, factor_weight,
                    g_eval)
from .rules import LINEAR, LOGICAL, RATIO

_G_CODE = {LINEAR: kernels.G_LINEAR, RATIO: kernels.G_RATIO,
           LOGICAL: kernels.G_LOGICAL}
_ROLE_CODE = {QUERY: 0, EV_POS: 1, EV_NEG: 2}

SAMPLE_MAGIC = b"IFSAMP01"


def chain_rng(seed, chain):
    """Portable per-chain stream: Philox keyed by (seed, chain)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, chain & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# -- flattened graph -----------------------------------------------------------


class GraphArrays:
    """CSR flattening of a FactorGraph for the numba kernels."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        self.ids = graph.var_ids()
        self.pos = {vid: i for i, vid in enumerate(self.ids)}
        n = len(self.ids)
        self.roles = np.array(
            [_ROLE_CODE[graph.variables[vid].role] for vid in self.ids],
            dtype=np.int8)
        self.query = np.array(
            [i for i, vid in enumerate(self.ids)
             if graph.variables[vid].role == QUERY], dtype=np.int32)

        self.wids = sorted(graph.weights)
        wpos = {wid: i for i, wid in enumerate(self.wids)}
        self.weights = np.array(
            [graph.weights[wid].value for wid in self.wids], dtype=np.float64)

        self.fids = sorted(graph.factors)
        m = len(self.fids)
        self.fac_head = np.empty(m, dtype=np.int32)
        self.fac_wref = np.empty(m, dtype=np.int32)
        self.fac_g = np.empty(m, dtype=np.int8)

        glit_ptr = [0]
        glit_var = []
        glit_sign = []
        grd_fac = []
        vlits = [{} for _ in range(n)]  # grounding -> [mismatches at 0, at 1]
        vheads = [[] for _ in range(n)]
        for fi, fid in enumerate(self.fids):
            fac = graph.factors[fid]
            self.fac_head[fi] = self.pos[fac.head] if fac.head is not None else -1
            self.fac_wref[fi] = wpos[fac.weight_ref]
            self.fac_g[fi] = _G_CODE[fac.g_kind]
            if fac.head is not None:
                vheads[self.pos[fac.head]].append(fi)
            for grounding in fac.groundings:
                gi = len(grd_fac)
                grd_fac.append(fi)
                for vid, sign in grounding:
                    p = self.pos[vid]
                    glit_var.append(p)
                    glit_sign.append(1 if sign else 0)
                    mm = vlits[p].setdefault(gi, [0, 0])
                    # literal unsatisfied when the value differs from its sign
                    mm[0] += 1 if sign else 0
                    mm[1] += 0 if sign else 1
                glit_ptr.append(len(glit_var))
        self.grd_fac = np.array(grd_fac, dtype=np.int32)
        self.glit_ptr = np.array(glit_ptr, dtype=np.int32)
        self.glit_var = np.array(glit_var, dtype=np.int32)
        self.glit_sign = np.array(glit_sign, dtype=np.uint8)

        self.vlit_ptr = np.zeros(n + 1, dtype=np.int32)
        self.vhead_ptr = np.zeros(n + 1, dtype=np.int32)
        vlit_grd = []
        vlit_m0 = []
        vlit_m1 = []
        vhead_fac = []
        for i in range(n):
            for gi in sorted(vlits[i]):
                m0, m1 = vlits[i][gi]
                vlit_grd.append(gi)
                vlit_m0.append(m0)
                vlit_m1.append(m1)
            self.vlit_ptr[i + 1] = len(vlit_grd)
            vhead_fac.extend(vheads[i])
            self.vhead_ptr[i + 1] = len(vhead_fac)
        self.vlit_grd = np.array(vlit_grd, dtype=np.int32)
        self.vlit_m0 = np.array(vlit_m0, dtype=np.int32)
        self.vlit_m1 = np.array(vlit_m1, dtype=np.int32)
        self.vhead_fac = np.array(vhead_fac, dtype=np.int32)

        # scratch (shared across sequential chains)
        self.cnt_cur = np.zeros(m, dtype=np.int32)
        self.cnt0 = np.zeros(m, dtype=np.int32)
        self.cnt1 = np.zeros(m, dtype=np.int32)
        self.touched_flag = np.zeros(m, dtype=np.bool_)
        self.touched_list = np.zeros(max(m, 1), dtype=np.int32)

    # -- per-chain state -----------------------------------------------

    def fixed_values(self):
        values = np.zeros(len(self.ids), dtype=np.uint8)
        values[self.roles == 1] = 1
        return values

    def init_state(self, rng=None, values=None):
        if values is None:
            values = self.fixed_values()
            if rng is not None and self.query.size:
                values[self.query] = (rng.random(self.query.size) < 0.5).astype(np.uint8)
        else:
            values = values.astype(np.uint8).copy()
            values[self.roles == 1] = 1
            values[self.roles == 2] = 0
        grd_unsat = np.zeros(self.grd_fac.shape[0], dtype=np.int32)
        fac_nsat = np.zeros(len(self.fids), dtype=np.int32)
        kernels.init_counts(values, self.glit_ptr, self.glit_var, self.glit_sign,
                            self.grd_fac, grd_unsat, fac_nsat)
        return values, grd_unsat, fac_nsat

    def run_block(self, state, uniforms, n_sweeps, counts,
                  trace_positions=None, trace_out=None, trace_offset=0):
        values, grd_unsat, fac_nsat = state
        if trace_positions is None:
            trace_positions = np.empty(0, dtype=np.int32)
            trace_out = np.empty((0, 0), dtype=np.uint8)
        return kernels.gibbs_block(
            values, self.query, self.fac_head, self.fac_wref, self.fac_g,
            fac_nsat, self.weights, self.grd_fac, grd_unsat,
            self.vlit_ptr, self.vlit_grd, self.vlit_m0, self.vlit_m1,
            self.vhead_ptr, self.vhead_fac, uniforms, n_sweeps, counts,
            trace_positions, trace_out, trace_offset,
            self.cnt_cur, self.cnt0, self.cnt1,
            self.touched_flag, self.touched_list)

    def conditional(self, state, vid):
        values, grd_unsat, fac_nsat = state
        logit = kernels.conditional_logit(
            self.pos[vid], values, self.fac_head, self.fac_wref, self.fac_g,
            fac_nsat, self.weights, self.grd_fac, grd_unsat,
            self.vlit_ptr, self.vlit_grd, self.vlit_m0, self.vlit_m1,
            self.vhead_ptr, self.vhead_fac,
            self.cnt_cur, self.cnt0, self.cnt1,
            self.touched_flag, self.touched_list)
        return 1.0 / (1.0 + np.exp(-logit))

    def pack_world(self, values):
        return np.packbits(values, bitorder="little")

    def unpack_world(self, row):
        return np.unpackbits(row, count=len(self.ids), bitorder="little")


# -- reference conditional (python path, used as the kernel's oracle) ----------


def gibbs_conditional(graph: FactorGraph, world, var) -> float:
    """P(var = 1 | rest of world) from the factors adjacent to var."""
    if graph.variables[var].role != QUERY:
        raise IncfactorError(f"variable {var} is evidence; it has no conditional")
    logit = 0.0
    w1 = dict(world)
    w0 = dict(world)
    w1[var] = True
    w0[var] = False
    for fid in graph.adjacent_factors(var):
        fac = graph.factors[fid]
        logit += factor_weight(fac, w1, graph.weights) - \
            factor_weight(fac, w0, graph.weights)
    return 1.0 / (1.0 + np.exp(-logit))


# -- run_gibbs -------------------------------------------------------------------


@dataclass
class GibbsConfig:
    sweeps: int
    burn_in: int = 0
    chains: int = 1
    seed: int = 0
    thin: int = 0  # record every thin-th post-burn-in world; 0 = no sample log
    trace_vars: tuple = ()
    block: int = 4096


@dataclass
class GibbsResult:
    marginals: dict
    samples: np.ndarray | None  # (N, ceil(|V|/8)) packed worlds, id order
    traces: dict  # vid -> (chains, kept_sweeps) uint8 matrix of raw values
    counts: dict
    kept_sweeps: int
    chains: int
    factor_fetches: int
    var_ids: list

    def trace_running_mean(self, vid):
        """Pooled running-mean estimate of vid's marginal per sweep."""
        raw = self.traces[vid].astype(np.float64)
        csum = raw.cumsum(axis=1).sum(axis=0)
        denom = np.arange(1, raw.shape[1] + 1, dtype=np.float64) * raw.shape[0]
        return csum / denom


def run_gibbs(graph: FactorGraph, config: GibbsConfig) -> GibbsResult:
    if config.burn_in < 0 or config.sweeps <= config.burn_in:
        raise IncfactorError("need sweeps > burn_in >= 0")
    arrays = GraphArrays(graph)
    return run_gibbs_arrays(arrays, config)


def run_gibbs_arrays(arrays: GraphArrays, config: GibbsConfig) -> GibbsResult:
    graph = arrays.graph
    kept = config.sweeps - config.burn_in
    n = len(arrays.ids)
    q = arrays.query.size
    trace_positions = np.array([arrays.pos[v] for v in config.trace_vars],
                               dtype=np.int32)
    counts = np.zeros(n, dtype=np.int64)
    trash = np.zeros(n, dtype=np.int64)
    fetches = 0
    samples = []
    traces = np.zeros((len(config.trace_vars), config.chains, kept), dtype=np.uint8) \
        if config.trace_vars else None

    for c in range(config.chains):
        rng = chain_rng(config.seed, c)
        state = arrays.init_state(rng)
        if q == 0:
            if config.thin:
                for _ in range(0, kept, config.thin):
                    samples.append(arrays.pack_world(state[0]))
            continue
        done = 0
        while done < config.burn_in:
            step = min(config.block, config.burn_in - done)
            u = rng.random(step * q)
            fetches += arrays.run_block(state, u, step, trash)
            done += step
        done = 0
        trace_out = np.zeros((kept, len(config.trace_vars)), dtype=np.uint8) \
            if config.trace_vars else None
        while done < kept:
            if config.thin:
                step = min(config.thin, kept - done)
            else:
                step = min(config.block, kept - done)
            u = rng.random(step * q)
            if trace_out is not None:
                fetches += arrays.run_block(state, u, step, counts,
                                            trace_positions, trace_out, done)
            else:
                fetches += arrays.run_block(state, u, step, counts)
            done += step
            if config.thin and done % config.thin == 0:
                samples.append(arrays.pack_world(state[0]))
        if trace_out is not None:
            for ti in range(len(config.trace_vars)):
                traces[ti, c, :] = trace_out[:, ti]

    denom = float(kept * config.chains)
    marginals = {}
    counts_out = {}
    for i, vid in enumerate(arrays.ids):
        role = graph.variables[vid].role
        if role == EV_POS:
            marginals[vid] = 1.0
        elif role == EV_NEG:
            marginals[vid] = 0.0
        else:
            marginals[vid] = counts[i] / denom
        counts_out[vid] = int(counts[i])
    return GibbsResult(
        marginals=marginals,
        samples=np.array(samples, dtype=np.uint8) if samples else None,
        traces={vid: traces[ti] for ti, vid in enumerate(config.trace_vars)}
        if traces is not None else {},
        counts=counts_out,
        kept_sweeps=kept,
        chains=config.chains,
        factor_fetches=int(fetches),
        var_ids=list(arrays.ids),
    )


# -- convergence harness ---------------------------------------------------------


@dataclass
class ConvergenceResult:
    sweeps: int | None
    exhausted: bool
    estimate: float
    target: float


def sweeps_to_epsilon(graph: FactorGraph, target, epsilon, max_sweeps,
                      var=None, seed=0, window=64, chains=1) -> ConvergenceResult:
    """First sweep at which the running marginal estimate of `var` enters
    and stays within epsilon of the target for `window` consecutive sweeps."""
    if var is None:
        free = graph.free_query_vars()
        if not free:
            raise IncfactorError("no query variable to trace")
        var = free[0]
    if isinstance(target, dict):
        target = target[var]
    config = GibbsConfig(sweeps=max_sweeps, burn_in=0, chains=chains,
                         seed=seed, trace_vars=(var,))
    result = run_gibbs(graph, config)
    means = result.trace_running_mean(var)
    ok = np.abs(means - target) <= epsilon
    window = min(window, max_sweeps)
    for t in np.flatnonzero(ok):
        if t + window <= len(ok) and ok[t:t + window].all():
            return ConvergenceResult(int(t) + 1, False, float(means[-1]), target)
    return ConvergenceResult(None, True, float(means[-1]), target)


# -- sample log (bit-packed binary) -----------------------------------------------


def write_sample_log(path, n_vars, worlds: np.ndarray):
    """Header: magic, |V| and N as little-endian uint64; then one
    ceil(|V|/8)-byte row per world, variables in id order, bit k of byte b
    holding variable position 8*b + k."""
    worlds = np.asarray(worlds, dtype=np.uint8)
    n_bytes = (n_vars + 7) // 8
    if worlds.size and worlds.shape[1] != n_bytes:
        raise IncfactorError("world rows do not match variable count")
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<QQ", n_vars, worlds.shape[0] if worlds.size else 0))
        fh.write(worlds.tobytes())


def read_sample_log(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != SAMPLE_MAGIC:
            raise IncfactorError(f"{path}: not a sample log")
        n_vars, n_worlds = struct.unpack("<QQ", fh.read(16))
        n_bytes = (n_vars + 7) // 8
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != n_worlds * n_bytes:
        raise IncfactorError(f"{path}: truncated sample log")
    return int(n_vars), data.reshape(n_worlds, n_bytes).copy()


# -- marginal CSV ------------------------------------------------------------------


def write_marginals_csv(path, graph: FactorGraph, marginals: dict):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("var_id,relation,tuple,probability\n")
        for vid in sorted(marginals):
            var = graph.variables[vid]
            fh.write("%d,%s,%s,%.6f\n" % (
                vid, var.relation, "|".join(var.values), marginals[vid]))


def calibration_buckets(marginals) -> list:
    """Counts per 0.1-wide probability bucket; 1.0 lands in the last."""
    counts = [0] * 10
    for p in marginals:
        counts[min(int(p * 10), 9)] += 1
    return counts
