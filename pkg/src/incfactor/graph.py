"""Factor-graph data model, world weights, and the enumeration oracle.

A factor groups the groundings of one expanded Boolean rule.  Its weight
in a world is ``w * sign * g(n)`` where ``sign`` is +1 when the head
variable is true (+1 when there is no head), ``n`` is the number of
satisfied groundings, and ``g`` is the rule's counting semantics:

    linear   g(n) = n
    ratio    g(n) = log(1 + n)
    logical  g(n) = 1 if n > 0 else 0

World probabilities are ``Pr[I] = exp(W(I)) / Z`` with ``W`` the sum of
factor weights, ``Z`` summed over worlds that contain every positive
evidence variable and no negative one.

Variable ids are 1-based so that signed literals ``+v``/``-v`` in the
JSON-lines serialization are unambiguous.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import EnumerationCapError, IncfactorError
from .rules import LINEAR, LOGICAL, RATIO

QUERY = "query"
EV_POS = "pos"
EV_NEG = "neg"

ENUMERATION_CAP = 20  # strawman-style tables blow up past this


@dataclass
class Variable:
    id: int
    relation: str
    values: tuple
    role: str = QUERY

    @property
    def label(self):
        return (self.relation, self.values)


@dataclass
class Factor:
    id: int
    rule: str
    head: int | None
    groundings: tuple  # tuple of groundings; grounding = tuple of (var_id, sign)
    weight_ref: int
    g_kind: str = LINEAR

    def variables(self):
        seen = []
        if self.head is not None:
            seen.append(self.head)
        for grounding in self.groundings:
            for var_id, _sign in grounding:
                if var_id not in seen:
                    seen.append(var_id)
        return seen


@dataclass
class Weight:
    id: int
    value: float
    fixed: bool = True
    key: tuple | None = None  # (rule name, weight binding); None for ad-hoc weights

    @property
    def description(self):
        if self.key is None:
            return f"w{self.id}"
        rule, binding = self.key
        if binding:
            return "%s[%s]" % (rule, ",".join(str(b) for b in binding))
        return str(rule)


class FactorGraph:
    def __init__(self):
        self.variables: dict[int, Variable] = {}
        self.factors: dict[int, Factor] = {}
        self.weights: dict[int, Weight] = {}
        self._adjacency: dict[int, set] = {}
        self._next_var = 1
        self._next_factor = 0
        self._next_weight = 0

    # -- construction ------------------------------------------------------

    def add_variable(self, relation, values, role=QUERY, id=None) -> Variable:
        vid = self._next_var if id is None else id
        if vid in self.variables:
            raise IncfactorError(f"variable id {vid} already present")
        var = Variable(vid, relation, tuple(values), role)
        self.variables[vid] = var
        self._adjacency[vid] = set()
        self._next_var = max(self._next_var, vid + 1)
        return var

    def add_weight(self, value, fixed=True, key=None, id=None) -> Weight:
        wid = self._next_weight if id is None else id
        if wid in self.weights:
            raise IncfactorError(f"weight id {wid} already present")
        w = Weight(wid, float(value), fixed, key)
        self.weights[wid] = w
        self._next_weight = max(self._next_weight, wid + 1)
        return w

    def add_factor(self, rule, head, groundings, weight_ref, g_kind=LINEAR, id=None) -> Factor:
        fid = self._next_factor if id is None else id
        if fid in self.factors:
            raise IncfactorError(f"factor id {fid} already present")
        if weight_ref not in self.weights:
            raise IncfactorError(f"factor references unknown weight {weight_ref}")
        groundings = tuple(tuple((int(v), bool(s)) for v, s in g) for g in groundings)
        fac = Factor(fid, rule, head, groundings, weight_ref, g_kind)
        for vid in fac.variables():
            if vid not in self.variables:
                raise IncfactorError(f"factor {fid} references unknown variable {vid}")
        self.factors[fid] = fac
        for vid in fac.variables():
            self._adjacency[vid].add(fid)
        self._next_factor = max(self._next_factor, fid + 1)
        return fac

    def remove_factor(self, fid):
        fac = self.factors.pop(fid)
        for vid in fac.variables():
            self._adjacency[vid].discard(fid)
        return fac

    def remove_variable(self, vid):
        if self._adjacency.get(vid):
            raise IncfactorError(
                f"variable {vid} still referenced by factors {sorted(self._adjacency[vid])}")
        del self._adjacency[vid]
        return self.variables.pop(vid)

    def set_role(self, vid, role):
        self.variables[vid].role = role

    def set_weight(self, wid, value):
        self.weights[wid].value = float(value)

    # -- views ---------------------------------------------------------------

    def var_ids(self):
        return sorted(self.variables)

    def adjacent_factors(self, vid):
        return self._adjacency.get(vid, set())

    def free_query_vars(self):
        return [vid for vid in self.var_ids() if self.variables[vid].role == QUERY]

    def evidence_assignment(self):
        return {
            vid: var.role == EV_POS
            for vid, var in self.variables.items()
            if var.role != QUERY
        }

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g.variables = {vid: replace(v) for vid, v in self.variables.items()}
        g.factors = {fid: replace(f) for fid, f in self.factors.items()}
        g.weights = {wid: replace(w) for wid, w in self.weights.items()}
        g._adjacency = {vid: set(s) for vid, s in self._adjacency.items()}
        g._next_var = self._next_var
        g._next_factor = self._next_factor
        g._next_weight = self._next_weight
        return g

    def stats(self):
        return {
            "variables": len(self.variables),
            "factors": len(self.factors),
            "weights": len(self.weights),
            "groundings": sum(len(f.groundings) for f in self.factors.values()),
        }


# -- semantics ---------------------------------------------------------------

_G_CODES = {LINEAR: 0, RATIO: 1, LOGICAL: 2}


def g_eval(kind, n) -> float:
    if n < 0:
        raise IncfactorError("grounding count cannot be negative")
    if kind == LINEAR:
        return float(n)
    if kind == RATIO:
        return math.log1p(n)
    if kind == LOGICAL:
        return 1.0 if n > 0 else 0.0
    raise IncfactorError(f"unknown semantics {kind!r}")


def satisfied_groundings(factor: Factor, world) -> int:
    n = 0
    for grounding in factor.groundings:
        if all(world[vid] == sign for vid, sign in grounding):
            n += 1
    return n


def factor_weight(factor: Factor, world, weights) -> float:
    """w * sign * g(n) for one factor under the given world."""
    w = weights[factor.weight_ref].value if isinstance(weights, dict) else weights[factor.weight_ref]
    if factor.head is None:
        sign = 1.0
    else:
        sign = 1.0 if world[factor.head] else -1.0
    return w * sign * g_eval(factor.g_kind, satisfied_groundings(factor, world))


def world_weight(graph: FactorGraph, world) -> float:
    return sum(factor_weight(f, world, graph.weights) for f in graph.factors.values())


def new_world(graph: FactorGraph, default=False) -> dict:
    world = {}
    for vid, var in graph.variables.items():
        if var.role == EV_POS:
            world[vid] = True
        elif var.role == EV_NEG:
            world[vid] = False
        else:
            world[vid] = default
    return world


def respects_evidence(graph: FactorGraph, world) -> bool:
    for vid, var in graph.variables.items():
        if var.role == EV_POS and not world[vid]:
            return False
        if var.role == EV_NEG and world[vid]:
            return False
    return True


# -- exact enumeration ---------------------------------------------------------


def _world_matrix(graph: FactorGraph, free_ids):
    """All evidence-respecting worlds as a (2^k, |V|) boolean matrix plus
    the id -> column map."""
    ids = graph.var_ids()
    col = {vid: j for j, vid in enumerate(ids)}
    k = len(free_ids)
    n_worlds = 1 << k
    values = np.zeros((n_worlds, len(ids)), dtype=bool)
    for vid in ids:
        var = graph.variables[vid]
        if var.role == EV_POS:
            values[:, col[vid]] = True
    idx = np.arange(n_worlds, dtype=np.uint32)
    for j, vid in enumerate(free_ids):
        values[:, col[vid]] = (idx >> j) & 1
    return values, col


def enumerate_log_weights(graph: FactorGraph, cap=ENUMERATION_CAP):
    """World weights W(I) for every evidence-respecting world.

    Returns (free_ids, W) where world index i assigns free_ids[j] the
    value of bit j of i.  Raises EnumerationCapError past the cap.
    """
    free_ids = graph.free_query_vars()
    if len(free_ids) > cap:
        raise EnumerationCapError(len(free_ids), cap)
    values, col = _world_matrix(graph, free_ids)
    n_worlds = values.shape[0]
    W = np.zeros(n_worlds, dtype=np.float64)
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
        if fac.g_kind == LINEAR:
            g = n.astype(np.float64)
        elif fac.g_kind == RATIO:
            g = np.log1p(n.astype(np.float64))
        else:
            g = (n > 0).astype(np.float64)
        if fac.head is None:
            sign = 1.0
        else:
            sign = np.where(values[:, col[fac.head]], 1.0, -1.0)
        W += graph.weights[fac.weight_ref].value * sign * g
    return free_ids, W


def enumerate_worlds(graph: FactorGraph, cap=ENUMERATION_CAP):
    """(free_ids, probabilities) over all evidence-respecting worlds."""
    free_ids, W = enumerate_log_weights(graph, cap)
    W = W - W.max()
    p = np.exp(W)
    p /= p.sum()
    return free_ids, p


def enumerate_marginals(graph: FactorGraph, cap=ENUMERATION_CAP) -> dict:
    """Exact marginals by full enumeration (Z-normalized world weights)."""
    free_ids, p = enumerate_worlds(graph, cap)
    idx = np.arange(p.shape[0], dtype=np.uint32)
    marginals = {}
    for vid, var in graph.variables.items():
        if var.role == EV_POS:
            marginals[vid] = 1.0
        elif var.role == EV_NEG:
            marginals[vid] = 0.0
    for j, vid in enumerate(free_ids):
        mask = ((idx >> j) & 1).astype(bool)
        marginals[vid] = float(p[mask].sum())
    return marginals


def voting_closed_form(n_up, n_down, kind) -> float:
    """Two-world probability of the voting head: sigma(2 * (g(up) - g(down)))."""
    if n_up < 0 or n_down < 0:
        raise IncfactorError("vote counts cannot be negative")
    W = g_eval(kind, n_up) - g_eval(kind, n_down)
    return 1.0 / (1.0 + math.exp(-2.0 * W)) if W >= 0 else \
        math.exp(2.0 * W) / (1.0 + math.exp(2.0 * W))


def voting_log_complement(n_up, n_down, kind) -> float:
    """log(1 - Pr[q()]) for the voting closed form, computed stably."""
    W = g_eval(kind, n_up) - g_eval(kind, n_down)
    # 1 - sigma(2W) = sigma(-2W); log sigma(x) = -log(1 + e^{-x})
    x = -2.0 * W
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


# -- serialization -------------------------------------------------------------

_ROLE_TO_EV = {QUERY: None, EV_POS: True, EV_NEG: False}
_EV_TO_ROLE = {None: QUERY, True: EV_POS, False: EV_NEG}


def graph_to_jsonl(graph: FactorGraph) -> str:
    lines = []
    for vid in graph.var_ids():
        var = graph.variables[vid]
        lines.append(json.dumps(
            {"v": vid, "rel": var.relation, "tuple": list(var.values),
             "ev": _ROLE_TO_EV[var.role]},
            separators=(",", ":")))
    for wid in sorted(graph.weights):
        w = graph.weights[wid]
        rec = {"wid": wid, "val": w.value, "fixed": w.fixed}
        if w.key is not None:
            rec["key"] = [w.key[0], list(w.key[1])]
        lines.append(json.dumps(rec, separators=(",", ":")))
    for fid in sorted(graph.factors):
        f = graph.factors[fid]
        lines.append(json.dumps(
            {"f": fid, "rule": f.rule, "head": f.head,
             "groundings": [[vid if sign else -vid for vid, sign in g]
                            for g in f.groundings],
             "w": f.weight_ref, "g": f.g_kind},
            separators=(",", ":")))
    return "\n".join(lines) + "\n"


def graph_from_jsonl(text: str) -> FactorGraph:
    graph = FactorGraph()
    pending_factors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IncfactorError(f"graph line {lineno}: invalid JSON: {exc}") from None
        if "v" in rec:
            graph.add_variable(rec["rel"], tuple(rec["tuple"]),
                               _EV_TO_ROLE[rec["ev"]], id=rec["v"])
        elif "wid" in rec:
            key = None
            if "key" in rec:
                key = (rec["key"][0], tuple(rec["key"][1]))
            graph.add_weight(rec["val"], rec["fixed"], key=key, id=rec["wid"])
        elif "f" in rec:
            pending_factors.append(rec)
        else:
            raise IncfactorError(f"graph line {lineno}: unrecognized record")
    for rec in pending_factors:
        groundings = [[(abs(x), x > 0) for x in g] for g in rec["groundings"]]
        graph.add_factor(rec["rule"], rec["head"], groundings, rec["w"],
                         rec["g"], id=rec["f"])
    return graph


def write_graph(graph: FactorGraph, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph_to_jsonl(graph))


def read_graph(path) -> FactorGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_jsonl(fh.read())


def graph_fingerprint(graph: FactorGraph) -> str:
    return hashlib.sha256(graph_to_jsonl(graph).encode("utf-8")).hexdigest()


# -- labeled equality (ids ignored) --------------------------------------------


def graph_signature(graph: FactorGraph):
    """Canonical id-free description: variable labels/roles, factor shapes,
    weight keys and values.  Two groundings of equal programs/stores compare
    equal even when internal ids differ."""
    var_label = {vid: (v.relation, v.values) for vid, v in graph.variables.items()}
    vars_sig = frozenset(
        (v.relation, v.values, v.role) for v in graph.variables.values())
    weights_sig = frozenset(
        (w.key, round(w.value, 12), w.fixed) for w in graph.weights.values())
    factors_sig = []
    for f in graph.factors.values():
        w = graph.weights[f.weight_ref]
        factors_sig.append((
            f.rule,
            var_label[f.head] if f.head is not None else None,
            tuple(sorted(
                tuple(sorted((var_label[vid], sign) for vid, sign in g))
                for g in f.groundings)),
            w.key, round(w.value, 12), w.fixed,
            f.g_kind,
        ))
    factors_sig.sort(key=repr)
    return (vars_sig, weights_sig, tuple(factors_sig))
