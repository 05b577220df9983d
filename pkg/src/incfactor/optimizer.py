"""Rule-based strategy choice and graph decomposition around inactive
variables.

The update classifier looks only at (program delta, update delta); the
strategy table is total:

    AnalysisOnly    -> Sampling      (distribution unchanged)
    EvidenceChange  -> Variational
    NewFeatures     -> Sampling
    SampleExhausted -> Variational   (runtime signal)
    StructureChange -> Rerun

Decomposition: connected components of the factor graph minus the active
variables become inactive groups; each group's frontier is the set of
active variables sharing a factor with it (its Markov blanket, which
separates it from every other inactive variable).  Groups whose frontiers
nest are merged greedily, smallest frontier first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .graph import FactorGraph
from .grounding import UpdateDelta
from .rules import RuleProgram

ANALYSIS_ONLY = "AnalysisOnly"
EVIDENCE_CHANGE = "EvidenceChange"
NEW_FEATURES = "NewFeatures"
STRUCTURE_CHANGE = "StructureChange"
SAMPLE_EXHAUSTED = "SampleExhausted"

SAMPLING = "Sampling"
VARIATIONAL = "Variational"
RERUN = "Rerun"


@dataclass
class ProgramDelta:
    """What changed in the rule program itself."""

    added_rules: RuleProgram | None = None
    changed_rule_weights: dict = field(default_factory=dict)  # rule name -> (old, new)

    def is_empty(self):
        added = self.added_rules is not None and bool(self.added_rules.all_rules())
        return not added and not self.changed_rule_weights


def classify_update(program_delta: ProgramDelta | None,
                    update_delta: UpdateDelta) -> str:
    if program_delta is None:
        program_delta = ProgramDelta()
    structural = update_delta.structure_changed()
    weights = bool(update_delta.weight_changes) or bool(program_delta.changed_rule_weights)
    evidence = bool(update_delta.evidence_changes)
    if not structural and not weights and not evidence:
        return ANALYSIS_ONLY
    if evidence and not structural and not weights:
        return EVIDENCE_CHANGE
    if structural and not weights and not evidence and \
            _only_new_feature_factors(update_delta):
        return NEW_FEATURES
    return STRUCTURE_CHANGE


def _only_new_feature_factors(delta: UpdateDelta) -> bool:
    """New factors carrying new weight parameters, nothing existing touched
    (new variables are fine: fresh head bindings come with fresh factors)."""
    if not delta.new_factors:
        return False
    if delta.removed_factors or delta.modified_factors or delta.removed_vars:
        return False
    return all(f.weight_ref in delta.new_weights
               for f in delta.new_factors.values())


def choose_strategy(update_class: str, bundle_exists: bool) -> str:
    if not bundle_exists:
        return RERUN
    table = {
        ANALYSIS_ONLY: SAMPLING,
        EVIDENCE_CHANGE: VARIATIONAL,
        NEW_FEATURES: SAMPLING,
        SAMPLE_EXHAUSTED: VARIATIONAL,
        STRUCTURE_CHANGE: RERUN,
    }
    try:
        return table[update_class]
    except KeyError:
        raise ValueError(f"unknown update class {update_class!r}") from None


# -- active variables from @interest rules ----------------------------------------


def active_relations(program: RuleProgram) -> set:
    """Relations whose content the rules marked @interest can change,
    closed downstream over the rule dependency graph."""
    changed = set()
    for rule in program.inference_rules:
        if rule.interest:
            changed.add(rule.head.predicate)
            changed.update(a.predicate for a in rule.body)
    if not changed:
        return set()
    grew = True
    while grew:
        grew = False
        for rule in program.candidate_rules + program.inference_rules:
            if rule.head.predicate in changed:
                continue
            if any(a.predicate in changed for a in rule.body):
                changed.add(rule.head.predicate)
                grew = True
    return changed


def active_variables(graph: FactorGraph, program: RuleProgram) -> set:
    rels = active_relations(program)
    return {vid for vid, var in graph.variables.items() if var.relation in rels}


# -- decomposition ------------------------------------------------------------------


@dataclass
class DecompositionPlan:
    groups: list  # of (inactive frozenset, frontier frozenset)

    def to_json(self):
        return json.dumps(
            [{"inactive": sorted(i), "frontier": sorted(f)}
             for i, f in self.groups], indent=1)

    @staticmethod
    def from_json(text):
        return DecompositionPlan([
            (frozenset(rec["inactive"]), frozenset(rec["frontier"]))
            for rec in json.loads(text)])


def _var_adjacency(graph: FactorGraph):
    adj = {vid: set() for vid in graph.variables}
    for fac in graph.factors.values():
        members = fac.variables()
        for a in members:
            for b in members:
                if a != b:
                    adj[a].add(b)
    return adj


def decompose(graph: FactorGraph, active_vars) -> DecompositionPlan:
    """Inactive connected components with their active frontiers, greedily
    merged while one frontier contains the other."""
    active = set(active_vars)
    unknown = active - set(graph.variables)
    if unknown:
        raise ValueError(f"active variables not in graph: {sorted(unknown)}")
    adj = _var_adjacency(graph)
    inactive = [vid for vid in graph.var_ids() if vid not in active]
    seen = set()
    groups = []
    for start in inactive:
        if start in seen:
            continue
        component = set()
        frontier = set()
        stack = [start]
        seen.add(start)
        while stack:
            v = stack.pop()
            component.add(v)
            for u in adj[v]:
                if u in active:
                    frontier.add(u)
                elif u not in seen:
                    seen.add(u)
                    stack.append(u)
        groups.append((frozenset(component), frozenset(frontier)))

    # greedy merge while |A_j u A_k| == max(|A_j|, |A_k|), i.e. one frontier
    # contains the other; scan in ascending (frontier size, group order)
    merged = True
    while merged:
        merged = False
        order = sorted(range(len(groups)),
                       key=lambda ix: (len(groups[ix][1]), ix))
        for a_pos in range(len(order)):
            for b_pos in range(a_pos + 1, len(order)):
                j, k = order[a_pos], order[b_pos]
                fj, fk = groups[j][1], groups[k][1]
                if len(fj | fk) == max(len(fj), len(fk)):
                    union = (groups[j][0] | groups[k][0], fj | fk)
                    groups = [g for ix, g in enumerate(groups) if ix not in (j, k)]
                    groups.append(union)
                    merged = True
                    break
            if merged:
                break
    return DecompositionPlan(sorted(groups, key=lambda g: sorted(g[0])))


def group_subgraph(graph: FactorGraph, inactive, frontier) -> FactorGraph:
    """The materialization unit for one group: its inactive variables plus
    the active frontier, with every factor that touches the inactive set.
    Frontier-only factors stay with the owning groups of their own inactive
    neighbours, so group subgraphs partition the inactive-touching factors."""
    members = set(inactive) | set(frontier)
    sub = FactorGraph()
    for vid in sorted(members):
        var = graph.variables[vid]
        sub.add_variable(var.relation, var.values, var.role, id=vid)
    for fid in sorted(graph.factors):
        fac = graph.factors[fid]
        touched = set(fac.variables())
        if not (touched & set(inactive)):
            continue
        if not touched <= members:
            continue  # separation guarantees this never drops factors
        if fac.weight_ref not in sub.weights:
            w = graph.weights[fac.weight_ref]
            sub.add_weight(w.value, w.fixed, w.key, id=w.id)
        sub.add_factor(fac.rule, fac.head, fac.groundings, fac.weight_ref,
                       fac.g_kind, id=fid)
    return sub


def combine_group_marginals(results, tolerance=0.05):
    """Merge per-group marginal maps.  Active frontier variables live in
    every owning group; their estimates are averaged and pairs disagreeing
    by more than the tolerance are reported."""
    pooled = {}
    for marginals in results:
        for vid, p in marginals.items():
            pooled.setdefault(vid, []).append(p)
    merged = {vid: sum(ps) / len(ps) for vid, ps in pooled.items()}
    disagreements = {vid: (min(ps), max(ps)) for vid, ps in pooled.items()
                     if max(ps) - min(ps) > tolerance}
    return merged, disagreements


def check_separation(graph: FactorGraph, plan: DecompositionPlan, active_vars) -> bool:
    """Every group's inactive set, with its frontier removed from the graph,
    must be disconnected from all other inactive variables."""
    active = set(active_vars)
    adj = _var_adjacency(graph)
    all_inactive = {vid for vid in graph.variables if vid not in active}
    for inactive_set, frontier in plan.groups:
        blocked = set(frontier)
        reachable = set()
        stack = list(inactive_set)
        reachable.update(inactive_set)
        while stack:
            v = stack.pop()
            for u in adj[v]:
                if u in blocked or u in reachable:
                    continue
                reachable.add(u)
                stack.append(u)
        outside = (reachable - inactive_set) & all_inactive
        if outside:
            return False
    # inactive sets partition all inactive variables
    seen = set()
    for inactive_set, _ in plan.groups:
        if inactive_set & seen:
            return False
        seen |= inactive_set
    return seen == all_inactive
