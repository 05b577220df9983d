"""Grounding: evaluate a rule program over a store into a factor graph,
and maintain the graph incrementally from store/rule deltas.

Two evaluation paths exist on purpose.  ``ground`` evaluates every rule
directly with hash joins and builds a fresh graph; it is the oracle.
``incremental_ground`` pushes count deltas through per-rule delta
derivations (one derivation per body atom: atoms left of the delta read
the pre-update state, atoms right of it read the post-update state) and
edits the existing graph in place, touching only tuples reachable from
the deltas.

Derivation counting: every tuple carries the number of its derivations
(product of body-tuple counts, summed over rules and assignments), so
insertions and deletions are handled uniformly and a tuple or factor
grounding disappears exactly when its count reaches zero.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import GroundingError
from .graph import EV_NEG, EV_POS, QUERY, Factor, FactorGraph, Variable, Weight
from .relstore import NEGATIVE, POSITIVE, RelationStore
from .rules import (Atom, Const, Fixed, InferenceRule, Learned, RuleProgram,
                    Var)

OLD = "old"
NEW = "new"
DELTA = "delta"


# -- delta-rule description ---------------------------------------------------


@dataclass(frozen=True)
class DeltaAtom:
    atom: Atom
    state: str  # old | new | delta

    def __str__(self):
        if self.state == DELTA:
            return "%sδ(%s)" % (self.atom.predicate,
                                ", ".join(str(a) for a in self.atom.args))
        return "%s@%s" % (self.atom, self.state)


@dataclass(frozen=True)
class DeltaRuleSpec:
    rule: str
    position: int  # body index carrying the delta
    head: str
    atoms: tuple  # of DeltaAtom

    def __str__(self):
        return "%sδ :- %s" % (self.head, ", ".join(str(a) for a in self.atoms))


def delta_rules(program: RuleProgram) -> list:
    """The standard per-atom delta expansion of every rule: position i is
    replaced by the delta relation, positions before i read the old state,
    positions after i the new state."""
    out = []
    for rule in program.all_rules():
        head = rule.head.predicate if hasattr(rule, "head") else rule.relation + "_Ev"
        for i in range(len(rule.body)):
            atoms = []
            for j, atom in enumerate(rule.body):
                if j < i:
                    atoms.append(DeltaAtom(atom, OLD))
                elif j == i:
                    atoms.append(DeltaAtom(atom, DELTA))
                else:
                    atoms.append(DeltaAtom(atom, NEW))
            out.append(DeltaRuleSpec(rule.name, i, head, tuple(atoms)))
    return out


# -- indexed tuple views -------------------------------------------------------


class View:
    """Multiset of tuples with hash indexes over fixed column subsets."""

    __slots__ = ("counts", "indexes")

    def __init__(self):
        self.counts = {}
        self.indexes = {}  # positions tuple -> {key tuple -> set of tuples}

    def add_index(self, positions):
        positions = tuple(positions)
        if positions in self.indexes:
            return
        idx = defaultdict(set)
        for t in self.counts:
            idx[tuple(t[p] for p in positions)].add(t)
        self.indexes[positions] = idx

    def update(self, t, dc) -> int:
        """Apply a signed count change; returns +1 (tuple appeared),
        -1 (tuple vanished) or 0."""
        old = self.counts.get(t, 0)
        new = old + dc
        if new < 0:
            raise GroundingError(f"derivation count went negative for {t}")
        if new == 0:
            if old:
                del self.counts[t]
                for positions, idx in self.indexes.items():
                    idx[tuple(t[p] for p in positions)].discard(t)
                return -1
            return 0
        self.counts[t] = new
        if old == 0:
            for positions, idx in self.indexes.items():
                idx[tuple(t[p] for p in positions)].add(t)
            return 1
        return 0

    def count(self, t):
        return self.counts.get(t, 0)

    def candidates(self, positions, key):
        if positions:
            return self.indexes[positions].get(key, ())
        return self.counts.keys()


class OverlayView:
    """A view plus a pending (not yet applied) delta: the post-update state."""

    def __init__(self, base: View, pending: dict):
        self.base = base
        self.pending = pending

    def count(self, t):
        return self.base.count(t) + self.pending.get(t, 0)

    def candidates(self, positions, key):
        for t in self.base.candidates(positions, key):
            yield t
        for t in self.pending:
            if self.base.count(t) == 0:
                if all(t[p] == k for p, k in zip(positions, key)):
                    yield t


# -- grounding state -----------------------------------------------------------


@dataclass
class FactorState:
    fid: int
    rule: InferenceRule
    head_label: tuple  # (pred, values)
    weight_key: tuple  # (rule name, weight binding)
    groundings: dict = field(default_factory=dict)  # assignment key -> count
    literals: dict = field(default_factory=dict)  # assignment key -> literal labels


class GroundingState:
    """Everything needed to maintain a grounded graph incrementally."""

    def __init__(self, program: RuleProgram):
        self.program = program
        self.store: RelationStore | None = None  # bound by ground()
        self.graph = FactorGraph()
        self.fact_views: dict[str, View] = {}
        self.var_views: dict[str, View] = {}
        self.head_support: dict[str, dict] = defaultdict(dict)  # pred -> tuple -> count
        self.label_counts: dict = defaultdict(lambda: [0, 0])  # (pred,t) -> [pos,neg]
        self.manual_labels: dict = {}  # (pred,t) -> POSITIVE|NEGATIVE
        self.var_ids: dict = {}  # (pred, values) -> vid
        self.factor_table: dict = {}  # (rule, head binding, weight binding) -> FactorState
        self.weight_ids: dict = {}  # (rule, weight binding) -> wid
        self.weight_refs: dict = defaultdict(int)  # wid -> referencing factor count
        self.scan_count = 0
        self._topo = None
        self._plans = {}

    # ---- program analysis ----------------------------------------------

    def _view_for(self, rule, pred) -> View:
        if isinstance(rule, InferenceRule):
            return self.var_views[pred]
        return self.fact_views[pred]

    def prepare(self, store: RelationStore):
        program = self.program
        self.store = store
        for decl in program.declarations:
            if decl.name in store.relations:
                rel = store.relations[decl.name]
                if rel.arity != len(decl.columns):
                    raise GroundingError(
                        f"relation {decl.name}: store arity {rel.arity} != "
                        f"declared arity {len(decl.columns)}")
            self.fact_views.setdefault(decl.name, View())
            self.var_views.setdefault(decl.name, View())
        for rule in program.inference_rules:
            if rule.head.predicate not in self.var_views:
                raise GroundingError(
                    f"rule {rule.name}: undeclared head {rule.head.predicate!r}")
        self._topo = self._topo_order()
        self._register_plans()

    def _topo_order(self):
        deps = defaultdict(set)
        preds = set(self.fact_views)
        for rule in self.program.candidate_rules + self.program.inference_rules:
            deps[rule.head.predicate].update(a.predicate for a in rule.body)
        for rule in self.program.supervision_rules:
            deps[rule.relation].update(a.predicate for a in rule.body)
        order = []
        seen = {}

        def visit(p):
            if seen.get(p) == 2:
                return
            if seen.get(p) == 1:
                raise GroundingError(f"cyclic dependency through {p}")
            seen[p] = 1
            for d in sorted(deps.get(p, ())):
                visit(d)
            seen[p] = 2
            order.append(p)

        for p in sorted(preds):
            visit(p)
        return order

    def _register_plans(self):
        """Precompute join orders and index patterns for full evaluation and
        for every delta position of every rule."""
        for rule in self.program.all_rules():
            body = list(rule.body)
            self._plans[(rule.name, None)] = self._make_plan(rule, body, None)
            for i in range(len(body)):
                self._plans[(rule.name, i)] = self._make_plan(rule, body, i)

    def _make_plan(self, rule, body, pinned):
        """Join order (atom indexes) plus per-step index positions."""
        if pinned is None:
            order = list(range(len(body)))
        else:
            order = [pinned] + [j for j in range(len(body)) if j != pinned]
        bound = set()
        steps = []
        for j in order:
            atom = body[j]
            positions = tuple(
                k for k, a in enumerate(atom.args)
                if isinstance(a, Const) or (isinstance(a, Var) and a in bound))
            steps.append((j, positions))
            bound.update(atom.variables())
            if j != pinned:
                self._view_for(rule, atom.predicate).add_index(positions)
        return steps

    # ---- join evaluation -------------------------------------------------

    def _unify(self, atom, t, binding):
        """Extend binding with atom(args)=t; None if it does not unify."""
        new = None
        for a, v in zip(atom.args, t):
            if isinstance(a, Const):
                if a.value != v:
                    return None
            else:
                cur = new.get(a, binding.get(a)) if new is not None else binding.get(a)
                if cur is None:
                    if new is None:
                        new = dict(binding)
                    new[a] = v
                elif cur != v:
                    return None
        return binding if new is None else new

    def _join(self, body, steps, step_idx, binding, count, views, results):
        if step_idx == len(steps):
            results.append((binding, count))
            return
        j, positions = steps[step_idx]
        atom = body[j]
        view = views[step_idx]
        key = tuple(
            atom.args[p].value if isinstance(atom.args[p], Const) else binding[atom.args[p]]
            for p in positions)
        for t in view.candidates(positions, key):
            self.scan_count += 1
            c = view.count(t)
            if c <= 0:
                continue
            nb = self._unify(atom, t, binding)
            if nb is not None:
                self._join(body, steps, step_idx + 1, nb, count * c, views, results)

    def eval_rule_full(self, rule):
        """All satisfying assignments of the rule body with their counts."""
        body = list(rule.body)
        steps = self._plans[(rule.name, None)]
        views = [self._view_for(rule, body[j].predicate) for j, _ in steps]
        results = []
        self._join(body, steps, 0, {}, 1, views, results)
        return results

    def eval_rule_delta(self, rule, pred, delta_items, overlay_pending):
        """Delta join: sum over body positions carrying `pred`, with the
        delta pinned first, earlier same-pred positions on the old view and
        later ones on the overlay (new) view."""
        body = list(rule.body)
        out = []
        for i, atom in enumerate(body):
            if atom.predicate != pred:
                continue
            steps = self._plans[(rule.name, i)]
            tail_steps = steps[1:]
            tail_views = []
            for j, _positions in tail_steps:
                a = body[j]
                base = self._view_for(rule, a.predicate)
                if a.predicate == pred and j > i:
                    tail_views.append(OverlayView(base, overlay_pending))
                else:
                    tail_views.append(base)
            for t, dc in delta_items:
                if dc == 0:
                    continue
                nb = self._unify(atom, t, {})
                if nb is None:
                    continue
                self._join(body, tail_steps, 0, nb, dc, tail_views, out)
        return out


# -- update delta ---------------------------------------------------------------


@dataclass
class UpdateDelta:
    new_vars: dict = field(default_factory=dict)  # vid -> Variable
    removed_vars: dict = field(default_factory=dict)  # vid -> Variable snapshot
    new_factors: dict = field(default_factory=dict)  # fid -> Factor
    removed_factors: dict = field(default_factory=dict)  # fid -> Factor snapshot
    modified_factors: dict = field(default_factory=dict)  # fid -> (old Factor, new Factor)
    new_weights: dict = field(default_factory=dict)  # wid -> Weight
    removed_weights: dict = field(default_factory=dict)  # wid -> Weight snapshot
    weight_changes: dict = field(default_factory=dict)  # wid -> (old, new)
    evidence_changes: dict = field(default_factory=dict)  # vid -> (old role, new role)

    def is_empty(self):
        return not (self.new_vars or self.removed_vars or self.new_factors
                    or self.removed_factors or self.modified_factors
                    or self.weight_changes or self.evidence_changes
                    or self.new_weights or self.removed_weights)

    def structure_changed(self):
        return bool(self.new_vars or self.removed_vars or self.new_factors
                    or self.removed_factors or self.modified_factors)

    def delta_factor_ids(self, graph: FactorGraph):
        """ΔF ∪ modified: ids of new, removed, grounding-modified factors and
        factors referencing a changed weight."""
        ids = set(self.new_factors) | set(self.removed_factors) | set(self.modified_factors)
        if self.weight_changes:
            changed = set(self.weight_changes)
            for fid, fac in graph.factors.items():
                if fac.weight_ref in changed:
                    ids.add(fid)
            for fid, fac in self.removed_factors.items():
                if fac.weight_ref in changed:
                    ids.add(fid)
        return ids

    def summary(self):
        return {
            "new_vars": len(self.new_vars),
            "removed_vars": len(self.removed_vars),
            "new_factors": len(self.new_factors),
            "removed_factors": len(self.removed_factors),
            "modified_factors": len(self.modified_factors),
            "weight_changes": len(self.weight_changes),
            "evidence_changes": len(self.evidence_changes),
        }


def apply_update(graph: FactorGraph, delta: UpdateDelta) -> FactorGraph:
    """Apply an UpdateDelta to a copy of the graph; returns the new graph."""
    g = graph.copy()
    for wid, w in delta.new_weights.items():
        if wid not in g.weights:
            g.add_weight(w.value, w.fixed, w.key, id=wid)
    for wid, (_old, new) in delta.weight_changes.items():
        g.set_weight(wid, new)
    for vid, var in delta.new_vars.items():
        g.add_variable(var.relation, var.values, var.role, id=vid)
    for vid, (_old, new_role) in delta.evidence_changes.items():
        g.set_role(vid, new_role)
    for fid in delta.removed_factors:
        g.remove_factor(fid)
    for fid, (_old, new) in delta.modified_factors.items():
        g.remove_factor(fid)
        g.add_factor(new.rule, new.head, new.groundings, new.weight_ref,
                     new.g_kind, id=fid)
    for fid, fac in delta.new_factors.items():
        g.add_factor(fac.rule, fac.head, fac.groundings, fac.weight_ref,
                     fac.g_kind, id=fid)
    for vid in delta.removed_vars:
        g.remove_variable(vid)
    for wid in delta.removed_weights:
        del g.weights[wid]
    return g


# -- shared evaluation helpers ----------------------------------------------


def _head_binding(rule, binding):
    return tuple(
        a.value if isinstance(a, Const) else binding[a] for a in rule.head.args)


def _sup_binding(rule, binding):
    return tuple(
        a.value if isinstance(a, Const) else binding[a] for a in rule.head_args)


def _grounding_key(rule, binding):
    return tuple(sorted((v.name, binding[v]) for v in rule.body_vars()))


def _grounding_literals(rule, binding):
    """Sorted unique (pred, values) labels of the instantiated body."""
    lits = set()
    for atom in rule.body:
        values = tuple(
            a.value if isinstance(a, Const) else binding[a] for a in atom.args)
        lits.add((atom.predicate, values))
    return tuple(sorted(lits))


def _weight_binding(rule, binding):
    spec = rule.weight_spec
    if isinstance(spec, Fixed):
        return ()
    return tuple(binding[v] for v in spec.vars)


def _initial_weight(rule):
    spec = rule.weight_spec
    if isinstance(spec, Fixed):
        return spec.value, True
    if isinstance(spec, Learned):
        return spec.initial, False
    return 0.0, False


def _role_for(state, pred, values):
    label = (pred, values)
    manual = state.manual_labels.get(label)
    pos, neg = state.label_counts.get(label, (0, 0))
    wants_pos = manual == POSITIVE or pos > 0
    wants_neg = manual == NEGATIVE or neg > 0
    if wants_pos and wants_neg:
        raise GroundingError(f"conflicting evidence labels for {pred}{values}")
    if wants_pos:
        return EV_POS
    if wants_neg:
        return EV_NEG
    return QUERY


def _factor_state(state, rule, hb, wb) -> FactorState:
    key = (rule.name, hb, wb)
    fs = state.factor_table.get(key)
    if fs is None:
        fs = FactorState(fid=-1, rule=rule, head_label=(rule.head.predicate, hb),
                         weight_key=(rule.name, wb))
        state.factor_table[key] = fs
    return fs


def _weight_for(state, rule, wb, delta=None) -> int:
    key = (rule.name, wb)
    wid = state.weight_ids.get(key)
    if wid is None:
        value, fixed = _initial_weight(rule)
        w = state.graph.add_weight(value, fixed, key=key)
        state.weight_ids[key] = w.id
        wid = w.id
        if delta is not None:
            delta.new_weights[wid] = w
    return wid


def _sync_factor(state, fs: FactorState, delta: UpdateDelta | None):
    """Reconcile one FactorState with the graph, recording the change.

    Called once per touched factor per batch, so exactly one of new /
    removed / modified applies.
    """
    graph = state.graph
    alive = bool(fs.groundings)
    if alive:
        head_vid = state.var_ids.get(fs.head_label)
        if head_vid is None:
            raise GroundingError(f"head variable missing for {fs.head_label}")
        groundings = tuple(
            tuple((state.var_ids[lit], True) for lit in fs.literals[key])
            for key in sorted(fs.groundings))
    if fs.fid < 0 and alive:
        wid = _weight_for(state, fs.rule, fs.weight_key[1], delta)
        fac = graph.add_factor(fs.rule.name, head_vid, groundings, wid,
                               fs.rule.semantics)
        fs.fid = fac.id
        state.weight_refs[wid] += 1
        if delta is not None:
            delta.new_factors[fac.id] = fac
    elif fs.fid >= 0 and not alive:
        old = graph.remove_factor(fs.fid)
        state.weight_refs[old.weight_ref] -= 1
        if delta is not None:
            delta.removed_factors[fs.fid] = old
        if state.weight_refs[old.weight_ref] == 0:
            w = graph.weights.pop(old.weight_ref)
            state.weight_ids.pop(w.key, None)
            del state.weight_refs[old.weight_ref]
            if delta is not None:
                if w.id in delta.new_weights:
                    del delta.new_weights[w.id]
                else:
                    delta.removed_weights[w.id] = w
        fs.fid = -1
    elif fs.fid >= 0 and alive:
        old = graph.factors[fs.fid]
        if old.groundings != groundings or old.head != head_vid:
            graph.remove_factor(fs.fid)
            new = graph.add_factor(old.rule, head_vid, groundings,
                                   old.weight_ref, old.g_kind, id=fs.fid)
            if delta is not None:
                delta.modified_factors[fs.fid] = (old, new)


# -- full grounding ------------------------------------------------------------


def ground(program: RuleProgram, store: RelationStore):
    """Direct evaluation: returns (FactorGraph, GroundingState)."""
    state = GroundingState(program)
    state.prepare(store)

    # base facts
    for decl in program.declarations:
        if decl.name not in store.relations:
            continue
        for rec in store.relations[decl.name]:
            state.fact_views[decl.name].update(rec.values, rec.count)
            state.var_views[decl.name].update(rec.values, rec.count)
            if rec.evidence_label is not None:
                state.manual_labels[(decl.name, rec.values)] = rec.evidence_label

    # candidate rules, stratum order
    by_head = defaultdict(list)
    for rule in program.candidate_rules:
        by_head[rule.head.predicate].append(rule)
    for pred in state._topo:
        for rule in by_head.get(pred, ()):
            derived = defaultdict(int)
            for binding, count in state.eval_rule_full(rule):
                derived[_head_binding(rule, binding)] += count
            for values, count in sorted(derived.items()):
                state.fact_views[pred].update(values, count)
                state.var_views[pred].update(values, count)

    # supervision rules: evidence label derivations (they also make the
    # labeled tuple a variable)
    for rule in program.supervision_rules:
        for binding, count in state.eval_rule_full(rule):
            values = _sup_binding(rule, binding)
            entry = state.label_counts[(rule.relation, values)]
            entry[0 if rule.label else 1] += count
    for (pred, values), (pos, neg) in state.label_counts.items():
        if pos + neg > 0:
            state.var_views[pred].update(values, pos + neg)

    # variables for every present tuple of a declared relation
    batch = set()
    for pred, view in state.var_views.items():
        for values in view.counts:
            batch.add((pred, values))
    for pred, values in sorted(batch):
        _create_variable(state, pred, values)

    # inference rules, head-pred topo order
    inf_by_head = defaultdict(list)
    for rule in program.inference_rules:
        inf_by_head[rule.head.predicate].append(rule)
    for pred in state._topo:
        for rule in inf_by_head.get(pred, ()):
            grouped = defaultdict(list)
            for binding, count in state.eval_rule_full(rule):
                grouped[(_head_binding(rule, binding),
                         _weight_binding(rule, binding))].append((binding, count))
            for (hb, wb) in sorted(grouped):
                fs = _factor_state(state, rule, hb, wb)
                for binding, count in grouped[(hb, wb)]:
                    key = _grounding_key(rule, binding)
                    fs.groundings[key] = fs.groundings.get(key, 0) + count
                    fs.literals.setdefault(key, _grounding_literals(rule, binding))
                support = sum(fs.groundings.values())
                cur = state.head_support[pred].get(hb, 0)
                state.head_support[pred][hb] = cur + support
                state.var_views[pred].update(hb, support)
        # head bindings become variables before downstream rules ground
        fresh = sorted(
            values for values in state.var_views[pred].counts
            if (pred, values) not in state.var_ids)
        for values in fresh:
            _create_variable(state, pred, values)

    # materialize factors into the graph
    for key in sorted(state.factor_table, key=repr):
        _sync_factor(state, state.factor_table[key], None)

    for (pred, values), vid in state.var_ids.items():
        state.graph.set_role(vid, _role_for(state, pred, values))
    return state.graph, state


def _create_variable(state, pred, values):
    label = (pred, values)
    if label in state.var_ids:
        return state.var_ids[label]
    var = state.graph.add_variable(pred, values, QUERY)
    state.var_ids[label] = var.id
    return var.id


# -- incremental grounding -------------------------------------------------------


def incremental_ground(state: GroundingState, applied_deltas,
                       evidence_changes=(), added_rules: RuleProgram | None = None
                       ) -> UpdateDelta:
    """Push already-applied store deltas (plus evidence-label changes and
    appended rules) through the delta program; edits state.graph in place
    and returns the exact difference against re-grounding from scratch.

    applied_deltas: iterable of DeltaRelation (already applied to the store).
    evidence_changes: iterable of (relation, values, label) manual labels.
    added_rules: RuleProgram holding appended declarations/rules; appended
    rules are fully evaluated against the post-update state and their
    output lands in the returned delta (new rules never see delta joins
    in the batch that introduces them).
    """
    delta = UpdateDelta()
    graph = state.graph

    old_rule_names = {r.name for r in state.program.all_rules()}
    if added_rules is not None:
        state.program = state.program.extended(added_rules)
        for decl in added_rules.declarations:
            state.fact_views.setdefault(decl.name, View())
            state.var_views.setdefault(decl.name, View())
        state._topo = state._topo_order()
        state._plans = {}
        state._register_plans()

    pending_fact = defaultdict(lambda: defaultdict(int))
    touched_tuples = set()
    for d in applied_deltas:
        if d.base not in state.fact_views:
            raise GroundingError(f"delta for undeclared relation {d.base!r}")
        for values, dc in d.net().items():
            pending_fact[d.base][values] += dc
        for values, _dc in d.changes:
            touched_tuples.add((d.base, tuple(values)))

    label_touched = set()
    for relation, values, label in evidence_changes:
        touched_tuples.add((relation, tuple(values)))
        if state.store is None:
            state.manual_labels[(relation, tuple(values))] = label
            label_touched.add((relation, tuple(values)))
    # manual labels live on store records and a later delete in the same
    # batch silently drops them, so the store is the source of truth: every
    # tuple touched by a delta or an evidence event is resynced against it
    if state.store is not None:
        for pred, values in touched_tuples:
            rel = state.store.relations.get(pred)
            rec = rel.tuples.get(values) if rel is not None else None
            current = rec.evidence_label if rec is not None else None
            if state.manual_labels.get((pred, values)) != current:
                if current is None:
                    state.manual_labels.pop((pred, values), None)
                else:
                    state.manual_labels[(pred, values)] = current
                label_touched.add((pred, values))

    new_cand_by_head = defaultdict(list)
    new_sup_by_target = defaultdict(list)
    new_inf_by_head = defaultdict(list)
    for rule in state.program.candidate_rules:
        if rule.name not in old_rule_names:
            new_cand_by_head[rule.head.predicate].append(rule)
    for rule in state.program.supervision_rules:
        if rule.name not in old_rule_names:
            new_sup_by_target[rule.relation].append(rule)
    for rule in state.program.inference_rules:
        if rule.name not in old_rule_names:
            new_inf_by_head[rule.head.predicate].append(rule)

    # delta joins run only over rules that existed before this batch
    by_body_cand = defaultdict(list)
    by_body_sup = defaultdict(list)
    by_body_inf = defaultdict(list)
    for rule in state.program.candidate_rules:
        if rule.name in old_rule_names:
            for pred in {a.predicate for a in rule.body}:
                by_body_cand[pred].append(rule)
    for rule in state.program.supervision_rules:
        if rule.name in old_rule_names:
            for pred in {a.predicate for a in rule.body}:
                by_body_sup[pred].append(rule)
    for rule in state.program.inference_rules:
        if rule.name in old_rule_names:
            for pred in {a.predicate for a in rule.body}:
                by_body_inf[pred].append(rule)

    pending_var = defaultdict(lambda: defaultdict(int))
    pending_label = defaultdict(int)  # (pred, values, positive?) -> dc
    touched_factors = set()

    for pred in state._topo:
        # appended candidate rules with this head: full evaluation (body
        # predicates topologically precede the head, so they are final)
        for rule in new_cand_by_head.get(pred, ()):
            for binding, count in state.eval_rule_full(rule):
                pending_fact[pred][_head_binding(rule, binding)] += count

        fact_items = sorted(
            (t, dc) for t, dc in pending_fact.pop(pred, {}).items() if dc != 0)

        if fact_items:
            overlay = dict(fact_items)
            for rule in by_body_cand.get(pred, ()):
                for binding, dc in state.eval_rule_delta(rule, pred, fact_items, overlay):
                    if dc:
                        pending_fact[rule.head.predicate][
                            _head_binding(rule, binding)] += dc
            for rule in by_body_sup.get(pred, ()):
                for binding, dc in state.eval_rule_delta(rule, pred, fact_items, overlay):
                    if dc:
                        pending_label[(rule.relation, _sup_binding(rule, binding),
                                       rule.label)] += dc

        # appended supervision rules labeling this pred: full evaluation
        for rule in new_sup_by_target.get(pred, ()):
            for binding, count in state.eval_rule_full(rule):
                pending_label[(pred, _sup_binding(rule, binding), rule.label)] += count

        # drain label deltas for this pred into presence changes
        label_items = defaultdict(int)
        for key in [k for k in pending_label if k[0] == pred]:
            rel, values, positive = key
            dc = pending_label.pop(key)
            if dc == 0:
                continue
            entry = state.label_counts[(rel, values)]
            entry[0 if positive else 1] += dc
            if entry[0] < 0 or entry[1] < 0:
                raise GroundingError(f"label count negative for {rel}{values}")
            if entry == [0, 0]:
                del state.label_counts[(rel, values)]
            label_items[values] += dc
            label_touched.add((rel, values))

        # appended inference rules with this head: full evaluation
        for rule in new_inf_by_head.get(pred, ()):
            rows = state.eval_rule_full(rule)
            _apply_inference_rows(state, rule, rows, touched_factors, pending_var)

        var_items = defaultdict(int)
        for t, dc in fact_items:
            var_items[t] += dc
        for t, dc in pending_var.pop(pred, {}).items():
            var_items[t] += dc
        for t, dc in label_items.items():
            var_items[t] += dc
        var_items = sorted((t, dc) for t, dc in var_items.items() if dc != 0)

        if var_items:
            overlay = dict(var_items)
            for rule in by_body_inf.get(pred, ()):
                rows = state.eval_rule_delta(rule, pred, var_items, overlay)
                _apply_inference_rows(state, rule, rows, touched_factors, pending_var)

        for t, dc in fact_items:
            state.fact_views[pred].update(t, dc)
        for t, dc in var_items:
            trans = state.var_views[pred].update(t, dc)
            label = (pred, t)
            if trans > 0 and label not in state.var_ids:
                var = graph.add_variable(pred, t, QUERY)
                state.var_ids[label] = var.id
                delta.new_vars[var.id] = var

    leftover = {p for p, items in pending_fact.items()
                if any(dc != 0 for dc in items.values())}
    leftover |= {p for p, items in pending_var.items()
                 if any(dc != 0 for dc in items.values())}
    leftover |= {k[0] for k, dc in pending_label.items() if dc != 0}
    if leftover:
        raise GroundingError(
            f"deltas left for unprocessed predicates: {sorted(leftover)}")

    # reconcile factors touched this batch
    for key in sorted(touched_factors, key=repr):
        fs = state.factor_table[key]
        _sync_factor(state, fs, delta)
        if not fs.groundings:
            del state.factor_table[key]

    # role changes (manual labels and changed derived labels)
    for label in sorted(label_touched):
        vid = state.var_ids.get(label)
        if vid is None:
            continue
        old_role = graph.variables[vid].role
        new_role = _role_for(state, *label)
        if old_role != new_role:
            graph.set_role(vid, new_role)
            if vid not in delta.new_vars:
                delta.evidence_changes[vid] = (old_role, new_role)

    # fresh variables pick up their roles directly
    for vid, var in delta.new_vars.items():
        role = _role_for(state, var.relation, var.values)
        if var.role != role:
            graph.set_role(vid, role)

    # drop variables whose presence reached zero
    for label in sorted(state.var_ids):
        pred, values = label
        if state.var_views[pred].count(values) != 0:
            continue
        vid = state.var_ids[label]
        if vid in delta.new_vars:
            graph.remove_variable(vid)
            del delta.new_vars[vid]
        else:
            snapshot = graph.remove_variable(vid)
            delta.removed_vars[vid] = snapshot
            delta.evidence_changes.pop(vid, None)
        del state.var_ids[label]
        state.manual_labels.pop(label, None)

    return delta


def _apply_inference_rows(state, rule, rows, touched_factors, pending_var):
    pred = rule.head.predicate
    support = defaultdict(int)
    # net the contributions per grounding first: with the same predicate at
    # several body positions, one batch yields cross terms whose partial
    # sums may dip below zero even though the net change is valid
    net = {}
    for binding, dc in rows:
        if dc == 0:
            continue
        hb = _head_binding(rule, binding)
        wb = _weight_binding(rule, binding)
        key = _grounding_key(rule, binding)
        entry = net.get((hb, wb, key))
        if entry is None:
            net[(hb, wb, key)] = [dc, binding]
        else:
            entry[0] += dc
    for (hb, wb, key), (dc, binding) in sorted(net.items(), key=lambda kv: repr(kv[0])):
        if dc == 0:
            continue
        fs = _factor_state(state, rule, hb, wb)
        cur = fs.groundings.get(key, 0)
        new = cur + dc
        if new < 0:
            raise GroundingError(
                f"grounding count negative in rule {rule.name} at {key}")
        if new == 0:
            fs.groundings.pop(key, None)
            fs.literals.pop(key, None)
        else:
            fs.groundings[key] = new
            fs.literals.setdefault(key, _grounding_literals(rule, binding))
        touched_factors.add((rule.name, hb, wb))
        support[hb] += dc
    for hb, dc in support.items():
        if dc == 0:
            continue
        cur = state.head_support[pred].get(hb, 0)
        new = cur + dc
        if new < 0:
            raise GroundingError(f"head support negative for {pred}{hb}")
        if new == 0:
            state.head_support[pred].pop(hb, None)
        else:
            state.head_support[pred][hb] = new
        pending_var[pred][hb] += dc


# -- delta file round-trip ----------------------------------------------------------


def delta_to_json(delta: UpdateDelta) -> str:
    def var_rec(v):
        return {"id": v.id, "rel": v.relation, "tuple": list(v.values), "role": v.role}

    def fac_rec(f):
        return {"id": f.id, "rule": f.rule, "head": f.head,
                "groundings": [[vid if s else -vid for vid, s in g] for g in f.groundings],
                "w": f.weight_ref, "g": f.g_kind}

    def weight_rec(w):
        return {"wid": w.id, "val": w.value, "fixed": w.fixed,
                "key": [w.key[0], list(w.key[1])] if w.key else None}

    doc = {
        "new_vars": [var_rec(v) for _, v in sorted(delta.new_vars.items())],
        "removed_vars": [var_rec(v) for _, v in sorted(delta.removed_vars.items())],
        "new_factors": [fac_rec(f) for _, f in sorted(delta.new_factors.items())],
        "removed_factors": [fac_rec(f) for _, f in sorted(delta.removed_factors.items())],
        "modified_factors": [
            {"old": fac_rec(o), "new": fac_rec(n)}
            for _, (o, n) in sorted(delta.modified_factors.items())],
        "new_weights": [weight_rec(w) for _, w in sorted(delta.new_weights.items())],
        "removed_weights": [weight_rec(w) for _, w in sorted(delta.removed_weights.items())],
        "weight_changes": {str(k): list(v) for k, v in sorted(delta.weight_changes.items())},
        "evidence_changes": {str(k): list(v) for k, v in sorted(delta.evidence_changes.items())},
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def delta_from_json(text: str) -> UpdateDelta:
    doc = json.loads(text)

    def var_obj(rec):
        return Variable(rec["id"], rec["rel"], tuple(rec["tuple"]), rec["role"])

    def fac_obj(rec):
        return Factor(rec["id"], rec["rule"], rec["head"],
                      tuple(tuple((abs(x), x > 0) for x in g) for g in rec["groundings"]),
                      rec["w"], rec["g"])

    def weight_obj(rec):
        key = rec.get("key")
        return Weight(rec["wid"], rec["val"], rec["fixed"],
                      (key[0], tuple(key[1])) if key else None)

    delta = UpdateDelta()
    delta.new_vars = {v["id"]: var_obj(v) for v in doc["new_vars"]}
    delta.removed_vars = {v["id"]: var_obj(v) for v in doc["removed_vars"]}
    delta.new_factors = {f["id"]: fac_obj(f) for f in doc["new_factors"]}
    delta.removed_factors = {f["id"]: fac_obj(f) for f in doc["removed_factors"]}
    delta.modified_factors = {
        rec["old"]["id"]: (fac_obj(rec["old"]), fac_obj(rec["new"]))
        for rec in doc["modified_factors"]}
    delta.new_weights = {w["wid"]: weight_obj(w) for w in doc["new_weights"]}
    delta.removed_weights = {w["wid"]: weight_obj(w) for w in doc["removed_weights"]}
    delta.weight_changes = {int(k): tuple(v) for k, v in doc["weight_changes"].items()}
    delta.evidence_changes = {int(k): tuple(v) for k, v in doc["evidence_changes"].items()}
    return delta
