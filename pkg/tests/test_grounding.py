import random

import pytest

from conftest import FIGURE2_RULES, figure2_store, voting_program, voting_store
from incfactor.graph import EV_POS, QUERY, graph_signature
from incfactor.grounding import (apply_update, delta_rules, ground,
                                 incremental_ground)
from incfactor.relstore import RelationStore
from incfactor.rules import parse_program


def test_voting_grounding_one_factor_per_direction():
    graph, _ = ground(voting_program(), voting_store(3, 0))
    ups = [f for f in graph.factors.values() if f.rule == "up"]
    assert len(ups) == 1
    assert len(ups[0].groundings) == 3
    assert not [f for f in graph.factors.values() if f.rule == "down"]


def test_no_inference_rules_still_yields_variables():
    prog = parse_program("edb R(x, y).\nidb T(x).\nT(x) :- R(x, y).\n")
    store = RelationStore()
    store.declare("R", ("x", "y"))
    store.declare("T", ("x",), "IDB")
    store.insert_tuples("R", [("a", "b"), ("c", "d")])
    graph, _ = ground(prog, store)
    assert len(graph.factors) == 0
    labels = {(v.relation, v.values) for v in graph.variables.values()}
    assert ("T", ("a",)) in labels and ("R", ("a", "b")) in labels


def test_evidence_tuples_become_fixed_variables():
    graph, _ = ground(voting_program(), voting_store(2, 1, evidence=True))
    roles = {v.relation: set() for v in graph.variables.values()}
    for v in graph.variables.values():
        roles[v.relation].add(v.role)
    assert roles["Up"] == {EV_POS} and roles["Down"] == {EV_POS}
    assert roles["Q"] == {QUERY}


def test_delta_rules_shapes():
    prog = parse_program("edb R(x, y).\nedb S(y).\nidb Q(x).\n"
                         "Q(x) :- R(x, y) weight = 1.0 @name(f1).\n"
                         "Q(x) :- R(x, y), S(y) weight = 1.0 @name(f2).\n")
    specs = delta_rules(prog)
    f1 = [s for s in specs if s.rule == "f1"]
    assert len(f1) == 1 and str(f1[0]) == "Qδ :- Rδ(x, y)"
    f2 = [s for s in specs if s.rule == "f2"]
    assert len(f2) == 2
    assert str(f2[0]) == "Qδ :- Rδ(x, y), S(y)@new"
    assert str(f2[1]) == "Qδ :- R(x, y)@old, Sδ(y)"


def test_delta_rules_empty_body():
    from incfactor.rules import Atom, CandidateRule, RuleProgram, Declaration
    prog = RuleProgram(declarations=[Declaration("T", ("x",), "IDB")],
                       candidate_rules=[CandidateRule(Atom("T", ()), (), "r0")])
    assert delta_rules(prog) == []


def test_empty_delta_empty_update():
    prog = voting_program()
    store = voting_store(3, 1)
    _graph, state = ground(prog, store)
    upd = incremental_ground(state, [])
    assert upd.is_empty()


def test_single_insert_matches_scratch_figure2():
    prog = parse_program(FIGURE2_RULES)
    store = figure2_store()
    g_before, state = ground(prog, store)
    before_sig = graph_signature(g_before)
    snapshot = g_before.copy()
    delta = store.insert_tuples("R", [("e", "b")])
    upd = incremental_ground(state, [delta])
    g_scratch, _ = ground(prog, store)
    assert graph_signature(state.graph) == graph_signature(g_scratch)
    assert graph_signature(apply_update(snapshot, upd)) == graph_signature(g_scratch)
    assert graph_signature(snapshot) == before_sig  # apply_update copies
    # exactly one new head variable Q(e) plus the R tuple itself
    new_labels = {(v.relation, v.values) for v in upd.new_vars.values()}
    assert new_labels == {("R", ("e", "b")), ("Q", ("e",))}
    assert {f.rule for f in upd.new_factors.values()} == {"f1", "f2"}


def test_delete_last_support_removes_factor_and_variable():
    prog = parse_program(FIGURE2_RULES)
    store = figure2_store()
    _g, state = ground(prog, store)
    delta = store.delete_tuples("R", [("d", "b")])
    upd = incremental_ground(state, [delta])
    g_scratch, _ = ground(prog, store)
    assert graph_signature(state.graph) == graph_signature(g_scratch)
    removed = {(v.relation, v.values) for v in upd.removed_vars.values()}
    assert ("Q", ("d",)) in removed and ("R", ("d", "b")) in removed


RANDOM_PROGRAM = """
edb R(x, y).
edb S(y).
edb Label(x).
idb T(x).
idb Q(x).
T(x) :- R(x, y), S(y).
Q_Ev(x, true) :- Label(x), R(x, y).
Q(x) :- R(x, y) weight = 0.8 @name(w1).
Q(x) :- T(x), S(y) weight = w(y) @name(w2).
Q(x) :- R(x, y), R(y, x) weight = -0.4 @semantics(logical) @name(w3).
"""

EXTRA_RULES = [
    "idb U(x).\nU(x) :- R(x, y).\n",
    "Q(x) :- S(x) weight = 0.3 @semantics(ratio) @name(added_inf).\n",
    "T_Ev(x, false) :- R(x, x).\n",
]


def _random_store(rnd, dom):
    store = RelationStore()
    store.declare("R", ("x", "y"))
    store.declare("S", ("y",))
    store.declare("Label", ("x",))
    store.declare("T", ("x",), "IDB")
    store.declare("Q", ("x",), "IDB")
    store.insert_tuples("R", [(rnd.choice(dom), rnd.choice(dom))
                              for _ in range(rnd.randint(0, 6))])
    store.insert_tuples("S", [(rnd.choice(dom),)
                              for _ in range(rnd.randint(0, 3))])
    store.insert_tuples("Label", [(rnd.choice(dom),)
                                  for _ in range(rnd.randint(0, 2))])
    return store


def _random_ops(rnd, store, dom, n_ops):
    deltas = []
    for _ in range(n_ops):
        roll = rnd.random()
        if roll < 0.45:
            deltas.append(store.insert_tuples(
                "R", [(rnd.choice(dom), rnd.choice(dom))]))
        elif roll < 0.6:
            avail = store.tuples("R")
            if avail:
                deltas.append(store.delete_tuples("R", [rnd.choice(avail)]))
        elif roll < 0.8:
            deltas.append(store.insert_tuples("S", [(rnd.choice(dom),)]))
        else:
            avail = store.tuples("S")
            if avail and rnd.random() < 0.5:
                deltas.append(store.delete_tuples("S", [rnd.choice(avail)]))
            else:
                deltas.append(store.insert_tuples("Label", [(rnd.choice(dom),)]))
    return deltas


@pytest.mark.parametrize("seed", range(8))
def test_dred_equivalence_randomized(seed):
    rnd = random.Random(seed)
    dom = ["a", "b", "c", "d", "e"]
    prog = parse_program(RANDOM_PROGRAM)
    store = _random_store(rnd, dom)
    g0, state = ground(prog, store)
    snapshot = g0.copy()
    for step in range(3):
        deltas = _random_ops(rnd, store, dom, rnd.randint(1, 5))
        added = None
        if step == 1 and rnd.random() < 0.5:
            added = parse_program(rnd.choice(EXTRA_RULES),
                                  name_offset=20 + step, validate=False)
        upd = incremental_ground(state, deltas, added_rules=added)
        prog = state.program
        g_scratch, _ = ground(prog, store)
        assert graph_signature(state.graph) == graph_signature(g_scratch), \
            f"seed {seed} step {step}"
        snapshot = apply_update(snapshot, upd)
        assert graph_signature(snapshot) == graph_signature(g_scratch)


def test_incremental_scan_count_is_sublinear():
    prog = parse_program(
        "edb R(x, y).\nedb S(y).\nidb Q(x).\n"
        "Q(x) :- R(x, y), S(y) weight = 1.0 @name(f).\n")
    store = RelationStore()
    store.declare("R", ("x", "y"))
    store.declare("S", ("y",))
    store.declare("Q", ("x",), "IDB")
    store.insert_tuples("R", [(f"x{i}", f"y{i % 40}") for i in range(1000)])
    store.insert_tuples("S", [(f"y{i}",) for i in range(40)])
    _g, state = ground(prog, store)
    full_scans = state.scan_count
    state.scan_count = 0
    delta = store.insert_tuples("R", [("new", "y3")])
    incremental_ground(state, [delta])
    assert state.scan_count < full_scans / 50
    state.scan_count = 0
    delta = store.insert_tuples("S", [("fresh",)])
    incremental_ground(state, [delta])
    assert state.scan_count < full_scans / 50


def test_self_join_batch_nets_before_applying():
    # delete (a,b) and insert (b,a) in one batch: the two delta positions of
    # the self-join produce -1 and +1 for the same grounding, which must net
    # to zero instead of transiently driving the count negative
    prog = parse_program(
        "edb R(x, y).\nidb Q(x).\n"
        "Q(x) :- R(x, y), R(y, x) weight = -0.4 @semantics(logical) @name(w3).\n")
    store = RelationStore()
    store.declare("R", ("x", "y"))
    store.declare("Q", ("x",), "IDB")
    store.insert_tuples("R", [("c", "a"), ("a", "b")])
    _g, state = ground(prog, store)
    deltas = [store.delete_tuples("R", [("a", "b")]),
              store.insert_tuples("R", [("b", "a")]),
              store.delete_tuples("R", [("c", "a")])]
    incremental_ground(state, deltas)
    g_scr, _ = ground(prog, store)
    assert graph_signature(state.graph) == graph_signature(g_scr)


def test_label_dropped_by_delete_reinsert_in_one_batch():
    # marking evidence, deleting the tuple and re-inserting it nets to no
    # count change, yet the store record (and its label) was destroyed at
    # the zero crossing; the grounding state must follow the store
    prog = parse_program(
        "edb S(y).\nidb Q(y).\nQ(y) :- S(y) weight = 0.5.\n")
    store = RelationStore()
    store.declare("S", ("y",))
    store.declare("Q", ("y",), "IDB")
    store.insert_tuples("S", [("b",)])
    _g, state = ground(prog, store)
    deltas = [store.insert_tuples("S", [("c",)])]
    store.mark_evidence("S", ("c",), "pos")
    evidence = [("S", ("c",), "pos")]
    deltas.append(store.delete_tuples("S", [("c",)]))
    deltas.append(store.insert_tuples("S", [("c",)]))
    incremental_ground(state, deltas, evidence)
    g_scr, _ = ground(prog, store)
    assert graph_signature(state.graph) == graph_signature(g_scr)
    vid = state.var_ids[("S", ("c",))]
    assert state.graph.variables[vid].role == QUERY


def test_conflicting_supervision_labels_error_on_both_paths():
    prog = parse_program(
        "edb R(x).\nidb Q(x).\n"
        "Q_Ev(x, true) :- R(x).\n"
        "Q_Ev(x, false) :- R(x).\n"
        "Q(x) :- R(x) weight = 1.0.\n")
    store = RelationStore()
    store.declare("R", ("x",))
    store.declare("Q", ("x",), "IDB")
    store.insert_tuples("R", [("a",)])
    from incfactor.errors import GroundingError
    with pytest.raises(GroundingError):
        ground(prog, store)


def test_evidence_change_flips_role_without_removing_variable():
    prog = parse_program(FIGURE2_RULES)
    store = figure2_store()
    _g, state = ground(prog, store)
    vid = state.var_ids[("R", ("a", "b"))]
    store.mark_evidence("R", ("a", "b"), "pos")
    upd = incremental_ground(state, [], evidence_changes=[("R", ("a", "b"), "pos")])
    assert upd.evidence_changes == {vid: (QUERY, EV_POS)}
    assert state.graph.variables[vid].role == EV_POS
    g_scratch, _ = ground(prog, store)
    assert graph_signature(state.graph) == graph_signature(g_scratch)
