import math

import pytest

from conftest import figure2_store, random_graph, voting_program, voting_store
from incfactor.errors import EnumerationCapError
from incfactor.graph import (EV_POS, FactorGraph, enumerate_marginals,
                             enumerate_worlds, factor_weight, g_eval,
                             graph_from_jsonl, graph_signature, graph_to_jsonl,
                             new_world, voting_closed_form,
                             voting_log_complement, world_weight)
from incfactor.grounding import ground
from incfactor.rules import LINEAR, LOGICAL, RATIO


def test_g_eval_table():
    assert g_eval(LINEAR, 5) == 5.0
    assert g_eval(RATIO, 0) == 0.0
    assert g_eval(RATIO, 1) == pytest.approx(math.log(2))
    assert g_eval(LOGICAL, 3) == 1.0
    assert g_eval(LOGICAL, 0) == 0.0


def two_of_three_factor(kind=LINEAR, w=1.0):
    fg = FactorGraph()
    head = fg.add_variable("H", ("h",)).id
    b = [fg.add_variable("B", (str(i),)).id for i in range(3)]
    wid = fg.add_weight(w, key=("r", ()))
    fac = fg.add_factor("r", head, [[(v, True)] for v in b], wid.id, kind)
    return fg, fac, head, b


def test_factor_weight_counts_satisfied_groundings():
    fg, fac, head, b = two_of_three_factor()
    world = {head: True, b[0]: True, b[1]: True, b[2]: False}
    assert factor_weight(fac, world, fg.weights) == 2.0
    world[head] = False
    assert factor_weight(fac, world, fg.weights) == -2.0


def test_factor_weight_logical_zero_support():
    fg, fac, head, b = two_of_three_factor(kind=LOGICAL)
    world = {head: True, b[0]: False, b[1]: False, b[2]: False}
    assert factor_weight(fac, world, fg.weights) == 0.0
    world[head] = False
    assert factor_weight(fac, world, fg.weights) == 0.0


def test_world_weight_zero_factors():
    fg = FactorGraph()
    fg.add_variable("X", ("a",))
    assert world_weight(fg, {1: True}) == 0.0


def test_world_weight_voting_example():
    prog = voting_program()
    store = voting_store(3, 1)
    graph, _ = ground(prog, store)
    q = next(v for v, var in graph.variables.items() if var.relation == "Q")
    world = new_world(graph)
    world[q] = True
    assert world_weight(graph, world) == pytest.approx(2.0)  # g(3) - g(1)
    world[q] = False
    assert world_weight(graph, world) == pytest.approx(-2.0)


def test_enumerate_single_free_variable_is_half():
    fg = FactorGraph()
    fg.add_variable("X", ("a",))
    assert enumerate_marginals(fg)[1] == pytest.approx(0.5)


def test_enumerate_voting_matches_closed_form():
    prog = voting_program()
    graph, _ = ground(prog, voting_store(3, 1))
    q = next(v for v, var in graph.variables.items() if var.relation == "Q")
    assert enumerate_marginals(graph)[q] == pytest.approx(
        voting_closed_form(3, 1, LINEAR), abs=1e-12)
    assert voting_closed_form(3, 1, LINEAR) == pytest.approx(0.982014, abs=1e-6)


def test_enumerate_voting_logical_is_half():
    prog = voting_program(LOGICAL)
    graph, _ = ground(prog, voting_store(5, 2))
    q = next(v for v, var in graph.variables.items() if var.relation == "Q")
    assert enumerate_marginals(graph)[q] == pytest.approx(0.5, abs=1e-12)


def test_enumeration_cap():
    fg = FactorGraph()
    for i in range(25):
        fg.add_variable("X", (str(i),))
    with pytest.raises(EnumerationCapError):
        enumerate_marginals(fg)


def test_world_probabilities_sum_to_one():
    for seed in range(5):
        fg = random_graph(seed, max_vars=10, max_factors=20)
        _free, p = enumerate_worlds(fg)
        assert abs(p.sum() - 1.0) < 1e-12


def test_shift_invariance():
    fg = random_graph(3, max_vars=8, max_factors=15)
    base = enumerate_marginals(fg)
    # add a constant to every world weight: an always-true headless factor
    w = fg.add_weight(3.7, key=("shift", ()))
    fg.add_factor("shift", None, [[]], w.id, LINEAR)
    shifted = enumerate_marginals(fg)
    for vid in base:
        assert base[vid] == pytest.approx(shifted[vid], abs=1e-12)


def test_logical_duplicate_grounding_invariance_linear_sensitivity():
    def build(kind, dup):
        fg = FactorGraph()
        h = fg.add_variable("H", ("h",)).id
        b = fg.add_variable("B", ("b",)).id
        w = fg.add_weight(0.9, key=("r", ()))
        groundings = [[(b, True)]] * (2 if dup else 1)
        fg.add_factor("r", h, groundings, w.id, kind)
        return fg, h

    g1, h1 = build(LOGICAL, False)
    g2, h2 = build(LOGICAL, True)
    assert enumerate_marginals(g1)[h1] == pytest.approx(
        enumerate_marginals(g2)[h2], abs=1e-12)
    g3, h3 = build(LINEAR, False)
    g4, h4 = build(LINEAR, True)
    assert abs(enumerate_marginals(g3)[h3] - enumerate_marginals(g4)[h4]) > 1e-3


# -- closed form ----------------------------------------------------------------


def test_voting_closed_form_large_counts():
    p_linear = voting_closed_form(10**6, 10**6 - 100, LINEAR)
    assert p_linear == pytest.approx(1.0)
    assert voting_log_complement(10**6, 10**6 - 100, LINEAR) <= math.log(1e-80)
    p_ratio = voting_closed_form(10**6, 10**6 - 100, RATIO)
    assert abs(p_ratio - 0.5) < 1e-3
    assert p_ratio == pytest.approx(0.500050, abs=1e-6)
    assert voting_closed_form(10**6, 10**6 - 100, LOGICAL) == 0.5


def test_two_world_graph_matches_closed_form_to_1e12():
    for kind in (LINEAR, RATIO, LOGICAL):
        prog = voting_program(kind)
        graph, _ = ground(prog, voting_store(3, 1))
        q = next(v for v, var in graph.variables.items() if var.relation == "Q")
        assert enumerate_marginals(graph)[q] == pytest.approx(
            voting_closed_form(3, 1, kind), abs=1e-12)


# -- serialization ----------------------------------------------------------------


def test_jsonl_round_trip_exact():
    fg = random_graph(11, max_vars=10, max_factors=20)
    fg.set_role(2, EV_POS)
    text = graph_to_jsonl(fg)
    back = graph_from_jsonl(text)
    assert graph_to_jsonl(back) == text
    assert graph_signature(back) == graph_signature(fg)


def test_jsonl_negative_literals():
    fg = FactorGraph()
    a = fg.add_variable("X", ("a",)).id
    b = fg.add_variable("X", ("b",)).id
    w = fg.add_weight(1.25, key=("r", ()))
    fg.add_factor("r", a, [[(b, False)]], w.id, RATIO)
    back = graph_from_jsonl(graph_to_jsonl(fg))
    assert back.factors[0].groundings == (((b, False),),)
    assert back.factors[0].g_kind == RATIO


def test_figure2_grounding_counts():
    from incfactor.rules import parse_program
    from conftest import FIGURE2_RULES
    prog = parse_program(FIGURE2_RULES)
    graph, _ = ground(prog, figure2_store())
    # variables: 3 R tuples + 2 S tuples + Q(a), Q(d)
    assert len(graph.variables) == 7
    by_rule = {}
    for fac in graph.factors.values():
        by_rule.setdefault(fac.rule, []).append(fac)
    assert len(by_rule["f1"]) == 2  # Q(a), Q(d)
    assert len(by_rule["f2"]) == 2
    f1_sizes = sorted(len(f.groundings) for f in by_rule["f1"])
    assert f1_sizes == [1, 2]  # Q(d) <- {R(d,b)}; Q(a) <- {R(a,b), R(a,c)}
    f2_sizes = sorted(len(f.groundings) for f in by_rule["f2"])
    assert f2_sizes == [1, 2]
