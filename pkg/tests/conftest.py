"""Shared fixtures: program/store builders and random graph generators."""

import numpy as np
import pytest

from incfactor.graph import EV_NEG, EV_POS, FactorGraph
from incfactor.relstore import RelationStore
from incfactor.rules import LINEAR, LOGICAL, RATIO, parse_program

VOTING_RULES = """
edb Up(v).
edb Down(v).
idb Q().
Q() :- Up(x) weight = 1.0 @semantics(%(sem)s) @name(up).
Q() :- Down(x) weight = -1.0 @semantics(%(sem)s) @name(down).
"""

FIGURE2_RULES = """
edb R(x, y).
edb S(y).
idb Q(x).
Q(x) :- R(x, y) weight = 0.4 @name(f1).
Q(x) :- R(x, y), S(y) weight = -0.7 @name(f2).
"""


def voting_program(sem=LINEAR):
    return parse_program(VOTING_RULES % {"sem": sem})


def voting_store(n_up, n_down, evidence=True):
    store = RelationStore()
    store.declare("Up", ("v",))
    store.declare("Down", ("v",))
    store.declare("Q", ())
    store.insert_tuples("Up", [(f"u{i}",) for i in range(n_up)])
    store.insert_tuples("Down", [(f"d{i}",) for i in range(n_down)])
    if evidence:
        for i in range(n_up):
            store.mark_evidence("Up", (f"u{i}",), "pos")
        for i in range(n_down):
            store.mark_evidence("Down", (f"d{i}",), "pos")
    return store


def figure2_store():
    store = RelationStore()
    store.declare("R", ("x", "y"))
    store.declare("S", ("y",))
    store.declare("Q", ("x",), "IDB")
    store.insert_tuples("R", [("a", "b"), ("a", "c"), ("d", "b")])
    store.insert_tuples("S", [("b",), ("c",)])
    return store


def random_graph(seed, max_vars=15, max_factors=40, weight_range=0.8,
                 evidence_fraction=0.15, semantics=(LINEAR, RATIO, LOGICAL)):
    """Random mixed-semantics graph: unary, pairwise and small-conjunction
    factors over a handful of variables, some fixed as evidence."""
    rng = np.random.default_rng(seed)
    fg = FactorGraph()
    n = int(rng.integers(5, max_vars + 1))
    for i in range(n):
        fg.add_variable("X", (str(i),))
    for vid in range(1, n + 1):
        if rng.random() < evidence_fraction:
            fg.set_role(vid, EV_POS if rng.random() < 0.5 else EV_NEG)
    m = int(rng.integers(max(3, n // 2), max_factors + 1))
    for k in range(m):
        w = fg.add_weight(float(rng.uniform(-weight_range, weight_range)),
                          key=("w", (str(k),)))
        head = int(rng.integers(1, n + 1))
        kind = semantics[int(rng.integers(0, len(semantics)))]
        shape = rng.random()
        if shape < 0.3:
            groundings = [[]]
        elif shape < 0.75:
            j = int(rng.integers(1, n + 1))
            groundings = [[(j, bool(rng.random() < 0.8))]]
        else:
            n_g = int(rng.integers(1, 4))
            groundings = []
            for _ in range(n_g):
                size = int(rng.integers(1, 3))
                lits = [(int(rng.integers(1, n + 1)), bool(rng.random() < 0.8))
                        for _ in range(size)]
                groundings.append(lits)
        fg.add_factor(f"r{k}", head, groundings, w.id, kind)
    return fg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
