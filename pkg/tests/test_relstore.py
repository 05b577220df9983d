import random

import pytest

from incfactor.errors import EvidenceConflictError, StoreError
from incfactor.relstore import (EDB, NEGATIVE, POSITIVE, RelationStore,
                                dump_tsv, load_tsv)


def make_store():
    store = RelationStore()
    store.declare("R", ("x", "y"))
    return store


def test_insert_twice_gives_count_two():
    store = make_store()
    store.insert_tuples("R", [("a", "b"), ("a", "b")])
    assert store.count("R", ("a", "b")) == 2


def test_insert_nothing_is_identity():
    store = make_store()
    before = store.state()
    delta = store.insert_tuples("R", [])
    assert delta.changes == []
    assert store.state() == before


def test_insert_then_single_delete_keeps_tuple():
    store = make_store()
    store.insert_tuples("R", [("a", "b"), ("a", "b")])
    store.delete_tuples("R", [("a", "b")])
    assert store.count("R", ("a", "b")) == 1
    assert ("a", "b") in store.tuples("R")


def test_delete_to_zero_removes_tuple():
    store = make_store()
    store.insert_tuples("R", [("a", "b")])
    store.delete_tuples("R", [("a", "b")])
    assert store.count("R", ("a", "b")) == 0
    assert ("a", "b") not in store.tuples("R")


def test_delete_from_three():
    store = make_store()
    store.insert_tuples("R", [("a", "b")] * 3)
    store.delete_tuples("R", [("a", "b")])
    assert store.count("R", ("a", "b")) == 2


def test_delete_absent_tuple_errors():
    store = make_store()
    with pytest.raises(StoreError):
        store.delete_tuples("R", [("a", "b")])


def test_delete_beyond_count_errors_and_leaves_store_unchanged():
    store = make_store()
    store.insert_tuples("R", [("a", "b")])
    before = store.state()
    with pytest.raises(StoreError):
        store.delete_tuples("R", [("a", "b"), ("a", "b")])
    assert store.state() == before


def test_unknown_relation_and_arity_mismatch():
    store = make_store()
    with pytest.raises(StoreError):
        store.insert_tuples("S", [("a",)])
    with pytest.raises(StoreError):
        store.insert_tuples("R", [("a",)])


def test_mark_evidence_inserts_and_is_idempotent():
    store = make_store()
    store.mark_evidence("R", ("m1", "m2"), POSITIVE)
    assert store.count("R", ("m1", "m2")) == 1
    store.mark_evidence("R", ("m1", "m2"), POSITIVE)
    rec = store.relation("R").tuples[("m1", "m2")]
    assert rec.evidence_label == POSITIVE and rec.count == 1


def test_conflicting_evidence_errors():
    store = make_store()
    store.mark_evidence("R", ("a", "b"), POSITIVE)
    with pytest.raises(EvidenceConflictError):
        store.mark_evidence("R", ("a", "b"), NEGATIVE)


def test_order_independence_of_interleavings():
    ops = [("ins", ("a", "b")), ("ins", ("a", "b")), ("ins", ("c", "d")),
           ("del", ("a", "b")), ("ins", ("e", "f")), ("del", ("c", "d")),
           ("ins", ("a", "b"))]
    rnd = random.Random(7)
    reference = None
    for _ in range(20):
        # only net-count matters: shuffle inserts first, then deletes, etc.
        # then verify any valid interleaving (deletes never below zero)
        order = ops[:]
        rnd.shuffle(order)
        store = make_store()
        pending = []
        for kind, t in order:
            if kind == "ins":
                store.insert_tuples("R", [t])
            else:
                if store.count("R", t) > 0:
                    store.delete_tuples("R", [t])
                else:
                    pending.append(t)
        for t in pending:
            store.delete_tuples("R", [t])
        state = store.state()
        if reference is None:
            reference = state
        assert state == reference


def test_delta_negation_restores_store():
    store = make_store()
    store.insert_tuples("R", [("a", "b")] * 2)
    before = store.state()
    delta = store.insert_tuples("R", [("a", "b"), ("c", "d")])
    store.apply_delta(delta.negated())
    assert store.state() == before


def test_apply_delta_never_goes_negative():
    store = make_store()
    store.insert_tuples("R", [("a", "b")])
    from incfactor.relstore import DeltaRelation
    with pytest.raises(StoreError):
        store.apply_delta(DeltaRelation("R", [(("a", "b"), -2)]))


def test_tsv_round_trip(tmp_path):
    store = make_store()
    store.insert_tuples("R", [("a", "b")] * 3 + [("c", "d")])
    store.mark_evidence("R", ("c", "d"), NEGATIVE)
    path = tmp_path / "r.tsv"
    dump_tsv(store, "R", path)
    store2 = RelationStore()
    load_tsv(store2, path)
    assert store2.state() == store.state()


def test_tsv_evidence_relation_maps_onto_labels(tmp_path):
    path = tmp_path / "ev.tsv"
    path.write_text("#relation Married(m1,m2) kind=EDB\n"
                    "x\ty\n"
                    "#relation Married_Ev(m1,m2) kind=Evidence\n"
                    "x\ty\t@label=pos\n"
                    "p\tq\t@label=neg\n")
    store = RelationStore()
    load_tsv(store, path)
    rel = store.relation("Married")
    assert rel.tuples[("x", "y")].evidence_label == POSITIVE
    assert rel.tuples[("p", "q")].evidence_label == NEGATIVE


def test_tsv_malformed_header_errors(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("#relation R x,y kind=EDB\na\tb\n")
    with pytest.raises(StoreError):
        load_tsv(RelationStore(), path)


def test_tsv_arity_mismatch_reports_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("#relation R(x,y) kind=EDB\na\tb\tc\n")
    with pytest.raises(StoreError) as err:
        load_tsv(RelationStore(), path)
    assert ":2:" in str(err.value)
