"""In-memory relational store with multiset derivation counts.

Every stored tuple carries a count (its number of derivations) so that
insertions and deletions can be maintained incrementally: a tuple is
present exactly while its count is positive.  Deltas record the signed
count changes actually applied, which makes them invertible.

Evidence is kept as a label on the tuple itself rather than in a parallel
relation; loaders map ``<name>_Ev`` relations onto these labels.

Concurrency: single writer, arbitrarily many readers.  ``snapshot()``
returns a deep copy safe to hand to parallel samplers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .errors import EvidenceConflictError, StoreError

EDB = "EDB"
IDB = "IDB"
EVIDENCE = "Evidence"

POSITIVE = "pos"
NEGATIVE = "neg"


@dataclass
class TupleRecord:
    values: tuple
    count: int = 1
    evidence_label: str | None = None  # POSITIVE | NEGATIVE | None


@dataclass
class Relation:
    name: str
    columns: tuple
    kind: str = EDB
    tuples: dict = field(default_factory=dict)  # values tuple -> TupleRecord

    @property
    def arity(self):
        return len(self.columns)

    def __iter__(self):
        return iter(self.tuples.values())


@dataclass
class DeltaRelation:
    """Signed count changes against one base relation."""

    base: str
    changes: list  # list of (values tuple, signed int delta)

    def negated(self):
        return DeltaRelation(self.base, [(v, -d) for v, d in self.changes])

    def net(self):
        """Collapse to one signed delta per tuple, dropping zero entries."""
        acc = {}
        for values, delta in self.changes:
            acc[values] = acc.get(values, 0) + delta
        return {v: d for v, d in acc.items() if d != 0}


class RelationStore:
    def __init__(self):
        self.relations: dict[str, Relation] = {}

    # -- schema ----------------------------------------------------------

    def declare(self, name, columns, kind=EDB):
        if name in self.relations:
            rel = self.relations[name]
            if rel.columns != tuple(columns) or rel.kind != kind:
                raise StoreError(f"relation {name} already declared with a different schema")
            return rel
        if kind not in (EDB, IDB, EVIDENCE):
            raise StoreError(f"unknown relation kind {kind!r}")
        rel = Relation(name=name, columns=tuple(columns), kind=kind)
        self.relations[name] = rel
        return rel

    def relation(self, name) -> Relation:
        try:
            return self.relations[name]
        except KeyError:
            raise StoreError(f"unknown relation {name!r}") from None

    def _check_arity(self, rel, values):
        if len(values) != rel.arity:
            raise StoreError(
                f"arity mismatch for {rel.name}: got {len(values)} fields, expected {rel.arity}"
            )

    # -- mutation --------------------------------------------------------

    def insert_tuples(self, relation, tuples) -> DeltaRelation:
        """Add one derivation per occurrence in ``tuples`` (multiset input)."""
        rel = self.relation(relation)
        changes = []
        for values in tuples:
            values = tuple(values)
            self._check_arity(rel, values)
            rec = rel.tuples.get(values)
            if rec is None:
                rel.tuples[values] = TupleRecord(values=values, count=1)
            else:
                rec.count += 1
            changes.append((values, 1))
        return DeltaRelation(relation, changes)

    def delete_tuples(self, relation, tuples) -> DeltaRelation:
        rel = self.relation(relation)
        # validate against the net multiset first so a failed call leaves
        # the store untouched
        need = {}
        for values in tuples:
            values = tuple(values)
            self._check_arity(rel, values)
            need[values] = need.get(values, 0) + 1
        for values, n in need.items():
            rec = rel.tuples.get(values)
            have = rec.count if rec is not None else 0
            if have < n:
                raise StoreError(
                    f"cannot delete {relation}{values} x{n}: only {have} derivations present"
                )
        changes = []
        for values in tuples:
            values = tuple(values)
            rec = rel.tuples[values]
            rec.count -= 1
            if rec.count == 0:
                del rel.tuples[values]
            changes.append((values, -1))
        return DeltaRelation(relation, changes)

    def apply_delta(self, delta: DeltaRelation):
        """Apply signed count changes; never lets a count go negative."""
        rel = self.relation(delta.base)
        for values, d in delta.net().items():
            self._check_arity(rel, values)
            rec = rel.tuples.get(values)
            have = rec.count if rec is not None else 0
            if have + d < 0:
                raise StoreError(
                    f"delta drives {delta.base}{values} count negative ({have}{d:+d})"
                )
        for values, d in delta.changes:
            rec = rel.tuples.get(values)
            if rec is None:
                if d > 0:
                    rel.tuples[values] = TupleRecord(values=tuple(values), count=d)
                elif d < 0:
                    raise StoreError(f"delta deletes absent tuple {delta.base}{values}")
            else:
                rec.count += d
                if rec.count == 0:
                    del rel.tuples[values]
                elif rec.count < 0:
                    raise StoreError(
                        f"delta drives {delta.base}{values} count negative"
                    )

    def mark_evidence(self, relation, values, label):
        if label not in (POSITIVE, NEGATIVE):
            raise StoreError(f"evidence label must be {POSITIVE!r} or {NEGATIVE!r}")
        rel = self.relation(relation)
        values = tuple(values)
        self._check_arity(rel, values)
        rec = rel.tuples.get(values)
        if rec is None:
            rec = TupleRecord(values=values, count=1)
            rel.tuples[values] = rec
        if rec.evidence_label is not None and rec.evidence_label != label:
            raise EvidenceConflictError(
                f"{relation}{values} already labeled {rec.evidence_label}, cannot relabel {label}"
            )
        rec.evidence_label = label

    # -- read ------------------------------------------------------------

    def count(self, relation, values):
        rec = self.relation(relation).tuples.get(tuple(values))
        return rec.count if rec is not None else 0

    def tuples(self, relation):
        """Set view: the support of the multiset, in insertion order."""
        return list(self.relation(relation).tuples.keys())

    def snapshot(self) -> "RelationStore":
        return copy.deepcopy(self)

    def state(self):
        """Canonical content map for equality checks."""
        return {
            name: {
                values: (rec.count, rec.evidence_label)
                for values, rec in sorted(rel.tuples.items())
            }
            for name, rel in sorted(self.relations.items())
        }

    def active_domain(self):
        """All constants observed in stored tuples, sorted."""
        dom = set()
        for rel in self.relations.values():
            for values in rel.tuples:
                dom.update(values)
        return sorted(dom)


# -- TSV load/dump --------------------------------------------------------
#
# One relation per file.  Header:
#   #relation <name>(<col>,...) kind=<EDB|IDB|Evidence>
# then tab-separated rows; optional trailing fields `@count=<n>` and
# `@label=<pos|neg>`.  An Evidence relation must be named `<base>_Ev` and
# its rows label tuples of <base> (default label: pos).


def _parse_header(line, path, lineno):
    body = line[len("#relation"):].strip()
    try:
        name, rest = body.split("(", 1)
        cols, rest = rest.split(")", 1)
        kind = rest.strip()
        if not kind.startswith("kind="):
            raise ValueError
        kind = kind[len("kind="):].strip()
    except ValueError:
        raise StoreError(f"{path}:{lineno}: malformed relation header: {line!r}") from None
    columns = [c.strip() for c in cols.split(",")] if cols.strip() else []
    if kind not in (EDB, IDB, EVIDENCE):
        raise StoreError(f"{path}:{lineno}: unknown relation kind {kind!r}")
    return name.strip(), columns, kind


def load_tsv(store: RelationStore, path):
    """Load one relation file into the store."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    name = None
    columns = None
    kind = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip("\n")
        if not line.strip():
            continue
        if line.startswith("#relation"):
            name, columns, kind = _parse_header(line, path, lineno)
            if kind == EVIDENCE:
                if not name.endswith("_Ev"):
                    raise StoreError(
                        f"{path}:{lineno}: Evidence relation {name!r} must be named <base>_Ev"
                    )
            else:
                store.declare(name, columns, kind)
            continue
        if line.startswith("#"):
            continue
        if name is None:
            raise StoreError(f"{path}:{lineno}: data row before #relation header")
        fields = line.split("\t")
        count = 1
        label = None
        while fields and fields[-1].startswith("@"):
            ann = fields.pop()
            if ann.startswith("@count="):
                try:
                    count = int(ann[len("@count="):])
                except ValueError:
                    raise StoreError(f"{path}:{lineno}: bad @count annotation {ann!r}") from None
                if count < 1:
                    raise StoreError(f"{path}:{lineno}: @count must be >= 1")
            elif ann.startswith("@label="):
                label = ann[len("@label="):]
                if label not in (POSITIVE, NEGATIVE):
                    raise StoreError(f"{path}:{lineno}: @label must be pos or neg")
            else:
                raise StoreError(f"{path}:{lineno}: unknown annotation {ann!r}")
        values = tuple(fields)
        if kind == EVIDENCE:
            base = name[: -len("_Ev")]
            rel = store.relation(base)
            if len(values) != rel.arity:
                raise StoreError(
                    f"{path}:{lineno}: arity mismatch for {name}: got {len(values)}, "
                    f"expected {rel.arity} (schema of {base})"
                )
            store.mark_evidence(base, values, label or POSITIVE)
        else:
            rel = store.relation(name)
            if len(values) != rel.arity:
                raise StoreError(
                    f"{path}:{lineno}: arity mismatch for {name}: got {len(values)}, expected {rel.arity}"
                )
            store.insert_tuples(name, [values] * count)
            if label is not None:
                store.mark_evidence(name, values, label)
    return store


def dump_tsv(store: RelationStore, relation, path):
    rel = store.relation(relation)
    with open(path, "w", encoding="utf-8") as fh:
        cols = ",".join(rel.columns)
        fh.write(f"#relation {rel.name}({cols}) kind={rel.kind}\n")
        for values in sorted(rel.tuples):
            rec = rel.tuples[values]
            fields = list(values)
            if rec.count != 1:
                fields.append(f"@count={rec.count}")
            if rec.evidence_label is not None:
                fields.append(f"@label={rec.evidence_label}")
            fh.write("\t".join(fields) + "\n")


def load_directory(store: RelationStore, data_dir):
    """Load every .tsv file in a directory, evidence files last."""
    import os

    paths = sorted(
        os.path.join(data_dir, p) for p in os.listdir(data_dir) if p.endswith(".tsv")
    )

    def is_evidence(path):
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#relation"):
                    return "kind=Evidence" in line
        return False

    plain = [p for p in paths if not is_evidence(p)]
    evid = [p for p in paths if is_evidence(p)]
    for p in plain + evid:
        load_tsv(store, p)
    return store
