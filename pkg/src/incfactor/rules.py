"""Parser and semantic analysis for the weighted rule language.

A program is a sequence of statements, each terminated by ``.``:

    edb Up(voter).                      # relation declarations
    idb MarriedCandidate(m1, m2).
    MarriedCandidate(m1,m2) :- PersonCandidate(s,m1), PersonCandidate(s,m2).
    Married_Ev(m1,m2,true) :- MarriedCandidate(m1,m2), Known(m1,m2).
    Q() :- Up(x) weight = 1.0 @semantics(ratio).
    Class(x) :- R(x,f) weight = w(f) @init(0.1) @interest @name(clf).

Rules without a weight clause are candidate rules (they derive tuples);
rules whose head predicate ends in ``_Ev`` are supervision rules (they
derive evidence labels, the last head argument must be the constant
``true`` or ``false``); rules with a weight clause are inference rules.

Argument convention: a lowercase-leading identifier is a variable;
quoted strings, numbers, ``true``/``false`` and uppercase-leading
identifiers are constants.  ``#`` starts a comment.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

from .errors import ParseError, ProgramError

LINEAR = "linear"
RATIO = "ratio"
LOGICAL = "logical"
SEMANTICS = (LINEAR, RATIO, LOGICAL)


# -- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Const:
    value: str

    def __str__(self):
        if re.fullmatch(r"[A-Z][A-Za-z0-9_]*|true|false|-?\d+(\.\d+)?", self.value):
            return self.value
        return '"%s"' % self.value.replace("\\", "\\\\").replace('"', '\\"')


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple

    def __str__(self):
        return "%s(%s)" % (self.predicate, ", ".join(str(a) for a in self.args))

    def variables(self):
        return [a for a in self.args if isinstance(a, Var)]


@dataclass(frozen=True)
class Fixed:
    value: float

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True)
class Tied:
    vars: tuple

    def __str__(self):
        return "w(%s)" % ", ".join(v.name for v in self.vars)


@dataclass(frozen=True)
class Learned:
    vars: tuple
    initial: float

    def __str__(self):
        return "w(%s)" % ", ".join(v.name for v in self.vars)


@dataclass(frozen=True)
class Declaration:
    name: str
    columns: tuple
    kind: str  # "EDB" | "IDB"

    def __str__(self):
        return "%s %s(%s)." % (self.kind.lower(), self.name, ", ".join(self.columns))


@dataclass(frozen=True)
class CandidateRule:
    head: Atom
    body: tuple
    name: str

    def __str__(self):
        return "%s :- %s @name(%s)." % (
            self.head,
            ", ".join(str(a) for a in self.body),
            self.name,
        )


@dataclass(frozen=True)
class SupervisionRule:
    relation: str  # base relation being labeled
    head_args: tuple  # label argument excluded
    label: bool  # True = positive evidence
    body: tuple
    name: str

    def __str__(self):
        args = list(self.head_args) + [Const("true" if self.label else "false")]
        return "%s_Ev(%s) :- %s @name(%s)." % (
            self.relation,
            ", ".join(str(a) for a in args),
            ", ".join(str(a) for a in self.body),
            self.name,
        )


@dataclass(frozen=True)
class InferenceRule:
    head: Atom
    body: tuple
    weight_spec: object  # Fixed | Tied | Learned
    semantics: str = LINEAR
    interest: bool = False
    name: str = ""

    def __str__(self):
        parts = ["%s :- %s weight = %s" % (
            self.head, ", ".join(str(a) for a in self.body), self.weight_spec)]
        if isinstance(self.weight_spec, Learned):
            parts.append("@init(%r)" % self.weight_spec.initial)
        if self.semantics != LINEAR:
            parts.append("@semantics(%s)" % self.semantics)
        if self.interest:
            parts.append("@interest")
        parts.append("@name(%s)" % self.name)
        return " ".join(parts) + "."

    def head_vars(self):
        seen = []
        for v in self.head.variables():
            if v not in seen:
                seen.append(v)
        return seen

    def weight_vars(self):
        if isinstance(self.weight_spec, Fixed):
            return []
        return list(self.weight_spec.vars)

    def body_vars(self):
        seen = []
        for atom in self.body:
            for v in atom.variables():
                if v not in seen:
                    seen.append(v)
        return seen


@dataclass
class RuleProgram:
    declarations: list = field(default_factory=list)
    candidate_rules: list = field(default_factory=list)
    supervision_rules: list = field(default_factory=list)
    inference_rules: list = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, RuleProgram)
            and self.declarations == other.declarations
            and self.candidate_rules == other.candidate_rules
            and self.supervision_rules == other.supervision_rules
            and self.inference_rules == other.inference_rules
        )

    @property
    def relations(self):
        return {d.name: d for d in self.declarations}

    def all_rules(self):
        return list(self.candidate_rules) + list(self.supervision_rules) + list(
            self.inference_rules
        )

    def rule_constants(self):
        out = set()
        for rule in self.all_rules():
            atoms = list(rule.body)
            if isinstance(rule, (CandidateRule, InferenceRule)):
                atoms.append(rule.head)
            for atom in atoms:
                for a in atom.args:
                    if isinstance(a, Const):
                        out.add(a.value)
        return out

    def extended(self, delta: "RuleProgram") -> "RuleProgram":
        """New program with the delta's declarations and rules appended."""
        merged = RuleProgram(
            declarations=list(self.declarations),
            candidate_rules=list(self.candidate_rules),
            supervision_rules=list(self.supervision_rules),
            inference_rules=list(self.inference_rules),
        )
        known = {d.name for d in merged.declarations}
        for d in delta.declarations:
            if d.name not in known:
                merged.declarations.append(d)
        merged.candidate_rules.extend(delta.candidate_rules)
        merged.supervision_rules.extend(delta.supervision_rules)
        merged.inference_rules.extend(delta.inference_rules)
        names = [r.name for r in merged.all_rules()]
        if len(set(names)) != len(names):
            raise ProgramError("duplicate rule names after program extension")
        _validate(merged)
        return merged


# -- tokenizer -------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>-?\d+\.\d+(?:[eE][+-]?\d+)?|-?\d+(?:[eE][+-]?\d+)?)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<implies>:-)
  | (?P<punct>[(),.=@])
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text):
    tokens = []
    line = 1
    col = 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, tok, line, col))
        nl = tok.count("\n")
        if nl:
            line += nl
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, text, name_offset=0, validate=True):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.auto_index = name_offset
        self.validate = validate

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text):
        tok = self.next()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text or 'end of input'!r}",
                             tok.line, tok.column)
        return tok

    def fail(self, message):
        tok = self.peek()
        raise ParseError(message, tok.line, tok.column)

    # grammar ------------------------------------------------------------

    def parse_program(self):
        program = RuleProgram()
        while self.peek().kind != "eof":
            self.parse_statement(program)
        if self.validate:
            _validate(program)
        return program

    def parse_statement(self, program):
        tok = self.peek()
        if tok.kind == "name" and tok.text in ("edb", "idb"):
            self.parse_declaration(program)
        else:
            self.parse_rule(program)

    def parse_declaration(self, program):
        kind = self.next().text.upper()
        name = self.next()
        if name.kind != "name":
            raise ParseError("expected relation name", name.line, name.column)
        self.expect("(")
        columns = []
        if self.peek().text != ")":
            while True:
                col = self.next()
                if col.kind != "name":
                    raise ParseError("expected column name", col.line, col.column)
                columns.append(col.text)
                if self.peek().text == ",":
                    self.next()
                else:
                    break
        self.expect(")")
        self.expect(".")
        if name.text in {d.name for d in program.declarations}:
            raise ParseError(f"relation {name.text!r} declared twice", name.line, name.column)
        program.declarations.append(Declaration(name.text, tuple(columns), kind))

    def parse_atom(self):
        name = self.next()
        if name.kind != "name":
            raise ParseError("expected predicate name", name.line, name.column)
        self.expect("(")
        args = []
        if self.peek().text != ")":
            while True:
                args.append(self.parse_arg())
                if self.peek().text == ",":
                    self.next()
                else:
                    break
        self.expect(")")
        return Atom(name.text, tuple(args))

    def parse_arg(self):
        tok = self.next()
        if tok.kind == "number":
            return Const(tok.text)
        if tok.kind == "string":
            raw = tok.text[1:-1]
            return Const(raw.replace('\\"', '"').replace("\\\\", "\\"))
        if tok.kind == "name":
            if tok.text in ("true", "false"):
                return Const(tok.text)
            if tok.text[0].isupper():
                return Const(tok.text)
            return Var(tok.text)
        raise ParseError(f"expected argument, found {tok.text!r}", tok.line, tok.column)

    def parse_rule(self, program):
        head = self.parse_atom()
        self.expect(":-")
        body = [self.parse_atom()]
        while self.peek().text == ",":
            self.next()
            body.append(self.parse_atom())
        weight_spec = None
        if self.peek().text == "weight":
            self.next()
            self.expect("=")
            weight_spec = self.parse_weight()
        semantics = None
        interest = False
        name = None
        initial = None
        while self.peek().text == "@":
            self.next()
            ann = self.next()
            if ann.text == "semantics":
                self.expect("(")
                val = self.next()
                if val.text not in SEMANTICS:
                    raise ParseError(
                        f"semantics must be one of {', '.join(SEMANTICS)}", val.line, val.column)
                semantics = val.text
                self.expect(")")
            elif ann.text == "interest":
                interest = True
            elif ann.text == "name":
                self.expect("(")
                val = self.next()
                if val.kind != "name":
                    raise ParseError("expected rule name", val.line, val.column)
                name = val.text
                self.expect(")")
            elif ann.text == "init":
                self.expect("(")
                val = self.next()
                if val.kind != "number":
                    raise ParseError("expected numeric initial weight", val.line, val.column)
                initial = float(val.text)
                self.expect(")")
            else:
                raise ParseError(f"unknown annotation @{ann.text}", ann.line, ann.column)
        dot = self.expect(".")
        if name is None:
            name = f"r{self.auto_index}"
        self.auto_index += 1

        if weight_spec is None:
            if semantics is not None or initial is not None:
                raise ParseError("only inference rules take @semantics/@init",
                                 dot.line, dot.column)
            if head.predicate.endswith("_Ev"):
                if not head.args or not isinstance(head.args[-1], Const) or \
                        head.args[-1].value not in ("true", "false"):
                    raise ParseError(
                        "supervision rule head must end with constant true or false",
                        dot.line, dot.column)
                program.supervision_rules.append(SupervisionRule(
                    relation=head.predicate[:-len("_Ev")],
                    head_args=head.args[:-1],
                    label=head.args[-1].value == "true",
                    body=tuple(body),
                    name=name,
                ))
            else:
                program.candidate_rules.append(CandidateRule(head, tuple(body), name))
        else:
            if initial is not None:
                if not isinstance(weight_spec, Tied):
                    raise ParseError("@init requires a tied weight", dot.line, dot.column)
                weight_spec = Learned(weight_spec.vars, initial)
            program.inference_rules.append(InferenceRule(
                head=head,
                body=tuple(body),
                weight_spec=weight_spec,
                semantics=semantics or LINEAR,
                interest=interest,
                name=name,
            ))

    def parse_weight(self):
        tok = self.next()
        if tok.kind == "number":
            return Fixed(float(tok.text))
        if tok.kind == "name":
            self.expect("(")
            vars_ = []
            if self.peek().text != ")":
                while True:
                    v = self.next()
                    if v.kind != "name" or v.text[0].isupper() or v.text in ("true", "false"):
                        raise ParseError("weight arguments must be variables", v.line, v.column)
                    vars_.append(Var(v.text))
                    if self.peek().text == ",":
                        self.next()
                    else:
                        break
            self.expect(")")
            return Tied(tuple(vars_))
        raise ParseError("expected weight value or weight function", tok.line, tok.column)


def parse_program(text, name_offset=0, validate=True) -> RuleProgram:
    """Parse and validate a program; raises ParseError/ProgramError.

    Program deltas (rules appended to an existing program) parse with
    validate=False and are checked by RuleProgram.extended instead."""
    return _Parser(text, name_offset, validate).parse_program()


def print_program(program: RuleProgram) -> str:
    lines = [str(d) for d in program.declarations]
    lines.extend(str(r) for r in program.all_rules())
    return "\n".join(lines) + "\n"


# -- validation ------------------------------------------------------------


def _validate(program: RuleProgram):
    relations = program.relations
    inference_heads = {r.head.predicate for r in program.inference_rules}
    candidate_heads = {r.head.predicate for r in program.candidate_rules}

    names = [r.name for r in program.all_rules()]
    if len(set(names)) != len(names):
        raise ProgramError("duplicate rule names")

    def check_atom(atom, rule_name):
        decl = relations.get(atom.predicate)
        if decl is None:
            raise ProgramError(
                f"rule {rule_name}: undeclared predicate {atom.predicate!r}")
        if len(atom.args) != len(decl.columns):
            raise ProgramError(
                f"rule {rule_name}: arity mismatch for {atom.predicate} "
                f"(got {len(atom.args)}, declared {len(decl.columns)})")

    for rule in program.all_rules():
        for atom in rule.body:
            check_atom(atom, rule.name)
        body_vars = set()
        for atom in rule.body:
            body_vars.update(atom.variables())
        if isinstance(rule, (CandidateRule, InferenceRule)):
            check_atom(rule.head, rule.name)
            head_vars = set(rule.head.variables())
        else:
            decl = relations.get(rule.relation)
            if decl is None:
                raise ProgramError(
                    f"rule {rule.name}: undeclared predicate {rule.relation!r}")
            if len(rule.head_args) != len(decl.columns):
                raise ProgramError(
                    f"rule {rule.name}: arity mismatch for {rule.relation}_Ev")
            head_vars = {a for a in rule.head_args if isinstance(a, Var)}
        unsafe = head_vars - body_vars
        if unsafe:
            raise ProgramError(
                f"rule {rule.name}: unsafe head variable(s) "
                + ", ".join(sorted(v.name for v in unsafe)))
        if isinstance(rule, InferenceRule):
            loose = set(rule.weight_vars()) - body_vars
            if loose:
                raise ProgramError(
                    f"rule {rule.name}: weight variable(s) not in body: "
                    + ", ".join(sorted(v.name for v in loose)))

    # candidate/supervision bodies may not read inference-head predicates
    for rule in program.candidate_rules + program.supervision_rules:
        for atom in rule.body:
            if atom.predicate in inference_heads:
                raise ProgramError(
                    f"rule {rule.name}: body reads {atom.predicate}, which is "
                    "derived by an inference rule")
    for rule in program.candidate_rules:
        if rule.head.predicate in inference_heads:
            raise ProgramError(
                f"rule {rule.name}: {rule.head.predicate} is both a candidate "
                "head and an inference head")

    # stratification: the head<-body dependency graph must be acyclic
    deps = {}
    for rule in program.candidate_rules + program.inference_rules:
        deps.setdefault(rule.head.predicate, set()).update(
            a.predicate for a in rule.body)
    state = {}

    def visit(pred, trail):
        if state.get(pred) == "done":
            return
        if state.get(pred) == "open":
            cycle = " -> ".join(trail[trail.index(pred):] + [pred])
            raise ProgramError(f"recursive rules are not supported: {cycle}")
        state[pred] = "open"
        for dep in deps.get(pred, ()):
            visit(dep, trail + [pred])
        state[pred] = "done"

    for pred in list(deps):
        visit(pred, [])

    for decl in program.declarations:
        if decl.kind == "EDB" and decl.name in candidate_heads:
            raise ProgramError(f"EDB relation {decl.name} cannot be a rule head")


# -- analyses --------------------------------------------------------------


def check_hierarchical(rule: InferenceRule) -> bool:
    """True when the head variable set is empty or some head variable
    occurs in every body atom."""
    head_vars = rule.head_vars()
    if not head_vars:
        return True
    atom_vars = [set(a.variables()) for a in rule.body]
    return any(all(v in avs for avs in atom_vars) for v in head_vars)


@dataclass(frozen=True)
class BooleanRule:
    """One rule of the finite-domain expansion of a tied-weight rule."""

    head_symbol: str
    head_binding: tuple
    weight_binding: tuple
    body: tuple


def expand_tied_weights(rule: InferenceRule, domain) -> list:
    """Expand an inference rule over a finite domain into Boolean rules.

    One Boolean rule per distinct binding of head+weight variables, one
    head symbol per head binding, one shared weight parameter per weight
    binding.
    """
    domain = list(domain)
    head_vars = rule.head_vars()
    weight_vars = [v for v in rule.weight_vars() if v not in head_vars]
    bound_vars = head_vars + weight_vars
    if bound_vars and not domain:
        raise ProgramError(
            f"rule {rule.name}: cannot expand head/weight variables over an empty domain")

    def substitute(atom, binding):
        return Atom(atom.predicate, tuple(
            binding.get(a, a) if isinstance(a, Var) else a for a in atom.args))

    out = []
    for values in itertools.product(domain, repeat=len(bound_vars)):
        binding = dict(zip(bound_vars, (Const(v) for v in values)))
        head_binding = tuple(
            binding[a].value if isinstance(a, Var) else a.value for a in rule.head.args
        )
        if isinstance(rule.weight_spec, Fixed):
            weight_binding = ()
        else:
            weight_binding = tuple(
                binding[v].value for v in rule.weight_spec.vars)
        out.append(BooleanRule(
            head_symbol="%s_%s" % (rule.head.predicate, "_".join(head_binding))
            if head_binding else rule.head.predicate,
            head_binding=head_binding,
            weight_binding=weight_binding,
            body=tuple(substitute(a, binding) for a in rule.body),
        ))
    # distinct rules only: duplicate (head, weight) bindings collapse when
    # head/weight variables overlap
    seen = {}
    for br in out:
        seen.setdefault((br.head_binding, br.weight_binding), br)
    return list(seen.values())
