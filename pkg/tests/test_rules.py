import random

import pytest

from incfactor.errors import ParseError, ProgramError
from incfactor.rules import (LINEAR, RATIO, Atom, CandidateRule,
                             Const, Fixed, InferenceRule, Learned,
                             SupervisionRule, Tied, Var, check_hierarchical,
                             expand_tied_weights, parse_program, print_program)

DECLS = """
edb PersonCandidate(s, m).
edb R(x, y).
edb S(y).
edb Feat(x, f).
idb MarriedCandidate(m1, m2).
idb Class(x).
idb Q().
"""


def parse(extra):
    return parse_program(DECLS + extra)


def test_candidate_rule_example():
    prog = parse("MarriedCandidate(m1,m2) :- PersonCandidate(s,m1), "
                 "PersonCandidate(s,m2).\n")
    [rule] = prog.candidate_rules
    assert isinstance(rule, CandidateRule)
    assert rule.head == Atom("MarriedCandidate", (Var("m1"), Var("m2")))
    assert len(rule.body) == 2


def test_classifier_rule_gets_tied_weight():
    prog = parse("Class(x) :- Feat(x,f) weight = w(f).\n")
    [rule] = prog.inference_rules
    assert rule.weight_spec == Tied((Var("f"),))
    assert rule.semantics == LINEAR


def test_fixed_weight_with_ratio_annotation():
    prog = parse("Q() :- R(x,y), S(y) weight = 2.0 @semantics(ratio).\n")
    [rule] = prog.inference_rules
    assert rule.weight_spec == Fixed(2.0)
    assert rule.semantics == RATIO


def test_learned_weight_with_init():
    prog = parse("Class(x) :- Feat(x,f) weight = w(f) @init(0.25).\n")
    [rule] = prog.inference_rules
    assert rule.weight_spec == Learned((Var("f"),), 0.25)


def test_supervision_rule_parses_label():
    prog = parse_program(DECLS + """
edb Known(m1, m2).
MarriedCandidate_Ev(m1,m2,true) :- PersonCandidate(s,m1), PersonCandidate(s,m2), Known(m1,m2).
""")
    [rule] = prog.supervision_rules
    assert isinstance(rule, SupervisionRule)
    assert rule.relation == "MarriedCandidate"
    assert rule.label is True


def test_syntax_error_carries_position():
    with pytest.raises(ParseError) as err:
        parse("Q() :- R(x,y weight = 1.0.\n")
    assert err.value.line is not None


def test_undeclared_predicate():
    with pytest.raises(ProgramError):
        parse("Q() :- Missing(x) weight = 1.0.\n")


def test_arity_mismatch():
    with pytest.raises(ProgramError):
        parse("Q() :- R(x) weight = 1.0.\n")


def test_unsafe_rule_rejected():
    with pytest.raises(ProgramError):
        parse("Class(z) :- R(x,y).\n")


def test_unstratified_program_rejected():
    with pytest.raises(ProgramError):
        parse_program("""
idb A(x).
idb B(x).
A(x) :- B(x).
B(x) :- A(x).
""")


def test_weight_vars_must_occur_in_body():
    with pytest.raises(ProgramError):
        parse("Class(x) :- Feat(x,f) weight = w(z).\n")


def test_round_trip_fixed_programs():
    text = DECLS + """
edb Known(m1, m2).
MarriedCandidate(m1,m2) :- PersonCandidate(s,m1), PersonCandidate(s,m2).
MarriedCandidate_Ev(m1,m2,false) :- PersonCandidate(s,m1), PersonCandidate(s,m2), Known(m1,m2).
Q() :- R(x,y), S(y) weight = 2.0 @semantics(ratio).
Class(x) :- Feat(x,f) weight = w(f) @init(0.5) @interest.
Q() :- R(x,"quoted const"), S(y) weight = -1.5 @semantics(logical).
"""
    prog = parse_program(text)
    assert parse_program(print_program(prog)) == prog


def test_round_trip_random_programs():
    rnd = random.Random(99)
    preds = [("A", 1), ("B", 2), ("C", 2), ("D", 1)]
    decls = "idb H(x).\nidb H2(x, y).\n" + "".join(
        f"edb {name}({', '.join('c%d' % i for i in range(ar))}).\n"
        for name, ar in preds)
    for trial in range(25):
        lines = []
        for _ in range(rnd.randint(1, 5)):
            body = []
            variables = []
            for _ in range(rnd.randint(1, 3)):
                name, ar = rnd.choice(preds)
                args = []
                for _ in range(ar):
                    if rnd.random() < 0.8:
                        v = f"v{rnd.randint(0, 3)}"
                        args.append(v)
                        variables.append(v)
                    else:
                        args.append(f'"k{rnd.randint(0, 2)}"')
                body.append(f"{name}({', '.join(args)})")
            if not variables:
                head = "H2" if rnd.random() < 0.5 else "H"
                continue
            hv = rnd.choice(variables)
            if rnd.random() < 0.5:
                head = f"H({hv})"
            else:
                head = f"H2({hv}, {rnd.choice(variables)})"
            kind = rnd.random()
            if kind < 0.4:
                lines.append(f"{head} :- {', '.join(body)}.")
            else:
                sem = rnd.choice(["", " @semantics(ratio)", " @semantics(logical)"])
                if rnd.random() < 0.5:
                    w = f"weight = {rnd.uniform(-2, 2):.3f}"
                else:
                    w = f"weight = w({rnd.choice(variables)})"
                lines.append(f"{head} :- {', '.join(body)} {w}{sem}.")
        text = decls + "\n".join(lines) + "\n"
        try:
            prog = parse_program(text)
        except ProgramError:
            continue  # occasional unstratified/unsafe draw
        assert parse_program(print_program(prog)) == prog, f"trial {trial}"


# -- hierarchical check ------------------------------------------------------


def infer_rule(head, body):
    return InferenceRule(head=head, body=tuple(body), weight_spec=Fixed(1.0),
                        name="t")


def test_hierarchical_examples():
    x, y, z = Var("x"), Var("y"), Var("z")
    r1 = infer_rule(Atom("q", (x,)), [Atom("R", (x, y)), Atom("S", (x, z))])
    assert check_hierarchical(r1) is True
    r2 = infer_rule(Atom("q", (x, y)), [Atom("R", (x,)), Atom("S", (y,))])
    assert check_hierarchical(r2) is False
    r3 = infer_rule(Atom("q", ()), [Atom("R", (x, y))])
    assert check_hierarchical(r3) is True


def test_hierarchical_agrees_with_brute_force():
    rnd = random.Random(3)
    vars_ = [Var(f"v{i}") for i in range(4)]
    for _ in range(200):
        body = []
        for _ in range(rnd.randint(1, 4)):
            args = tuple(rnd.choice(vars_) for _ in range(rnd.randint(1, 3)))
            body.append(Atom("B", args))
        head_vars = tuple({rnd.choice([v for a in body for v in a.variables()])
                           for _ in range(rnd.randint(0, 2))})
        rule = infer_rule(Atom("q", head_vars), body)
        brute = (not head_vars) or any(
            all(v in atom.variables() for atom in body) for v in head_vars)
        assert check_hierarchical(rule) == brute


# -- tied-weight expansion ----------------------------------------------------


def test_expand_counts_match_domain_power():
    x, y, z = Var("x"), Var("y"), Var("z")
    rule = InferenceRule(head=Atom("q", (x,)),
                        body=(Atom("R", (x, y, z)),),
                        weight_spec=Tied((y,)), name="t")
    rules = expand_tied_weights(rule, ["a", "b"])
    assert len(rules) == 4  # |D|^2 boolean rules
    assert len({r.head_symbol for r in rules}) == 2  # |D|^|head vars|
    assert len({r.weight_binding for r in rules}) == 2  # |D|^|weight vars|


def test_expand_fixed_weight_no_head_vars_is_singleton():
    rule = InferenceRule(head=Atom("q", ()),
                        body=(Atom("R", (Var("x"), Var("y"))),),
                        weight_spec=Fixed(2.0), name="t")
    rules = expand_tied_weights(rule, ["a", "b", "c"])
    assert len(rules) == 1
    assert rules[0].weight_binding == ()


def test_expand_classifier_example():
    x, f = Var("x"), Var("f")
    rule = InferenceRule(head=Atom("Class", (x,)),
                        body=(Atom("R", (x, f)),),
                        weight_spec=Tied((f,)), name="t")
    rules = expand_tied_weights(rule, ["a", "f1", "f2"])
    for_a = [r for r in rules if r.head_binding == ("a",)]
    assert {r.weight_binding for r in for_a} == {("a",), ("f1",), ("f2",)}
    # weight parameters shared across head bindings with equal feature value
    by_binding = {}
    for r in rules:
        by_binding.setdefault(r.weight_binding, set()).add(r.head_symbol)
    assert len(by_binding[("f1",)]) == 3


def test_expand_empty_domain_errors():
    rule = InferenceRule(head=Atom("q", (Var("x"),)),
                        body=(Atom("R", (Var("x"),)),),
                        weight_spec=Fixed(1.0), name="t")
    with pytest.raises(ProgramError):
        expand_tied_weights(rule, [])


def test_expand_invariant_bounds():
    rnd = random.Random(5)
    vars_ = [Var(f"v{i}") for i in range(3)]
    domain = ["a", "b", "c"]
    for _ in range(30):
        body_args = tuple(rnd.choice(vars_) for _ in range(3))
        head_args = tuple({rnd.choice(body_args) for _ in range(rnd.randint(0, 2))})
        tied = tuple({rnd.choice(body_args) for _ in range(rnd.randint(0, 2))})
        spec = Tied(tied) if tied else Fixed(1.0)
        rule = InferenceRule(head=Atom("q", head_args),
                            body=(Atom("R", body_args),),
                            weight_spec=spec, name="t")
        rules = expand_tied_weights(rule, domain)
        assert len({r.head_symbol for r in rules}) == len(domain) ** len(head_args)
        assert len({r.weight_binding for r in rules}) <= len(domain) ** len(
            tied if tied else ())
