import json
import os

import pytest

from incfactor.cli import main
from incfactor.graph import read_graph
from incfactor.incremental import load_bundle

RULES = """
edb R(x, y).
edb S(y).
idb T(x).
idb Q(x).
T(x) :- R(x, y), S(y).
Q(x) :- R(x, y) weight = 0.6 @name(f1).
Q(x) :- T(x), S(y) weight = w(y) @init(0.2) @name(f2).
"""

DATA_R = """#relation R(x,y) kind=EDB
a\tb
a\tc
d\tb
"""

DATA_S = """#relation S(y) kind=EDB
b
c
"""

DATA_DELTA = """#relation R(x,y) kind=EDB
+\te\tb
=\ta\tb\t@label=pos
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "rules.ddl").write_text(RULES)
    data = tmp_path / "data"
    data.mkdir()
    (data / "r.tsv").write_text(DATA_R)
    (data / "s.tsv").write_text(DATA_S)
    return tmp_path


def run(workspace, *argv):
    cwd = os.getcwd()
    os.chdir(workspace)
    try:
        return main(list(argv))
    finally:
        os.chdir(cwd)


def test_ground_writes_graph_and_summary(workspace, capsys):
    code = run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
               "--out", "graph.jsonl")
    assert code == 0
    out = capsys.readouterr().out
    assert "variables" in out and "fingerprint" in out
    graph = read_graph(workspace / "graph.jsonl")
    assert len(graph.variables) > 0 and len(graph.factors) > 0


def test_ground_empty_data_is_ok(workspace, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = run(workspace, "ground", "--rules", "rules.ddl", "--data",
               str(empty), "--out", "empty.jsonl")
    assert code == 0
    graph = read_graph(workspace / "empty.jsonl")
    assert len(graph.variables) == 0 and len(graph.factors) == 0


def test_ground_malformed_tsv_exits_2_with_line(workspace, capsys):
    (workspace / "data" / "bad.tsv").write_text(
        "#relation R(x,y) kind=EDB\nonly_one_field\n")
    code = run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
               "--out", "graph.jsonl")
    assert code == 2
    assert ":2:" in capsys.readouterr().err


def test_usage_error_exits_1(workspace):
    assert run(workspace, "ground", "--rules", "rules.ddl") == 1
    assert run(workspace, "nonsense") == 1


def test_materialize_exact_sample_count(workspace):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    code = run(workspace, "materialize", "--graph", "graph.jsonl",
               "--out", "bundle", "--samples", "1000")
    assert code == 0
    bundle = load_bundle(workspace / "bundle")
    assert bundle.n_samples == 1000
    assert bundle.approx_graph is None


def test_materialize_time_budget_monotone(workspace):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    run(workspace, "materialize", "--graph", "graph.jsonl", "--out", "b_small",
        "--time-budget", "0.05")
    run(workspace, "materialize", "--graph", "graph.jsonl", "--out", "b_large",
        "--time-budget", "0.8")
    small = load_bundle(workspace / "b_small")
    large = load_bundle(workspace / "b_large")
    assert large.n_samples >= small.n_samples >= 0
    assert large.n_samples > 0


def test_materialize_variational_records_lambda(workspace):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    code = run(workspace, "materialize", "--graph", "graph.jsonl",
               "--out", "bundle_v", "--samples", "500", "--variational", "0.01")
    assert code == 0
    bundle = load_bundle(workspace / "bundle_v")
    assert bundle.lam == 0.01
    assert bundle.approx_graph is not None
    meta = json.loads((workspace / "bundle_v" / "meta.json").read_text())
    assert meta["lambda"] == 0.01


def test_update_pipeline_and_fingerprint_mismatch(workspace, capsys):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    run(workspace, "materialize", "--graph", "graph.jsonl", "--out", "bundle",
        "--samples", "500", "--variational", "0.01")
    (workspace / "delta.tsv").write_text(DATA_DELTA)
    code = run(workspace, "update", "--rules", "rules.ddl", "--data", "data",
               "--graph", "graph.jsonl", "--bundle", "bundle",
               "--data-delta", "delta.tsv", "--out-delta", "delta.json",
               "--out-graph", "graph2.jsonl")
    assert code == 0
    out = capsys.readouterr().out
    assert "classification:" in out and "strategy:" in out
    assert (workspace / "delta.json").exists()

    # tamper with the graph file: fingerprints no longer match
    g = read_graph(workspace / "graph2.jsonl")
    code = run(workspace, "update", "--rules", "rules.ddl", "--data", "data",
               "--graph", "graph2.jsonl", "--bundle", "bundle",
               "--data-delta", "delta.tsv", "--out-delta", "d2.json",
               "--out-graph", "g3.jsonl")
    assert code == 3


def test_infer_strategies_and_exhaustion_exit_code(workspace, capsys):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    run(workspace, "materialize", "--graph", "graph.jsonl", "--out", "bundle",
        "--samples", "400", "--variational", "0.01")
    code = run(workspace, "infer", "--graph", "graph.jsonl", "--bundle",
               "bundle", "--strategy", "sampling", "--sweeps", "400",
               "--out", "m.csv")
    assert code == 0
    text = (workspace / "m.csv").read_text()
    assert text.startswith("var_id,relation,tuple,probability")
    assert (workspace / "m.calibration.csv").exists()

    # forcing sampling past the stored worlds must advise variational, exit 4
    code = run(workspace, "infer", "--graph", "graph.jsonl", "--bundle",
               "bundle", "--strategy", "sampling", "--sweeps", "4000",
               "--out", "m2.csv")
    assert code == 4
    assert "variational" in capsys.readouterr().err

    code = run(workspace, "infer", "--graph", "graph.jsonl", "--bundle",
               "bundle", "--strategy", "variational", "--sweeps", "2000",
               "--out", "m3.csv")
    assert code == 0

    code = run(workspace, "infer", "--graph", "graph.jsonl", "--strategy",
               "rerun", "--sweeps", "2000", "--out", "m4.csv", "--figures")
    assert code == 0
    assert (workspace / "m4.calibration.png").exists()


def test_infer_rerun_matches_enumeration(workspace):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    code = run(workspace, "infer", "--graph", "graph.jsonl", "--strategy",
               "rerun", "--sweeps", "40000", "--seed", "3", "--out", "m.csv")
    assert code == 0
    from incfactor.graph import enumerate_marginals
    graph = read_graph(workspace / "graph.jsonl")
    exact = enumerate_marginals(graph)
    rows = (workspace / "m.csv").read_text().splitlines()[1:]
    for row in rows:
        vid, _rel, _tup, p = row.split(",")
        assert abs(float(p) - exact[int(vid)]) < 0.02


def test_learn_command(workspace):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    train = workspace / "train"
    train.mkdir()
    (train / "labels.tsv").write_text(
        "#relation Q_Ev(x) kind=Evidence\n"
        "a\t@label=pos\n"
        "d\t@label=neg\n")
    code = run(workspace, "learn", "--graph", "graph.jsonl", "--train-data",
               "train", "--epochs", "10", "--step-sizes", "0.1",
               "--out-weights", "w.csv", "--out-loss", "loss.csv")
    assert code == 0
    lines = (workspace / "w.csv").read_text().splitlines()
    assert lines[0] == "param_id,description,value"
    loss_lines = (workspace / "loss.csv").read_text().splitlines()
    assert loss_lines[0] == "epoch,step_size,loss"
    assert len(loss_lines) == 12  # header + epochs 0..10

    # warmstart accepts the file we just wrote
    code = run(workspace, "learn", "--graph", "graph.jsonl", "--train-data",
               "train", "--warmstart", "w.csv", "--epochs", "2",
               "--step-sizes", "0.1", "--out-weights", "w2.csv",
               "--out-loss", "loss2.csv")
    assert code == 0


def test_materialize_variational_auto(workspace, capsys):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    code = run(workspace, "materialize", "--graph", "graph.jsonl",
               "--out", "bundle_auto", "--samples", "800",
               "--variational", "auto", "--kl-threshold", "0.5", "--figures")
    assert code == 0
    out = capsys.readouterr().out
    assert "lambda search:" in out
    bundle = load_bundle(workspace / "bundle_auto")
    assert bundle.lam in (0.001, 0.01, 0.1, 1.0)
    assert (workspace / "bundle_auto" / "lambda_search.csv").exists()
    assert (workspace / "bundle_auto" / "lambda_search.png").exists()


def test_update_rules_delta_with_new_relation(workspace):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    (workspace / "new_rules.ddl").write_text(
        "edb Hint(x).\nQ(x) :- Hint(x) weight = 0.9 @name(hinted).\n")
    (workspace / "delta.tsv").write_text(
        "#relation Hint(x) kind=EDB\n+\ta\n")
    code = run(workspace, "update", "--rules", "rules.ddl", "--data", "data",
               "--graph", "graph.jsonl", "--rules-delta", "new_rules.ddl",
               "--data-delta", "delta.tsv", "--out-delta", "delta.json",
               "--out-graph", "g2.jsonl")
    assert code == 0
    g2 = read_graph(workspace / "g2.jsonl")
    assert any(f.rule == "hinted" for f in g2.factors.values())
    assert any(v.relation == "Hint" for v in g2.variables.values())


def test_update_with_rules_delta(workspace, capsys):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    (workspace / "new_rules.ddl").write_text(
        "Q(x) :- S(x) weight = 0.4 @semantics(ratio) @name(added).\n")
    code = run(workspace, "update", "--rules", "rules.ddl", "--data", "data",
               "--graph", "graph.jsonl", "--rules-delta", "new_rules.ddl",
               "--out-delta", "delta.json", "--out-graph", "g2.jsonl")
    assert code == 0
    out = capsys.readouterr().out
    assert "new_factors=" in out
    g2 = read_graph(workspace / "g2.jsonl")
    assert any(f.rule == "added" for f in g2.factors.values())
    # the delta replays onto the original graph
    from incfactor.grounding import apply_update, delta_from_json
    from incfactor.graph import graph_signature
    delta = delta_from_json((workspace / "delta.json").read_text())
    g1 = read_graph(workspace / "graph.jsonl")
    assert graph_signature(apply_update(g1, delta)) == graph_signature(g2)


def test_config_file_defaults(workspace, capsys):
    (workspace / "conf.ini").write_text("seed=9\n")
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    code = run(workspace, "materialize", "--graph", "graph.jsonl",
               "--out", "bc", "--samples", "50", "--config", "conf.ini")
    assert code == 0
    assert load_bundle(workspace / "bc").seed == 9


def test_infer_auto_switches_to_variational_on_exhaustion(workspace, capsys):
    run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
        "--out", "graph.jsonl")
    run(workspace, "materialize", "--graph", "graph.jsonl", "--out", "bundle",
        "--samples", "200", "--variational", "0.01")
    code = run(workspace, "infer", "--graph", "graph.jsonl", "--bundle",
               "bundle", "--strategy", "auto", "--sweeps", "3000",
               "--out", "m_auto.csv")
    assert code == 0
    out = capsys.readouterr().out
    assert "switching" in out and "Variational" in out
    assert (workspace / "m_auto.csv").exists()


def test_bench_semantics_cli(workspace):
    code = run(workspace, "bench", "semantics", "--out-dir", "bs",
               "--sizes", "4", "--seeds", "2", "--max-sweeps", "3000")
    assert code == 0
    csv = (workspace / "bs" / "semantics.csv").read_text().splitlines()
    assert csv[0] == "semantics,n_votes,seed,sweeps,converged,estimate,target"
    assert len(csv) == 1 + 3 * 2  # three semantics, two seeds
    assert (workspace / "bs" / "semantics.png").exists()


def test_bench_tradeoff_cli_strawman_axis(workspace, capsys):
    code = run(workspace, "bench", "tradeoff", "--out-dir", "bt",
               "--axes", "strawman")
    assert code == 0
    assert "infeasible" in capsys.readouterr().out
    rows = (workspace / "bt" / "tradeoff.csv").read_text().splitlines()
    feasible = {r.split(",")[1]: r.split(",")[-2] for r in rows[1:]}
    assert feasible["25"] == "0" and feasible["17"] == "1"


def test_pipeline_byte_identical_reruns(workspace):
    def pipeline(tag):
        run(workspace, "ground", "--rules", "rules.ddl", "--data", "data",
            "--out", f"g{tag}.jsonl", "--seed", "5")
        run(workspace, "materialize", "--graph", f"g{tag}.jsonl", "--out",
            f"b{tag}", "--samples", "300", "--variational", "0.01",
            "--seed", "5")
        (workspace / f"delta{tag}.tsv").write_text(DATA_DELTA)
        run(workspace, "update", "--rules", "rules.ddl", "--data", "data",
            "--graph", f"g{tag}.jsonl", "--bundle", f"b{tag}",
            "--data-delta", f"delta{tag}.tsv", "--out-delta",
            f"delta{tag}.json", "--out-graph", f"g2{tag}.jsonl", "--seed", "5")
        run(workspace, "infer", "--graph", f"g{tag}.jsonl", "--updated-graph",
            f"g2{tag}.jsonl", "--delta", f"delta{tag}.json", "--bundle",
            f"b{tag}", "--strategy", "variational", "--sweeps", "2000",
            "--seed", "5", "--out", f"m{tag}.csv")

    pipeline("A")
    pipeline("B")
    for a, b in (("gA.jsonl", "gB.jsonl"), ("g2A.jsonl", "g2B.jsonl"),
                 ("deltaA.json", "deltaB.json"), ("mA.csv", "mB.csv"),
                 ("mA.calibration.csv", "mB.calibration.csv")):
        assert (workspace / a).read_bytes() == (workspace / b).read_bytes()
    assert (workspace / "bA" / "samples.bin").read_bytes() == \
        (workspace / "bB" / "samples.bin").read_bytes()
