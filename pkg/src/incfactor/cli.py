"""Command-line front end: ground -> materialize -> update -> infer/learn,
plus the bench commands.

Exit codes: 0 ok, 1 usage, 2 input error, 3 fingerprint mismatch,
4 requested strategy infeasible.

A config file (`--config path`, `key=value` lines, keys matching long
flag names with dashes or underscores) supplies defaults; explicit flags
win.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import bench as bench_mod
from . import graph as graph_mod
from . import report
from .errors import (BundleError, ConvergenceError, DivergenceError,
                     IncfactorError, LambdaSearchError, ParseError,
                     ProgramError)
from .graph import graph_fingerprint, read_graph, write_graph
from .grounding import (UpdateDelta, delta_from_json, delta_to_json, ground,
                        incremental_ground)
from .incremental import (load_bundle, materialize_samples,
                          materialize_variational, mh_infer, save_bundle,
                          select_lambda, variational_infer)
from .inference import (GibbsConfig, calibration_buckets, run_gibbs,
                        write_marginals_csv)
from .learning import (STEP_GRID, RandomInit, TrainConfig, Warmstart,
                       read_weights_csv, sgd_train, write_loss_trace_csv,
                       write_weights_csv)
from .optimizer import (ProgramDelta, RERUN, SAMPLING, VARIATIONAL,
                        SAMPLE_EXHAUSTED, choose_strategy, classify_update)
from .relstore import POSITIVE, RelationStore, load_directory
from .rules import parse_program

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_FINGERPRINT = 3
EXIT_STRATEGY = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _load_config(path):
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise IncfactorError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(args, argv):
    if not getattr(args, "config", None):
        return
    explicit = {tok.split("=", 1)[0].lstrip("-").replace("-", "_")
                for tok in argv if tok.startswith("--")}
    for key, raw in _load_config(args.config).items():
        if key in explicit or not hasattr(args, key):
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, key, value)


# -- shared loading helpers ------------------------------------------------------


def _load_program_and_store(rules_path, data_dir):
    with open(rules_path, "r", encoding="utf-8") as fh:
        program = parse_program(fh.read())
    store = RelationStore()
    for decl in program.declarations:
        kind = decl.kind if decl.kind in ("EDB", "IDB") else "EDB"
        store.declare(decl.name, decl.columns, kind)
    if data_dir:
        load_directory(store, data_dir)
    return program, store


def _parse_data_delta(store, path):
    """Delta rows: `+<TAB>fields` insert, `-<TAB>fields` delete,
    `=<TAB>fields<TAB>@label=pos|neg` evidence mark (inserting the tuple
    when absent), under the usual `#relation` headers."""
    deltas = []
    evidence = []
    name = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#relation"):
                from .relstore import _parse_header
                name, _cols, _kind = _parse_header(line, path, lineno)
                continue
            if line.startswith("#"):
                continue
            if name is None:
                raise IncfactorError(f"{path}:{lineno}: data before #relation header")
            fields = line.split("\t")
            op = fields[0]
            fields = fields[1:]
            label = None
            count = 1
            while fields and fields[-1].startswith("@"):
                ann = fields.pop()
                if ann.startswith("@label="):
                    label = ann[len("@label="):]
                elif ann.startswith("@count="):
                    count = int(ann[len("@count="):])
                else:
                    raise IncfactorError(f"{path}:{lineno}: unknown annotation {ann!r}")
            values = tuple(fields)
            if op == "+":
                deltas.append(store.insert_tuples(name, [values] * count))
                if label is not None:
                    store.mark_evidence(name, values, label)
                    evidence.append((name, values, label))
            elif op == "-":
                deltas.append(store.delete_tuples(name, [values] * count))
            elif op == "=":
                if label is None:
                    raise IncfactorError(f"{path}:{lineno}: '=' row needs @label=")
                if store.count(name, values) == 0:
                    deltas.append(store.insert_tuples(name, [values]))
                store.mark_evidence(name, values, label)
                evidence.append((name, values, label))
            else:
                raise IncfactorError(
                    f"{path}:{lineno}: row must start with +, - or =, got {op!r}")
    return deltas, evidence


# -- commands ---------------------------------------------------------------------


def cmd_ground(args):
    program, store = _load_program_and_store(args.rules, args.data)
    graph, _state = ground(program, store)
    write_graph(graph, args.out)
    stats = graph.stats()
    print(f"ground: {stats['variables']} variables, {stats['factors']} factors, "
          f"{stats['weights']} weights -> {args.out}")
    print(f"fingerprint: {graph_fingerprint(graph)}")
    return EXIT_OK


def cmd_materialize(args):
    graph = read_graph(args.graph)
    if args.time_budget is not None:
        bundle = materialize_samples(graph, time_budget=args.time_budget,
                                     seed=args.seed, burn_in=args.burn_in,
                                     thin=args.thin)
    else:
        bundle = materialize_samples(graph, n_samples=args.samples,
                                     seed=args.seed, burn_in=args.burn_in,
                                     thin=args.thin)
    print(f"materialize: {bundle.n_samples} stored worlds "
          f"({bundle.storage_bytes()} bytes)")
    lam = None
    lam_rows = None
    if args.variational is not None:
        try:
            if args.variational == "auto":
                lam, kls = select_lambda(graph, args.kl_threshold,
                                         max(2, bundle.n_samples) if bundle.n_samples
                                         else args.samples or 1000,
                                         seed=args.seed)
                lam_rows = sorted(kls.items())
                print("lambda search: " + ", ".join(
                    f"{l}:KL={k:.4f}" for l, k in lam_rows) + f" -> {lam}")
            else:
                lam = float(args.variational)
            if bundle.n_samples >= 2:
                approx, _est, _X, rep = materialize_variational(
                    graph, None, lam, samples=bundle.samples,
                    var_ids=bundle.var_ids)
            else:
                approx, _est, _X, rep = materialize_variational(
                    graph, max(args.samples or 1000, 2), lam, seed=args.seed)
            bundle.approx_graph = approx
            bundle.lam = lam
            bundle.solver_meta = {"iterations": rep.iterations,
                                  "pg_norm": rep.pg_norm,
                                  "duality_gap": rep.duality_gap}
            print(f"variational: lambda={lam} "
                  f"{len(approx.factors)} factors after approximation")
        except ConvergenceError as exc:
            print(f"variational approximation did not converge: {exc}",
                  file=sys.stderr)
        except LambdaSearchError as exc:
            print(f"lambda search failed: {exc}", file=sys.stderr)
    save_bundle(bundle, args.out)
    if lam_rows and args.figures:
        counts = []
        for l, _k in lam_rows:
            a, _e, _x, _r = materialize_variational(
                graph, None, l, samples=bundle.samples, var_ids=bundle.var_ids)
            counts.append(sum(1 for f in a.factors.values()
                              if f.rule == "approx_pair"))
        with open(os.path.join(args.out, "lambda_search.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("lambda,kl,pair_factors\n")
            for (l, k), c in zip(lam_rows, counts):
                fh.write("%g,%.6g,%d\n" % (l, k, c))
        report.render_lambda_figure([l for l, _ in lam_rows],
                                    [k for _, k in lam_rows], counts,
                                    os.path.join(args.out, "lambda_search.png"))
    print(f"bundle -> {args.out}")
    return EXIT_OK


def cmd_update(args):
    program, store = _load_program_and_store(args.rules, args.data)
    graph_file = read_graph(args.graph)
    expected = graph_fingerprint(graph_file)
    graph, state = ground(program, store)
    if graph_fingerprint(graph) != expected:
        print("fingerprint mismatch: graph file does not match --rules/--data",
              file=sys.stderr)
        return EXIT_FINGERPRINT
    bundle = None
    if args.bundle:
        bundle = load_bundle(args.bundle)
        if bundle.fingerprint != expected:
            print("fingerprint mismatch: bundle was materialized for a "
                  "different graph", file=sys.stderr)
            return EXIT_FINGERPRINT

    added = None
    if args.rules_delta:
        with open(args.rules_delta, "r", encoding="utf-8") as fh:
            added = parse_program(fh.read(),
                                  name_offset=len(program.all_rules()),
                                  validate=False)
        program.extended(added)  # validates the merge
        for decl in added.declarations:
            kind = decl.kind if decl.kind in ("EDB", "IDB") else "EDB"
            store.declare(decl.name, decl.columns, kind)
    deltas, evidence = ([], [])
    if args.data_delta:
        deltas, evidence = _parse_data_delta(store, args.data_delta)
    update = incremental_ground(state, deltas, evidence, added_rules=added)
    pdelta = ProgramDelta(added_rules=added)
    update_class = classify_update(pdelta, update)
    strategy = choose_strategy(update_class, bundle is not None)
    with open(args.out_delta, "w", encoding="utf-8") as fh:
        fh.write(delta_to_json(update))
    write_graph(state.graph, args.out_graph)
    summary = update.summary()
    print("update: " + ", ".join(f"{k}={v}" for k, v in summary.items()))
    print(f"classification: {update_class}")
    print(f"strategy: {strategy}")
    print(f"updated fingerprint: {graph_fingerprint(state.graph)}")
    return EXIT_OK


def _run_strategy(strategy, graph_after, bundle, delta, args):
    """Returns (marginals, note); may raise SystemExit-like codes upward."""
    if strategy == SAMPLING:
        res = mh_infer(bundle, graph_after, delta, sweeps=args.sweeps,
                       seed=args.seed)
        if res.exhausted:
            return None, res
        return res.marginals, res
    if strategy == VARIATIONAL:
        marg, _res = variational_infer(bundle, delta, sweeps=args.sweeps,
                                       graph_after=graph_after, seed=args.seed,
                                       chains=args.chains)
        return marg, None
    res = run_gibbs(graph_after, GibbsConfig(
        sweeps=args.sweeps, burn_in=args.burn_in, chains=args.chains,
        seed=args.seed))
    return res.marginals, None


def cmd_infer(args):
    if args.burn_in is None:
        args.burn_in = args.sweeps // 10
    base_graph = read_graph(args.graph)
    if args.updated_graph:
        graph_after = read_graph(args.updated_graph)
    else:
        graph_after = base_graph
    delta = UpdateDelta()
    if args.delta:
        with open(args.delta, "r", encoding="utf-8") as fh:
            delta = delta_from_json(fh.read())
    bundle = load_bundle(args.bundle) if args.bundle else None
    if bundle is not None and bundle.fingerprint != graph_fingerprint(base_graph):
        print("fingerprint mismatch: bundle does not match --graph",
              file=sys.stderr)
        return EXIT_FINGERPRINT

    strategy = args.strategy
    if strategy == "auto":
        update_class = classify_update(None, delta)
        strategy = choose_strategy(update_class, bundle is not None)
        print(f"classification: {update_class}; strategy: {strategy}")
    else:
        strategy = {"sampling": SAMPLING, "variational": VARIATIONAL,
                    "rerun": RERUN}[strategy]
    if strategy in (SAMPLING, VARIATIONAL) and bundle is None:
        print("strategy needs a --bundle", file=sys.stderr)
        return EXIT_STRATEGY
    if strategy == VARIATIONAL and bundle.approx_graph is None:
        print("bundle holds no variational approximation", file=sys.stderr)
        return EXIT_STRATEGY

    marginals, mh_res = _run_strategy(strategy, graph_after, bundle, delta, args)
    if marginals is None:  # sampling exhausted
        if args.strategy == "sampling":
            print(f"stored samples exhausted after {mh_res.samples_used} worlds "
                  f"(acceptance rate {mh_res.acceptance_rate:.3f}); "
                  "rerun with --strategy variational", file=sys.stderr)
            return EXIT_STRATEGY
        print(f"samples exhausted (acceptance {mh_res.acceptance_rate:.3f}); "
              f"switching: {SAMPLE_EXHAUSTED} -> "
              f"{choose_strategy(SAMPLE_EXHAUSTED, True)}")
        if bundle.approx_graph is None:
            print("bundle holds no variational approximation", file=sys.stderr)
            return EXIT_STRATEGY
        marginals, _ = _run_strategy(VARIATIONAL, graph_after, bundle, delta, args)

    write_marginals_csv(args.out, graph_after, marginals)
    buckets = calibration_buckets(marginals.values())
    print("calibration buckets (0.0-1.0 by 0.1): " +
          " ".join(str(c) for c in buckets))
    base, _ext = os.path.splitext(args.out)
    with open(base + ".calibration.csv", "w", encoding="utf-8") as fh:
        fh.write("bucket_low,bucket_high,count\n")
        for i, c in enumerate(buckets):
            fh.write("%.1f,%.1f,%d\n" % (i / 10.0, (i + 1) / 10.0, c))
    if args.figures:
        report.render_calibration_figure(buckets, base + ".calibration.png")
    print(f"marginals -> {args.out}")
    return EXIT_OK


def cmd_learn(args):
    graph = read_graph(args.graph)
    if args.train_data:
        store = RelationStore()
        for vid, var in graph.variables.items():
            if var.relation not in store.relations:
                store.declare(var.relation,
                              tuple(f"c{i}" for i in range(len(var.values))))
        load_directory(store, args.train_data)
        by_label = {(v.relation, v.values): vid
                    for vid, v in graph.variables.items()}
        for rel in store.relations.values():
            for rec in rel:
                if rec.evidence_label is None:
                    continue
                vid = by_label.get((rel.name, rec.values))
                if vid is None:
                    raise IncfactorError(
                        f"training label for unknown variable "
                        f"{rel.name}{rec.values}")
                graph.set_role(vid, graph_mod.EV_POS
                               if rec.evidence_label == POSITIVE
                               else graph_mod.EV_NEG)
    init = RandomInit(seed=args.seed)
    if args.warmstart:
        init = Warmstart(read_weights_csv(args.warmstart))
    steps = tuple(float(s) for s in args.step_sizes.split(",")) \
        if args.step_sizes else STEP_GRID
    config = TrainConfig(step_sizes=steps, epochs=args.epochs,
                         gradient_samples=args.gradient_samples,
                         seed=args.seed, init=init)
    result = sgd_train(graph, config)
    write_weights_csv(args.out_weights, graph, result.weights)
    write_loss_trace_csv(args.out_loss, result.loss_trace)
    for size, msg in result.diverged.items():
        print(f"step size {size} diverged: {msg}", file=sys.stderr)
    print(f"learn: best step size {result.best_step_size}; "
          f"weights -> {args.out_weights}; loss trace -> {args.out_loss}")
    return EXIT_OK


def cmd_bench(args):
    os.makedirs(args.out_dir, exist_ok=True)
    if args.which == "semantics":
        sizes = tuple(int(s) for s in args.sizes.split(","))
        rows = bench_mod.semantics_bench(sizes=sizes, seeds=args.seeds,
                                         epsilon=args.epsilon,
                                         max_sweeps=args.max_sweeps,
                                         base_seed=args.seed)
        csv_path = os.path.join(args.out_dir, "semantics.csv")
        bench_mod.write_semantics_csv(csv_path, rows)
        report.render_semantics_figure(rows, os.path.join(args.out_dir,
                                                          "semantics.png"))
        med = bench_mod.semantics_medians(rows)
        for (kind, n), v in sorted(med.items()):
            print(f"median sweeps kind={kind} n={n}: {v:.0f}")
        print(f"bench -> {csv_path}")
        return EXIT_OK
    # tradeoff
    axes = args.axes.split(",")
    cells = []
    if "acceptance" in axes:
        cells += bench_mod.acceptance_axis(
            n_vars_list=tuple(int(v) for v in args.vars.split(",")),
            rates=tuple(float(r) for r in args.acceptance_rates.split(",")),
            n_samples=args.samples, lam=args.lam, seed=args.seed)
    if "sparsity" in axes:
        cells += bench_mod.sparsity_axis(
            n_vars_list=tuple(int(v) for v in args.vars.split(",")),
            sparsities=tuple(float(s) for s in args.sparsities.split(",")),
            n_samples=args.samples, lam=args.lam, seed=args.seed)
    if "strawman" in axes:
        cells += bench_mod.strawman_axis(seed=args.seed)
    csv_path = os.path.join(args.out_dir, "tradeoff.csv")
    bench_mod.write_tradeoff_csv(csv_path, cells)
    report.render_tradeoff_figure(cells, os.path.join(args.out_dir,
                                                      "tradeoff.png"))
    for c in cells:
        if c.axis == "acceptance" and c.knob == 1.0:
            rel = c.sampling_seconds / max(c.variational_seconds, 1e-12)
            print(f"acceptance=1.0 |V|={c.n_vars}: sampling/variational "
                  f"runtime = {rel:.3f}")
        if c.axis == "sparsity" and c.knob <= 0.11:
            print(f"sparsity={c.knob} |V|={c.n_vars}: fetch ratio = "
                  f"{c.fetch_ratio:.3f}")
        if c.axis == "strawman" and not c.strawman_feasible:
            print(f"strawman |V|={c.n_vars}: infeasible ({c.note})")
    print(f"bench -> {csv_path}")
    return EXIT_OK


# -- argument wiring -------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="incfactor",
                     description="factor-graph grounding, Gibbs marginals, "
                                 "and incremental maintenance")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value defaults file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (sampling chains run sequentially "
                            "within it)")

    p = sub.add_parser("ground", help="evaluate rules over data into a graph")
    common(p)
    p.add_argument("--rules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("materialize", help="precompute a bundle for updates")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--time-budget", type=float, default=None,
                   help="seconds; stores as many worlds as fit")
    p.add_argument("--burn-in", type=int, default=200)
    p.add_argument("--thin", type=int, default=4)
    p.add_argument("--variational", default=None,
                   help="regularization value, or 'auto' for the KL ladder")
    p.add_argument("--kl-threshold", type=float, default=0.1)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_materialize)

    p = sub.add_parser("update", help="incrementally ground rule/data deltas")
    common(p)
    p.add_argument("--rules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--bundle", default=None)
    p.add_argument("--rules-delta", default=None)
    p.add_argument("--data-delta", default=None)
    p.add_argument("--out-delta", required=True)
    p.add_argument("--out-graph", required=True)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("infer", help="marginals via a chosen strategy")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--updated-graph", default=None)
    p.add_argument("--delta", default=None)
    p.add_argument("--bundle", default=None)
    p.add_argument("--strategy", default="auto",
                   choices=["auto", "sampling", "variational", "rerun"])
    p.add_argument("--sweeps", type=int, default=10_000)
    p.add_argument("--burn-in", type=int, default=None,
                   help="default: sweeps // 10")
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("learn", help="weight learning by SGD")
    common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--train-data", default=None,
                   help="directory of TSVs with evidence labels")
    p.add_argument("--warmstart", default=None, help="weights CSV to start from")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--gradient-samples", type=int, default=20)
    p.add_argument("--step-sizes", default=None,
                   help="comma list; default the standard grid")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--out-loss", required=True)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("bench", help="benchmark harnesses")
    common(p)
    p.add_argument("which", choices=["semantics", "tradeoff"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sizes", default="4,8,16")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--max-sweeps", type=int, default=100_000)
    p.add_argument("--axes", default="acceptance,sparsity,strawman")
    p.add_argument("--vars", default="17,100")
    p.add_argument("--acceptance-rates", default="1.0,0.5,0.1,0.01")
    p.add_argument("--sparsities", default="0.1,0.2,0.3,0.4,0.5,1.0")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--lam", type=float, default=0.1)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _apply_config(args, argv)
        return args.func(args)
    except BundleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT if "different graph" in str(exc) else EXIT_INPUT
    except (ParseError, ProgramError, DivergenceError, IncfactorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
