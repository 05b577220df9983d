"""incfactor: weighted rule programs grounded into factor graphs, Gibbs
marginals, and incremental maintenance of both.

Typical flow:

    program = rules.parse_program(text)
    graph, state = grounding.ground(program, store)
    bundle = incremental.materialize_samples(graph, n_samples=2000, seed=0)
    delta = grounding.incremental_ground(state, applied_deltas)
    result = incremental.mh_infer(bundle, state.graph, delta, sweeps=2000)
"""

from .graph import (FactorGraph, enumerate_marginals, g_eval, factor_weight,
                    world_weight, voting_closed_form, read_graph, write_graph,
                    graph_fingerprint)
from .grounding import (UpdateDelta, apply_update, delta_rules, ground,
                        incremental_ground)
from .incremental import (MaterializationBundle, load_bundle,
                          materialize_samples, materialize_strawman,
                          materialize_variational, mh_infer, save_bundle,
                          select_lambda, variational_infer)
from .inference import GibbsConfig, gibbs_conditional, run_gibbs, sweeps_to_epsilon
from .learning import TrainConfig, estimate_loss, feature_expectation, sgd_train
from .optimizer import choose_strategy, classify_update, decompose
from .relstore import RelationStore
from .rules import check_hierarchical, expand_tied_weights, parse_program, print_program

__version__ = "0.1.0"

__all__ = [
    "FactorGraph", "GibbsConfig", "MaterializationBundle", "RelationStore",
    "TrainConfig", "UpdateDelta", "apply_update", "check_hierarchical",
    "choose_strategy", "classify_update", "decompose", "delta_rules",
    "enumerate_marginals", "estimate_loss", "expand_tied_weights",
    "factor_weight", "feature_expectation", "g_eval", "gibbs_conditional",
    "graph_fingerprint", "ground", "incremental_ground", "load_bundle",
    "materialize_samples", "materialize_strawman", "materialize_variational",
    "mh_infer", "parse_program", "print_program", "read_graph", "run_gibbs",
    "save_bundle", "select_lambda", "sgd_train", "sweeps_to_epsilon",
    "variational_infer", "voting_closed_form", "world_weight", "write_graph",
]
