"""Figure rendering for bench/report outputs.

Every renderer takes the rows/cells a bench produced and writes a PNG
next to the delimited output, so a bench directory is self-contained.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import semantics_medians

_COLORS = {"linear": "tab:red", "ratio": "tab:blue", "logical": "tab:green"}


def render_semantics_figure(rows, path):
    med = semantics_medians(rows)
    sizes = sorted({n for _k, n in med})
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for kind in ("linear", "ratio", "logical"):
        ys = [med.get((kind, n)) for n in sizes]
        ax.plot(sizes, ys, marker="o", label=kind, color=_COLORS[kind])
    ax.set_yscale("log")
    ax.set_xlabel("number of vote variables")
    ax.set_ylabel("median sweeps to 1% marginal error")
    ax.set_title("Gibbs convergence by counting semantics")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_tradeoff_figure(cells, path):
    acc = [c for c in cells if c.axis == "acceptance"]
    spa = [c for c in cells if c.axis == "sparsity"]
    n_panels = (1 if acc else 0) + (1 if spa else 0)
    if n_panels == 0:
        return
    fig, axes = plt.subplots(1, n_panels, figsize=(5.0 * n_panels, 3.4))
    if n_panels == 1:
        axes = [axes]
    k = 0
    if acc:
        ax = axes[k]
        k += 1
        for n_vars in sorted({c.n_vars for c in acc}):
            sub = sorted((c for c in acc if c.n_vars == n_vars),
                         key=lambda c: c.knob)
            xs = [c.knob for c in sub]
            ax.plot(xs, [c.sampling_seconds for c in sub], marker="o",
                    label=f"sampling |V|={n_vars}")
            ax.plot(xs, [c.variational_seconds for c in sub], marker="s",
                    linestyle="--", label=f"variational |V|={n_vars}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("target acceptance rate")
        ax.set_ylabel("inference seconds")
        ax.set_title("amount of change")
        ax.legend(fontsize=7)
        ax.grid(True, alpha=0.3)
    if spa:
        ax = axes[k]
        for n_vars in sorted({c.n_vars for c in spa}):
            sub = sorted((c for c in spa if c.n_vars == n_vars),
                         key=lambda c: c.knob)
            ax.plot([c.knob for c in sub], [c.fetch_ratio for c in sub],
                    marker="o", label=f"|V|={n_vars}")
        ax.axhline(1.0, color="gray", linewidth=0.8)
        ax.set_xlabel("sparsity (fraction of nonzero weights)")
        ax.set_ylabel("approx / original factor fetches")
        ax.set_title("sparsity of correlations")
        ax.legend(fontsize=7)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_calibration_figure(buckets, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    edges = np.arange(10) / 10.0
    ax.bar(edges + 0.05, buckets, width=0.09, color="tab:blue")
    ax.set_xlabel("predicted probability bucket")
    ax.set_ylabel("variables")
    ax.set_title("marginal calibration buckets")
    ax.set_xticks(np.arange(11) / 10.0)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_lambda_figure(lambdas, kls, factor_counts, path):
    fig, ax1 = plt.subplots(figsize=(5.0, 3.4))
    ax1.plot(lambdas, factor_counts, marker="o", color="tab:blue",
             label="pairwise factors")
    ax1.set_xscale("log")
    ax1.set_xlabel("regularization")
    ax1.set_ylabel("pairwise factors", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(lambdas, kls, marker="s", color="tab:red", label="KL")
    ax2.set_ylabel("KL(original || approx)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
