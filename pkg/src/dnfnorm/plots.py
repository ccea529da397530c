"""Matplotlib figures for reports; every function writes one image file."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# (column, axis title) pairs drawn by plot_trace
TRACE_PANELS = (
    ("nll", "negative log-likelihood"),
    ("bw_ratio", "between / within variance"),
    ("train_eer_cosine", "probe cosine EER"),
    ("avg_pc_dir_var", "avg PC direction variance"),
    ("pc_shape_var_avg", "avg PC shape variance"),
    ("avg_kurtosis", "avg excess kurtosis"),
)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_trace(trace, path):
    """Per-epoch training diagnostics, one panel per statistic.

    Args:
        trace: a ``DiagnosticTrace``.
        path: output image path; the format follows the extension.
    """
    epochs = trace.column("epoch")
    fig, axes = plt.subplots(2, 3, figsize=(12, 6.5))
    for ax, (col, title) in zip(axes.ravel(), TRACE_PANELS):
        ax.plot(epochs, trace.column(col), marker="o", ms=3)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    _save(fig, path)


def plot_subgroups(named_groups, path):
    """Subgroup statistics against discriminant-ordered dimension groups.

    Args:
        named_groups: mapping name -> list of ``SubgroupStats`` (one line each).
        path: output image path.
    """
    panels = (
        ("avg PC shape variance", lambda g: g.report.pc_shape_var_avg),
        ("avg excess kurtosis", lambda g: g.report.avg_kurtosis),
        ("between-class variance", lambda g: g.between_var),
        ("cosine EER", lambda g: g.cosine_eer),
    )
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    for ax, (title, get) in zip(axes.ravel(), panels):
        for name, groups in named_groups.items():
            ax.plot(np.arange(len(groups)), [get(g) for g in groups], marker="o", ms=3, label=name)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("dimension group")
        ax.grid(alpha=0.3)
    axes[0, 0].legend(fontsize=8)
    _save(fig, path)


def plot_scatter_matrices(S_b, S_w, path):
    """Heatmaps of between- and within-class scatter side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    for ax, S, title in ((axes[0], S_b, "between-class"), (axes[1], S_w, "within-class")):
        lim = float(np.max(np.abs(S))) or 1.0
        im = ax.imshow(S, cmap="RdBu_r", vmin=-lim, vmax=lim)
        ax.set_title(title, fontsize=10)
        fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_latent_2d(X, Z, path, max_points=5000):
    """Data and latent codes of a 2-D flow, coloured by label."""
    n = min(len(X), max_points)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    for ax, S, title in ((axes[0], X, "data"), (axes[1], Z, "latent")):
        ax.scatter(S.vectors[:n, 0], S.vectors[:n, 1], c=S.labels[:n], s=2, cmap="viridis")
        ax.set_title(title, fontsize=10)
        ax.set_aspect("equal", adjustable="datalim")
    _save(fig, path)


def plot_score_hist(scores, is_target, path, bins=60):
    """Target and non-target score histograms."""
    scores = np.asarray(scores)
    is_target = np.asarray(is_target, dtype=bool)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(scores[~is_target], bins=bins, density=True, alpha=0.6, label="non-target")
    ax.hist(scores[is_target], bins=bins, density=True, alpha=0.6, label="target")
    ax.set_xlabel("score")
    ax.legend()
    _save(fig, path)


def plot_report_bars(named_reports, path):
    """Grouped bars of regulation statistics, one bar per named vector set."""
    names = list(named_reports)
    rows = [r.rows() for r in named_reports.values()]
    labels = [label for label, _ in rows[0]]
    cols = (len(labels) + 1) // 2
    fig, axes = plt.subplots(2, cols, figsize=(2.3 * cols, 7))
    for ax in axes.ravel()[len(labels):]:
        ax.axis("off")
    for j, (ax, label) in enumerate(zip(axes.ravel(), labels)):
        ax.bar(np.arange(len(names)), [r[j][1] for r in rows], color=f"C{j % 10}")
        ax.set_xticks(np.arange(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
        ax.set_title(label, fontsize=8)
    _save(fig, path)
