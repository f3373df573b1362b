"""Figure rendering for reports. CSV/JSON written alongside stay the source of truth."""
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "lines.linewidth": 1.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "sodgan",
}


def figsize(scale=1.0, ratio=None):
    width = 5.0 * scale
    ratio = ratio or (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def new(scale=1.0, nrows=1, ncols=1, ratio=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=figsize(scale * max(ncols, 1), ratio))
    return fig, ax


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_pr_curve(pr, path, label=None):
    fig, ax = new()
    ax.plot(pr[:, 1], pr[:, 0], label=label)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if label:
        ax.legend(frameon=False)
    return save(fig, path)


def plot_f_curve(thresholds, f_curve, path, label=None):
    fig, ax = new()
    ax.plot(thresholds * 255, f_curve, label=label)
    ax.set_xlabel("Threshold")
    ax.set_ylabel("F-measure")
    ax.set_xlim(0, 255)
    ax.set_ylim(0, 1.02)
    if label:
        ax.legend(frameon=False)
    return save(fig, path)


def plot_stats(reports, path):
    """Side-by-side dataset statistics: center bias per dataset, class counts,
    color-contrast and object-size distributions. ``reports`` maps name -> StatsReport."""
    names = list(reports)
    fig, axes = new(scale=0.6, nrows=1, ncols=len(names) + 3, ratio=1.0)
    axes = np.atleast_1d(axes)
    for ax, name in zip(axes, names):
        im = ax.imshow(reports[name].center_bias, cmap="magma", vmin=0)
        ax.set_title(f"center bias: {name}")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    ax_cls, ax_con, ax_size = axes[len(names):]
    width = 0.8 / len(names)
    for i, name in enumerate(names):
        counts = reports[name].class_counts
        keys = sorted(counts)
        total = sum(counts.values())
        ax_cls.bar(np.array(keys) + i * width, [counts[k] / total for k in keys], width, label=name)
        ax_con.hist(reports[name].color_contrast, bins=20, range=(0, 1), alpha=0.6, density=True, label=name)
        ax_size.hist(reports[name].object_sizes, bins=20, range=(0, 1), alpha=0.6, density=True, label=name)
    ax_cls.set_title("category distribution")
    ax_cls.set_xlabel("class")
    ax_con.set_title("color contrast")
    ax_con.set_xlabel("chi-square distance")
    ax_size.set_title("object size")
    ax_size.set_xlabel("foreground fraction")
    for ax in (ax_cls, ax_con, ax_size):
        ax.legend(frameon=False)
    return save(fig, path)


def plot_rows(rows, x_key, y_keys, path, xlabel=None, categorical=False):
    """Line (or grouped bar) plot of sweep / ablation rows."""
    fig, ax = new()
    xs = [r[x_key] for r in rows]
    for key in y_keys:
        ys = [r[key] for r in rows]
        if categorical:
            pos = np.arange(len(xs)) + (y_keys.index(key) - (len(y_keys) - 1) / 2) * 0.8 / len(y_keys)
            ax.bar(pos, ys, 0.8 / len(y_keys), label=key)
        else:
            ax.plot(xs, ys, marker="o", label=key)
    if categorical:
        ax.set_xticks(np.arange(len(xs)))
        ax.set_xticklabels([str(x) for x in xs], rotation=30)
    ax.set_xlabel(xlabel or x_key)
    ax.legend(frameon=False)
    return save(fig, path)


def plot_samples(images, masks, path, ncols=8):
    """Grid of images, each with its mask underneath when ``masks`` is given."""
    n = len(images)
    ncols = min(ncols, n)
    per = 1 if masks is None else 2
    nrows = per * math.ceil(n / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.2 * ncols, 1.2 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i, img in enumerate(images):
        r, c = per * (i // ncols), i % ncols
        axes[r, c].imshow(np.clip(img, 0, 1))
        if masks is not None:
            axes[r + 1, c].imshow(masks[i], cmap="gray", vmin=0, vmax=1)
    return save(fig, path)
