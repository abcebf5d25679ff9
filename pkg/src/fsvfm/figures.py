"""Figure rendering for the report paths: every CLI command that emits a
delimited report also renders a matplotlib figure next to it."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "save_loss_curves",
    "save_mask_gallery",
    "save_roc_curve",
    "save_attention_stats",
    "save_attention_overlay",
]


def save_loss_curves(reports, out_path):
    """Loss components over steps, log-scaled."""
    steps = [r["step"] for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, style in (("total", "-"), ("rec_m", "--"), ("rec_fr", ":"), ("sim", "-.")):
        values = [r[key] for r in reports]
        ax.plot(steps, values, style, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("pre-training losses")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_mask_gallery(image, pairs, grid, patch_size, out_path):
    """Side-by-side view of an image under each sampled mask; the covered
    region (when any) is tinted separately from the rest of the mask."""
    gh, gw = grid
    names = list(pairs)
    fig, axes = plt.subplots(1, len(names) + 1, figsize=(2.4 * (len(names) + 1), 2.8))
    axes[0].imshow(image)
    axes[0].set_title("input", fontsize=9)
    axes[0].axis("off")
    for ax, name in zip(axes[1:], names):
        pair = pairs[name]
        mask = pair.mask.reshape(gh, gw).repeat(patch_size, 0).repeat(patch_size, 1)
        region = pair.region_mask.reshape(gh, gw).repeat(patch_size, 0).repeat(patch_size, 1)
        shown = image.copy()
        shown[mask == 1] = 0.15 * shown[mask == 1]
        shown[region == 1] = [0.05, 0.05, 0.25]
        ax.imshow(shown)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_roc_curve(scores, labels, out_path):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    thresholds = np.append(np.unique(scores), np.inf)[::-1]
    tpr = [( (scores >= t) & (labels == 1)).sum() / max((labels == 1).sum(), 1) for t in thresholds]
    fpr = [((scores >= t) & (labels == 0)).sum() / max((labels == 0).sum(), 1) for t in thresholds]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr, marker=".", markersize=3)
    ax.plot([0, 1], [0, 1], "--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate (reals over threshold)")
    ax.set_ylabel("true positive rate (fakes over threshold)")
    ax.set_title("ROC")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_attention_stats(summary, out_path):
    """Per-head scatter of mean attention distance and head KL over layers."""
    layers, heads = summary.mean_distance.shape
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    xs = np.repeat(np.arange(layers), heads)
    top.scatter(xs, summary.mean_distance.reshape(-1), s=12, alpha=0.6, label="head")
    top.plot(np.arange(layers), summary.layer_distance, "o-", color="crimson", label="layer mean")
    top.set_ylabel("mean attention distance (px)")
    top.legend(fontsize=8)
    bottom.scatter(xs, summary.mean_kl.reshape(-1), s=12, alpha=0.6)
    bottom.plot(np.arange(layers), summary.layer_kl, "o-", color="crimson")
    bottom.set_ylabel("head KL divergence (nats)")
    bottom.set_xlabel("layer")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_attention_overlay(image, heat, out_path, alpha: float = 0.55):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(image)
    ax.imshow(heat, cmap="jet", alpha=alpha, extent=(0, image.shape[1], image.shape[0], 0))
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
