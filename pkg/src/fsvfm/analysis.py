"""Attention diagnostics: mean attention distance, head-diversity KL, and
last-block attention-map export.

Both statistics exclude the CLS token (it has no pixel position): traces are
reduced to the patch-token submatrix with rows renormalized.  The distance
statistic is the attention-weighted Euclidean distance between patch centers,
averaged over queries; the diversity statistic is the KL divergence of each
head against every other head in its layer, averaged over queries and heads.
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .backbone import AttentionTrace
from .errors import ShapeError, StateError

__all__ = [
    "AttentionSummary",
    "patch_centers",
    "strip_cls",
    "mean_attention_distance",
    "head_kl_diversity",
    "attention_summary",
    "received_attention",
    "export_attention_map",
    "summary_tsv_lines",
]

_KL_CLAMP = 1e-12


@dataclass
class AttentionSummary:
    mean_distance: np.ndarray  # layers x heads, pixels
    mean_kl: np.ndarray  # layers x heads, nats

    @property
    def layer_distance(self) -> np.ndarray:
        return self.mean_distance.mean(axis=1)

    @property
    def layer_kl(self) -> np.ndarray:
        return self.mean_kl.mean(axis=1)


def patch_centers(grid, patch_size: int) -> np.ndarray:
    """Pixel coordinates of each patch center, row-major over the grid."""
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    centers = np.stack([rows, cols], axis=-1).reshape(-1, 2).astype(np.float64)
    return (centers + 0.5) * patch_size


def _as_array(layer) -> np.ndarray:
    if isinstance(layer, torch.Tensor):
        layer = layer.detach().cpu().numpy()
    layer = np.asarray(layer, dtype=np.float64)
    if layer.ndim != 4:
        raise ShapeError("attention layers must be batch x heads x T x T")
    return layer


def strip_cls(layer, has_cls: bool) -> np.ndarray:
    """Reduce to the patch-token submatrix; rows renormalized to sum to 1."""
    attn = _as_array(layer)
    if has_cls:
        attn = attn[:, :, 1:, 1:]
        attn = attn / attn.sum(axis=-1, keepdims=True)
    return attn


def _layers(trace: AttentionTrace):
    if not trace.layers:
        raise StateError("attention trace is empty; encode with capture_attention=True")
    return [strip_cls(layer, trace.has_cls) for layer in trace.layers]


def mean_attention_distance(trace: AttentionTrace, grid, patch_size: int) -> np.ndarray:
    """Per layer/head: attention-weighted distance between patch centers,
    averaged over batch and query patches. Returned in pixels."""
    centers = patch_centers(grid, patch_size)
    dist = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    out = []
    for attn in _layers(trace):
        if attn.shape[-1] != dist.shape[0]:
            raise ShapeError("trace token count does not match the patch grid")
        # sum_k A[q, k] * dist(q, k), then mean over queries and batch
        per_head = np.einsum("bhqk,qk->bhq", attn, dist).mean(axis=(0, 2))
        out.append(per_head)
    return np.stack(out)


def head_kl_diversity(trace: AttentionTrace) -> np.ndarray:
    """Per layer/head: mean KL divergence of this head's attention rows
    against every other head, rows clamped at 1e-12 before the log."""
    out = []
    for attn in _layers(trace):
        clamped = np.clip(attn, _KL_CLAMP, None)
        b, h, t, _ = clamped.shape
        log_p = np.log(clamped)
        values = np.zeros(h)
        for i in range(h):
            divergences = []
            for j in range(h):
                if i == j:
                    continue
                kl = (clamped[:, i] * (log_p[:, i] - log_p[:, j])).sum(axis=-1)
                divergences.append(kl.mean())
            values[i] = np.mean(divergences) if divergences else 0.0
        out.append(values)
    return np.stack(out)


def attention_summary(trace: AttentionTrace, grid, patch_size: int) -> AttentionSummary:
    return AttentionSummary(
        mean_distance=mean_attention_distance(trace, grid, patch_size),
        mean_kl=head_kl_diversity(trace),
    )


def received_attention(layer, has_cls: bool, grid) -> np.ndarray:
    """Mean over batch, heads and queries of the attention each key receives,
    reshaped to the patch grid.  Sums to 1 (a probability mass)."""
    attn = strip_cls(layer, has_cls)
    per_key = attn.mean(axis=(0, 1, 2))
    gh, gw = grid
    if per_key.size != gh * gw:
        raise ShapeError("trace token count does not match the patch grid")
    return per_key.reshape(gh, gw)


def export_attention_map(encoder, image: np.ndarray, normalization, out_path,
                         layer: int = -1, alpha: float = 0.55):
    """Overlay the last-block received-attention heatmap on the input image
    and write it as a PNG. Returns the patch-grid heatmap."""
    from .figures import save_attention_overlay

    mean, std = normalization
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    dtype = next(encoder.parameters()).dtype
    tensor = torch.from_numpy(
        ((image - mean) / std).transpose(2, 0, 1)[None]
    ).to(dtype)
    with torch.no_grad():
        tokens = encoder.embed_full(tensor)
        _, trace = encoder.encode(tokens, capture_attention=True)
    heat = received_attention(trace.layers[layer], trace.has_cls, encoder.grid)
    upsampled = ndimage.zoom(heat, encoder.profile.patch_size, order=1)
    save_attention_overlay(image, upsampled, out_path, alpha=alpha)
    return heat


def summary_tsv_lines(summary: AttentionSummary):
    """Export records: layer<TAB>head<TAB>mean_distance<TAB>mean_kl."""
    lines = []
    layers, heads = summary.mean_distance.shape
    for layer in range(layers):
        for head in range(heads):
            lines.append(
                f"{layer}\t{head}\t{summary.mean_distance[layer, head]:.10g}"
                f"\t{summary.mean_kl[layer, head]:.10g}"
            )
    return lines
