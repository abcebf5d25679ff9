"""Masked-image-modeling losses over per-patch normalized pixel targets."""

import torch

from .backbone import patchify_images
from .errors import ShapeError

__all__ = ["recon_targets", "loss_rec_m", "loss_rec_fr", "loss_rec"]

_NORM_EPS = 1e-6
DEFAULT_LAMBDA_FR = 0.007


def recon_targets(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Per-patch standardized pixels: each patch shifted/scaled by its own
    mean and population variance (epsilon 1e-6 guards constant patches)."""
    patches = patchify_images(images, patch_size)
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True, unbiased=False)
    return (patches - mean) / torch.sqrt(var + _NORM_EPS)


def _masked_patch_mse(pred: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over masked patches of the per-patch pixel MSE.

    Only masked positions enter the graph, so gradients at visible positions
    are identically zero and perturbing them leaves the value bit-identical.
    """
    if pred.shape != targets.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs targets {tuple(targets.shape)}")
    if mask.shape != pred.shape[:2]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not cover the patch grid")
    idx = (mask != 0).reshape(-1)
    flat_pred = pred.reshape(-1, pred.shape[-1])[idx]
    flat_tgt = targets.reshape(-1, targets.shape[-1])[idx]
    return ((flat_pred - flat_tgt) ** 2).mean(dim=-1).mean()


def loss_rec_m(pred: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Reconstruction loss over the image mask; requires at least one masked patch."""
    if int((mask != 0).sum()) == 0:
        raise ShapeError("loss_rec_m needs at least one masked patch")
    return _masked_patch_mse(pred, targets, mask)


def loss_rec_fr(pred: torch.Tensor, targets: torch.Tensor, region_mask: torch.Tensor) -> torch.Tensor:
    """Auxiliary loss over the covered facial region; zero when no region mask."""
    if int((region_mask != 0).sum()) == 0:
        return pred.new_zeros(())
    return _masked_patch_mse(pred, targets, region_mask)


def loss_rec(
    pred: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    region_mask: torch.Tensor,
    lambda_fr: float = DEFAULT_LAMBDA_FR,
):
    """Weighted sum of the two reconstruction losses.

    The region mask is a subset of the image mask, so covered-region patches
    intentionally count in both terms.  Returns (total, parts).
    """
    rec_m = loss_rec_m(pred, targets, mask)
    rec_fr = loss_rec_fr(pred, targets, region_mask)
    total = rec_m + lambda_fr * rec_fr
    return total, {"rec_m": rec_m, "rec_fr": rec_fr}
