"""Self-distillation branch: EMA teacher, Siamese representation decoders,
projector/predictor heads, and the negative-cosine alignment loss with its
ablation variants (InfoNCE, normalized MSE; alternative target views)."""

import copy
import logging
import math

import torch
from torch import nn

from .backbone import Mlp, Mlp2, RepDecoder, TokenSet, ViTEncoder, ViTProfile, mean_pool
from .errors import ConfigError, StateError

__all__ = [
    "OnlineBranch",
    "TargetBranch",
    "MaskedRepRegressor",
    "build_target",
    "ema_update",
    "ema_momentum",
    "loss_sim",
    "loss_id_variant",
    "forward_target",
    "forward_online_rep",
    "forward_target_variant",
    "forward_online_variant",
    "zero_norm_warnings",
    "reset_zero_norm_warnings",
    "ID_LOSS_KINDS",
    "TARGET_VIEW_KINDS",
]

logger = logging.getLogger(__name__)

ID_LOSS_KINDS = ("ncs_asym", "infonce", "byol_mse")
TARGET_VIEW_KINDS = ("full", "visible_other_mask", "masked_same_mask")

_NORM_EPS = 1e-12
_zero_norm_count = 0


def zero_norm_warnings() -> int:
    """How many degenerate (zero-norm) vectors the similarity loss has seen."""
    return _zero_norm_count


def reset_zero_norm_warnings():
    global _zero_norm_count
    _zero_norm_count = 0


class OnlineBranch(nn.Module):
    """Student: encoder, representation decoder, projector and predictor."""

    def __init__(self, profile: ViTProfile, image_size: int,
                 proj_hidden: int = 2048, proj_out: int = 256, rep_depth: int = 2):
        super().__init__()
        self.encoder = ViTEncoder(profile, image_size)
        self.rep_decoder = RepDecoder(profile, rep_depth)
        self.projector = Mlp2(profile.embed_dim, proj_hidden, proj_out)
        self.predictor = Mlp2(proj_out, proj_hidden, proj_out)


class TargetBranch(nn.Module):
    """Teacher: EMA shadow of the online encoder/rep-decoder/projector.

    Never receives gradients; parameter names correspond 1-1 with the online
    branch minus the predictor.
    """

    def __init__(self, profile: ViTProfile, image_size: int,
                 proj_hidden: int = 2048, proj_out: int = 256, rep_depth: int = 2):
        super().__init__()
        self.encoder = ViTEncoder(profile, image_size)
        self.rep_decoder = RepDecoder(profile, rep_depth)
        self.projector = Mlp2(profile.embed_dim, proj_hidden, proj_out)


_EMA_SUBMODULES = ("encoder", "rep_decoder", "projector")


def build_target(online: OnlineBranch) -> TargetBranch:
    """Exact copy of the online branch at step 0, detached from the optimizer."""
    target = TargetBranch.__new__(TargetBranch)
    nn.Module.__init__(target)
    for name in _EMA_SUBMODULES:
        setattr(target, name, copy.deepcopy(getattr(online, name)))
    target.requires_grad_(False)
    return target


def ema_update(target: TargetBranch, online: OnlineBranch, tau: float) -> TargetBranch:
    """theta_t <- tau * theta_t + (1 - tau) * theta_o, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise StateError(f"EMA momentum must lie in [0, 1], got {tau}")
    with torch.no_grad():
        for name in _EMA_SUBMODULES:
            t_params = dict(getattr(target, name).named_parameters())
            o_params = dict(getattr(online, name).named_parameters())
            if t_params.keys() != o_params.keys():
                raise StateError(f"parameter names diverge in {name}")
            for key, t_p in t_params.items():
                o_p = o_params[key]
                if t_p.shape != o_p.shape:
                    raise StateError(f"shape mismatch at {name}.{key}")
                t_p.mul_(tau).add_(o_p.detach(), alpha=1.0 - tau)
    return target


def ema_momentum(step: int, total_steps: int, base: float = 0.996) -> float:
    """Cosine ramp of the momentum from `base` toward 1.0 over the run."""
    if total_steps <= 0:
        return base
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - base) * (math.cos(math.pi * frac) + 1.0) / 2.0


def _l2_normalize(v: torch.Tensor) -> torch.Tensor:
    global _zero_norm_count
    norms = v.norm(dim=-1, keepdim=True)
    degenerate = int((norms < _NORM_EPS).sum())
    if degenerate:
        _zero_norm_count += degenerate
        logger.warning("l2-normalizing %d zero-norm vector(s)", degenerate)
    return v / norms.clamp_min(_NORM_EPS)


def loss_sim(v_online: torch.Tensor, v_target: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity between normalized vectors, in [-1, 1].

    Asymmetric: evaluated once, online-predicted against the (already
    detached) target view, never symmetrized.
    """
    cos = (_l2_normalize(v_online) * _l2_normalize(v_target)).sum(dim=-1)
    return -cos.clamp(-1.0, 1.0).mean()


def loss_id_variant(kind: str, v_online: torch.Tensor, v_target: torch.Tensor,
                    temperature: float = 0.1) -> torch.Tensor:
    if kind == "ncs_asym":
        return loss_sim(v_online, v_target)
    if kind == "byol_mse":
        diff = _l2_normalize(v_online) - _l2_normalize(v_target)
        return (diff**2).sum(dim=-1).mean()
    if kind == "infonce":
        if temperature <= 0:
            raise ConfigError("infonce temperature must be positive")
        logits = _l2_normalize(v_online) @ _l2_normalize(v_target).T / temperature
        labels = torch.arange(logits.shape[0], device=logits.device)
        return nn.functional.cross_entropy(logits, labels)
    raise ConfigError(f"unknown id loss kind {kind!r}; choose from {ID_LOSS_KINDS}")


@torch.no_grad()
def forward_target(images: torch.Tensor, target: TargetBranch) -> torch.Tensor:
    """Full view -> teacher encoder -> rep decoder -> projector (stop-grad)."""
    tokens = target.encoder.embed_full(images)
    z_t, _ = target.encoder.encode(tokens)
    return target.projector(target.rep_decoder(z_t))


def forward_online_rep(z_full: TokenSet, online: OnlineBranch) -> torch.Tensor:
    """Assembled student tokens -> rep decoder -> projector -> predictor."""
    r_o = online.rep_decoder(z_full)
    return online.predictor(online.projector(r_o))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context):
        b, t, d = x.shape
        s = context.shape[1]
        q = self.q(x).reshape(b, t, self.heads, d // self.heads).transpose(1, 2)
        kv = self.kv(context).reshape(b, s, 2, self.heads, d // self.heads)
        k, v = kv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class CrossBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, context):
        x = x + self.attn(self.norm_q(x), self.norm_kv(context))
        return x + self.mlp(self.norm2(x))


class MaskedRepRegressor(nn.Module):
    """Latent regressor for the masked-view ablation: learnable queries at the
    masked positions cross-attend to the assembled token set."""

    def __init__(self, profile: ViTProfile, depth: int = 2):
        super().__init__()
        d = profile.embed_dim
        self.query_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(CrossBlock(d, profile.heads) for _ in range(depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, d)
        nn.init.normal_(self.query_token, std=0.02)

    def forward(self, z_full: TokenSet, mask: torch.Tensor, pos_embed: torch.Tensor) -> torch.Tensor:
        masked_pos = (mask != 0).nonzero(as_tuple=False)[:, 1].reshape(mask.shape[0], -1)
        pos = pos_embed.to(z_full.tokens.dtype)[masked_pos]
        queries = self.query_token.to(pos.dtype) + pos
        for block in self.blocks:
            queries = block(queries, z_full.tokens)
        feats = self.head(self.norm(queries))
        return feats.mean(dim=1)


def _select_masked(tokens: TokenSet, mask: torch.Tensor) -> torch.Tensor:
    masked_pos = (mask != 0).nonzero(as_tuple=False)[:, 1].reshape(mask.shape[0], -1)
    patches = tokens.patch_tokens()
    picked = torch.gather(
        patches, 1, masked_pos.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
    )
    return picked.mean(dim=1)


@torch.no_grad()
def forward_target_variant(
    view_kind: str,
    target: TargetBranch,
    images: torch.Tensor,
    mask: torch.Tensor = None,
    alt_mask: torch.Tensor = None,
) -> torch.Tensor:
    """Teacher-side forward for each target-view ablation (stop-grad)."""
    if view_kind == "full":
        return forward_target(images, target)
    if view_kind == "visible_other_mask":
        if alt_mask is None:
            raise StateError("visible_other_mask needs an independently drawn mask")
        tokens = target.encoder.embed_visible(images, alt_mask)
        z_t, _ = target.encoder.encode(tokens)
        return target.projector(mean_pool(z_t.tokens, z_t.has_cls))
    if view_kind == "masked_same_mask":
        if mask is None:
            raise StateError("masked_same_mask needs the student's mask")
        tokens = target.encoder.embed_full(images)
        z_t, _ = target.encoder.encode(tokens)
        return target.projector(_select_masked(z_t, mask))
    raise ConfigError(f"unknown target view {view_kind!r}; choose from {TARGET_VIEW_KINDS}")


def forward_online_variant(
    view_kind: str,
    online: OnlineBranch,
    z_full: TokenSet = None,
    z_visible: TokenSet = None,
    mask: torch.Tensor = None,
    regressor: MaskedRepRegressor = None,
    pos_embed: torch.Tensor = None,
) -> torch.Tensor:
    """Student-side forward matching each target-view ablation."""
    if view_kind == "full":
        return forward_online_rep(z_full, online)
    if view_kind == "visible_other_mask":
        pooled = mean_pool(z_visible.tokens, z_visible.has_cls)
        return online.predictor(online.projector(pooled))
    if view_kind == "masked_same_mask":
        if regressor is None:
            raise StateError("masked_same_mask needs the cross-attention regressor")
        return online.predictor(online.projector(regressor(z_full, mask, pos_embed)))
    raise ConfigError(f"unknown target view {view_kind!r}; choose from {TARGET_VIEW_KINDS}")
