"""Vision-transformer primitives shared by every network in the package.

Pre-norm encoder/decoder blocks, fixed 2-D sinusoidal positional embeddings,
visible-only patch embedding, full-set assembly with a shared learnable mask
token, a pixel decoder, and shallow representation decoders.  Sized by a
profile; the micro profile is small enough for finite-difference gradient
checks in double precision.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ShapeError, StateError

__all__ = [
    "ViTProfile",
    "PROFILES",
    "TokenSet",
    "AttentionTrace",
    "sincos_pos_embed_1d",
    "sincos_pos_embed_2d",
    "patchify_images",
    "unpatchify_images",
    "mean_pool",
    "Mlp2",
    "ViTEncoder",
    "PixelDecoder",
    "RepDecoder",
    "assemble_full",
]


@dataclass(frozen=True)
class ViTProfile:
    name: str
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    decoder_dim: int
    decoder_depth: int
    decoder_heads: int
    mlp_ratio: float = 4.0
    use_cls_token: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ShapeError("embed_dim must be divisible by heads")
        if self.decoder_dim % self.decoder_heads:
            raise ShapeError("decoder_dim must be divisible by decoder_heads")
        if self.depth < 1 or self.decoder_depth < 1:
            raise ShapeError("depth must be >= 1")


PROFILES = {
    # micro keeps double-precision finite-difference checks fast
    "micro": ViTProfile("micro", 8, 64, 4, 4, 32, 2, 4),
    "tiny": ViTProfile("tiny", 16, 192, 12, 3, 128, 4, 4),
    "s": ViTProfile("s", 16, 384, 12, 6, 512, 8, 16),
    "b": ViTProfile("b", 16, 768, 12, 12, 512, 8, 16),
    "l": ViTProfile("l", 16, 1024, 24, 16, 512, 8, 16),
}


@dataclass
class TokenSet:
    """Tokens plus the patch index each one occupies.

    `tokens` is B x T x d with the CLS token (when present) at slot 0;
    `positions` is B x P over the patch tokens only, unique per sample.
    """

    tokens: torch.Tensor
    positions: torch.Tensor
    has_cls: bool

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[1])

    def patch_tokens(self) -> torch.Tensor:
        return self.tokens[:, 1:] if self.has_cls else self.tokens


@dataclass
class AttentionTrace:
    """Per-layer attention probabilities, each B x heads x T x T."""

    layers: list = field(default_factory=list)
    has_cls: bool = True


def sincos_pos_embed_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    """Fixed sin/cos table: first dim/2 entries sin, rest cos."""
    if dim % 2:
        raise ShapeError("sincos dimension must be even")
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Row embedding in the first half, column embedding in the second."""
    if dim % 4:
        raise ShapeError("2-D sincos dimension must be divisible by 4")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb_rows = sincos_pos_embed_1d(dim // 2, rows.reshape(-1))
    emb_cols = sincos_pos_embed_1d(dim // 2, cols.reshape(-1))
    return np.concatenate([emb_rows, emb_cols], axis=1)


def patchify_images(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """B x 3 x H x W -> B x N x (p*p*3), channel-last within each patch."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = torch.einsum("nchpwq->nhwpqc", x)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def unpatchify_images(patches: torch.Tensor, patch_size: int, grid) -> torch.Tensor:
    b, n, _ = patches.shape
    gh, gw = grid
    x = patches.reshape(b, gh, gw, patch_size, patch_size, 3)
    x = torch.einsum("nhwpqc->nchpwq", x)
    return x.reshape(b, 3, gh * patch_size, gw * patch_size)


def mean_pool(tokens: torch.Tensor, has_cls: bool) -> torch.Tensor:
    """Average over non-CLS tokens: B x T x d -> B x d."""
    return tokens[:, 1:].mean(dim=1) if has_cls else tokens.mean(dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, capture: bool = False):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn.detach() if capture else None


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, capture: bool = False):
        attn_out, probs = self.attn(self.norm1(x), capture)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, probs


class Mlp2(nn.Module):
    """Two-layer MLP head (projector / predictor)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def _init_transformer(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ViTEncoder(nn.Module):
    """Patch projection + fixed 2-D sincos positions + pre-norm blocks."""

    def __init__(self, profile: ViTProfile, image_size: int):
        super().__init__()
        if image_size % profile.patch_size:
            raise ShapeError(f"image size {image_size} not divisible by patch {profile.patch_size}")
        self.profile = profile
        self.image_size = image_size
        self.grid = (image_size // profile.patch_size,) * 2
        self.n_patches = self.grid[0] * self.grid[1]
        d = profile.embed_dim
        self.patch_proj = nn.Linear(profile.patch_size**2 * 3, d)
        if profile.use_cls_token:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        table = sincos_pos_embed_2d(d, *self.grid)
        self.register_buffer("pos_embed", torch.from_numpy(table), persistent=False)
        self.blocks = nn.ModuleList(
            Block(d, profile.heads, profile.mlp_ratio) for _ in range(profile.depth)
        )
        self.norm = nn.LayerNorm(d)
        _init_transformer(self)
        if profile.use_cls_token:
            nn.init.normal_(self.cls_token, std=0.02)

    @property
    def has_cls(self) -> bool:
        return self.profile.use_cls_token

    def _with_cls(self, tokens: torch.Tensor) -> torch.Tensor:
        if not self.has_cls:
            return tokens
        cls = self.cls_token.to(tokens.dtype).expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1)

    def embed_full(self, images: torch.Tensor) -> TokenSet:
        """All patch tokens (plus CLS), position-infused."""
        patches = patchify_images(images, self.profile.patch_size)
        if patches.shape[1] != self.n_patches:
            raise ShapeError("image grid does not match encoder grid")
        tokens = self.patch_proj(patches) + self.pos_embed.to(patches.dtype)
        positions = torch.arange(self.n_patches, device=images.device)
        positions = positions.expand(images.shape[0], -1)
        return TokenSet(self._with_cls(tokens), positions, self.has_cls)

    def embed_visible(self, images: torch.Tensor, mask: torch.Tensor) -> TokenSet:
        """Tokens at positions where mask == 0 only (plus CLS).

        Every sample in the batch must have the same visible count.
        """
        patches = patchify_images(images, self.profile.patch_size)
        if mask.shape != patches.shape[:2]:
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not match patch grid")
        visible_counts = (mask == 0).sum(dim=1)
        if not bool((visible_counts == visible_counts[0]).all()):
            raise ShapeError("visible counts differ across the batch")
        positions = (mask == 0).nonzero(as_tuple=False)[:, 1].reshape(mask.shape[0], -1)
        tokens = self.patch_proj(patches) + self.pos_embed.to(patches.dtype)
        gathered = torch.gather(
            tokens, 1, positions.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
        )
        return TokenSet(self._with_cls(gathered), positions, self.has_cls)

    def encode(self, token_set: TokenSet, capture_attention: bool = False):
        """Run the block stack; optionally capture attention probabilities."""
        x = token_set.tokens
        trace = AttentionTrace(has_cls=token_set.has_cls) if capture_attention else None
        for block in self.blocks:
            x, probs = block(x, capture_attention)
            if capture_attention:
                trace.layers.append(probs)
        x = self.norm(x)
        return TokenSet(x, token_set.positions, token_set.has_cls), trace


def assemble_full(
    token_set: TokenSet,
    mask: torch.Tensor,
    mask_token: torch.Tensor,
    pos_embed: torch.Tensor,
) -> TokenSet:
    """Full token set: encoded values where visible, the shared mask token
    where masked, decoder-side positions added everywhere; CLS carried over."""
    if mask_token.ndim != 1:
        raise StateError("mask_token must be a flat embedding vector")
    b, n = mask.shape
    d = token_set.tokens.shape[-1]
    visible = token_set.patch_tokens()
    full = mask_token.to(visible.dtype).expand(b, n, d).clone()
    full.scatter_(1, token_set.positions.unsqueeze(-1).expand(-1, -1, d), visible)
    full = full + pos_embed.to(visible.dtype)
    if token_set.has_cls:
        full = torch.cat([token_set.tokens[:, :1], full], dim=1)
    positions = torch.arange(n, device=mask.device).expand(b, -1)
    return TokenSet(full, positions, token_set.has_cls)


class PixelDecoder(nn.Module):
    """Narrow transformer stack restoring per-patch pixels at all positions."""

    def __init__(self, profile: ViTProfile):
        super().__init__()
        dd = profile.decoder_dim
        self.embed = nn.Linear(profile.embed_dim, dd)
        self.blocks = nn.ModuleList(
            Block(dd, profile.decoder_heads, profile.mlp_ratio)
            for _ in range(profile.decoder_depth)
        )
        self.norm = nn.LayerNorm(dd)
        self.head = nn.Linear(dd, profile.patch_size**2 * 3)
        _init_transformer(self)

    def forward(self, token_set: TokenSet) -> torch.Tensor:
        x = self.embed(token_set.tokens)
        for block in self.blocks:
            x, _ = block(x)
        x = self.head(self.norm(x))
        return x[:, 1:] if token_set.has_cls else x


class RepDecoder(nn.Module):
    """Shallow block stack at encoder width; tokenwise feature head, then
    mean pooling over non-CLS tokens yields the instance representation."""

    def __init__(self, profile: ViTProfile, depth: int = 2):
        super().__init__()
        d = profile.embed_dim
        self.blocks = nn.ModuleList(
            Block(d, profile.heads, profile.mlp_ratio) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, d)
        _init_transformer(self)

    def forward(self, token_set: TokenSet) -> torch.Tensor:
        x = token_set.tokens
        for block in self.blocks:
            x, _ = block(x)
        x = self.head(self.norm(x))
        return mean_pool(x, token_set.has_cls)
