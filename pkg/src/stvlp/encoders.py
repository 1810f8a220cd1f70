"""Image and text encoders.

The image encoder consumes two views of one study. Both views are cut into
patches, share one positional table (row 0 belongs to the class token, rows
1..n_p are added to the frontal AND the lateral patches), and attend
jointly in every block. Each block routes its feed-forward stage by view:
the class token and frontal rows go through one expert MLP, lateral rows
through another, so view-specific features get their own transform while
attention stays global.

The text encoder is a standard pre-norm transformer over a fixed-length
token buffer with key-side padding masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64  # width of the transformer trunk
    proj_dim: int = 32  # width of the shared alignment space
    n_heads: int = 4
    n_blocks: int = 4
    ffn_hidden: int = 0  # 0 means 4 * embed_dim
    vocab_size: int = 25  # default synthetic vocabulary
    max_text_len: int = 16
    n_text_blocks: int = 2

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden else 4 * self.embed_dim


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """(B, S, S) -> (B, n_patches, patch_size**2), patches in row-major order."""
    b, s, s2 = images.shape
    assert s == s2, f"expected square images, got {images.shape}"
    g = s // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size)
    return x.permute(0, 1, 3, 2, 4).reshape(b, g * g, patch_size * patch_size)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, key_pad_mask: Tensor | None = None) -> Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, t, head_dim)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_pad_mask is not None:
            scores = scores.masked_fill(key_pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class ViewRoutedBlock(nn.Module):
    """Pre-norm block: joint attention, then per-view expert feed-forward.

    Rows [0, n_front) (class token + frontal patches) pass through
    front_ffn, the remaining rows through lateral_ffn, both residual. With
    attention skipped (test hook) the two row groups are fully independent.
    """

    def __init__(self, dim: int, n_heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.front_ffn = FeedForward(dim, hidden)
        self.lateral_ffn = FeedForward(dim, hidden)

    def forward(self, h: Tensor, n_front: int, skip_attention: bool = False) -> Tensor:
        if not skip_attention:
            h = h + self.attn(self.norm1(h))
        mid = self.norm2(h)
        front = h[:, :n_front] + self.front_ffn(mid[:, :n_front])
        lateral = h[:, n_front:] + self.lateral_ffn(mid[:, n_front:])
        return torch.cat([front, lateral], dim=1)


class TextBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden)

    def forward(self, h: Tensor, key_pad_mask: Tensor | None) -> Tensor:
        h = h + self.attn(self.norm1(h), key_pad_mask)
        return h + self.ffn(self.norm2(h))


@dataclass
class ImageEncoding:
    global_vec: Tensor  # (proj_dim,)
    patches: Tensor  # (M, proj_dim); M = n_patches without a lateral view, else 2 * n_patches


@dataclass
class TextEncoding:
    global_vec: Tensor  # (proj_dim,)
    tokens: Tensor  # (max_text_len, proj_dim)
    pad_mask: Tensor  # (max_text_len,) bool, True at padding


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size
        self.patch_proj = nn.Linear(patch_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        # One positional table for both views: row 0 for the class token,
        # rows 1..n_p added to frontal and lateral patches alike.
        self.pos = nn.Parameter(torch.zeros(cfg.n_patches + 1, cfg.embed_dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            ViewRoutedBlock(cfg.embed_dim, cfg.n_heads, cfg.hidden) for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.proj_dim)

    def embed_views(self, frontal: Tensor, lateral: Tensor) -> Tensor:
        """(B, S, S) x 2 -> (B, 2 * n_p + 1, D) initial token matrix."""
        b = frontal.shape[0]
        front = self.patch_proj(patchify(frontal, self.cfg.patch_size)) + self.pos[1:]
        lat = self.patch_proj(patchify(lateral, self.cfg.patch_size)) + self.pos[1:]
        cls = (self.cls_token + self.pos[0]).expand(b, 1, -1)
        return torch.cat([cls, front, lat], dim=1)

    def forward(
        self, frontal: Tensor, lateral: Tensor, skip_attention: bool = False
    ) -> tuple[Tensor, Tensor]:
        """Returns (global (B, d), patch features (B, 2 * n_p, d))."""
        h = self.embed_views(frontal, lateral)
        n_front = self.cfg.n_patches + 1
        for block in self.blocks:
            h = block(h, n_front, skip_attention=skip_attention)
        h = self.final_norm(h)
        return self.proj(h[:, 0]), self.proj(h[:, 1:])


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TextBlock(cfg.embed_dim, cfg.n_heads, cfg.hidden) for _ in range(cfg.n_text_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.proj_dim)

    def forward(self, tokens: Tensor, pad_mask: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (global (B, d), token features (B, W, d)).

        tokens must start with the CLS id; its final-layer feature is the
        global text vector. Padded keys are masked out of attention.
        """
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError(
                f"token id out of range [0, {self.cfg.vocab_size}): "
                f"min={int(tokens.min())}, max={int(tokens.max())}"
            )
        h = self.tok_emb(tokens) + self.pos[: tokens.shape[1]]
        for block in self.blocks:
            h = block(h, pad_mask)
        h = self.final_norm(h)
        return self.proj(h[:, 0]), self.proj(h)


def encode_image(
    encoder: ImageEncoder, frontal: Tensor, lateral: Tensor, has_lateral: bool
) -> ImageEncoding:
    """Single-study encoding; lateral rows are dropped from the patch-feature
    matrix when the study has no lateral view (the zero image still takes
    part in attention)."""
    g, patches = encoder(frontal.unsqueeze(0), lateral.unsqueeze(0))
    n_p = encoder.cfg.n_patches
    keep = patches[0] if has_lateral else patches[0, :n_p]
    return ImageEncoding(global_vec=g[0], patches=keep)


def encode_text(encoder: TextEncoder, tokens: Tensor, pad_mask: Tensor) -> TextEncoding:
    g, tok = encoder(tokens.unsqueeze(0), pad_mask.unsqueeze(0))
    return TextEncoding(global_vec=g[0], tokens=tok[0], pad_mask=pad_mask)
