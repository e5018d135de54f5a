"""A small pre-norm vision transformer used as the deterministic reference backbone.

Weights are drawn from a seeded generator in a fixed order, so the same seed
yields identical parameters on every run. Position embeddings live on a fixed
base grid and are bicubically interpolated to the actual patch grid, which
lets one backbone consume any input size divisible by its patch size.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

BASE_GRID = 8  # native patch grid of the learned position embeddings
INIT_STD = 0.1


class _Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class _Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = _Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _pick_num_heads(embed_dim: int) -> int:
    for h in (4, 2, 1):
        if embed_dim % h == 0:
            return h
    return 1


class TinyViT(nn.Module):
    """Patch embedding + class token + pre-norm transformer blocks."""

    def __init__(self, depth: int, embed_dim: int, patch_size: int):
        super().__init__()
        self.depth = depth
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.patch_embed = nn.Conv2d(
            3, embed_dim, kernel_size=patch_size, stride=patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, BASE_GRID * BASE_GRID + 1, embed_dim))
        self.blocks = nn.ModuleList(
            [_Block(embed_dim, _pick_num_heads(embed_dim)) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)

    def seed_weights_(self, seed: int) -> None:
        """Fill all parameters from a dedicated generator, in registration order.

        Weights (and the cls/pos embeddings) are drawn float32 so that float64
        copies of the same backbone carry bit-identical widened values.
        """
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in ("cls_token", "pos_embed") or p.dim() >= 2:
                    draw = torch.randn(p.shape, generator=gen, dtype=torch.float32)
                    p.copy_((draw * INIT_STD).to(p.dtype))
                elif name.endswith(".bias"):
                    p.zero_()
                else:  # LayerNorm weights
                    p.fill_(1.0)

    def _pos_for_grid(self, gh: int, gw: int) -> torch.Tensor:
        if gh == BASE_GRID and gw == BASE_GRID:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        grid = (
            self.pos_embed[:, 1:]
            .reshape(1, BASE_GRID, BASE_GRID, self.embed_dim)
            .permute(0, 3, 1, 2)
        )
        grid = F.interpolate(grid, size=(gh, gw), mode="bicubic", align_corners=False)
        grid = grid.permute(0, 2, 3, 1).reshape(1, gh * gw, self.embed_dim)
        return torch.cat([cls_pos, grid], dim=1)

    def tokens_at(self, x: torch.Tensor, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Class and patch tokens tapped after `layer` blocks (1-based).

        The final LayerNorm is applied to every tap, so layer == depth matches
        the backbone's default output features.
        """
        b, _, h, w = x.shape
        gh, gw = h // self.patch_size, w // self.patch_size
        tok = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, P, C)
        cls = self.cls_token.expand(b, -1, -1)
        tok = torch.cat([cls, tok], dim=1) + self._pos_for_grid(gh, gw)
        for block in self.blocks[:layer]:
            tok = block(tok)
        tok = self.norm(tok)
        return tok[:, 0], tok[:, 1:]
