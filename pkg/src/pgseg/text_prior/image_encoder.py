"""Desk-scale ViT image encoder with LoRA on the query/value projections.

The backbone (patch embedding, position embedding, attention and MLP
weights) is frozen; only the rank-r adapters train. A pretrained encoder
can be dropped in by loading its weights into the same module tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from pgseg.errors import ShapeError
from pgseg.lora import LoRALinear


@dataclass
class ImageFeatures:
    f_sam: torch.Tensor  # (B, C, H, W)
    f_img: torch.Tensor | None = None  # (B, d_text)

    @property
    def num_positions(self) -> int:
        return self.f_sam.shape[-2] * self.f_sam.shape[-1]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, lora_rank: int):
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(nn.Linear(dim, dim), rank=lora_rank)
        self.k = nn.Linear(dim, dim)
        self.v = LoRALinear(nn.Linear(dim, dim), rank=lora_rank)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        h = self.heads

        def split(t):
            return t.view(b, n, h, c // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(c // h)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, lora_rank: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, lora_rank)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(
        self,
        image_size: int = 224,
        patch_size: int = 16,
        dim: int = 96,
        depth: int = 2,
        heads: int = 4,
        mlp_ratio: float = 4.0,
        lora_rank: int = 4,
    ):
        super().__init__()
        if image_size % patch_size:
            raise ShapeError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.grid = image_size // patch_size
        self.patch_embed = nn.Conv2d(1, dim, kernel_size=patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid * self.grid, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio, lora_rank) for _ in range(depth))
        self.neck = nn.LayerNorm(dim)
        for name, p in self.named_parameters():
            if not name.endswith(("lora_down", "lora_up")):
                p.requires_grad_(False)

    def lora_layers(self) -> list[LoRALinear]:
        return [m for m in self.modules() if isinstance(m, LoRALinear)]

    def check_input(self, image: torch.Tensor) -> None:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h != w or h != self.image_size:
            raise ShapeError(f"expected {self.image_size}x{self.image_size} input, got {h}x{w}")

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``(B, 1, S, S)`` image in [0, 1] -> ``f_sam`` of shape ``(B, C, S/p, S/p)``."""
        self.check_input(image)
        x = self.patch_embed((image - 0.5) / 0.5)
        b, c, h, w = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.neck(x)
        return x.transpose(1, 2).reshape(b, c, h, w)


def encode_image(encoder: ImageEncoder, image: torch.Tensor, project=None) -> ImageFeatures:
    """Run the encoder; ``project`` (e.g. ``PriorAligner.project_image``) yields ``f_img``."""
    f_sam = encoder(image)
    f_img = project(f_sam) if project is not None else None
    return ImageFeatures(f_sam=f_sam, f_img=f_img)


def global_pool(f_sam: torch.Tensor) -> torch.Tensor:
    return F.adaptive_avg_pool2d(f_sam, 1).flatten(1)
