"""Mask decoder: two-way transformer over image tokens, learned two-stage
upsampling, deformable alignment of the guide matrix, and additive fusion."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from pgseg.errors import ConfigurationError, ShapeError


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of a ``(B, C, H, W)`` map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class UpsampleStage(nn.Module):
    """Stride-2 2x2 transposed conv halving channels, then LN and GELU."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ConfigurationError(f"upsample stage needs an even channel count, got {channels}")
        self.deconv = nn.ConvTranspose2d(channels, channels // 2, kernel_size=2, stride=2)
        self.norm = LayerNorm2d(channels // 2)

    def forward(self, x):
        return F.gelu(self.norm(self.deconv(x)))


def deform_conv2d(
    x: torch.Tensor,
    offset: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Stride-1, same-padded deformable convolution via bilinear sampling.

    ``offset`` is ``(B, 2*K*K, H, W)`` with (dy, dx) pairs per kernel tap in
    row-major tap order (the torchvision layout). Samples outside the map
    read zero.
    """
    b, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"weight {tuple(weight.shape)} incompatible with input {tuple(x.shape)}")
    if offset.shape != (b, 2 * k * k, h, w):
        raise ShapeError(f"offset {tuple(offset.shape)} expected {(b, 2 * k * k, h, w)}")
    r = k // 2
    taps = torch.arange(k, dtype=x.dtype, device=x.device) - r
    dy, dx = torch.meshgrid(taps, taps, indexing="ij")
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=x.dtype, device=x.device),
        torch.arange(w, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    off = offset.view(b, k * k, 2, h, w)
    py = gy + dy.reshape(-1, 1, 1) + off[:, :, 0]
    px = gx + dx.reshape(-1, 1, 1) + off[:, :, 1]
    # pixel centres -> normalized coords for align_corners=False
    grid = torch.stack(((2 * px + 1) / w - 1, (2 * py + 1) / h - 1), dim=-1).view(b, k * k * h, w, 2)
    cols = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    out = weight.reshape(c_out, -1) @ cols.view(b, c * k * k, h * w)
    out = out.view(b, c_out, h, w)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class GuideAligner(nn.Module):
    """Bilinear resize of the guide matrix to the target grid followed by a
    3x3 deformable convolution whose offsets come from a 1x1 conv.

    Offsets start at zero (plain convolution) and are clamped to
    ``±offset_clamp`` pixels.
    """

    def __init__(self, channels: int, kernel_size: int = 3, offset_clamp: float = 2.0):
        super().__init__()
        self.kernel_size = kernel_size
        self.offset_clamp = offset_clamp
        self.offset = nn.Conv2d(channels, 2 * kernel_size * kernel_size, kernel_size=1)
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        self.weight = nn.Parameter(torch.empty(channels, channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, g: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
        return align_guide(g, target, self)


def align_guide(g: torch.Tensor, target: tuple[int, int], aligner: GuideAligner) -> torch.Tensor:
    h_t, w_t = target
    if g.shape[-2] > h_t or g.shape[-1] > w_t:
        raise ValueError(f"cannot align guide of size {tuple(g.shape[-2:])} down to {target}")
    if tuple(g.shape[-2:]) != (h_t, w_t):
        g = F.interpolate(g, size=(h_t, w_t), mode="bilinear", align_corners=False)
    offsets = aligner.offset(g).clamp(-aligner.offset_clamp, aligner.offset_clamp)
    return deform_conv2d(g, offsets, aligner.weight, aligner.bias)


class GuideAffine(nn.Module):
    """1x1 channel map followed by per-channel scale and shift.

    Scale and shift start at zero so the guide path contributes nothing
    until training moves them.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        self.scale = nn.Parameter(torch.zeros(out_channels))
        self.shift = nn.Parameter(torch.zeros(out_channels))

    def forward(self, g):
        return self.scale[:, None, None] * self.proj(g) + self.shift[:, None, None]


def fuse(f_up2: torch.Tensor, g_aligned: torch.Tensor | None, phi: nn.Module, psi: nn.Module | None) -> torch.Tensor:
    """``phi(f_up2) + psi(g_aligned)``; a missing guide leaves the image path alone."""
    out = phi(f_up2)
    if g_aligned is None or psi is None:
        return out
    if f_up2.shape[-2:] != g_aligned.shape[-2:]:
        raise ShapeError(f"fusion inputs differ spatially: {tuple(f_up2.shape[-2:])} vs {tuple(g_aligned.shape[-2:])}")
    return out + psi(g_aligned)


def channel_pool(x: torch.Tensor, groups_out: int) -> torch.Tensor:
    """Parameter-free channel reduction: average consecutive channel groups."""
    b, c, h, w = x.shape
    if c % groups_out:
        raise ShapeError(f"{c} channels do not pool evenly into {groups_out}")
    return x.view(b, groups_out, c // groups_out, h, w).mean(2)


# ---------------------------------------------------------------------------
# two-way transformer producing F_trans and the per-class mask encodings


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, image, pos):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, need_weights=False)[0])
        k = image + pos
        tokens = self.norm2(tokens + self.cross_t2i(tokens, k, image, need_weights=False)[0])
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(k, tokens, tokens, need_weights=False)[0])
        return tokens, image


class MaskTransformer(nn.Module):
    """Per-class mask tokens attend to projected encoder features and back.

    Returns the refined image map ``F_trans`` ``(B, C0, h, w)`` and the mask
    encodings ``(B, N_cls, C0)``.
    """

    def __init__(self, in_channels: int, dim: int, num_classes: int, grid: int, depth: int = 2, heads: int = 8, mlp_dim: int = 512):
        super().__init__()
        self.input_proj = nn.Conv2d(in_channels, dim, kernel_size=1)
        self.mask_tokens = nn.Parameter(torch.randn(num_classes, dim) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, grid * grid, dim) * 0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(dim, heads, mlp_dim) for _ in range(depth))

    def forward(self, f_sam: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.input_proj(f_sam)
        b, c, h, w = x.shape
        image = x.flatten(2).transpose(1, 2)
        tokens = self.mask_tokens.unsqueeze(0).expand(b, -1, -1)
        for blk in self.blocks:
            tokens, image = blk(tokens, image, self.pos)
        return image.transpose(1, 2).reshape(b, c, h, w), tokens
