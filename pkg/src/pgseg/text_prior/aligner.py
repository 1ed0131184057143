"""Modality prior aligner: text/image similarity gates, spatial self-attention
and the normalized guide matrix fed to the decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from pgseg.errors import NormalizationError, ShapeError
from pgseg.text_prior.image_encoder import global_pool

NORM_EPS = 1e-5


def layer_norm_channels(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Normalize a ``(B, L, C)`` tensor over C at each site."""
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def layer_norm_spatial(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Normalize a ``(B, L, C)`` tensor over L for each channel."""
    return F.layer_norm(x.transpose(1, 2), x.shape[1:2], eps=eps).transpose(1, 2)


def _flatten(f: torch.Tensor) -> torch.Tensor:
    if f.ndim != 4:
        raise ShapeError(f"expected a (B, C, H, W) feature map, got {tuple(f.shape)}")
    return f.flatten(2).transpose(1, 2)


def similarity_weights(
    f_img: torch.Tensor,
    f_text: torch.Tensor,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor,
) -> torch.Tensor:
    """Cosine similarity -> per-position affine map -> sigmoid, shape ``(B, 1, L)``.

    With ``proj_weight = 1`` and ``proj_bias = 0`` every position equals
    ``sigmoid(cos)``.
    """
    if f_img.ndim != 2 or f_img.shape != f_text.shape:
        raise ShapeError(f"f_img {tuple(f_img.shape)} and f_text {tuple(f_text.shape)} must both be (B, d_text)")
    n_img = f_img.norm(dim=1)
    n_txt = f_text.norm(dim=1)
    if bool((n_img == 0).any()) or bool((n_txt == 0).any()):
        raise NormalizationError("zero-norm row in image or text embedding; cosine similarity undefined")
    cos = (f_img * f_text).sum(dim=1) / (n_img * n_txt)
    logits = cos[:, None] * proj_weight[None, :] + proj_bias[None, :]
    return torch.sigmoid(logits).unsqueeze(1)


def spatial_attention(f_sam: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``(B, L, L)`` attention over layer-normalized positions."""
    x = layer_norm_channels(_flatten(f_sam))
    c = x.shape[-1]
    return torch.softmax(x @ x.transpose(1, 2) / math.sqrt(c), dim=-1)


def guide_matrix(f_sam: torch.Tensor, a: torch.Tensor, w_s: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Channel- then spatial-normalized ``(F + A F) * W_s``, back in ``(B, C, H, W)``."""
    b, c, h, w = f_sam.shape
    x = _flatten(f_sam)
    n = h * w
    if a.shape != (b, n, n):
        raise ShapeError(f"attention {tuple(a.shape)} does not match L={n} of feature map {tuple(f_sam.shape)}")
    if w_s.shape != (b, 1, n):
        raise ShapeError(f"similarity weights {tuple(w_s.shape)} do not match (B, 1, L)=({b}, 1, {n})")
    y = (x + a @ x) * w_s.transpose(1, 2)
    y = layer_norm_spatial(layer_norm_channels(y, eps), eps)
    return y.transpose(1, 2).reshape(b, c, h, w)


@dataclass
class AlignerOutput:
    guide: torch.Tensor
    weights: torch.Tensor
    attention: torch.Tensor
    f_img: torch.Tensor


class PriorAligner(nn.Module):
    """Learnable parts of the aligner: image projection into text space and
    the scalar-to-spatial projection of the similarity."""

    def __init__(self, channels: int, num_positions: int, d_text: int = 64):
        super().__init__()
        self.img_proj = nn.Linear(channels, d_text)
        self.sim_weight = nn.Parameter(torch.ones(num_positions))
        self.sim_bias = nn.Parameter(torch.zeros(num_positions))

    def project_image(self, f_sam: torch.Tensor) -> torch.Tensor:
        return self.img_proj(global_pool(f_sam))

    def forward(self, f_sam: torch.Tensor, f_text: torch.Tensor) -> AlignerOutput:
        f_img = self.project_image(f_sam)
        if f_text.shape[0] == 1 and f_img.shape[0] > 1:
            f_text = f_text.expand(f_img.shape[0], -1)
        w_s = similarity_weights(f_img, f_text.to(f_img.dtype), self.sim_weight, self.sim_bias)
        a = spatial_attention(f_sam)
        return AlignerOutput(guide=guide_matrix(f_sam, a, w_s), weights=w_s, attention=a, f_img=f_img)
