"""Iterative mask optimizer.

A hypernetwork turns each class's mask encoding into per-input-channel
gates on a shared 3x3 base kernel; the gated kernels predict a sigmoid
residual that is added to the current mask with a learnable step and
clipped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from pgseg.errors import ShapeError, StateError

DEFAULT_ITERATIONS = 3


@dataclass
class MaskState:
    probs: torch.Tensor  # (B, N_cls, H, W), values in [0, 1]
    lambda_step: torch.Tensor  # scalar step size
    step: int = 0


def hyper_kernel(gate: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
    """Scale input-channel slice ``base[i]`` by ``gate[..., i]``.

    ``gate`` is ``(..., C_in)``, ``base`` is ``(C_in, C_out, K, K)``; the
    result is ``(..., C_in, C_out, K, K)``.
    """
    if gate.shape[-1] != base.shape[0]:
        raise ShapeError(f"gate length {gate.shape[-1]} != base kernel C_in {base.shape[0]}")
    return gate[..., :, None, None, None] * base


class HyperNetwork(nn.Module):
    """Two-layer MLP: mask encoding -> per-input-channel gate (starts near 1)."""

    def __init__(self, enc_dim: int, c_in: int):
        super().__init__()
        self.enc_dim = enc_dim
        self.fc1 = nn.Linear(enc_dim, 2 * c_in)
        self.fc2 = nn.Linear(2 * c_in, c_in)
        nn.init.normal_(self.fc2.weight, std=1e-3)
        nn.init.ones_(self.fc2.bias)

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        if m.shape[-1] != self.enc_dim:
            raise ShapeError(f"mask encoding width {m.shape[-1]} != hypernetwork input {self.enc_dim}")
        return self.fc2(F.gelu(self.fc1(m)))


def refine_step(
    state: MaskState,
    f_fusion: torch.Tensor,
    kernels: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> MaskState:
    """One clipped residual update.

    ``kernels`` is ``(B, N_cls, C_in, C_out=N_cls, K, K)``: class ``c`` uses
    output channel ``c`` of its own kernel. ``C_in`` must equal
    ``N_cls + fusion width`` (masks concatenated ahead of the features).
    """
    m = state.probs
    b, n, h, w = m.shape
    if f_fusion.shape[0] != b or f_fusion.shape[-2:] != (h, w):
        raise ShapeError(f"mask {tuple(m.shape)} and fused features {tuple(f_fusion.shape)} disagree")
    x = torch.cat([m, f_fusion], dim=1)
    c_in = x.shape[1]
    if kernels.ndim != 6 or kernels.shape[:4] != (b, n, c_in, n):
        raise ShapeError(f"kernels {tuple(kernels.shape)} expected (B={b}, N={n}, C_in={c_in}, C_out={n}, K, K)")
    lam = state.lambda_step
    if not bool(torch.isfinite(torch.as_tensor(lam))):
        raise StateError(f"non-finite step size {lam}")
    k = kernels.shape[-1]
    idx = torch.arange(n, device=kernels.device)
    own = kernels[:, idx, :, idx]  # (N, B, C_in, K, K) -> per-class output channel
    own = own.transpose(0, 1).reshape(b * n, c_in, k, k)
    out = F.conv2d(x.reshape(1, b * c_in, h, w), own, padding=k // 2, groups=b).view(b, n, h, w)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    delta = torch.sigmoid(out)
    probs = torch.clamp(m + lam * delta, 0.0, 1.0)
    return replace(state, probs=probs, step=state.step + 1)


def refine(
    init: MaskState,
    f_fusion: torch.Tensor,
    iterations: int,
    make_kernels: Callable[[], torch.Tensor],
    bias: torch.Tensor | None = None,
) -> MaskState:
    """Apply ``refine_step`` ``iterations`` times, regenerating kernels each time."""
    if iterations < 0:
        raise ValueError(f"iteration count must be >= 0, got {iterations}")
    state = init
    for _ in range(iterations):
        state = refine_step(state, f_fusion, make_kernels(), bias)
    return state


class IterativeMaskOptimizer(nn.Module):
    def __init__(self, num_classes: int, fusion_channels: int, enc_dim: int, kernel_size: int = 3, lambda_init: float = 0.1):
        super().__init__()
        self.num_classes = num_classes
        self.c_in = num_classes + fusion_channels
        self.hyper = HyperNetwork(enc_dim, self.c_in)
        self.base = nn.Parameter(torch.empty(self.c_in, num_classes, kernel_size, kernel_size))
        nn.init.normal_(self.base, std=(1.0 / (self.c_in * kernel_size * kernel_size)) ** 0.5)
        self.bias = nn.Parameter(torch.zeros(num_classes))
        self.lambda_step = nn.Parameter(torch.tensor(float(lambda_init)))

    def kernels(self, encodings: torch.Tensor) -> torch.Tensor:
        """``(B, N_cls, C_enc)`` encodings -> ``(B, N_cls, C_in, N_cls, K, K)`` kernels."""
        return hyper_kernel(self.hyper(encodings), self.base)

    def forward(self, m0: torch.Tensor, f_fusion: torch.Tensor, encodings: torch.Tensor, iterations: int = DEFAULT_ITERATIONS) -> MaskState:
        state = MaskState(probs=m0, lambda_step=self.lambda_step)
        return refine(state, f_fusion, iterations, lambda: self.kernels(encodings), self.bias)
