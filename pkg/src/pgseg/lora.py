"""Low-rank adapters for frozen linear layers."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_RANK = 4


class LoraConfigError(ValueError):
    pass


class MergeError(RuntimeError):
    pass


@dataclass
class LoraAdapter:
    """Factorized delta ``scale * up @ down`` for a ``(d_out, d_in)`` weight."""

    down: torch.Tensor  # (r, d_in)
    up: torch.Tensor  # (d_out, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.up @ self.down)


def _check_rank(rank: int, d_in: int, d_out: int) -> None:
    if rank < 1 or rank > min(d_in, d_out):
        raise LoraConfigError(f"rank {rank} must lie in [1, min(d_in={d_in}, d_out={d_out})]")


def apply(adapter: LoraAdapter, frozen_weight: torch.Tensor, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    d_out, d_in = frozen_weight.shape
    _check_rank(adapter.rank, d_in, d_out)
    if adapter.down.shape != (adapter.rank, d_in) or adapter.up.shape != (d_out, adapter.rank):
        raise LoraConfigError(
            f"adapter shapes down={tuple(adapter.down.shape)} up={tuple(adapter.up.shape)} "
            f"do not fit weight {tuple(frozen_weight.shape)}"
        )
    y = F.linear(x, frozen_weight, bias)
    return y + adapter.scale * F.linear(F.linear(x, adapter.down), adapter.up)


def merge(adapter: LoraAdapter, frozen_weight: torch.Tensor) -> torch.Tensor:
    """Return ``W + scale * up @ down`` as a new tensor; ``frozen_weight`` is untouched."""
    return frozen_weight + adapter.delta().to(frozen_weight.dtype)


class LoRALinear(nn.Module):
    """A frozen ``nn.Linear`` plus a trainable rank-r adapter.

    The wrapped layer's parameters have ``requires_grad=False``; only
    ``lora_down`` and ``lora_up`` train. ``merge()`` folds the delta into a
    separate buffer for inference and refuses to run twice without
    ``unmerge()``.
    """

    def __init__(self, base: nn.Linear, rank: int = DEFAULT_RANK, scale: float = 1.0, init_std: float = 0.01):
        super().__init__()
        _check_rank(rank, base.in_features, base.out_features)
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = scale
        self.lora_down = nn.Parameter(torch.randn(rank, base.in_features) * init_std)
        self.lora_up = nn.Parameter(torch.zeros(base.out_features, rank))
        self._merged: torch.Tensor | None = None

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    @property
    def adapter(self) -> LoraAdapter:
        return LoraAdapter(self.lora_down, self.lora_up, self.scale)

    @property
    def merged(self) -> bool:
        return self._merged is not None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self._merged is not None:
            return F.linear(x, self._merged, self.base.bias)
        return apply(self.adapter, self.base.weight, x, self.base.bias)

    @torch.no_grad()
    def merge(self) -> torch.Tensor:
        if self._merged is not None:
            raise MergeError("adapter already merged; call unmerge() first")
        self._merged = merge(self.adapter, self.base.weight)
        return self._merged

    def unmerge(self) -> None:
        self._merged = None

    def extra_repr(self) -> str:
        return f"in={self.in_features}, out={self.out_features}, rank={self.rank}, scale={self.scale}"


def adapter_parameter_count(d_in: int, d_out: int, rank: int = DEFAULT_RANK) -> int:
    return rank * (d_in + d_out)


def lora_state_dict(module: nn.Module) -> dict[str, torch.Tensor]:
    """Adapter tensors only, keyed by their full parameter names."""
    return {k: v for k, v in module.state_dict().items() if k.endswith(("lora_down", "lora_up"))}
