"""Training objective: cross-entropy plus soft Dice on a low- and a
high-resolution prediction path."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from pgseg.errors import LabelError, ShapeError

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    lambda_loss: float = 0.8
    low: int = 56
    high: int = 224

    def __post_init__(self):
        if not 0.0 <= self.lambda_loss <= 1.0:
            raise ValueError(f"lambda_loss must be in [0, 1], got {self.lambda_loss}")
        if not 0 < self.low < self.high:
            raise ValueError(f"need 0 < low < high, got {self.low}, {self.high}")


def _check_labels(target: torch.Tensor, n_classes: int) -> None:
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        bad = int(target.max()) if int(target.max()) >= n_classes else int(target.min())
        raise LabelError(f"label id {bad} outside [0, {n_classes})")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - mean_c (2 sum p y + eps) / (sum p + sum y + eps)``, background included.

    ``probs`` is ``(B, N, H, W)``; ``target`` is ``(B, H, W)`` integer labels.
    Sums run over batch and pixels jointly.
    """
    n = probs.shape[1]
    _check_labels(target, n)
    onehot = F.one_hot(target.long(), n).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(logits).all()):
        raise FloatingPointError("non-finite logits in cross-entropy")
    _check_labels(target, logits.shape[1])
    return F.cross_entropy(logits, target.long())


def downsample_labels(target: torch.Tensor, size: int) -> torch.Tensor:
    """Nearest-neighbour resize of a ``(B, H, W)`` label map; ids stay integral."""
    if target.shape[-1] == size and target.shape[-2] == size:
        return target
    t = F.interpolate(target[:, None].float(), size=(size, size), mode="nearest")
    return t[:, 0].to(target.dtype)


def path_terms(logits: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(CE, Dice) for one resolution path; target is resized to the logits grid."""
    t = downsample_labels(target, logits.shape[-1])
    return ce_loss(logits, t), dice_loss(torch.softmax(logits, dim=1), t)


def combined_loss(
    pred_low: torch.Tensor,
    pred_high: torch.Tensor,
    target: torch.Tensor,
    cfg: LossConfig = LossConfig(),
    return_terms: bool = False,
):
    """Sum over both paths of ``(1 - lambda) * CE + lambda * Dice``."""
    for name, pred, size in (("low", pred_low, cfg.low), ("high", pred_high, cfg.high)):
        if tuple(pred.shape[-2:]) != (size, size):
            raise ShapeError(f"{name}-resolution prediction is {tuple(pred.shape[-2:])}, expected {size}x{size}")
    lam = cfg.lambda_loss
    terms = {}
    total = pred_low.new_zeros(())
    for name, pred in (("low", pred_low), ("high", pred_high)):
        ce, dice = path_terms(pred, target)
        terms[name] = (ce, dice)
        total = total + (1 - lam) * ce + lam * dice
    return (total, terms) if return_terms else total
