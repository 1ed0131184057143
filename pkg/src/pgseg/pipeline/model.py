"""The full segmenter: encoder -> aligner -> mask transformer -> fusion
decoder -> iterative refinement -> high-resolution head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from pgseg.decoder_fusion import (
    GuideAffine,
    GuideAligner,
    MaskTransformer,
    UpsampleStage,
    channel_pool,
    fuse,
)
from pgseg.mask_optimizer import IterativeMaskOptimizer
from pgseg.pipeline.config import ModelConfig
from pgseg.text_prior.aligner import PriorAligner
from pgseg.text_prior.image_encoder import ImageEncoder
from pgseg.text_prior.prompts import TextPrompt, generate_prompt
from pgseg.text_prior.text_encoder import HashTextEncoder, combine
from pgseg.vocab import ORGANS


@dataclass
class SegOutput:
    low_logits: torch.Tensor  # (B, N, low, low)
    high_logits: torch.Tensor  # (B, N, high, high)
    initial: torch.Tensor  # M_0, (B, N, low, low)
    refined: torch.Tensor  # M_T, (B, N, low, low)
    guide: torch.Tensor | None  # (B, C, grid, grid)
    weights: torch.Tensor | None  # (B, 1, L)


def text_embedding(prompts: list[TextPrompt], d_text: int = 64) -> torch.Tensor:
    """One ``(1, d_text)`` row describing all prompted organs."""
    return HashTextEncoder(d_text).encode([combine(prompts)])


class PGSeg(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), prompts: list[TextPrompt] | None = None):
        super().__init__()
        self.cfg = cfg
        c0, width, n = cfg.dec_dim, cfg.fusion_dim, cfg.num_classes
        self.encoder = ImageEncoder(
            cfg.image_size, cfg.patch_size, cfg.enc_dim, cfg.enc_depth, cfg.enc_heads, lora_rank=cfg.lora_rank
        )
        self.transformer = MaskTransformer(cfg.enc_dim, c0, n, cfg.grid, depth=cfg.dec_depth, heads=cfg.dec_heads)
        if cfg.fgmpa:
            self.aligner = PriorAligner(cfg.enc_dim, cfg.grid * cfg.grid, cfg.d_text)
            self.psi = GuideAffine(cfg.enc_dim, width)
        if cfg.mlff:
            self.up1 = UpsampleStage(c0)
            self.up2 = UpsampleStage(c0 // 2)
            self.guide_align = GuideAligner(cfg.enc_dim, offset_clamp=cfg.offset_clamp)
        self.phi = nn.Conv2d(width, width, kernel_size=1)
        self.token_proj = nn.Linear(c0, width)
        if cfg.imo:
            self.refiner = IterativeMaskOptimizer(n, width, c0, lambda_init=cfg.lambda_init)
        self.head_in = nn.Conv2d(width + n, width, kernel_size=1)
        self.head_up1 = UpsampleStage(width)
        self.head_up2 = UpsampleStage(width // 2)
        self.head_out = nn.Conv2d(width // 4, n, kernel_size=1)

        if prompts is None:
            prompts = generate_prompt(ORGANS, "template")
        self.register_buffer("text_embedding", text_embedding(prompts, cfg.d_text))

    # parameter bookkeeping -------------------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Trainable parameters keyed by the component an ablation flag removes."""
        groups: dict[str, list[nn.Parameter]] = {"encoder_adapters": [], "fgmpa": [], "mlff": [], "imo": [], "decoder": []}
        prefix = {
            "encoder.": "encoder_adapters",
            "aligner.": "fgmpa",
            "psi.": "fgmpa",
            "up1.": "mlff",
            "up2.": "mlff",
            "guide_align.": "mlff",
            "refiner.": "imo",
        }
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            key = next((g for pre, g in prefix.items() if name.startswith(pre)), "decoder")
            groups[key].append(p)
        return groups

    def trainable_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    # forward ---------------------------------------------------------------

    def guide(self, f_sam: torch.Tensor, text: torch.Tensor):
        if not self.cfg.fgmpa:
            return None
        return self.aligner(f_sam, text.to(f_sam.dtype))

    def forward(self, image: torch.Tensor, text: torch.Tensor | None = None) -> SegOutput:
        cfg = self.cfg
        text = self.text_embedding if text is None else text
        f_sam = self.encoder(image)
        prior = self.guide(f_sam, text)
        g = prior.guide if prior is not None else None

        f_trans, tokens = self.transformer(f_sam)
        low = (cfg.low_res, cfg.low_res)
        if cfg.mlff:
            f_up = self.up2(self.up1(f_trans))
            g_al = self.guide_align(g, low) if g is not None else None
        else:
            f_up = channel_pool(F.interpolate(f_trans, size=low, mode="bilinear", align_corners=False), cfg.fusion_dim)
            g_al = F.interpolate(g, size=low, mode="bilinear", align_corners=False) if g is not None else None
        fused = fuse(f_up, g_al, self.phi, self.psi if cfg.fgmpa else None)

        low_logits = torch.einsum("bkc,bchw->bkhw", self.token_proj(tokens), fused)
        m0 = torch.sigmoid(low_logits)
        if cfg.imo:
            refined = self.refiner(m0, fused, tokens, cfg.refine_iterations).probs
        else:
            refined = m0
        h = self.head_in(torch.cat([fused, refined], dim=1))
        high_logits = self.head_out(self.head_up2(self.head_up1(h)))
        return SegOutput(
            low_logits=low_logits,
            high_logits=high_logits,
            initial=m0,
            refined=refined,
            guide=g,
            weights=prior.weights if prior is not None else None,
        )

    @torch.no_grad()
    def predict(self, image: torch.Tensor) -> torch.Tensor:
        """Argmax labels from the high-resolution path, ``(B, H, W)``."""
        return torch.softmax(self.forward(image).high_logits, dim=1).argmax(dim=1)
