"""Cross-modal prior: prompts, text/image encoders and the guide-matrix aligner."""

from pgseg.text_prior.aligner import (
    PriorAligner,
    guide_matrix,
    layer_norm_channels,
    layer_norm_spatial,
    spatial_attention,
    similarity_weights,
)
from pgseg.text_prior.image_encoder import ImageEncoder, ImageFeatures
from pgseg.text_prior.prompts import LLMClient, PromptCache, TextPrompt, generate_prompt
from pgseg.text_prior.text_encoder import HashTextEncoder

__all__ = [
    "HashTextEncoder",
    "ImageEncoder",
    "ImageFeatures",
    "LLMClient",
    "PriorAligner",
    "PromptCache",
    "TextPrompt",
    "generate_prompt",
    "guide_matrix",
    "layer_norm_channels",
    "layer_norm_spatial",
    "similarity_weights",
    "spatial_attention",
]
