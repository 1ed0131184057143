"""Offline text encoder: a deterministic hashed bag of token features.

Stands in for a CLIP text tower when no weights or network are available.
Every unigram and bigram hashes to a fixed Gaussian vector; a prompt's
embedding is the mean of its feature vectors.
"""

from __future__ import annotations

import hashlib
import re
from typing import Sequence

import numpy as np
import torch

from pgseg.text_prior.prompts import TextPrompt

DEFAULT_DIM = 64
_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashTextEncoder:
    def __init__(self, dim: int = DEFAULT_DIM, salt: str = "pgseg"):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.salt = salt
        self._table: dict[str, np.ndarray] = {}

    def _feature(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.salt}:{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            self._table[token] = vec
        return vec

    def encode_one(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"prompt {text!r} has no tokens")
        feats = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
        return np.mean([self._feature(t) for t in feats], axis=0)

    def encode(self, texts: Sequence[str], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        if len(texts) == 0:
            raise ValueError("encode needs at least one text")
        return torch.as_tensor(np.stack([self.encode_one(t) for t in texts]), dtype=dtype)


def combine(prompts: Sequence[TextPrompt]) -> str:
    """Join several organ prompts into the single description used for one image."""
    return " ".join(p.text.rstrip(".") + "." for p in prompts)


def encode_text(prompts: Sequence[TextPrompt], encoder: HashTextEncoder | None = None) -> torch.Tensor:
    """Embed each prompt as one row of a ``(B, d_text)`` matrix."""
    if len(prompts) == 0:
        raise ValueError("encode_text needs a non-empty prompt list")
    encoder = encoder or HashTextEncoder()
    return encoder.encode([p.text for p in prompts])
