"""Evaluation reports and single-image inference with guide-matrix heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from pgseg.errors import ConfigurationError, ShapeError
from pgseg.metrics import MetricReport, evaluate_case, summarize, write_csv, write_summary
from pgseg.pipeline import plotting
from pgseg.pipeline.checkpoint import load_checkpoint
from pgseg.pipeline.data import SegSample
from pgseg.pipeline.model import PGSeg, text_embedding
from pgseg.pipeline.train import predict_labels, stack_samples
from pgseg.text_prior.prompts import generate_prompt


@dataclass
class EvalResult:
    reports: list[MetricReport]
    summary: dict
    predictions: np.ndarray


def _model(model_or_path) -> PGSeg:
    if isinstance(model_or_path, PGSeg):
        return model_or_path
    return load_checkpoint(model_or_path)[0]


def evaluate(
    model_or_path,
    samples: Sequence[SegSample],
    out_dir: str | Path | None = None,
    predictions: np.ndarray | None = None,
    figures: bool = True,
) -> EvalResult:
    """Score a checkpoint (or injected ``predictions``) against ``samples``.

    Writes ``metrics.csv`` (case x organ rows), ``summary.json`` (table
    layout) and ``summary.png`` when ``out_dir`` is given.
    """
    if not samples:
        raise ValueError("nothing to evaluate")
    if predictions is None:
        model = _model(model_or_path)
        n_cls = model.cfg.num_classes
        for s in samples:
            if int(s.label.max()) >= n_cls:
                raise ConfigurationError(f"{s.case_id}: label {int(s.label.max())} but model has {n_cls} classes")
        images, _ = stack_samples(samples)
        predictions = predict_labels(model, images)
    predictions = np.asarray(predictions)
    if predictions.shape != (len(samples),) + samples[0].label.shape:
        raise ShapeError(f"predictions {predictions.shape} do not match {len(samples)} labels of {samples[0].label.shape}")
    reports = [evaluate_case(p, s.label, s.case_id) for p, s in zip(predictions, samples)]
    summary = summarize(reports)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(reports, out_dir / "metrics.csv")
        write_summary(summary, out_dir / "summary.json")
        if figures:
            plotting.plot_summary(summary, out_dir / "summary.png")
    return EvalResult(reports=reports, summary=summary, predictions=predictions)


def guidance_heatmap(guide: torch.Tensor, size: int) -> np.ndarray:
    """Channel mean of ``|G|``, bilinearly resized and min-max scaled to uint8."""
    h = guide.abs().mean(dim=1, keepdim=True)
    h = F.interpolate(h, size=(size, size), mode="bilinear", align_corners=False)[0, 0].double().numpy()
    lo, hi = h.min(), h.max()
    if hi <= lo:
        return np.zeros((size, size), dtype=np.uint8)
    return np.round(255.0 * (h - lo) / (hi - lo)).astype(np.uint8)


@torch.no_grad()
def infer(model_or_path, image: np.ndarray, emit_heatmap: bool = False, organ: str | None = None):
    """Label map for one ``(S, S)`` image in [0, 1]; optionally the guide heatmap.

    ``organ`` focuses the text prior on a single organ (the heatmap then
    shows where that description lands); by default all organs are prompted.
    """
    model = _model(model_or_path)
    model.eval()
    s = model.cfg.image_size
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (s, s):
        raise ShapeError(f"expected a {s}x{s} image, got {image.shape}")
    text = None
    if organ is not None:
        text = text_embedding(generate_prompt([organ], "template"), model.cfg.d_text)
    out = model(torch.from_numpy(image)[None, None], text)
    labels = torch.softmax(out.high_logits, dim=1).argmax(dim=1)[0].numpy().astype(np.uint8)
    heatmap = None
    if emit_heatmap:
        if out.guide is None:
            raise ConfigurationError("this model was built without the prior aligner; no guide matrix to render")
        heatmap = guidance_heatmap(out.guide, s)
    return labels, heatmap


def save_png(array: np.ndarray, path: str | Path) -> Path:
    """8-bit grayscale PNG."""
    path = Path(path)
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path)
    return path
