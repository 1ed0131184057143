"""Seeded, resumable training loop (AdamW, linear warmup, dual-path loss)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from pgseg.errors import ConfigurationError
from pgseg.losses import combined_loss
from pgseg.metrics import mdice
from pgseg.pipeline.checkpoint import load_trainer_state, read_manifest, save_checkpoint
from pgseg.pipeline.config import RunConfig
from pgseg.pipeline.data import SegSample, sample_fraction
from pgseg.pipeline.model import PGSeg
from pgseg.text_prior.prompts import LLMClient, generate_prompt
from pgseg.vocab import ORGANS

log = logging.getLogger(__name__)

METRICS_LOG = "metrics.jsonl"


class TrainingDiverged(FloatingPointError):
    pass


class ResumeError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: PGSeg
    checkpoint: Path
    history: list[dict]
    steps: int


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def stack_samples(samples: Sequence[SegSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).unsqueeze(1)
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    return images, labels


def augment(images: torch.Tensor, labels: torch.Tensor, gen: torch.Generator, max_deg: float = 20.0):
    """Random flips and a rotation in ±max_deg; labels resampled nearest."""
    b = images.shape[0]
    flip_h = torch.rand(b, generator=gen) < 0.5
    flip_v = torch.rand(b, generator=gen) < 0.5
    angle = (torch.rand(b, generator=gen) * 2 - 1) * math.radians(max_deg)
    cos, sin = torch.cos(angle), torch.sin(angle)
    sx = torch.where(flip_h, -1.0, 1.0)
    sy = torch.where(flip_v, -1.0, 1.0)
    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0], theta[:, 0, 1] = cos * sx, -sin * sy
    theta[:, 1, 0], theta[:, 1, 1] = sin * sx, cos * sy
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    images = F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    lab = F.grid_sample(labels[:, None].float(), grid, mode="nearest", padding_mode="zeros", align_corners=False)
    return images, lab[:, 0].long()


@torch.no_grad()
def predict_labels(model: PGSeg, images: torch.Tensor, batch_size: int = 4) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = [model.predict(images[i : i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    model.train(was_training)
    return torch.cat(out).numpy().astype(np.uint8)


def _prompts(run: RunConfig):
    if run.train.prompt_mode == "client":
        return generate_prompt(ORGANS, "client", LLMClient())
    return generate_prompt(ORGANS, "template")


def _check(run: RunConfig, samples: Sequence[SegSample]) -> None:
    if not samples:
        raise ValueError("training needs a non-empty dataset")
    m, loss = run.model, run.train.loss
    if (loss.low, loss.high) != (m.low_res, m.high_res):
        raise ConfigurationError(
            f"loss resolutions ({loss.low}, {loss.high}) do not match the model paths ({m.low_res}, {m.high_res})"
        )
    for s in samples:
        if s.image.shape != (m.image_size, m.image_size):
            raise ConfigurationError(f"{s.case_id}: image {s.image.shape} but model expects {m.image_size}x{m.image_size}")
        if int(s.label.max()) >= m.num_classes:
            raise ConfigurationError(f"{s.case_id}: label {int(s.label.max())} >= num_classes {m.num_classes}")


def _line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(
    run: RunConfig,
    samples: Sequence[SegSample],
    out_dir: str | Path,
    val_samples: Sequence[SegSample] | None = None,
    resume: bool = False,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    out_dir = Path(out_dir)
    cfg = run.train
    _check(run, samples)
    set_determinism(cfg.seed, cfg.deterministic)
    if cfg.fraction < 1:
        samples = sample_fraction(samples, cfg.fraction, cfg.seed)
    val_samples = list(val_samples) if val_samples is not None else list(samples)

    model = PGSeg(run.model, _prompts(run))
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    warmup = max(cfg.warmup_steps, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warmup))
    gen = torch.Generator().manual_seed(cfg.seed)

    history: list[dict] = []
    start_epoch, step = 0, 0
    if resume and (out_dir / "manifest.json").exists():
        manifest = read_manifest(out_dir)
        if manifest["config_hash"] != run.config_hash():
            raise ResumeError(
                f"{out_dir} was written with config {manifest['config_hash']}, refusing to resume with {run.config_hash()}"
            )
        state = load_trainer_state(out_dir)
        if state is None:
            raise ResumeError(f"{out_dir}: checkpoint has no trainer state")
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        gen.set_state(state["generator"])
        torch.set_rng_state(state["torch_rng"])
        start_epoch, step, history = state["epoch"], state["step"], state["history"]
        log.info("resuming %s at epoch %d, step %d", out_dir, start_epoch, step)
    elif out_dir.exists() and (out_dir / METRICS_LOG).exists():
        (out_dir / METRICS_LOG).unlink()
    out_dir.mkdir(parents=True, exist_ok=True)

    images, labels = stack_samples(samples)
    val_images, val_labels = stack_samples(val_samples)
    n = images.shape[0]

    def trainer_state(epoch):
        return {
            "model": model.state_dict(),
            "optimizer": opt.state_dict(),
            "scheduler": sched.state_dict(),
            "generator": gen.get_state(),
            "torch_rng": torch.get_rng_state(),
            "epoch": epoch,
            "step": step,
            "history": history,
        }

    def checkpoint(epoch):
        save_checkpoint(model, out_dir, run, history, trainer_state(epoch), epoch=epoch, step=step)

    done = cfg.max_steps is not None and step >= cfg.max_steps
    epoch = start_epoch
    while epoch < cfg.epochs and not done:
        order = torch.randperm(n, generator=gen)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x, y = images[idx], labels[idx]
            if cfg.augment:
                x, y = augment(x, y, gen)
            out = model(x)
            loss, terms = combined_loss(out.low_logits, out.high_logits, y, cfg.loss, return_terms=True)
            if not torch.isfinite(loss):
                snap = out_dir / "nan_snapshot.pt"
                torch.save({"epoch": epoch, "step": step, "batch": idx, "terms": terms, "state": trainer_state(epoch)}, snap)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}; snapshot in {snap}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            losses.append(float(loss.detach()))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        epoch += 1
        record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses))}
        if run.model.imo:
            record["lambda_step"] = float(model.refiner.lambda_step.detach())
        last = done or epoch >= cfg.epochs
        if epoch % cfg.eval_every == 0 or last:
            pred = predict_labels(model, val_images, cfg.batch_size)
            record["val_mdice"] = float(np.mean([mdice(p, t) for p, t in zip(pred, val_labels.numpy())]))
        history.append(record)
        with (out_dir / METRICS_LOG).open("a") as fh:
            fh.write(_line(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)
        if epoch % cfg.checkpoint_every == 0 or last:
            checkpoint(epoch)

    if not history:
        checkpoint(epoch)
    model.eval()
    return TrainResult(model=model, checkpoint=out_dir, history=history, steps=step)
