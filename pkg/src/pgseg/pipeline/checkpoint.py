"""Checkpoint directories.

Layout::

    manifest.json   version, run config + hash, shape ledger, step size, history
    backbone.pt     frozen encoder tensors (ship once, share across runs)
    adapters.pt     LoRA tensors
    model.pt        everything else (decoder, aligner, refiner, buffers)
    trainer.pt      optimizer / scheduler / RNG state, only for resuming
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import torch

from pgseg.lora import lora_state_dict
from pgseg.pipeline.config import RunConfig
from pgseg.pipeline.model import PGSeg

CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    pass


def _split_state(model: PGSeg) -> dict[str, dict[str, torch.Tensor]]:
    state = model.state_dict()
    adapters = {k: v for k, v in lora_state_dict(model).items()}
    backbone = {k: v for k, v in state.items() if k.startswith("encoder.") and k not in adapters}
    rest = {k: v for k, v in state.items() if k not in adapters and k not in backbone}
    return {"backbone": backbone, "adapters": adapters, "model": rest}


def shape_ledger(model: PGSeg) -> dict[str, list[int]]:
    return {k: list(v.shape) for k, v in model.state_dict().items()}


def save_checkpoint(
    model: PGSeg,
    directory: str | Path,
    run: RunConfig,
    history: list[dict] | None = None,
    trainer_state: dict[str, Any] | None = None,
    epoch: int = 0,
    step: int = 0,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sections = _split_state(model)
    for name, tensors in sections.items():
        torch.save(tensors, directory / f"{name}.pt")
    if trainer_state is not None:
        torch.save(trainer_state, directory / "trainer.pt")
    lam = float(model.refiner.lambda_step.detach()) if model.cfg.imo else None
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": run.to_dict(),
        "config_hash": run.config_hash(),
        "epoch": epoch,
        "step": step,
        "lambda_step": lam,
        "trainable_parameters": model.trainable_count(),
        "sections": {name: sorted(t) for name, t in sections.items()},
        "shapes": shape_ledger(model),
        "history": history or [],
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"{directory}: no {MANIFEST}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{directory}: unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_checkpoint(directory: str | Path, backbone: str | Path | None = None) -> tuple[PGSeg, dict]:
    """Rebuild the model from a checkpoint directory.

    ``backbone`` optionally points at another checkpoint whose frozen
    encoder section should be used (adapters and decoder still come from
    ``directory``).
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    run = RunConfig.from_dict(manifest["config"])
    model = PGSeg(run.model)
    state: dict[str, torch.Tensor] = {}
    for name in ("backbone", "adapters", "model"):
        src = Path(backbone) if (name == "backbone" and backbone is not None) else directory
        state.update(torch.load(src / f"{name}.pt", map_location="cpu", weights_only=True))
    expected = shape_ledger(model)
    got = {k: list(v.shape) for k, v in state.items()}
    if expected != got:
        diff = sorted(k for k in set(expected) | set(got) if expected.get(k) != got.get(k))[:5]
        raise CheckpointError(f"{directory}: parameter shapes do not match the recorded config (first: {diff})")
    model.load_state_dict(state)
    model.eval()
    return model, manifest


def load_trainer_state(directory: str | Path) -> dict | None:
    path = Path(directory) / "trainer.pt"
    if not path.exists():
        return None
    return torch.load(path, map_location="cpu", weights_only=False)
