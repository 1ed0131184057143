"""End-to-end harness: data, configuration, training, evaluation, inference."""

from pgseg.pipeline.config import ModelConfig, RunConfig, TrainConfig
from pgseg.pipeline.data import SegSample, gen_synthetic, import_external, load_dataset, load_sample
from pgseg.pipeline.model import PGSeg

__all__ = [
    "ModelConfig",
    "PGSeg",
    "RunConfig",
    "SegSample",
    "TrainConfig",
    "gen_synthetic",
    "import_external",
    "load_dataset",
    "load_sample",
]
