import sys
from pathlib import Path

import pytest
import torch
import torch.nn as nn

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from src.denoiser import DenoiserConfig, DenoiserModel
from src.diffcore import build_schedule, sample_batch
from src.quant_model import attach_quantizers, calibrate_banks
from src.quantcore import QuantConfig
from src.toy_data import SyntheticShapes


TINY_MODEL = dict(
    in_channels=1,
    image_size=16,
    base_channels=8,
    time_embed_dim=8,
    hidden_time_dim=16,
    cond_embed_dim=8,
    ffn_mult=2,
    groups=4,
    num_classes=4,
)


def make_tiny_model(seed: int = 0) -> DenoiserModel:
    """Untrained tiny denoiser with a non-zero output layer, so predictions depend on the input."""
    torch.manual_seed(seed)
    model = DenoiserModel(DenoiserConfig(**TINY_MODEL))
    nn.init.normal_(model.conv_out.weight, std=0.05)
    nn.init.normal_(model.conv_out.bias, std=0.01)
    return model.eval()


@pytest.fixture
def tiny_config() -> DenoiserConfig:
    return DenoiserConfig(**TINY_MODEL)


@pytest.fixture
def fp_model() -> DenoiserModel:
    return make_tiny_model()


@pytest.fixture
def sched():
    return build_schedule(8, 0.01, 0.2)


@pytest.fixture
def shapes() -> SyntheticShapes:
    return SyntheticShapes(num_classes=4, image_size=16)


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(0)


def tiny_run_overrides(output_dir: Path):
    """CLI overrides that shrink every stage to a few seconds."""
    return [
        f"run.output_dir={output_dir}",
        "run.verbose=false",
        "model.base_channels=8",
        "model.time_embed_dim=8",
        "model.hidden_time_dim=16",
        "model.cond_embed_dim=8",
        "model.groups=4",
        "data.num_classes=4",
        "data.holdout_size=16",
        "schedule.T=6",
        "schedule.reference_T=null",
        "schedule.beta_start=0.01",
        "schedule.beta_end=0.3",
        "fp_train.epochs=1",
        "fp_train.steps_per_epoch=2",
        "fp_train.batch_size=8",
        "fp_train.target_loss=null",
        "feature_extractor.steps=2",
        "feature_extractor.batch_size=8",
        "quant.calib_conditions=4",
        "pipeline.num_conditions=6",
        "pipeline.steps_per_prompt=2",
        "pipeline.generation_batch_size=4",
        "qat.iterations=3",
        "qat.batch_size=4",
        "qat.log_every=1",
        "stability.every=2",
        "stability.grad_window=2",
        "sampling.num_images=4",
        "eval.num_images=8",
        "eval.batch_size=8",
        "eval.curve_images=4",
    ]


def trajectory_batches(model, sched, n=4, seed=0):
    """(x_t, t, class_ids) per step of n sampled trajectories."""
    chain = sample_batch(model, list(range(n)), [seed + i for i in range(n)], sched, keep_trajectory=True)
    class_ids = torch.arange(n) % model.config.num_classes
    return [(chain[k], torch.full((n,), sched.T - 1 - k, dtype=torch.long), class_ids) for k in range(sched.T)]


def make_quantized(model, sched, **cfg_kwargs):
    """Calibrated quantized copy of model."""
    cfg = QuantConfig(**cfg_kwargs)
    banks = calibrate_banks(model, trajectory_batches(model, sched), cfg, sched.T)
    return attach_quantizers(model, cfg, banks, sched.T)
