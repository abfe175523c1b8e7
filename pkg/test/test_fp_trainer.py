import pytest
import torch

from src.denoiser import DenoiserModel, load_checkpoint, save_checkpoint
from src.fp_trainer import ConvergenceError, FPTrainConfig, noise_prediction_mse, train_fp


def tiny_cfg(**kwargs):
    base = dict(epochs=2, steps_per_epoch=3, batch_size=8, lr=2e-3, target_loss=None)
    base.update(kwargs)
    return FPTrainConfig(**base)


def test_training_records_epoch_losses(tiny_config, shapes, sched):
    torch.manual_seed(0)
    model, history = train_fp(DenoiserModel(tiny_config), shapes, sched, tiny_cfg(), seed=0)

    assert len(history) == 2
    assert all(loss > 0 for loss in history)
    assert not model.training
    assert model.schedule_fingerprint == sched.fingerprint()


def test_training_is_seeded(tiny_config, shapes, sched):
    torch.manual_seed(0)
    a, _ = train_fp(DenoiserModel(tiny_config), shapes, sched, tiny_cfg(epochs=1), seed=3)
    torch.manual_seed(0)
    b, _ = train_fp(DenoiserModel(tiny_config), shapes, sched, tiny_cfg(epochs=1), seed=3)

    assert a.fingerprint() == b.fingerprint()


def test_unmet_loss_target_raises(tiny_config, shapes, sched):
    with pytest.raises(ConvergenceError) as excinfo:
        train_fp(DenoiserModel(tiny_config), shapes, sched, tiny_cfg(epochs=1, target_loss=1e-6))

    assert excinfo.value.target == 1e-6
    assert excinfo.value.value == excinfo.value.history[-1]
    assert "final epoch loss" in str(excinfo.value)


def test_convergence_error_can_name_another_metric():
    error = ConvergenceError([0.1], 5.0, metric="FD to held-out data", value=7.25)

    assert error.value == 7.25
    assert "FD to held-out data 7.2500 > target 5.0" in str(error)


def test_config_from_section_allows_null_target():
    cfg = FPTrainConfig.from_config({
        "epochs": 1, "steps_per_epoch": 2, "batch_size": 4, "lr": 0.01,
        "cond_dropout": 0.0, "grad_clip": 0.0, "target_loss": None,
    })

    assert cfg.target_loss is None
    assert cfg.epochs == 1


def test_holdout_mse_is_finite(fp_model, shapes, sched):
    assert noise_prediction_mse(fp_model, shapes, sched, n=16) > 0.0


def test_checkpoint_round_trip(fp_model, sched, tmp_path):
    path = save_checkpoint(fp_model, tmp_path / "fp.dqnt", sched.to_meta())

    loaded = load_checkpoint(path)

    assert loaded.fingerprint() == fp_model.fingerprint()
    assert loaded.schedule_fingerprint == sched.fingerprint()
    assert loaded.config == fp_model.config
