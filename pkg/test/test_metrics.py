import numpy as np
import pytest
import torch

from src.metrics import (
    FeatureExtractor,
    FeatureExtractorConfig,
    frechet_distance,
    frechet_feature_distance,
    frechet_from_features,
    load_feature_extractor,
    perceptual_feature_distance,
    perceptual_feature_distance_batch,
    save_feature_extractor,
    ssim,
    ssim_batch,
    train_feature_extractor,
)


@pytest.fixture
def fx():
    torch.manual_seed(0)
    return FeatureExtractor(FeatureExtractorConfig(num_classes=4)).freeze()


def images(seed: int, n: int = 4) -> torch.Tensor:
    return torch.rand(n, 1, 16, 16, generator=torch.Generator().manual_seed(seed))


def test_ssim_identical_images_is_one():
    a = images(0)

    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim_batch(a, a).shape == (4,)


def test_ssim_drops_for_unrelated_images():
    assert ssim(images(0), images(1)) < 0.5


def test_ssim_rejects_small_or_mismatched_images():
    with pytest.raises(ValueError):
        ssim(torch.rand(1, 1, 6, 6), torch.rand(1, 1, 6, 6))
    with pytest.raises(ValueError):
        ssim(images(0), images(0, n=3))


def test_ssim_accepts_single_images():
    a = torch.rand(16, 16)

    assert ssim(a, a) == pytest.approx(1.0)


def test_frechet_distance_of_identical_gaussians_is_zero():
    mu = np.array([1.0, 2.0])
    sigma = np.array([[2.0, 0.5], [0.5, 1.0]])

    assert frechet_distance(mu, sigma, mu, sigma) == pytest.approx(0.0, abs=1e-6)


def test_frechet_distance_closed_form_for_diagonal_covariances():
    fd = frechet_distance(np.zeros(2), np.diag([1.0, 4.0]), np.array([3.0, 0.0]), np.diag([4.0, 1.0]), shrinkage=0.0)

    # ||mu||^2 = 9; trace term = (1 + 4 - 4) + (4 + 1 - 4) = 2
    assert fd == pytest.approx(11.0, abs=1e-6)


def test_frechet_distance_rejects_indefinite_covariance():
    bad = np.array([[1.0, 0.0], [0.0, -1.0]])

    with pytest.raises(ValueError):
        frechet_distance(np.zeros(2), bad, np.zeros(2), np.eye(2))


def test_frechet_from_features_needs_two_samples():
    with pytest.raises(ValueError):
        frechet_from_features(np.zeros((1, 3)), np.zeros((5, 3)))
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(50, 3))

    assert frechet_from_features(feats, feats) == pytest.approx(0.0, abs=1e-6)


def test_pfd_zero_for_identical_and_positive_otherwise(fx):
    a, b = images(0), images(1)

    assert perceptual_feature_distance(a, a, fx) == pytest.approx(0.0, abs=1e-12)
    assert perceptual_feature_distance(a, b, fx) > 0.0
    assert perceptual_feature_distance_batch(a, b, fx, layers=(0,)).shape == (4,)
    with pytest.raises(ValueError):
        perceptual_feature_distance(a, images(0, n=2), fx)


def test_feature_extractor_is_frozen_and_round_trips(fx, tmp_path):
    assert not any(p.requires_grad for p in fx.parameters())
    assert fx.features(images(0)).shape == (4, fx.feature_dim)

    loaded = load_feature_extractor(save_feature_extractor(fx, tmp_path / "fx.dqnt"))

    assert loaded.fingerprint() == fx.fingerprint()


def test_feature_extractor_training_is_seeded(shapes):
    a = train_feature_extractor(shapes, steps=2, batch_size=8, seed=1)
    b = train_feature_extractor(shapes, steps=2, batch_size=8, seed=1)

    assert a.fingerprint() == b.fingerprint()
    assert a.config.num_classes == 4


def test_feature_distance_between_image_sets(fx):
    a, b = images(0, n=8), images(1, n=8)

    assert frechet_feature_distance(a, a, fx) == pytest.approx(0.0, abs=1e-3)
    assert frechet_feature_distance(a, b * 0.2, fx) > 1e-3
