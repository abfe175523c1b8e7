import pytest
import torch

from src.quantcore import QuantParams
from src.stability import (
    FreezeMask,
    GradStats,
    OscillationTracker,
    apply_selective_freeze,
    gradient_oscillation_index,
    oscillation_fraction,
    update_oscillation,
)


def alternating_tracker(steps: int, momentum: float = 0.5) -> OscillationTracker:
    """Weight 0 flips every step, weight 1 never moves."""
    tracker = OscillationTracker(momentum=momentum)
    for i in range(steps):
        tracker.observe({"layer": torch.tensor([i % 2, 5])})
    return tracker


def test_first_observation_only_records_codes():
    tracker = alternating_tracker(1)

    assert tracker.iteration == 1
    assert tracker.flip_ema["layer"].tolist() == [0.0, 0.0]


def test_flip_ema_follows_momentum():
    tracker = alternating_tracker(3)

    # two flips: 0.5 * 1 + 0.5 * (0.5 * 1 + 0.5 * 0)
    assert tracker.flip_ema["layer"].tolist() == pytest.approx([0.75, 0.0])
    assert oscillation_fraction(tracker, threshold=0.1) == pytest.approx(50.0)
    assert oscillation_fraction(tracker, threshold=0.1, layers=["other"]) == 0.0


def test_tracker_rejects_bad_momentum_and_shape_changes():
    with pytest.raises(ValueError):
        OscillationTracker(momentum=0.0)
    tracker = alternating_tracker(1)
    with pytest.raises(ValueError):
        tracker.observe({"layer": torch.tensor([0, 1, 2])})


def test_update_oscillation_quantizes_weights():
    tracker = OscillationTracker(momentum=1.0)
    params = {"w": QuantParams.create(1.0, 0, bits=4, signed=True)}

    update_oscillation(tracker, {"w": torch.tensor([0.4, 2.0])}, params)
    update_oscillation(tracker, {"w": torch.tensor([0.6, 2.1])}, params)

    assert tracker.prev_codes["w"].tolist() == [1, 2]
    assert tracker.flip_ema["w"].tolist() == [1.0, 0.0]


def test_freeze_only_at_interval_and_only_sensitive_layers():
    tracker = OscillationTracker(momentum=0.5)
    for i in range(3):
        tracker.observe({"layer": torch.tensor([i % 2, 5]), "other": torch.tensor([i % 2])})

    mask = apply_selective_freeze(tracker, FreezeMask(), ["layer"], every=2, threshold=0.1)
    assert mask.count() == 0

    tracker.observe({"layer": torch.tensor([1, 5]), "other": torch.tensor([1])})
    mask = apply_selective_freeze(tracker, mask, ["layer"], every=2, threshold=0.1)

    assert mask.masks["layer"].tolist() == [True, False]
    assert mask.frozen_codes["layer"][0] == 1
    assert "other" not in mask.masks
    assert mask.events == [{"iteration": 4, "layer_count": 1, "layer": "layer"}]


def test_freezing_is_monotone():
    tracker = alternating_tracker(2, momentum=1.0)
    mask = apply_selective_freeze(tracker, FreezeMask(), ["layer"], every=2, threshold=0.5)
    assert mask.count() == 1

    tracker.observe({"layer": torch.tensor([1, 5])})
    tracker.observe({"layer": torch.tensor([1, 5])})
    mask = apply_selective_freeze(tracker, mask, ["layer"], every=2, threshold=0.5)

    assert mask.count() == 1
    assert mask.frozen_codes["layer"][0] == 1
    with pytest.raises(ValueError):
        apply_selective_freeze(tracker, mask, ["layer"], every=0)


def test_grad_stats_records_norm_mean_and_flip_rate():
    stats = GradStats()
    stats.record("w", torch.tensor([3.0, -4.0]))
    stats.record("w", torch.tensor([-3.0, -4.0]))

    assert stats.norms["w"] == [5.0, 5.0]
    assert stats.means["w"] == [-0.5, -3.5]
    assert stats.flip_rates["w"] == [0.0, 0.5]
    assert len(stats) == 2
    with pytest.raises(ValueError):
        stats.record("w", torch.tensor([float("inf")]))


def test_gradient_oscillation_index():
    stats = GradStats()
    stats.record_means("alternating", [1, -1, 1, -1, 1])
    stats.record_means("steady", [1, 2, 3, 4, 5])

    index = gradient_oscillation_index(stats, window=5)

    assert index == {"alternating": 1.0, "steady": 0.0}
    assert gradient_oscillation_index(stats, window=3)["alternating"] == 1.0
    with pytest.raises(ValueError):
        gradient_oscillation_index(stats, window=1)
    with pytest.raises(ValueError):
        gradient_oscillation_index(stats, window=6)
