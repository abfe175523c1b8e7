import pytest
import torch

from src.quantcore import (
    Granularity,
    QuantConfig,
    QuantParams,
    TimestepQuantBank,
    bank_calibrate,
    calibrate_minmax,
    dequantize,
    fake_quant,
    fake_quant_tensor,
    params_from_range,
    quant_range,
    quantize,
)


def test_quant_ranges():
    assert quant_range(8, signed=False) == (0, 255)
    assert quant_range(4, signed=True) == (-8, 7)
    with pytest.raises(ValueError):
        quant_range(1, signed=False)
    with pytest.raises(ValueError):
        quant_range(17, signed=True)


def test_params_validation():
    with pytest.raises(ValueError):
        QuantParams.create(0.0, 0, bits=8)
    with pytest.raises(ValueError):
        QuantParams.create(0.1, 300, bits=8)
    with pytest.raises(ValueError):
        QuantParams.create([0.1, 0.2], [0, 0], bits=8)


def test_quantize_rounds_half_to_even_and_clips():
    p = QuantParams.create(1.0, 0, bits=4, signed=True)
    x = torch.tensor([0.5, 1.5, 2.5, -0.5, 20.0, -20.0], dtype=torch.float64)

    assert quantize(x, p).tolist() == [0, 2, 2, 0, 7, -8]


def test_quantize_rejects_non_finite():
    p = QuantParams.create(0.1, 0, bits=8)
    with pytest.raises(ValueError):
        quantize(torch.tensor([float("inf")]), p)


def test_dequantize_rejects_out_of_range_codes():
    p = QuantParams.create(0.1, 0, bits=8)
    with pytest.raises(ValueError):
        dequantize(torch.tensor([256]), p)


def test_fake_quant_error_bounded_by_half_step_in_range():
    x = torch.linspace(-1.0, 1.0, 101, dtype=torch.float64)
    p = params_from_range(x.min(), x.max(), bits=8)

    error = (fake_quant(x, p) - x).abs().max()

    assert float(error) <= float(p.scale) / 2 + 1e-12


def test_per_channel_params_broadcast_along_axis():
    w = torch.tensor([[0.9, -2.0], [0.2, 0.5]], dtype=torch.float64)
    p = calibrate_minmax([w], bits=4, granularity=Granularity.PER_CHANNEL, signed=True, symmetric=True)

    assert p.scale.tolist() == pytest.approx([2.0 / 7, 0.5 / 7])
    assert quantize(w, p).tolist() == [[3, -7], [3, 7]]


def test_per_channel_scale_depends_only_on_its_own_channel():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
    base = calibrate_minmax([w], bits=4, granularity=Granularity.PER_CHANNEL, signed=True, symmetric=True)

    for i in range(4):
        changed = w.clone()
        changed[i] *= 3.0
        p = calibrate_minmax([changed], bits=4, granularity=Granularity.PER_CHANNEL, signed=True, symmetric=True)
        others = [j for j in range(4) if j != i]
        assert float(p.scale[i]) == pytest.approx(3.0 * float(base.scale[i]))
        assert torch.equal(p.scale[others], base.scale[others])


def test_calibrate_minmax_asymmetric_uses_full_range():
    p = calibrate_minmax([torch.tensor([-1.0, 0.0]), torch.tensor([3.0])], bits=8)

    assert float(p.scale) == pytest.approx(4.0 / 255)
    assert dequantize(quantize(torch.tensor([-1.0, 3.0]), p), p).tolist() == pytest.approx([-1.0, 3.0], abs=1e-2)


def test_empty_calibration_stream_raises():
    with pytest.raises(ValueError):
        calibrate_minmax([], bits=8)


def test_degenerate_range_falls_back_to_scale_floor():
    p = calibrate_minmax([torch.zeros(10)], bits=8, scale_floor=1e-6)

    assert float(p.scale) == pytest.approx(1e-6)


def test_ste_gradient_zero_outside_range():
    x = torch.tensor([0.3, 100.0], requires_grad=True)
    scale = torch.tensor(0.1, requires_grad=True)

    out = fake_quant_tensor(x, scale, torch.tensor(0.0), 0, 255)
    out.sum().backward()

    assert x.grad.tolist() == [1.0, 0.0]


def test_lsq_scale_gradient():
    x = torch.tensor([0.26, 100.0])
    scale = torch.tensor(0.1, requires_grad=True)

    fake_quant_tensor(x, scale, torch.tensor(0.0), 0, 255).sum().backward()

    # in range: round(2.6) - 2.6 = 0.4; clipped: qmax - z = 255
    assert float(scale.grad) == pytest.approx(0.4 + 255.0, rel=1e-5)


def test_bank_calibrates_each_timestep_from_its_own_samples():
    samples = {0: [torch.tensor([0.0, 1.0])], 1: [torch.tensor([0.0, 10.0])]}

    bank = bank_calibrate("conv_in", samples, bits=8, T=2)

    assert float(bank.lookup(0).scale) == pytest.approx(1.0 / 255)
    assert float(bank.lookup(1).scale) == pytest.approx(10.0 / 255)
    assert bank.bitwidth == 8


def test_bank_scales_increase_with_timestep_range():
    base = torch.linspace(-0.5, 1.0, 64)
    samples = {t: [base * (1 + t)] for t in range(10)}

    scales = bank_calibrate("mid_conv", samples, bits=8, T=10).scales()

    assert bool((scales[1:] > scales[:-1]).all())
    assert scales.tolist() == pytest.approx([1.5 * (1 + t) / 255 for t in range(10)])


def test_bank_missing_timestep_requires_interpolation():
    samples = {0: [torch.tensor([0.0, 1.0])], 2: [torch.tensor([0.0, 3.0])]}

    with pytest.raises(ValueError):
        bank_calibrate("conv_in", samples, bits=8, T=3)

    bank = bank_calibrate("conv_in", samples, bits=8, T=3, interpolate=True)
    assert float(bank.lookup(1).scale) == pytest.approx(2.0 / 255)


def test_bank_requires_every_timestep_and_one_bitwidth():
    p8 = QuantParams.create(0.1, 0, bits=8)
    p4 = QuantParams.create(0.1, 0, bits=4)
    with pytest.raises(ValueError):
        TimestepQuantBank("x", 2, {0: p8})
    with pytest.raises(ValueError):
        TimestepQuantBank("x", 2, {0: p8, 1: p4})


def test_bank_tensor_views_round_trip():
    bank = TimestepQuantBank.from_tensors("x", torch.tensor([0.1, 0.2]), torch.tensor([3, 4]), bits=8)

    assert bank.scales().tolist() == pytest.approx([0.1, 0.2])
    assert bank.zero_points().tolist() == [3, 4]


def test_quant_config_validation_and_dict():
    with pytest.raises(ValueError):
        QuantConfig(w_bits=1)
    cfg = QuantConfig(w_bits=4, a_bits=8, multi_timestep=False)

    assert QuantConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert cfg.to_dict()["weight_granularity"] == "per_channel"
