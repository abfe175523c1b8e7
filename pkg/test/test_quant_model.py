import pytest
import torch

from conftest import make_quantized as quantized, trajectory_batches
from src.quant_model import (
    TIME_INPUT_PREFIX,
    activation_sites,
    apply_weight_scales,
    attach_quantizers,
    bank_parameter_report,
    calibrate_banks,
    load_quant_pack,
    load_quantized_model,
    save_quant_pack,
    save_quantized_model,
)
from src.quantcore import QuantConfig
from src.stability import FreezeMask
from src.timecache import precompute_time_cache, strip_time_layers


def sample_inputs(model, sched):
    gen = torch.Generator().manual_seed(5)
    x = torch.randn(4, *model.latent_shape, generator=gen)
    t = torch.tensor([0, 2, 5, sched.T - 1])
    return x, t, torch.tensor([0, 1, 2, 3])


def test_every_site_gets_a_bank(fp_model, sched):
    cfg = QuantConfig()
    banks = calibrate_banks(fp_model, trajectory_batches(fp_model, sched), cfg, sched.T)

    assert set(banks) == set(activation_sites(fp_model, cfg))
    assert all(bank.T == sched.T for bank in banks.values())
    assert "time_embed.linear1" not in banks

    banks.pop("conv_in")
    with pytest.raises(ValueError):
        attach_quantizers(fp_model, cfg, banks, sched.T)


def test_quantizing_time_layers_adds_their_sites(fp_model):
    sites = activation_sites(fp_model, QuantConfig(quantize_time_layers=True))

    assert "time_embed.linear1" in sites
    assert "time_proj.mid" in sites


def test_attach_leaves_fp_model_untouched(fp_model, sched):
    before = fp_model.fingerprint()
    q = quantized(fp_model, sched)

    assert fp_model.fingerprint() == before
    assert q.reference_fingerprint() == before


def test_more_bits_track_fp_more_closely(fp_model, sched):
    x, t, c = sample_inputs(fp_model, sched)
    with torch.no_grad():
        ref = fp_model.predict_noise(x, t, c)
        err4 = float(((quantized(fp_model, sched, w_bits=4).predict_noise(x, t, c) - ref) ** 2).mean())
        err8 = float(((quantized(fp_model, sched, w_bits=8).predict_noise(x, t, c) - ref) ** 2).mean())

    assert err8 < err4


def test_stripped_teacher_quantizes_cached_time_inputs(fp_model, sched):
    cache = precompute_time_cache(fp_model, sched)
    teacher = strip_time_layers(fp_model).bind_time_cache(cache)
    q = quantized(teacher, sched)

    time_sites = [s for s in q.sites if s.startswith(TIME_INPUT_PREFIX)]
    assert len(time_sites) == 5
    assert set(time_sites) <= set(q.act_quantizers())
    x, t, c = sample_inputs(fp_model, sched)
    with torch.no_grad():
        assert torch.isfinite(q.predict_noise(x, t, c)).all()


def test_scale_gradients_only_touch_timesteps_in_the_batch(fp_model, sched):
    q = quantized(fp_model, sched)
    quantizer = q.act_quantizers()["ffn_in"]
    before = quantizer.scale.detach().clone()
    optimizer = torch.optim.SparseAdam(q.bank_parameters(), lr=1e-2)

    x, _, c = sample_inputs(fp_model, sched)
    t = torch.full((4,), 3, dtype=torch.long)
    q.predict_noise(x, t, c).pow(2).mean().backward()

    grad = quantizer.scale.grad
    assert grad.is_sparse
    dense = grad.to_dense()
    assert torch.count_nonzero(dense[torch.arange(sched.T) != 3]) == 0

    optimizer.step()
    after = quantizer.scale.detach()
    untouched = torch.arange(sched.T) != 3
    assert torch.equal(after[untouched], before[untouched])
    assert not torch.equal(after[3], before[3])


def test_shared_activation_quantizer_uses_one_slot(fp_model, sched):
    q = quantized(fp_model, sched, multi_timestep=False)
    quantizer = q.act_quantizers()["conv_in"]

    assert quantizer.num_slots == 1
    bank = quantizer.to_bank("conv_in")
    assert bank.T == sched.T
    assert torch.equal(bank.scales(), bank.scales()[:1].expand(sched.T))


def test_frozen_weights_keep_their_code_and_latent(fp_model, sched):
    q = quantized(fp_model, sched)
    layer = q.quant_layers()["skip_proj1"]
    codes = layer.weight_quant.codes(layer.weight)

    mask = FreezeMask()
    chosen = torch.zeros_like(layer.weight, dtype=torch.bool)
    chosen.view(-1)[:3] = True
    mask.masks["skip_proj1"] = chosen
    mask.frozen_codes["skip_proj1"] = codes
    assert q.apply_freeze(mask) == 3
    assert q.apply_freeze(mask) == 0

    latent = layer.weight.detach().clone()
    with torch.no_grad():
        layer.weight.add_(1.0)
    q.restore_frozen()

    assert torch.equal(layer.weight[chosen], latent[chosen])
    assert torch.equal(layer.weight_quant.codes(layer.weight)[chosen], codes[chosen])


def test_bank_parameter_report_counts(fp_model, sched):
    q = quantized(fp_model, sched)
    report = bank_parameter_report(q)

    assert report["bank_parameters"] == report["activation_sites"] * sched.T * 2
    assert report["bank_fraction"] == pytest.approx(report["bank_parameters"] / report["model_parameters"])


def test_quant_pack_restores_banks_and_weight_scales(fp_model, sched, tmp_path):
    q = quantized(fp_model, sched)
    path = save_quant_pack(q, tmp_path / "pack.dqnt", provenance={"calib_conditions": 4})

    cfg, banks, weight_scales, header = load_quant_pack(path)
    rebuilt = attach_quantizers(fp_model, cfg, banks, sched.T)
    apply_weight_scales(rebuilt, weight_scales)

    assert header["provenance"] == {"calib_conditions": 4}
    assert cfg.to_dict() == q.cfg.to_dict()
    x, t, c = sample_inputs(fp_model, sched)
    with torch.no_grad():
        assert torch.allclose(rebuilt.predict_noise(x, t, c), q.predict_noise(x, t, c), atol=1e-6)


def test_quantized_checkpoint_reload(fp_model, sched, tmp_path):
    cache = precompute_time_cache(fp_model, sched)
    teacher = strip_time_layers(fp_model).bind_time_cache(cache)
    q = quantized(teacher, sched)
    path = save_quantized_model(q, tmp_path / "q.dqnt", extra={"mode": "s2p"})

    loaded = load_quantized_model(path).bind_time_cache(cache)

    assert loaded.stripped
    assert loaded.reference_fingerprint() == fp_model.fingerprint()
    x, t, c = sample_inputs(fp_model, sched)
    with torch.no_grad():
        assert torch.allclose(loaded.predict_noise(x, t, c), q.predict_noise(x, t, c), atol=1e-6)
