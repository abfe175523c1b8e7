import numpy as np
import pytest
import torch

from src.diffcore import (
    Condition,
    LatentTensor,
    build_schedule,
    forward_noise,
    guided_noise,
    q_sample,
    rescaled_endpoints,
    reverse_step,
    reverse_step_batch,
    sample,
    sample_batch,
    sampler_call_count,
    schedule_from_config,
)


def test_linear_schedule_derived_arrays():
    sched = build_schedule(10, 0.01, 0.1)

    assert sched.betas[0] == pytest.approx(0.01)
    assert sched.betas[-1] == pytest.approx(0.1)
    np.testing.assert_allclose(sched.alphas, 1.0 - sched.betas)
    np.testing.assert_allclose(sched.alpha_bars, np.cumprod(1.0 - sched.betas))
    np.testing.assert_allclose(sched.sigmas, np.sqrt(sched.betas))
    assert np.all(np.diff(sched.alpha_bars) < 0)


def test_single_step_schedule_uses_beta_start():
    sched = build_schedule(1, 0.02, 0.5)

    assert sched.T == 1
    assert sched.betas.tolist() == [0.02]


@pytest.mark.parametrize("T, start, end", [(0, 0.01, 0.1), (5, 0.0, 0.1), (5, 0.2, 0.1), (5, 0.01, 1.0)])
def test_invalid_schedules_are_rejected(T, start, end):
    with pytest.raises(ValueError):
        build_schedule(T, start, end)


def test_reference_endpoints_scale_to_short_chains():
    start, end = rescaled_endpoints(1e-4, 0.02, 100, 1000)

    assert start == pytest.approx(1e-3)
    assert end == pytest.approx(0.2)
    assert rescaled_endpoints(1e-4, 0.02, 100, None) == (1e-4, 0.02)

    sched = schedule_from_config({"T": 100, "beta_start": 1e-4, "beta_end": 0.02, "reference_T": 1000})
    assert sched.beta_end == pytest.approx(0.2)


def test_schedule_fingerprint_tracks_betas():
    a = build_schedule(10, 0.01, 0.1)
    b = build_schedule(10, 0.01, 0.1)
    c = build_schedule(10, 0.01, 0.2)

    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert a.to_meta()["fingerprint"] == a.fingerprint()


def test_forward_noise_closed_form(sched):
    x0 = LatentTensor(torch.zeros(1, 4, 4))
    eps = LatentTensor(torch.ones(1, 4, 4))

    x_t = forward_noise(x0, 3, eps, sched)

    assert x_t.timestep_tag == 3
    expected = float(np.sqrt(1.0 - sched.alpha_bars[3]))
    assert torch.allclose(x_t.data, torch.full((1, 4, 4), expected))


def test_forward_noise_rejects_bad_inputs(sched):
    x0 = LatentTensor(torch.zeros(1, 4, 4))
    with pytest.raises(ValueError):
        forward_noise(x0, 0, LatentTensor(torch.zeros(1, 4, 5)), sched)
    with pytest.raises(ValueError):
        forward_noise(x0, sched.T, LatentTensor(torch.zeros(1, 4, 4)), sched)


def test_batched_q_sample_matches_single(sched):
    x0 = torch.randn(3, 1, 4, 4, generator=torch.Generator().manual_seed(1))
    eps = torch.randn(3, 1, 4, 4, generator=torch.Generator().manual_seed(2))
    t = torch.tensor([0, 4, 7])

    batched = q_sample(x0, t, eps, sched)

    for i in range(3):
        single = forward_noise(LatentTensor(x0[i]), int(t[i]), LatentTensor(eps[i]), sched)
        assert torch.allclose(batched[i], single.data, atol=1e-6)


def test_reverse_step_tags_and_batch_agreement(sched):
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(2, 1, 4, 4, generator=gen)
    eps = torch.randn(2, 1, 4, 4, generator=gen)
    z = torch.randn(2, 1, 4, 4, generator=gen)
    t = torch.tensor([5, 0])

    batched = reverse_step_batch(x, eps, t, z, sched)
    step5 = reverse_step(LatentTensor(x[0], 5), LatentTensor(eps[0]), 5, LatentTensor(z[0]), sched)
    step0 = reverse_step(LatentTensor(x[1], 0), LatentTensor(eps[1]), 0, LatentTensor(torch.zeros(1, 4, 4)), sched)

    assert step5.timestep_tag == 4
    assert step0.timestep_tag is None
    assert torch.allclose(batched[0], step5.data, atol=1e-6)
    # z is ignored at t = 0
    assert torch.allclose(batched[1], step0.data, atol=1e-6)


def test_latent_tensor_validation():
    with pytest.raises(ValueError):
        LatentTensor(torch.zeros(4, 4))
    with pytest.raises(ValueError):
        LatentTensor(torch.tensor([[[float("nan")]]]))


def test_condition_range_check():
    assert Condition(3).check(4).class_id == 3
    with pytest.raises(ValueError):
        Condition(4).check(4)


def test_sample_trajectory_tags(fp_model, sched):
    chain = sample(fp_model, Condition(1), sched, seed=7)

    assert len(chain) == sched.T + 1
    assert [lat.timestep_tag for lat in chain] == list(range(sched.T - 1, -1, -1)) + [None]
    assert chain[0].shape == fp_model.latent_shape


def test_sampling_is_seeded_and_independent_of_batching(fp_model, sched):
    together = sample_batch(fp_model, [0, 2], [11, 12], sched)
    alone = sample_batch(fp_model, [2], [12], sched)
    again = sample_batch(fp_model, [0, 2], [11, 12], sched)

    assert torch.equal(together, again)
    assert torch.allclose(together[1], alone[0], atol=1e-5)


def test_sampler_call_count_increments(fp_model, sched):
    before = sampler_call_count()
    sample_batch(fp_model, [0], [1], sched)

    assert sampler_call_count() == before + 1


def test_unit_guidance_equals_conditional_prediction(fp_model):
    x = torch.randn(2, 1, 16, 16, generator=torch.Generator().manual_seed(0))
    t = torch.tensor([1, 2])
    c = torch.tensor([0, 3])

    with torch.no_grad():
        plain = fp_model.predict_noise(x, t, c)
        unit = guided_noise(fp_model, x, t, c, 1.0)
        guided = guided_noise(fp_model, x, t, c, 3.0)
        uncond = fp_model.predict_noise(x, t, torch.full_like(c, fp_model.null_class))

    assert torch.equal(plain, unit)
    assert torch.allclose(guided, uncond + 3.0 * (plain - uncond), atol=1e-5)
