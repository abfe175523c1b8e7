import numpy as np
import pytest
import torch

from src.artifact_io import FingerprintMismatchError
from src.diffcore import Condition, LatentTensor, q_sample, sample, sample_batch
from src.latent_dataset import (
    LatentDataset,
    LatentRecord,
    dataset_divergence,
    generate_parallel_batch,
    generate_serial_dataset,
    latent_range_report,
    make_conditions,
    record_dtype,
)


def serial_dataset(fp_model, sched, n=5, steps=3, seed=0, batch_size=2):
    conditions = make_conditions(n, 4, seed)
    return conditions, generate_serial_dataset(fp_model, conditions, steps, sched, seed=seed, batch_size=batch_size)


def test_conditions_are_seeded():
    a = make_conditions(20, 4, seed=3)

    assert a == make_conditions(20, 4, seed=3)
    assert a != make_conditions(20, 4, seed=4)
    assert all(0 <= c.class_id < 4 for c in a)
    assert len({c.seed for c in a}) == 20


def test_serial_records_are_trajectory_latents(fp_model, sched):
    conditions, dataset = serial_dataset(fp_model, sched)

    assert len(dataset) == 5 * 3
    for i in (0, 4, 14):
        record = dataset.record(i)
        chain = sample(fp_model, record.cond, sched, record.cond.seed)
        expected = chain[sched.T - 1 - record.t]
        assert expected.timestep_tag == record.t
        assert torch.allclose(record.x_t.data, expected.data, atol=1e-5)


def test_serial_records_ordered_by_condition_then_descending_timestep(fp_model, sched):
    conditions, dataset = serial_dataset(fp_model, sched)

    seeds = dataset.records["seed"].reshape(5, 3)
    ts = dataset.records["t"].astype(int).reshape(5, 3)
    assert seeds[:, 0].tolist() == [c.seed for c in conditions]
    assert (seeds == seeds[:, :1]).all()
    assert (np.diff(ts, axis=1) < 0).all()


def test_serial_generation_is_reproducible(fp_model, sched):
    _, a = serial_dataset(fp_model, sched)
    _, b = serial_dataset(fp_model, sched)

    assert a.records.tobytes() == b.records.tobytes()
    assert a.header == b.header


def test_full_steps_per_prompt_covers_every_timestep(fp_model, sched):
    _, dataset = serial_dataset(fp_model, sched, n=2, steps=sched.T)

    report = dataset.coverage_report()
    assert report["covered_timesteps"] == sched.T
    assert report["missing_timesteps"] == []
    assert report["min_per_timestep"] == 2

    with pytest.raises(ValueError):
        serial_dataset(fp_model, sched, steps=sched.T + 1)
    with pytest.raises(ValueError):
        serial_dataset(fp_model, sched, steps=0)


def test_dataset_round_trip_and_lineage(fp_model, sched, tmp_path):
    _, dataset = serial_dataset(fp_model, sched)
    path = dataset.save(tmp_path / "latents.dqnt")

    loaded = LatentDataset.load(path)

    assert loaded.records.tobytes() == dataset.records.tobytes()
    assert loaded.header["policy"] == dataset.header["policy"]
    assert loaded.nbytes() == dataset.nbytes()
    loaded.check_compatible(fp_model.fingerprint(), sched.fingerprint())
    with pytest.raises(FingerprintMismatchError):
        loaded.check_compatible("0" * 16)


def test_batches_mix_timesteps(fp_model, sched):
    _, dataset = serial_dataset(fp_model, sched)

    batch = dataset.batch([0, 1, 2])

    assert batch.x.shape == (3, *fp_model.latent_shape)
    assert len(torch.unique(batch.t)) == 3
    assert sorted(dataset.by_timestep()) == sorted(set(dataset.records["t"].tolist()))


def test_record_tag_must_match_timestep():
    with pytest.raises(ValueError):
        LatentRecord(LatentTensor(torch.zeros(1, 2, 2), timestep_tag=3), t=2, cond=Condition(0))


def test_parallel_batch_is_closed_form_noising(sched):
    x0 = torch.rand(3, 1, 4, 4)
    t = torch.tensor([0, 3, 7])

    batch = generate_parallel_batch(x0, t, sched, seed=9)

    assert torch.allclose(batch.x, q_sample(x0, t, batch.eps, sched))
    assert batch.class_ids.tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        generate_parallel_batch(x0, torch.tensor([0, 1]), sched, seed=9)


def test_latent_range_report_rows(fp_model, sched):
    conditions = make_conditions(6, 4, seed=1)

    report = latent_range_report(fp_model, sched, conditions, n=4)

    assert report.samples == 4
    assert [row["t"] for row in report.rows] == list(range(sched.T - 1, -1, -1))
    assert all(row["delta"] >= 0 for row in report.rows)
    assert set(report.to_dict()) == {"samples", "eps_mse", "low_confidence", "max_delta", "rows"}
    assert report.low_confidence == (report.eps_mse > 0.5)

    _, dataset = serial_dataset(fp_model, sched)
    divergence = dataset_divergence(dataset, report)
    assert set(divergence) <= set(report.inference_std())


def test_dataset_bytes_grow_linearly_with_records(fp_model, sched):
    sizes = {}
    for n in (2, 4, 8):
        _, dataset = serial_dataset(fp_model, sched, n=n, steps=3)
        sizes[len(dataset)] = dataset.nbytes()

    per_record = record_dtype(fp_model.latent_shape).itemsize
    assert sizes == {count: count * per_record for count in (6, 12, 24)}


def test_dataset_timestep_spread_matches_serial_inference(fp_model, sched):
    conditions, dataset = serial_dataset(fp_model, sched, n=6, steps=sched.T, batch_size=4)
    chain = sample_batch(fp_model, [c.class_id for c in conditions], [c.seed for c in conditions], sched, keep_trajectory=True)

    for t, idx in dataset.by_timestep().items():
        stored = float(np.asarray(dataset.records["x"][idx]).std())
        serial = float(chain[sched.T - 1 - t].std(unbiased=False))
        assert stored == pytest.approx(serial, rel=0.02)
