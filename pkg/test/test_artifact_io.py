import struct

import pytest
import torch

from src.artifact_io import (
    FORMAT_VERSION,
    ArtifactFormatError,
    fingerprint_tensors,
    read_artifact,
    read_tensor_artifact,
    write_artifact,
    write_tensor_artifact,
)


def test_header_and_payload_round_trip(tmp_path):
    path = write_artifact(tmp_path / "a.dqnt", "qpack", {"b": 1, "a": [1, 2]}, b"\x01\x02")

    header, payload = read_artifact(path, "qpack")

    assert header == {"a": [1, 2], "b": 1}
    assert payload == b"\x01\x02"


def test_identical_inputs_give_identical_bytes(tmp_path):
    tensors = {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3), "t": torch.tensor([3, 1])}
    a = write_tensor_artifact(tmp_path / "a.dqnt", "latents", tensors, {"seed": 0})
    b = write_tensor_artifact(tmp_path / "b.dqnt", "latents", dict(reversed(list(tensors.items()))), {"seed": 0})

    assert a.read_bytes() == b.read_bytes()


def test_rejects_wrong_magic_kind_and_version(tmp_path):
    path = write_artifact(tmp_path / "a.dqnt", "tcache", {}, b"")

    with pytest.raises(ArtifactFormatError):
        read_artifact(path, "qckpt")

    raw = bytearray(path.read_bytes())
    bad_magic = tmp_path / "magic.dqnt"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ArtifactFormatError):
        read_artifact(bad_magic, "tcache")

    struct.pack_into("<H", raw, 4, FORMAT_VERSION + 1)
    bad_version = tmp_path / "version.dqnt"
    bad_version.write_bytes(bytes(raw))
    with pytest.raises(ArtifactFormatError):
        read_artifact(bad_version, "tcache")

    truncated = tmp_path / "short.dqnt"
    truncated.write_bytes(b"DQ")
    with pytest.raises(ArtifactFormatError):
        read_artifact(truncated, "tcache")


def test_unknown_kind_is_refused(tmp_path):
    with pytest.raises(ValueError):
        write_artifact(tmp_path / "a.dqnt", "weights", {}, b"")


def test_tensor_dtypes_survive(tmp_path):
    tensors = {
        "mask": torch.tensor([True, False, True]),
        "codes": torch.tensor([[-7, 3]], dtype=torch.int32),
        "scale": torch.tensor([0.5, 0.25], dtype=torch.float64),
    }
    path = write_tensor_artifact(tmp_path / "a.dqnt", "qckpt", tensors, {})

    header, loaded = read_tensor_artifact(path, "qckpt")

    assert loaded["mask"].dtype == torch.bool and loaded["mask"].tolist() == [True, False, True]
    assert loaded["codes"].dtype == torch.int64 and loaded["codes"].tolist() == [[-7, 3]]
    assert loaded["scale"].dtype == torch.float32 and loaded["scale"].tolist() == [0.5, 0.25]
    assert [entry["name"] for entry in header["tensors"]] == ["codes", "mask", "scale"]


def test_fingerprint_tracks_content_not_order():
    a = {"x": torch.ones(2), "y": torch.zeros(3)}
    b = {"y": torch.zeros(3), "x": torch.ones(2)}

    assert fingerprint_tensors(a) == fingerprint_tensors(b)
    assert fingerprint_tensors(a) != fingerprint_tensors({"x": torch.ones(2), "y": torch.ones(3)})
