import pytest
import yaml

from conftest import ROOT_DIR
from shared.utils import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    RunConfig,
    deep_merge,
    derive_seed,
    fingerprint_payload,
    parse_override,
)
from src.denoiser import DenoiserConfig
from src.diffcore import schedule_from_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({"qat": {"iterations": 10}, "run": {"output_dir": str(tmp_path / "run")}}))
    return path


def test_override_values_get_native_types():
    assert parse_override("qat.iterations=50") == {"qat": {"iterations": 50}}
    assert parse_override("sampling.guidance_scale=null") == {"sampling": {"guidance_scale": None}}
    assert parse_override("experiments.seeds=[0,1]") == {"experiments": {"seeds": [0, 1]}}
    assert parse_override("stability.freeze=false") == {"stability": {"freeze": False}}
    with pytest.raises(ConfigError):
        parse_override("qat.iterations")


def test_deep_merge_leaves_inputs_alone():
    base = {"a": {"b": 1, "c": 2}}
    merged = deep_merge(base, {"a": {"b": 5}})

    assert merged == {"a": {"b": 5, "c": 2}}
    assert base == {"a": {"b": 1, "c": 2}}


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, "qat") == derive_seed(0, "qat")
    assert derive_seed(0, "qat") != derive_seed(1, "qat")
    assert derive_seed(0, "condition", 1) != derive_seed(0, "condition", 2)
    assert 0 <= derive_seed(7, "x") < 2 ** 63


def test_payload_fingerprint_ignores_key_order():
    assert fingerprint_payload({"a": 1, "b": 2}) == fingerprint_payload({"b": 2, "a": 1})


def test_load_merges_file_and_overrides(config_file, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)

    config = RunConfig.load(str(config_file), ["qat.batch_size=8"], verbose=False)

    assert config["qat"]["iterations"] == 10
    assert config["qat"]["batch_size"] == 8
    assert config["qat"]["lr_scale"] == 1e-4
    assert config.get("pipeline.mode") == "s2p"
    assert config.output_dir == config_file.parent / "run"


def test_unknown_keys_and_wrong_types_are_rejected(config_file):
    with pytest.raises(ConfigError):
        RunConfig.load(str(config_file), ["qat.iteratons=5"], verbose=False)
    with pytest.raises(ConfigError):
        RunConfig.load(str(config_file), ["qat.iterations=many"], verbose=False)
    with pytest.raises(ConfigError):
        RunConfig.load(str(config_file), ["stability.freeze=1"], verbose=False)


def test_missing_explicit_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunConfig.load(str(tmp_path / "absent.yaml"), verbose=False)


def test_output_root_from_environment(config_file, monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))

    config = RunConfig.load(str(config_file), verbose=False)

    assert config.output_dir == tmp_path / "elsewhere"


def test_with_overrides_and_fingerprints(config_file, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    config = RunConfig.load(str(config_file), verbose=False)

    changed = config.with_overrides({"qat": {"iterations": 11}})

    assert changed["qat"]["iterations"] == 11
    assert config["qat"]["iterations"] == 10
    assert changed.fingerprint("schedule") == config.fingerprint("schedule")
    assert changed.fingerprint("qat") != config.fingerprint("qat")
    with pytest.raises(ConfigError):
        config.with_overrides({"qat": {"unknown": 1}})
    with pytest.raises(ConfigError):
        config.section("nope")


def test_resolved_config_is_written(config_file, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    config = RunConfig.load(str(config_file), verbose=False)

    path = config.write_resolved("train-qat")

    written = yaml.safe_load(open(path, encoding="utf-8"))
    assert written["qat"]["iterations"] == 10
    assert path.endswith("train-qat.resolved.yaml")


@pytest.mark.parametrize("config_path", [str(ROOT_DIR / "config.yaml"), None])
def test_default_schedule_and_width(config_path, tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    config = RunConfig.load(config_path, verbose=False) if config_path else RunConfig({})

    sched = schedule_from_config(config["schedule"])
    model = DenoiserConfig.from_config(config["model"], config["data"])

    assert sched.T == 100
    assert float(sched.betas[0]) == pytest.approx(1e-4, abs=1e-12)
    assert float(sched.betas[-1]) == pytest.approx(0.02, abs=1e-12)
    assert model.base_channels == DenoiserConfig().base_channels == 16
    assert model.block_widths[:3] == (16, 32, 64)
