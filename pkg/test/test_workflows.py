import pytest
import yaml

from conftest import ROOT_DIR, tiny_run_overrides
from main import dispatch, parse_args
from shared.utils import OUTPUT_ROOT_ENV, ConfigError, MissingArtifactError
from workflows.ablation import build_ablation_grid, row_notes
from workflows.report_builder import build_summary

CONFIG = str(ROOT_DIR / "config.yaml")


def run(command, run_dir, *extra, mode=None):
    return dispatch(command, CONFIG, tiny_run_overrides(run_dir) + list(extra), mode=mode, quiet=True)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """A run directory holding the FP model and feature extractor."""
    run_dir = tmp_path_factory.mktemp("run")
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert run("train-fp", run_dir) == 0
    return run_dir


@pytest.fixture(autouse=True)
def no_output_root(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


def test_cli_arguments():
    args = parse_args(["train-qat", "--mode", "serial_to_parallel", "qat.iterations=5", "-q"])

    assert args.command == "train-qat"
    assert args.mode == "serial_to_parallel"
    assert args.overrides == ["qat.iterations=5"]
    assert args.quiet
    with pytest.raises(SystemExit):
        parse_args(["quantize"])


def test_failures_return_nonzero(tmp_path):
    assert run("train-qat", tmp_path) == 1
    assert run("train-fp", tmp_path, "qat.iteratons=5") == 1
    assert dispatch("quantize", CONFIG, tiny_run_overrides(tmp_path), quiet=True) == 1
    assert run("report", tmp_path) == 1


def test_ablation_grid_is_cumulative():
    grid = build_ablation_grid(["Base", "+S2P", "+Time", "+Mstep", "+Distill", "+Freeze"])

    labels = [label for label, _ in grid]
    assert labels == ["Base", "+S2P", "+Time", "+Mstep", "+Distill", "+Freeze"]
    base, final = grid[0][1], grid[-1][1]
    assert base["pipeline"]["mode"] == "serial"
    assert final["pipeline"]["mode"] == "s2p"
    assert final["time_cache"]["enabled"] and final["quant"]["multi_timestep"]
    assert final["distill"]["enabled"] and final["stability"]["freeze"]
    assert grid[1][1]["time_cache"]["enabled"] is False


def test_ablation_grid_validation():
    with pytest.raises(ConfigError):
        build_ablation_grid(["Base", "+Quantum"])
    with pytest.raises(ConfigError):
        build_ablation_grid(["+S2P"])


def test_freeze_without_distillation_is_noted():
    grid = dict(build_ablation_grid(["Base", "+Freeze"]))

    assert row_notes(grid["+Freeze"]) == ["freezing without distillation"]
    assert row_notes(grid["Base"]) == []


def test_summary_skips_timing_files(tmp_path):
    with pytest.raises(MissingArtifactError):
        build_summary(tmp_path)

    reports = tmp_path / "reports"
    reports.mkdir()
    (reports / "eval_s2p.yaml").write_text(yaml.safe_dump({"fd_fp": 1.5, "rows": [{"label": "s2p", "ssim": 0.9}]}))
    (reports / "ablation.timing.yaml").write_text(yaml.safe_dump({"legs": []}))

    text = build_summary(tmp_path).read_text(encoding="utf-8")

    assert "## eval_s2p" in text
    assert "- **fd_fp:** 1.5000" in text
    assert "ablation" not in text


def test_full_s2p_pipeline(trained_run):
    for command in ("gen-dataset", "calibrate"):
        assert run(command, trained_run) == 0
    assert run("train-qat", trained_run, mode="s2p") == 0
    assert run("sample", trained_run, mode="s2p") == 0
    assert run("evaluate", trained_run, mode="s2p") == 0
    assert run("report", trained_run) == 0

    reports = trained_run / "reports"
    for name in ("fp_train", "dataset", "latent_range", "calibration", "train_qat_s2p", "eval_s2p"):
        assert (reports / f"{name}.yaml").exists(), name
    assert (trained_run / "samples" / "q_s2p.png").exists()
    assert (trained_run / "timings.jsonl").exists()
    evaluation = yaml.safe_load((reports / "eval_s2p.yaml").read_text(encoding="utf-8"))
    assert evaluation["num_images"] == 8
    assert 0.0 <= evaluation["pfd_mean"]
    train_report = yaml.safe_load((reports / "train_qat_s2p.yaml").read_text(encoding="utf-8"))
    assert train_report["iterations"] == 3
    assert "train_ms" not in train_report
    assert "eval_s2p" in (reports / "summary.md").read_text(encoding="utf-8")


def test_rebuilt_artifacts_are_byte_identical(trained_run):
    assert run("gen-dataset", trained_run) == 0
    first = (trained_run / "latents.dqnt").read_bytes()
    assert run("gen-dataset", trained_run) == 0

    assert (trained_run / "latents.dqnt").read_bytes() == first


def test_parallel_pipeline_needs_no_dataset(trained_run):
    assert run("calibrate", trained_run) == 0
    assert run("train-qat", trained_run, mode="parallel") == 0
    assert (trained_run / "q_model_parallel.dqnt").exists()


@pytest.mark.slow
def test_compare_pipelines(trained_run):
    assert run("compare-pipelines", trained_run, "experiments.seeds=[0]") == 0

    table = yaml.safe_load((trained_run / "reports" / "compare_pipelines.yaml").read_text(encoding="utf-8"))
    assert sorted({row["label"] for row in table["rows"]}) == ["parallel", "s2p", "serial"]
    assert "s2p_fd_fp_le_parallel" in table["checks"]
    assert (trained_run / "reports" / "compare_pipelines.timing.yaml").exists()


@pytest.mark.slow
def test_ablation(trained_run):
    assert run("ablate", trained_run, "experiments.seeds=[0]") == 0

    table = yaml.safe_load((trained_run / "reports" / "ablation.yaml").read_text(encoding="utf-8"))
    assert [row["label"] for row in table["means"]] == ["Base", "+S2P", "+Time", "+Mstep", "+Distill", "+Freeze"]
    assert table["checks"]["final_beats_base"]["seeds"] == 1


@pytest.mark.slow
def test_dataset_tradeoff(trained_run):
    assert run(
        "dataset-tradeoff", trained_run,
        "experiments.tradeoff.few_conditions=2",
        "experiments.tradeoff.few_steps_per_prompt=3",
        "experiments.tradeoff.many_conditions=6",
        "experiments.tradeoff.validation_conditions=2",
        "experiments.tradeoff.validation_steps_per_prompt=2",
        "experiments.tradeoff.checkpoints=1",
    ) == 0

    report = yaml.safe_load((trained_run / "reports" / "dataset_tradeoff.yaml").read_text(encoding="utf-8"))
    few, many = report["rows"]
    assert few["records"] == many["records"] == 6
    assert "many_gap_le_few_gap" in report["checks"]
