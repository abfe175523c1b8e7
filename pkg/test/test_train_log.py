import json

import pytest

from src.train_log import OperationTimer, TrainLog


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def test_records_are_sequenced_and_written(tmp_path):
    path = tmp_path / "log.jsonl"
    log = TrainLog(path)
    log.record(1, loss=0.5)
    log.record(2, loss=0.25, l_out=0.2)

    lines = read_jsonl(path)
    assert [line["seq"] for line in lines] == [1, 2]
    assert lines[1]["l_out"] == 0.2
    assert log.losses() == [0.5, 0.25]
    assert log.last("l_out") == 0.2
    assert log.last("missing", default=-1) == -1


def test_append_continues_sequence_and_fresh_log_truncates(tmp_path):
    path = tmp_path / "log.jsonl"
    TrainLog(path).record(1, loss=1.0)

    appended = TrainLog(path, append=True)
    appended.record(2, loss=0.5)
    assert [line["seq"] for line in read_jsonl(path)] == [1, 2]

    TrainLog(path).record(1, loss=0.1)
    assert [line["seq"] for line in read_jsonl(path)] == [1]


def test_per_layer_payloads_collapse_to_summaries(tmp_path):
    path = tmp_path / "log.jsonl"
    log = TrainLog(path, per_layer=False)
    log.record(1, loss=1.0, grad_norm={"a": 1.0, "b": 3.0})

    written = read_jsonl(path)[0]
    assert written["grad_norm"] == {"layers": 2, "mean": 2.0, "max": 3.0}
    assert log.records[0]["grad_norm"] == {"a": 1.0, "b": 3.0}


def test_in_memory_log_needs_no_path():
    log = TrainLog()
    for i, loss in enumerate([1.0, 3.0, 1.0, 3.0], start=1):
        log.record(i, loss=loss)

    assert len(log) == 4
    assert log.loss_fluctuation(window=2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        log.loss_fluctuation(window=5)
    with pytest.raises(ValueError):
        log.loss_fluctuation(window=1)


def test_operation_timer_measures_milliseconds():
    with OperationTimer() as timer:
        sum(range(1000))

    assert timer.get_duration() >= 0.0
