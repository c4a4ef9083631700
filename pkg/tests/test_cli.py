import csv
import json

import pytest

from pipelearn.cli import main


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and " seed=" in lines[0]
    return list(csv.DictReader(lines[1:]))


def write_config(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


SMALL_TRAINING = {"widths": [3, 6, 2], "activations": ["relu", "softmax"], "devices": 2,
                  "samples_per_device": 60, "batch_size": 20, "epochs": 2, "params": [1, 4]}


def test_efficiency_nine_rows_and_throughput(tmp_path):
    cfg = write_config(tmp_path, {"efficiency": {"models": ["vgg5-like"], "dataset_size": 2000}})
    assert main(["efficiency", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1"]) == 0
    rows = read_csv(tmp_path / "o" / "efficiency.csv")
    assert len(rows) == 9
    assert {(r["preset"], r["mode"]) for r in rows} == {(p, m) for p in ("4g", "4g+", "wifi")
                                                         for m in ("pipelearn", "sfl", "fl")}
    by = {(r["preset"], r["mode"]): r for r in rows}
    for p in ("4g", "4g+", "wifi"):
        assert float(by[(p, "pipelearn")]["throughput_mbps"]) > float(by[(p, "fl")]["throughput_mbps"])
    fl = [float(by[(p, "fl")]["epoch_s"]) for p in ("4g", "4g+", "wifi")]
    assert max(fl) / min(fl) < 1.05


def test_opt_score_columns_and_oracle(tmp_path):
    cfg = write_config(tmp_path, {"opt_score": {"seeds": 2, "min_frac_095": 0.0, "min_score": 0.0}})
    assert main(["opt-score", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "opt_score.csv")
    assert len(rows) == 6
    for r in rows:
        assert 0 < float(r["score"]) <= 1
        assert float(r["t_oracle_s"]) <= float(r["t_selected_s"])
    assert read_csv(tmp_path / "opt_fixed_p.csv")


def test_opt_score_assertion_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path, {"opt_score": {"seeds": 1, "min_frac_095": 1.01}})
    assert main(["opt-score", "--config", cfg, "--out", str(tmp_path), "--preset", "wifi"]) == 3


def test_equivalence_report(tmp_path):
    cfg = write_config(tmp_path, {"training": SMALL_TRAINING})
    assert main(["equivalence", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "equivalence.csv")
    assert {r["case"] for r in rows} == {"configured", "centralized", "one-iteration"}
    assert all(float(r["max_param_delta"]) <= 1e-6 for r in rows)


def _intervals(tmp_path, *extra):
    cfg = write_config(tmp_path, {"trace": {"model": "vgg5-like", "P": extra[0], "N": extra[1]}})
    out = tmp_path / f"t{extra[0]}_{extra[1]}"
    assert main(["trace", "--config", cfg, "--out", str(out)]) == 0
    return [(r["lane"], r["stage"], float(r["start"]), float(r["end"])) for r in read_csv(out / "trace.csv")]


def test_trace_single_batch_is_a_chain(tmp_path):
    spans = _intervals(tmp_path, 1, 1)
    assert len(spans) == 6
    for a, b in zip(spans, spans[1:]):
        assert b[2] >= a[3]


def test_trace_overlaps_upload_with_next_forward(tmp_path):
    spans = {s[1].split("@")[0]: s for s in _intervals(tmp_path, 1, 3)}
    u1, fc2 = spans["u0_1"], spans["fc0_2"]
    assert u1[2] < fc2[3] and fc2[2] < u1[3]


def test_trace_empty_server_part(tmp_path):
    spans = _intervals(tmp_path, 5, 2)
    server = [s for s in spans if s[0] == "server"]
    assert server and all(s[2] == s[3] for s in server)


def test_train_outputs(tmp_path):
    cfg = write_config(tmp_path, {"training": SMALL_TRAINING})
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "metrics.csv")) == 2
    assert len(read_csv(tmp_path / "loss_trace.csv")) == 2
    doc = json.loads((tmp_path / "model.json").read_text())
    assert doc["stamp"].startswith("config_hash=") and doc["params"] == [[1, 4], [1, 4]]


@pytest.mark.parametrize("argv", [
    ["train", "--seed", "4"],
    ["trace", "--seed", "2", "--preset", "4g+"],
    ["efficiency", "--preset", "wifi", "--mode", "pipelearn"],
])
def test_reruns_are_byte_identical(tmp_path, argv):
    cfg = write_config(tmp_path, {"training": SMALL_TRAINING, "efficiency": {"dataset_size": 1000}})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(argv + ["--config", cfg, "--out", str(a)]) == 0
    assert main(argv + ["--config", cfg, "--out", str(b)]) == 0
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_seed_changes_the_stamp(tmp_path):
    main(["trace", "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["trace", "--out", str(tmp_path / "b"), "--seed", "2"])
    a = (tmp_path / "a" / "trace.csv").read_text().splitlines()[0]
    b = (tmp_path / "b" / "trace.csv").read_text().splitlines()[0]
    assert a != b and a.endswith("seed=1")


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "trace": {"P": 1,}\n}')
    assert main(["trace", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "bad.json:2:" in capsys.readouterr().err
    assert main(["trace", "--config", write_config(tmp_path, {"trace": {"model": "lenet"}}),
                 "--out", str(tmp_path)]) == 1
    assert main(["train", "--mode", "fl", "--out", str(tmp_path)]) == 1
    assert main(["bogus"]) == 1
    assert main(["train", "--config", write_config(tmp_path, {"sweep": {}}), "--out", str(tmp_path)]) == 1


def test_runtime_error_exit_2(tmp_path):
    training = {**SMALL_TRAINING, "activations": ["relu", "identity"], "eta": 1e200, "epochs": 3}
    assert main(["train", "--config", write_config(tmp_path, {"training": training}),
                 "--out", str(tmp_path)]) == 2
