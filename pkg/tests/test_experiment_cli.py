import json

import numpy as np
import pytest

from csi_ada import csi_ingest as ci
from csi_ada.cli import main
from csi_ada.experiment import (
    DataError,
    evaluate_checkpoints,
    format_report,
    load_ensemble,
    read_telemetry,
    run_experiment,
)
from csi_ada.lodo import EvalReport
from csi_ada.plotting import encode_ppm, heatmap_rgb, write_heatmap_ppm

TINY = """\
model = cnn
profile = reduced
synth_per_domain = 4
k = 2
t_min = 2
t_adv = 2
batch = 4
lr = 0.05
holdout = lab_B
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    (root / "exp.cfg").write_text(TINY)
    report = run_experiment(root / "exp.cfg", root / "out")
    return root, report


def test_experiment_artifacts(run_dir):
    root, report = run_dir
    out = root / "out"
    assert len(report.rows) == 5
    tsv = (out / "report.tsv").read_text().splitlines()
    assert sum(1 for ln in tsv if ln.startswith("cnn-ada[")) == 5
    assert sum(1 for ln in tsv if ln.startswith("selected[")) == 1
    for i in range(5):
        assert (out / "checkpoints" / f"member{i}.adaw").is_file()
        assert (out / "checkpoints" / f"member{i}.adaw.json").is_file()
        losses, costs = read_telemetry(out / "telemetry" / f"member{i}.tsv")
        assert len(losses) == len(costs) == 2
    assert (out / "figures" / "accuracy.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (out / "figures" / "training.png").is_file()
    index = json.loads((out / "checkpoints" / "members.json").read_text())
    assert index["selected"] == report.selected and index["holdout_id"] == 9
    assert EvalReport.from_jsonl((out / "report.jsonl").read_text()).to_tsv() == report.to_tsv()


def test_confusion_counts_conserved(run_dir):
    _, report = run_dir
    for row in report.rows:
        assert row.test.total == report.n_test
        for rate in (row.test.accuracy, row.test.precision, row.test.false_alarm):
            assert 0 <= rate <= 1


def test_saved_ensemble_reloads(run_dir):
    root, report = run_dir
    ens, index = load_ensemble(root / "out" / "checkpoints")
    assert [m.rho for m in ens] == [0.001, 0.01, 0.1, 1.0, 4.0]


def test_missing_data_dir_exit_code(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("data_dir = nowhere\n")
    with pytest.raises(DataError):
        run_experiment(cfg, tmp_path / "out")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out" / "report.tsv").exists()
    assert "sample directory not found" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("learning_rate = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_cli_synth_ingest_eval_report(tmp_path, run_dir, capsys):
    root, _ = run_dir
    data = tmp_path / "data"
    assert main(["synth", "--domains", "10", "--per-domain", "2", "--seed", "3", "--out", str(data)]) == 0
    files = sorted(data.glob("*.csiw"))
    assert len(files) == 20
    s = ci.read_sample(files[0])
    assert s.data.shape == (500, 60) and s.domain_id == 0

    streams = tmp_path / "streams"
    assert main(["synth", "--domains", "1", "--per-domain", "1", "--format", "csir", "--duration", "20",
                 "--out", str(streams)]) == 0
    (stream,) = streams.glob("*.csir")
    ingested = tmp_path / "ingested"
    assert main(["ingest", "--in", str(stream), "--out", str(ingested), "--label", "1",
                 "--domain-id", "7"]) == 0
    samples = [ci.read_sample(p) for p in sorted(ingested.glob("*.csiw"))]
    assert len(samples) == 2 and all(x.label == 1 and x.domain_id == 7 for x in samples)

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint-dir", str(root / "out" / "checkpoints"), "--data", str(data),
                 "--out", str(ev)]) == 0
    report = EvalReport.from_jsonl((ev / "report.jsonl").read_text())
    assert report.n_test == 20 and all(r.test.total == 20 for r in report.rows)

    capsys.readouterr()
    image = tmp_path / "h.ppm"
    assert main(["report", str(root / "out"), "--sample", str(files[0]), "--image", str(image)]) == 0
    printed = capsys.readouterr().out
    assert "selected[" in printed and "figure:" in printed
    assert image.read_bytes().startswith(b"P6\n500 60\n255\n")


def test_cli_bad_stream_is_validation_failure(tmp_path):
    bad = tmp_path / "bad.csir"
    bad.write_bytes(b"CSIR\x01\x00\x05\x00\x00\x00" + bytes(100))
    assert main(["ingest", "--in", str(bad), "--out", str(tmp_path / "o"), "--label", "0",
                 "--domain-id", "0"]) == 1


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 11 and all(ln.startswith("PASS") for ln in lines)


def test_evaluate_checkpoints_missing_index(tmp_path):
    with pytest.raises(DataError):
        evaluate_checkpoints(tmp_path, tmp_path, tmp_path / "o")


def test_format_report_aligns(run_dir):
    _, report = run_dir
    lines = format_report(report).splitlines()
    assert lines[0].startswith("# kind=cnn holdout=lab_B")
    assert lines[1].split()[0] == "model"


def test_ppm_encoding(tmp_path):
    rgb = np.array([[[255, 0, 0], [0, 255, 0]]], dtype=np.uint8)
    assert encode_ppm(rgb) == b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0])
    flat = heatmap_rgb(np.ones((3, 4)))
    assert flat.shape == (3, 4, 3) and len({tuple(p) for p in flat.reshape(-1, 3)}) == 1
    ramp = heatmap_rgb(np.arange(12.0).reshape(3, 4))
    assert not np.array_equal(ramp[0, 0], ramp[-1, -1])
    path = write_heatmap_ppm(np.zeros((500, 60)), tmp_path / "z.ppm")
    assert path.read_bytes()[:13] == b"P6\n500 60\n255"
    with pytest.raises(ValueError):
        heatmap_rgb(np.zeros(3))
