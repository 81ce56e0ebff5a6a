import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from detcal import cli
from detcal.toydet import ToyDetector

DATA = Path(__file__).parent / "data"
HAND = ["--detections", str(DATA / "hand_dets.json"), "--ground-truth", str(DATA / "hand_gt.json")]


def run(argv):
    return cli.main([str(a) for a in argv])


def test_eval_hand_case_golden(tmp_path):
    out = tmp_path / "report.json"
    assert run(["eval", *HAND, "--dims", "conf", "--conf-bins", 2, "--out", out]) == 0
    assert out.read_bytes() == (DATA / "hand_report.json").read_bytes()


def test_eval_default_grid_reports_all_fields(tmp_path):
    out = tmp_path / "r.json"
    assert run(["eval", *HAND, "--out", out]) == 0
    rep = json.loads(out.read_text())
    assert rep["dims"] == ["conf", "cx", "cy", "w", "h"]
    assert rep["n_detections"] == 4
    assert sum(b["count"] for b in rep["bins"]) == 4


def test_eval_conf_only_ece_equals_dece(tmp_path):
    out = tmp_path / "r.json"
    run(["eval", *HAND, "--dims", "conf", "--out", out])
    rep = json.loads(out.read_text())
    assert rep["ece"] == rep["dece"]


def _perfect_files(tmp_path):
    gt = json.loads((DATA / "hand_gt.json").read_text())
    dets = [{"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}
            for a in gt["annotations"]]
    p = tmp_path / "perfect.json"
    p.write_text(json.dumps(dets))
    return p


def test_eval_perfect_detections_zero(tmp_path):
    out = tmp_path / "r.json"
    dets = _perfect_files(tmp_path)
    assert run(["eval", "--detections", dets, "--ground-truth", DATA / "hand_gt.json", "--out", out]) == 0
    assert json.loads(out.read_text())["dece"] == 0.0


def test_eval_empty_exit_code(tmp_path, capsys):
    assert run(["eval", *HAND, "--min-score", 0.95]) == 2
    assert "no detections" in capsys.readouterr().err


def test_eval_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text((DATA / "hand_dets.json").read_text().replace('"score": 0.3', '"score": -1'))
    assert run(["eval", "--detections", bad, "--ground-truth", DATA / "hand_gt.json"]) == 1
    assert f"{bad}:4:" in capsys.readouterr().err
    assert run(["eval", "--detections", tmp_path / "missing.json", "--ground-truth", DATA / "hand_gt.json"]) == 1


def test_eval_usage_errors():
    with pytest.raises(SystemExit) as exc:
        run(["eval", *HAND, "--dims", "conf,depth"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run(["eval", *HAND, "--dims", "cx,conf"])


def test_threads_env(monkeypatch, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    monkeypatch.setenv("DETCAL_THREADS", "1")
    run(["eval", *HAND, "--out", a])
    monkeypatch.setenv("DETCAL_THREADS", "4")
    run(["eval", *HAND, "--out", b])
    assert a.read_bytes() == b.read_bytes()
    monkeypatch.setenv("DETCAL_THREADS", "many")
    assert run(["eval", *HAND]) == 1


def test_reliability_golden(tmp_path):
    out = tmp_path / "rel.csv"
    assert run(["diagram", "--kind", "reliability", "--bins", 2, *HAND, "--out", out]) == 0
    assert out.read_bytes() == (DATA / "hand_reliability.csv").read_bytes()
    run(["diagram", "--kind", "reliability", *HAND, "--out", out])
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 10
    assert [r["count"] for r in rows if r["conf"]] == ["1", "1", "1", "1"]


def test_histogram_conserves_count(tmp_path):
    out = tmp_path / "h.csv"
    run(["diagram", "--kind", "histogram", *HAND, "--out", out])
    text = out.read_text()
    assert text.splitlines()[0] == "bin_center,count,avg_confidence,avg_precision"
    rows = list(csv.DictReader(io.StringIO(text)))
    assert sum(int(r["count"]) for r in rows) == 4


def test_curve_and_heatmap(tmp_path):
    out = tmp_path / "c.csv"
    run(["diagram", "--kind", "curve", "--dim", "cx", *HAND, "--out", out])
    assert out.read_text().splitlines()[0] == "bin_center,prec,conf,partial_dece,count"
    run(["diagram", "--kind", "heatmap", "--dims", "w,h", "--bins", 1, *HAND, "--out", out])
    assert out.read_text() == "row,col,value\n0,0,0.09999999999999998\n"
    assert b"\r" not in out.read_bytes()


def test_diagram_usage_errors():
    for argv in (["--kind", "pie"], ["--kind", "curve"], ["--kind", "curve", "--dim", "conf"],
                 ["--kind", "heatmap", "--dims", "cx"], ["--kind", "reliability", "--bins", 0]):
        with pytest.raises(SystemExit) as exc:
            run(["diagram", *argv, *HAND])
        assert exc.value.code == 2


def _train(tmp_path, name, *extra):
    model, log = tmp_path / f"{name}.json", tmp_path / f"{name}.csv"
    argv = ["train", "--n-train", 4, "--n-val", 2, "--out-model", model, "--out-log", log, *extra]
    assert run(argv) == 0
    return model, log


def test_train_zero_epochs_is_initialization(tmp_path):
    model, log = _train(tmp_path, "m", "--epochs", 0, "--seed", 3)
    ckpt = json.loads(model.read_text())
    loaded = ToyDetector.from_dict(ckpt["model"])
    init = ToyDetector.init(3, seed=3)
    assert all(np.array_equal(loaded.params[k], init.params[k]) for k in init.params)
    lines = log.read_text().splitlines()
    assert lines[0] == "epoch,task_loss,l_mcc,l_lc,dece,ap50,dece_shift,ap50_shift"
    assert len(lines) == 2


def test_train_log_is_byte_identical(tmp_path):
    _, a = _train(tmp_path, "a", "--epochs", 1, "--mode", "mccl", "--mc-passes", 2)
    _, b = _train(tmp_path, "b", "--epochs", 1, "--mode", "mccl", "--mc-passes", 2)
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 3


def test_train_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--mode", "mccl", "--mc-passes", 1, "--out-model", tmp_path / "m.json"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run(["train", "--dropout", 1.5, "--out-model", tmp_path / "m.json"])


def test_detect_then_eval_round_trip(tmp_path):
    model, _ = _train(tmp_path, "m", "--epochs", 0)
    dets, gt = tmp_path / "d.json", tmp_path / "g.json"
    assert run(["detect", "--model", model, "--n-scenes", 3, "--score-threshold", 0.0,
                "--out-detections", dets, "--out-ground-truth", gt]) == 0
    recs = json.loads(dets.read_text())
    assert recs and all(len(r["logits"]) == 4 for r in recs)
    out = tmp_path / "r.json"
    assert run(["eval", "--detections", dets, "--ground-truth", gt, "--out", out]) == 0
    assert json.loads(out.read_text())["n_detections"] == len(recs)
    assert run(["detect", "--model", tmp_path / "nope.json", "--out-detections", dets,
                "--out-ground-truth", gt]) == 1


def test_ts_scale_recovery_and_apply(tmp_path):
    rng = np.random.default_rng(0)
    z = rng.normal(scale=2.0, size=(50_000, 3))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    y = (p.cumsum(axis=1) < rng.random(len(z))[:, None]).sum(axis=1).clip(max=2)
    (tmp_path / "z.json").write_text(json.dumps((2 * z).tolist()))
    (tmp_path / "y.json").write_text(json.dumps(y.tolist()))
    t = tmp_path / "t.json"
    assert run(["ts", "--logits", tmp_path / "z.json", "--labels", tmp_path / "y.json", "--out", t]) == 0
    assert json.loads(t.read_text())["temperature"] == pytest.approx(2.0, rel=0.02)

    one = tmp_path / "one.json"
    one.write_text('{"temperature": 1.0}')
    dets = [{"image_id": 1, "category_id": 0, "bbox": [1, 1, 5, 5], "score": float(np.exp(2) / (np.exp(2) + np.exp(0.5))),
             "logits": [2.0, 0.5]}]
    (tmp_path / "d.json").write_text(json.dumps(dets))
    out = tmp_path / "o.json"
    assert run(["apply-ts", "--temperature", one, "--detections", tmp_path / "d.json", "--out", out]) == 0
    got = json.loads(out.read_text())
    assert got[0]["score"] == pytest.approx(dets[0]["score"], abs=1e-15)
    assert got[0]["category_id"] == 0 and got[0]["bbox"] == [1, 1, 5, 5]


def test_ts_errors(tmp_path, capsys):
    (tmp_path / "z.json").write_text("[[1.0, 0.0],\n[0.0]]")
    (tmp_path / "y.json").write_text("[0, 1]")
    assert run(["ts", "--logits", tmp_path / "z.json", "--labels", tmp_path / "y.json"]) == 1
    assert "z.json:2:" in capsys.readouterr().err
    (tmp_path / "z.json").write_text("[[1.0, 0.0], [2.0, 0.0]]")
    (tmp_path / "y.json").write_text("[0, 0]")
    assert run(["ts", "--logits", tmp_path / "z.json", "--labels", tmp_path / "y.json"]) == 1
    assert "distinct" in capsys.readouterr().err


def test_apply_ts_missing_logits(tmp_path, capsys):
    t = tmp_path / "t.json"
    t.write_text('{"temperature": 2.0}')
    assert run(["apply-ts", "--temperature", t, *HAND[:2]]) == 1
    assert "hand_dets.json:3: detection 1 carries no logits" in capsys.readouterr().err
