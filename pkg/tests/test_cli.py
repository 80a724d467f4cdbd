import csv
import json

import numpy as np
import pytest

from pollutionnet.cli import main
from pollutionnet.data_io import read_stack, read_pgm, parse_kv

import malformed

TRAIN_CFG = "epochs = 2\npatch_size = 8\nembed_dim = 8\nheads = 2\nblocks = 1\nmlp_hidden = 8\n"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    d = root / "data"
    assert main(["synth", "--days", "12", "--seed", "4", "--out-dir", str(d)]) == 0
    fused = root / "fused" / "fused.gstk"
    assert main(["fuse", "--satellite", str(d / "satellite.gstk"), "--stations", str(d / "stations.csv"),
                 "--out", str(fused)]) == 0
    (root / "train.cfg").write_text(TRAIN_CFG)
    assert main(["train", "--fused", str(fused), "--stations", str(d / "stations.csv"), "--folds", "0,2",
                 "--config", str(root / "train.cfg"), "--out-dir", str(root / "train")]) == 0
    return root


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_outputs(pipeline):
    d = pipeline / "data"
    sat = read_stack(d / "satellite.gstk")
    assert sat.values.shape == (12, 49, 67) and not sat.mask.all()
    m = json.loads((d / "manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 4 and len(m["outputs"]) == 3


def test_fuse_report_and_mask(pipeline):
    fused = read_stack(pipeline / "fused" / "fused.gstk")
    rep = parse_kv((pipeline / "fused" / "fused.report.txt").read_text())
    assert int(rep["unfilled"]) == int((~fused.mask).sum())
    assert int(rep["copied"]) + int(rep["filled"]) == int(fused.mask.sum())
    m = json.loads((pipeline / "fused" / "manifest.json").read_text())
    assert m["params"]["max_neighbors"] == 8


def test_fuse_flag_beats_params_file(tmp_path, pipeline):
    d = pipeline / "data"
    (tmp_path / "p.txt").write_text("max_neighbors = 3\ntau_spatial = 2.5\n")
    out = tmp_path / "f.gstk"
    assert main(["fuse", "--satellite", str(d / "satellite.gstk"), "--stations", str(d / "stations.csv"),
                 "--params-file", str(tmp_path / "p.txt"), "--max-neighbors", "5", "--out", str(out)]) == 0
    params = json.loads((tmp_path / "manifest.json").read_text())["params"]
    assert params["max_neighbors"] == 5 and params["tau_spatial"] == 2.5


def test_unknown_parameter_is_an_error(tmp_path, pipeline, capsys):
    (tmp_path / "p.txt").write_text("max_neigbors = 3\n")
    d = pipeline / "data"
    code = main(["fuse", "--satellite", str(d / "satellite.gstk"), "--stations", str(d / "stations.csv"),
                 "--params-file", str(tmp_path / "p.txt"), "--out", str(tmp_path / "f.gstk")])
    assert code == 1 and "max_neigbors" in capsys.readouterr().err


def test_train_outputs(pipeline):
    t = pipeline / "train"
    assert (t / "fold0.ckpt").exists() and (t / "fold2.ckpt").exists() and not (t / "fold1.ckpt").exists()
    hist = _rows(t / "history.csv")
    assert {r["metric"] for r in hist} == {"train_mse", "val_mse"}
    assert len(hist) == 2 * 2 * 2
    rows = _rows(t / "metrics.csv")
    assert [r["fold"] for r in rows].count("avg") == 4
    params = json.loads((t / "manifest.json").read_text())["params"]
    assert params["train"]["learning_rate"] == 0.01 and params["train"]["batch_size"] == 8
    assert params["vit"]["embed_dim"] == 8


def test_eval_matches_train_metrics(pipeline, tmp_path):
    d, t = pipeline / "data", pipeline / "train"
    assert main(["eval", "--checkpoint", str(t / "fold0.ckpt"), "--fused", str(pipeline / "fused" / "fused.gstk"),
                 "--stations", str(d / "stations.csv"), "--indices", "0:val", "--out-dir", str(tmp_path)]) == 0
    got = {r["metric"]: float(r["value"]) for r in _rows(tmp_path / "metrics.csv")}
    want = {r["metric"]: float(r["value"]) for r in _rows(t / "metrics.csv") if r["fold"] == "0"}
    assert got == want
    assert read_stack(tmp_path / "predictions.gstk").mask.all()


def test_baseline_and_export(pipeline, tmp_path):
    d = pipeline / "data"
    fused = pipeline / "fused" / "fused.gstk"
    assert main(["baseline", "--fused", str(fused), "--stations", str(d / "stations.csv"),
                 "--out-dir", str(tmp_path / "b")]) == 0
    assert len(_rows(tmp_path / "b" / "metrics.csv")) == 6 * 4
    assert main(["export", "--pred", str(fused), "--day", "3", "--stations", str(d / "stations.csv"),
                 "--out-dir", str(tmp_path / "e")]) == 0
    assert read_pgm(tmp_path / "e" / "day3.pgm").shape == (49, 67)
    assert _rows(tmp_path / "e" / "scatter.csv")
    assert main(["export", "--pred", str(fused), "--day", "99", "--out-dir", str(tmp_path / "e")]) == 1


def test_defaults(capsys):
    assert main(["defaults", "train"]) == 0
    d = parse_kv(capsys.readouterr().out)
    assert d["epochs"] == "30" and d["learning_rate"] == "0.01" and d["batch_size"] == "8"
    assert d["patch_size"] == "16" and d["blocks"] == "12"
    assert main(["defaults", "fuse"]) == 0
    assert "huber_delta" in parse_kv(capsys.readouterr().out)


@pytest.mark.parametrize("sub", ["data", "fused", "train"])
def test_rerun_is_bit_identical(pipeline, sub):
    assert main(["rerun", "--manifest", str(pipeline / sub / "manifest.json")]) == 0


def test_rerun_detects_changed_output(pipeline, tmp_path):
    m = json.loads((pipeline / "fused" / "manifest.json").read_text())
    first = next(iter(m["outputs"]))
    m["outputs"][first] = "0" * 64
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    assert main(["rerun", "--manifest", str(tmp_path / "manifest.json")]) == 1


@pytest.mark.parametrize("name,buf,offset", malformed.stack_cases(), ids=lambda c: str(c)[:30])
def test_cli_rejects_malformed_stack(name, buf, offset, tmp_path, pipeline, capsys):
    (tmp_path / "bad.gstk").write_bytes(buf)
    code = main(["fuse", "--satellite", str(tmp_path / "bad.gstk"),
                 "--stations", str(pipeline / "data" / "stations.csv"), "--out", str(tmp_path / "o.gstk")])
    err = capsys.readouterr().err
    assert code == 1 and f"byte {offset}" in err and not (tmp_path / "o.gstk").exists()


@pytest.mark.parametrize("name,text,line", malformed.station_cases(), ids=lambda c: str(c)[:30])
def test_cli_rejects_malformed_stations(name, text, line, tmp_path, capsys):
    from pollutionnet.data_io import write_stack
    from pollutionnet.grid import FieldStack
    write_stack(FieldStack(malformed.SPEC, [0, 1, 2], np.ones((3, 4, 4))), tmp_path / "s.gstk")
    (tmp_path / "bad.csv").write_text(text)
    code = main(["fuse", "--satellite", str(tmp_path / "s.gstk"), "--stations", str(tmp_path / "bad.csv"),
                 "--out", str(tmp_path / "o.gstk")])
    err = capsys.readouterr().err
    assert code == 1 and f"line {line}" in err and not (tmp_path / "o.gstk").exists()
