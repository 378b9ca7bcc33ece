import json

import numpy as np
import pytest

from apnea_ecg import wfdb_io
from apnea_ecg.cli import main


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--n-train", "2", "--n-test", "1", "--minutes", "10"]) == 0
    return d


@pytest.fixture(scope="module")
def features_out(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    assert main(["features", "--dataset-dir", str(synth_dir), "--output-dir", str(out)]) == 0
    return out


def test_ingest_empty_dir(tmp_path, capsys):
    assert main(["ingest", str(tmp_path)]) == 0
    assert "0 records" in capsys.readouterr().out


def test_ingest_missing_dir(tmp_path):
    assert main(["ingest", str(tmp_path / "nope")]) == 2


def test_ingest_lists_records(synth_dir, tmp_path):
    js = tmp_path / "inv.json"
    assert main(["ingest", str(synth_dir), "--json", str(js)]) == 0
    inv = json.loads(js.read_text())
    assert [r["record"] for r in inv["records"]] == ["a01", "a02", "x01"]
    assert all(r["labeled_minutes"] == 10 for r in inv["records"])


def test_ingest_corrupt_record(synth_dir, tmp_path):
    for f in synth_dir.iterdir():
        (tmp_path / f.name).write_bytes(f.read_bytes())
    dat = tmp_path / "a02.dat"
    dat.write_bytes(dat.read_bytes()[:-7])
    assert main(["ingest", str(tmp_path)]) == 1


def test_features_six_segments_per_record(features_out):
    rep = json.loads((features_out / "reconciliation.json").read_text())
    assert rep["train"]["n_segments"] == 12 and rep["test"]["n_segments"] == 6
    assert rep["train"]["rejected_context"] == 8
    assert rep["train"]["unexplained"] == 0
    segs = wfdb_io.read_feature_file(features_out / "features" / "train_rs.apnf")
    assert [s.minute_index for s in segs[:6]] == [2, 3, 4, 5, 6, 7]
    assert "reference total 16709" in (features_out / "reconciliation.txt").read_text()


def test_features_rerun_identical(synth_dir, features_out, tmp_path):
    # second run against a fresh output dir, and a cached run in the first
    assert main(["features", "--dataset-dir", str(synth_dir), "--output-dir", str(tmp_path), "--jobs", "2"]) == 0
    a = (features_out / "features" / "train_rs.apnf").read_bytes()
    assert (tmp_path / "features" / "train_rs.apnf").read_bytes() == a
    assert main(["features", "--dataset-dir", str(synth_dir), "--output-dir", str(features_out)]) == 0
    assert (features_out / "features" / "train_rs.apnf").read_bytes() == a
    assert any((features_out / "beats").glob("a01-*.npz"))


def test_features_r_only_and_csv(synth_dir, tmp_path):
    assert main(["features", "--dataset-dir", str(synth_dir), "--output-dir", str(tmp_path),
                 "--feature-set", "r", "--csv"]) == 0
    segs = wfdb_io.read_feature_file(tmp_path / "features" / "test_r.apnf")
    assert segs[0].channels.shape == (2, 900)
    assert (tmp_path / "features" / "test_r.csv").exists()


def test_features_partial_failure(synth_dir, tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    for f in synth_dir.iterdir():
        (d / f.name).write_bytes(f.read_bytes())
    (d / "a02.dat").write_bytes(b"\x00" * 10)
    assert main(["features", "--dataset-dir", str(d), "--output-dir", str(tmp_path / "o")]) == 1
    rep = json.loads((tmp_path / "o" / "reconciliation.json").read_text())
    assert [f["record"] for f in rep["failed"]] == ["a02"]


def test_no_drop_boundary_is_config_error(synth_dir, tmp_path):
    assert main(["features", "--dataset-dir", str(synth_dir), "--output-dir", str(tmp_path),
                 "--no-drop-boundary"]) == 2


def test_config_file(synth_dir, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[pipeline]\ndataset_dir = "{synth_dir}"\noutput_dir = "{tmp_path / "o"}"\nfeature_set = "r"\n')
    assert main(["features", "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "features" / "train_r.apnf").exists()
    cfg.write_text("[pipeline]\nbogus = 1\n")
    assert main(["features", "--config", str(cfg)]) == 2


def test_stats_histograms(features_out, tmp_path):
    f = features_out / "features" / "train_rs.apnf"
    assert main(["stats", str(f), "--output-dir", str(tmp_path)]) == 0
    rows = (tmp_path / "stats" / "hist_r_amp.csv").read_text().splitlines()
    assert rows[0] == "channel,class,bin,bin_lo,bin_hi,count"
    segs = wfdb_io.read_feature_file(f)
    for cls in ("sa", "non_sa"):
        n = sum(s.label == (cls == "sa") for s in segs)
        total = sum(int(r.split(",")[-1]) for r in rows[1:] if r.split(",")[1] == cls)
        assert total == 900 * n
    summary = json.loads((tmp_path / "stats" / "summary.json").read_text())
    assert summary["r_amp"]["sa"]["mean"] < summary["r_amp"]["non_sa"]["mean"]


def test_train_eval_and_mismatch(features_out, tmp_path, synth_dir):
    ck = tmp_path / "m.ckpt"
    feats = features_out / "features"
    assert main(["train", "--features", str(feats / "train_rs.apnf"), "--checkpoint", str(ck),
                 "--epochs", "3", "--batch-size", "8"]) == 0
    js = tmp_path / "r.json"
    assert main(["eval", "--features", str(feats / "test_rs.apnf"), "--checkpoint", str(ck), "--json", str(js)]) == 0
    rep = json.loads(js.read_text())
    assert rep["counts"]["tp"] + rep["counts"]["fn"] + rep["counts"]["tn"] + rep["counts"]["fp"] == 6
    main(["features", "--dataset-dir", str(synth_dir), "--output-dir", str(tmp_path), "--feature-set", "r"])
    assert main(["eval", "--features", str(tmp_path / "features" / "test_r.apnf"), "--checkpoint", str(ck)]) == 2
    assert main(["eval", "--features", str(feats / "test_rs.apnf"), "--checkpoint", str(tmp_path / "none")]) == 2


def test_train_seeds(features_out, tmp_path):
    feats = str(features_out / "features" / "train_rs.apnf")
    paths = []
    for seed, name in ((1, "a"), (1, "b"), (2, "c")):
        p = tmp_path / f"{name}.ckpt"
        assert main(["train", "--features", feats, "--checkpoint", str(p), "--epochs", "2",
                     "--batch-size", "8", "--seed", str(seed)]) == 0
        paths.append(p.read_bytes())
    assert paths[0] == paths[1] and paths[0] != paths[2]


def test_ablate_from_reports(tmp_path, capsys):
    r = {"accuracy": 0.9028, "sensitivity": 0.9, "specificity": 0.9, "f1_sa": 0.9, "f1_non_sa": 0.9,
         "counts": {"tp": 10, "tn": 10, "fp": 1, "fn": 1}}
    rs = dict(r, accuracy=0.9113)
    (tmp_path / "r.json").write_text(json.dumps(r))
    (tmp_path / "rs.json").write_text(json.dumps(rs))
    assert main(["ablate", "--reports", str(tmp_path / "r.json"), str(tmp_path / "rs.json")]) == 0
    assert "+0.85" in capsys.readouterr().out
    rs["counts"] = {"tp": 10, "tn": 9, "fp": 1, "fn": 1}
    (tmp_path / "rs.json").write_text(json.dumps(rs))
    assert main(["ablate", "--reports", str(tmp_path / "r.json"), str(tmp_path / "rs.json")]) == 2


def test_synth_format_16(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n-train", "1", "--n-test", "0", "--minutes", "5",
                 "--fmt", "16"]) == 0
    rec = wfdb_io.load_record(tmp_path, "a01")
    assert rec.n_labeled_minutes == 5 and np.abs(rec.samples).max() > 0.5
