import csv
import json

import pytest

from weakret import cli
from weakret import pipeline as pl
from weakret.config import parse_config
from weakret.voxcore import read_grid

SMALL = """
dataset.n_families = 2
dataset.n_prototypes_per_family = 2
dataset.n_scans_per_prototype = 4
proxy.resolution = 32
train.epochs = 2
train.batch_size = 4
train.calibration_size = 8
train.holdout_families = table
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "small.cfg"
    cfg_path.write_text(SMALL)
    data = root / "data"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(data)]) == 0
    return cfg_path, data


def _run(*args):
    return cli.main([str(a) for a in args])


def test_gen_data_manifest(workspace, tmp_path, capsys):
    cfg_path, data = workspace
    manifest = json.loads((data / "manifest.json").read_text())
    objs = manifest["objects"]
    assert sum(o["role"] == "cad" for o in objs) == 4
    assert sum(o["role"] == "scan" for o in objs) == 16
    assert sum(o["split"] == "test" for o in objs) == 8
    scan = next(o for o in objs if o["role"] == "scan")
    obj = read_grid(data / "grids" / f"{scan['id']}.wvox", id=scan["id"])
    assert obj.visibility is not None
    # rerun elsewhere gives an identical manifest
    other = tmp_path / "again"
    assert _run("gen-data", "--config", cfg_path, "--out", other) == 0
    assert pl.manifest_digest(other) == pl.manifest_digest(data)
    # non-empty output without --force
    assert _run("gen-data", "--config", cfg_path, "--out", other) == 2
    assert _run("gen-data", "--config", cfg_path, "--out", other, "--force") == 0


def test_full_pipeline(workspace, capsys):
    cfg_path, data = workspace
    common = ["--config", cfg_path, "--dataset", data]
    assert _run("train", *common) == 2  # no proxy cache yet
    assert _run("compute-proxy", *common) == 0
    out = capsys.readouterr().out
    assert "computed" in out
    lo, mean, hi = (float(x) for x in out.split("min ")[1].replace("mean", "").replace("max", "").split())
    assert 0 <= lo <= mean <= hi <= 1
    assert _run("compute-proxy", *common) == 0
    assert "cache hit" in capsys.readouterr().out

    assert _run("train", *common) == 0
    cfg = parse_config(SMALL)
    ds = pl.load_dataset(data)
    run = pl.run_dir(cfg, ds)
    assert run.name == cfg.hexdigest()[:12]
    log = [json.loads(line) for line in (run / "train_log.ndjson").read_text().splitlines()]
    assert len(log) == 2 * 2 and set(log[0]) == {"step", "epoch", "loss", "wall_ms", "seed"}
    assert (run / "checkpoint_final.wckp").exists() and (run / "checkpoint_best.wckp").exists()

    assert _run("embed", *common) == 0
    assert (run / "embeddings.wemb").exists()
    assert _run("retrieve", *common) == 0
    with open(run / "retrieval.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == 8
    assert _run("eval", *common) == 0
    report = json.loads((run / "eval_report.json").read_text())
    assert list(report) == ["top1", "top5", "cat", "iou_top1", "iou_top5", "rq", "mrr", "per_family"]
    assert _run("eval", *common, "--oracle", "proxy") == 0
    assert (run / "eval_report_oracle.json").exists()
    capsys.readouterr()
    assert _run("report", *common) == 0
    out = capsys.readouterr().out
    assert "learned" in out and "proxy oracle" in out


def test_checkpoint_config_mismatch(workspace, tmp_path):
    cfg_path, data = workspace
    ds = pl.load_dataset(data)
    ckpt = pl.run_dir(parse_config(SMALL), ds) / "checkpoint_final.wckp"
    if not ckpt.exists():
        pytest.skip("pipeline test did not run")
    other = tmp_path / "other.cfg"
    other.write_text(SMALL + "train.lr = 0.001\n")
    assert _run("eval", "--config", other, "--dataset", data, "--checkpoint", ckpt) == 2
    # a config with a different dataset section cannot use this dataset
    third = tmp_path / "third.cfg"
    third.write_text(SMALL + "dataset.seed = 5\n")
    assert _run("compute-proxy", "--config", third, "--dataset", data) == 2


def test_usage_errors(capsys):
    assert pytest.raises(SystemExit, cli.main, []).value.code == 1
    assert pytest.raises(SystemExit, cli.main, ["frobnicate"]).value.code == 1
    assert pytest.raises(SystemExit, cli.main, ["train"]).value.code == 1


def test_missing_dataset(tmp_path):
    assert _run("compute-proxy", "--dataset", tmp_path / "nope") == 2


def test_bad_config_file(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.loss = hinge\n")
    assert _run("gen-data", "--config", bad, "--out", tmp_path / "d") == 2


def test_bench(capsys):
    assert _run("bench", "--samples", "100,400", "--repeats", "5") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
