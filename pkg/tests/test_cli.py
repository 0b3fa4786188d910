import csv

import pytest

from anyxr.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from anyxr.joint import MODEL_STAGES
from tinyrun import TINY_CONFIG


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    data, run = root / "data", root / "run"
    assert main(["synth", "--n", "40", "--seed", "1", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    for stage in MODEL_STAGES + ("oracle",):
        assert main(["train", "--stage", stage, "--data", str(data), "--out", str(run), "--config", str(cfg)]) == 0
    return root, data, run


def test_synth_is_deterministic_and_echoes_config(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n", "6", "--seed", "2", "--size", "16", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "meta.csv").read_bytes() == (tmp_path / "b" / "meta.csv").read_bytes()
    assert (tmp_path / "a" / "frontal" / "s00003.png").read_bytes() == \
        (tmp_path / "b" / "frontal" / "s00003.png").read_bytes()
    assert "seed = 2" in (tmp_path / "a" / "config.ini").read_text()


def test_usage_errors_exit_2(tmp_path, cli_run):
    _, data, run = cli_run
    assert main(["synth", "--n", "0", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["train", "--stage", "ldm_Q", "--data", str(data), "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert main(["train", "--stage", "joint_FL", "--data", str(data), "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert main(["generate", "--from", "T", "--to", "T", "--run", str(run), "--data", str(data),
                 "--out", str(tmp_path / "g")]) == EXIT_USAGE
    assert main(["evaluate", "--real", str(data), "--gen", str(tmp_path), "--metrics", "psnr",
                 "--out", str(tmp_path / "m.csv")]) == EXIT_USAGE


def test_data_errors_exit_3(tmp_path, cli_run):
    _, data, run = cli_run
    assert main(["train", "--stage", "bridging", "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "r")]) == EXIT_DATA
    (tmp_path / "bad.adxr").write_bytes(b"nope")
    assert main(["evaluate", "--real", str(data), "--gen", str(data), "--oracle", str(tmp_path / "bad.adxr"),
                 "--out", str(tmp_path / "m.csv")]) == EXIT_DATA


def test_generate_writes_outputs_and_provenance(tmp_path, cli_run):
    _, data, run = cli_run
    out = tmp_path / "gen"
    assert main(["generate", "--from", "T", "--to", "F,L", "--run", str(run), "--data", str(data),
                 "--n", "3", "--seed", "9", "--out", str(out)]) == EXIT_OK
    for view in ("frontal", "lateral"):
        assert sorted(p.name for p in (out / view).glob("*.npy")) == ["g00000.npy", "g00001.npy", "g00002.npy"]
    with open(out / "generation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["setting"] for r in rows] == ["T→F+L"] * 3 and {r["seed"] for r in rows} == {"9"}


def test_evaluate_selected_metric_group_only(tmp_path, cli_run):
    _, data, run = cli_run
    gen = tmp_path / "gen"
    assert main(["generate", "--from", "T", "--to", "F", "--run", str(run), "--data", str(data), "--n", "4",
                 "--out", str(gen)]) == EXIT_OK
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--real", str(data), "--gen", str(gen), "--metrics", "fid",
                 "--oracle", str(run / "checkpoints" / "oracle.adxr"), "--run", str(run),
                 "--out", str(out)]) == EXIT_OK
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["metric"].startswith("fid") for r in rows)
    assert {r["setting"] for r in rows} == {"T→F"}


def test_bad_worker_count_is_a_usage_error(tmp_path, monkeypatch):
    monkeypatch.setenv("ANYXR_WORKERS", "zero")
    assert main(["synth", "--n", "2", "--out", str(tmp_path / "d")]) == EXIT_USAGE
