import csv
import json
import subprocess
import sys

import pytest

from serinv import cli
from serinv.data import SplitManifest, read_serf

TINY_CONFIG = {
    "model": "tiny",
    "train": {"strategy": "DAT", "epochs": 2, "learning_rate": 0.05, "batch_size": 16},
    "data": {"synthetic": {"num_speakers": 10, "utterances_per_speaker": 12, "feature_dim": 6,
                           "num_emotions": 2, "length_range": [12, 24], "template_scale": 1.0, "seed": 1}},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def run(*argv):
    return cli.run([str(a) for a in argv])


def test_pipeline_gen_train_evaluate(tmp_path, config_file, capsys):
    data_dir, run_dir = tmp_path / "data", tmp_path / "run"
    assert run("gen-data", "--config", config_file, "--fractions", 0.6, 0.2, 0.2, "--output-dir", data_dir) == 0
    assert {p.name for p in data_dir.iterdir()} == {"data.serf", "split.json", "speakers.json",
                                                    "synthetic_spec.json"}
    ds = read_serf(data_dir / "data.serf")
    assert len(ds.utterances) == 120 and ds.feature_dim == 6

    assert run("train", "--config", config_file, "--data", data_dir / "data.serf", "--split",
               data_dir / "split.json", "--output-dir", run_dir) == 0
    assert {"checkpoint.serm", "history.csv", "split.json", "config.json"} <= {p.name for p in run_dir.iterdir()}
    assert not (run_dir / "timing.csv").exists()
    history = list(csv.reader(open(run_dir / "history.csv")))
    assert len(history) == 3

    args = ["--checkpoint", run_dir / "checkpoint.serm", "--data", data_dir / "data.serf",
            "--split", data_dir / "split.json"]
    assert run("evaluate", *args, "--output-dir", run_dir, "--confusion", run_dir / "conf.csv") == 0
    metrics = json.loads((run_dir / "metrics_test.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0 and metrics["subset"] == "test"
    assert sum(map(sum, metrics["confusion"])) == metrics["total"] == 24
    assert (run_dir / "conf.csv").read_text().startswith("truth,pred_happy,pred_sad")

    assert run("embed", *args, "--out", run_dir / "emb.csv") == 0
    header = (run_dir / "emb.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["id", "emotion", "speaker", "e0"] and len(header) == 3 + 16
    assert run("probe", "--embeddings", run_dir / "emb.csv", "--out", run_dir / "probe.json") == 0
    probe = json.loads((run_dir / "probe.json").read_text())
    assert probe["num_probe_speakers"] == 2 and probe["chance_level"] == 0.5
    assert run("project", "--embeddings", run_dir / "emb.csv", "--out", run_dir / "proj.csv") == 0
    assert (run_dir / "proj.csv").read_text().splitlines()[0] == "id,emotion,speaker,pc1,pc2"


def test_overlapping_split_exits_nonzero_and_names_speakers(tmp_path, config_file, capsys):
    run("gen-data", "--config", config_file, "--fractions", 0.6, 0.2, 0.2, "--output-dir", tmp_path)
    ds = read_serf(tmp_path / "data.serf")
    m = SplitManifest.load(tmp_path / "split.json")
    moved = m.validation[0]
    bad = SplitManifest(m.train + [moved], m.validation[1:], m.test)
    bad.save(tmp_path / "bad.json")
    speaker = ds.speaker_ids[ds.select([moved])[0].speaker]
    code = run("train", "--config", config_file, "--data", tmp_path / "data.serf", "--split",
               tmp_path / "bad.json", "--output-dir", tmp_path / "run")
    err = capsys.readouterr().err
    assert code != 0
    assert "error=SplitContractError command=train" in err and speaker in err
    assert not (tmp_path / "run" / "checkpoint.serm").exists()


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**TINY_CONFIG, "train": {"epochs": 1, "warmup": 3}}))
    assert run("train", "--config", path, "--output-dir", tmp_path) == 2
    err = capsys.readouterr().err
    assert "error=ConfigError" in err and "warmup" in err
    path.write_text(json.dumps({"optimizer": {}}))
    assert run("experiment", "--config", path) == 2


def test_flags_override_config(config_file):
    args = cli.build_parser().parse_args(["train", "--config", str(config_file), "--epochs", "7",
                                          "--strategy", "CGT", "--cgt-alpha", "0.25"])
    cfg = cli.apply_overrides(cli.load_config(args.config), args)
    assert (cfg.train.epochs, cfg.train.strategy.value, cfg.train.cgt_alpha) == (7, "CGT", 0.25)
    assert cfg.train.learning_rate == 0.05


def test_invalid_json_and_bad_flag_values(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert run("train", "--config", path) == 2
    assert "invalid JSON" in capsys.readouterr().err
    path.write_text(json.dumps({**TINY_CONFIG, "train": {"cgt_alpha": 2.0}}))
    assert run("train", "--config", path) == 2


@pytest.mark.parametrize("command", [None, "gen-data", "split", "train", "evaluate", "embed", "probe", "project",
                                     "gradcheck", "experiment"])
def test_help(command, capsys):
    argv = ["--help"] if command is None else [command, "--help"]
    with pytest.raises(SystemExit) as info:
        cli.run(argv)
    assert info.value.code == 0
    assert "usage: serinv" in capsys.readouterr().out


def test_module_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "serinv", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("serinv ")


def test_output_dir_from_environment(tmp_path, monkeypatch, config_file):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env_out"))
    assert run("gen-data", "--config", config_file) == 0
    assert (tmp_path / "env_out" / "data.serf").exists()


def test_split_and_cv_folds(tmp_path, config_file):
    run("gen-data", "--config", config_file, "--output-dir", tmp_path)
    assert run("split", "--data", tmp_path / "data.serf", "--fractions", 0.8, 0.1, 0.1,
               "--output-dir", tmp_path / "s") == 0
    assert SplitManifest.load(tmp_path / "s" / "split.json").train
    assert run("split", "--data", tmp_path / "data.serf", "--cv-folds", 5, "--metadata",
               tmp_path / "speakers.json", "--output-dir", tmp_path / "cv") == 0
    assert len(list((tmp_path / "cv").glob("fold*_*.json"))) == 10


def test_cv_layout_error_exit_code(tmp_path, config_file, capsys):
    run("gen-data", "--config", config_file, "--num-speakers", 9, "--output-dir", tmp_path)
    assert run("split", "--data", tmp_path / "data.serf", "--cv-folds", 5, "--metadata",
               tmp_path / "speakers.json", "--output-dir", tmp_path / "cv") == 2
    assert "error=LayoutError" in capsys.readouterr().err


def test_atomic_path_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with cli.atomic_path(target) as tmp:
            tmp.write_text("half")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []
    with cli.atomic_path(target) as tmp:
        tmp.write_text("done")
    assert target.read_text() == "done" and list(tmp_path.iterdir()) == [target]


def test_tiny_experiment_summary_and_rerun(tmp_path, config_file):
    def go(out):
        assert run("experiment", "--config", config_file, "--seeds", 0, 1, "--epochs", 1,
                   "--output-dir", out) == 0
        return out

    a, b = go(tmp_path / "a"), go(tmp_path / "b")
    rows = list(csv.reader(open(a / "summary.csv")))
    assert rows[0] == ["strategy", "val", "test"]
    assert [r[0] for r in rows[1:]] == ["SER_ONLY", "MTL", "DAT", "CGT"]
    assert all("±" in cell for r in rows[1:] for cell in r[1:])
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    assert len(list(csv.reader(open(a / "cells.csv")))) == 1 + 8
    assert json.loads((a / "config.json").read_text())["experiment"]["seeds"] == [0, 1]
