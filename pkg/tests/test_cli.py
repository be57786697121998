import csv
import json
from pathlib import Path

import pytest

from qdtlab import datagen
from qdtlab.cli import main

TINY = ["--set", "model.d_model=8", "--set", "model.n_heads=2", "--set", "model.n_layers=1",
        "--set", "env.max_steps=30", "--set", "train.batch_size=8", "--set", "eval.max_steps=20"]


def run(args, run_dir):
    return main([*args, "--run-dir", str(run_dir)])


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert run(["gen-data", "--tier", "medium", "--n-trajectories", "5", *TINY], d) == 0
    for v in ("standard", "quantum", "q-attn", "q-ff"):
        assert run(["train", "--variant", v, "--epochs", "1", *TINY], d) == 0
    return d


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_gen_data_default_tier_size(tmp_path, capsys):
    assert run(["gen-data", "--tier", "expert", "--set", "env.max_steps=2"], tmp_path) == 0
    ds = datagen.load(tmp_path / "data" / "expert.jsonl")
    assert len(ds.trajectories) == 300
    out = capsys.readouterr().out
    assert "300 trajectories" in out and "mean return" in out


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["gen-data", "--tier", "random", "--n-trajectories", "4", "--out", str(tmp_path / f"{name}.jsonl"),
                    *TINY], tmp_path) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_unknown_tier_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        run(["gen-data", "--tier", "gold"], tmp_path)
    assert e.value.code == 2


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["gen-data", "--tier", "medium", "--n-trajectories", "1", "--out", str(blocker / "d.jsonl"),
                *TINY], tmp_path) == 2


def test_unknown_variant_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        run(["train", "--variant", "hyper"], tmp_path)
    assert e.value.code == 2


def test_missing_dataset(tmp_path, capsys):
    assert run(["train", "--variant", "standard", "--dataset", str(tmp_path / "none.jsonl")], tmp_path) == 2
    assert "dataset not found" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path):
    assert run(["eval", "--checkpoint", str(tmp_path / "none.ckpt")], tmp_path) == 2


def test_bad_override(tmp_path, capsys):
    assert run(["gen-data", "--tier", "medium", "--set", "train.nonsense=1"], tmp_path) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_train_prints_defaults_and_logs_one_epoch(trained_run, capsys, tmp_path):
    assert run(["train", "--variant", "quantum", "--epochs", "1",
                "--dataset", str(trained_run / "data" / "medium.jsonl"), "--set", "model.d_model=8",
                "--set", "model.n_heads=2", "--set", "model.n_layers=1"], tmp_path) == 0
    out = capsys.readouterr().out
    for line in ("train.learning_rate = 0.0001", "train.weight_decay = 0.0001", "train.batch_size = 64",
                 "train.grad_clip_norm = 1.0", "train.seed = 42"):
        assert line in out
    log = (tmp_path / "logs" / "train_quantum.jsonl").read_text().splitlines()
    assert len(log) == 1 and json.loads(log[0])["epoch"] == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_code(trained_run, tmp_path, capsys):
    assert run(["train", "--variant", "standard", "--epochs", "1", "--lr", "1e300",
                "--dataset", str(trained_run / "data" / "medium.jsonl"), *TINY,
                "--set", "train.steps_per_epoch=20"], tmp_path) == 3
    assert "non-finite" in capsys.readouterr().err


def test_eval_writes_80_episode_rows(trained_run):
    assert run(["eval", "--checkpoint", str(trained_run / "checkpoints" / "quantum.ckpt"), *TINY], trained_run) == 0
    eps = rows(trained_run / "reports" / "episodes_quantum.csv")
    assert len(eps) == 80
    assert sorted({r["target"] for r in eps}) == ["30.0", "50.0", "70.0", "90.0"]


def test_ablate_table_and_report_regeneration(trained_run):
    assert run(["ablate", "--episodes", "2", *TINY], trained_run) == 0
    rep = trained_run / "reports"
    summary = rows(rep / "summary.csv")
    assert [r["variant"] for r in summary] == ["standard", "quantum", "q-attn", "q-ff"]
    assert {"avg_return", "avg_std", "parameters", "final_loss"} <= set(summary[0])
    for name in ("per_target.csv", "improvement.csv", "ablation_bars.csv", "episodes.csv", "loss_curves.csv",
                 "synergy.json", "summary.json", "cost.json"):
        assert (rep / name).exists(), name
    before = (rep / "summary.csv").read_bytes()
    assert run(["report", "--check"], trained_run) == 0
    assert run(["report"], trained_run) == 0
    assert (rep / "summary.csv").read_bytes() == before
    (rep / "summary.csv").write_text(before.decode().replace("standard", "standrd", 1))
    assert run(["report", "--check"], trained_run) == 1


def test_generalize_writes_four_blocks(trained_run):
    for tier in ("expert", "random"):
        assert run(["gen-data", "--tier", tier, "--n-trajectories", "3", *TINY], trained_run) == 0
    assert run(["generalize", "--episodes", "2", *TINY], trained_run) == 0
    g = json.loads((trained_run / "reports" / "generalization_quantum.json").read_text())
    assert len(g["blocks"]) == 4
    assert len(rows(trained_run / "reports" / "generalization.csv")) == 4


def test_manifest_tracks_every_command(trained_run):
    m = json.loads((trained_run / "manifest.json").read_text())
    assert {"run_id", "tool_version", "commands"} <= set(m)
    first = m["commands"][0]
    assert first["command"] == "gen-data" and first["config"]["data.seed"] == 42
    for c in m["commands"]:
        for path in c["artifacts"].values():
            assert (trained_run / path).exists() or Path(path).exists()


def test_run_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("QDTLAB_RUN_ROOT", str(tmp_path / "root"))
    assert main(["gen-data", "--tier", "medium", "--n-trajectories", "1", *TINY]) == 0
    assert (tmp_path / "root" / "default" / "data" / "medium.jsonl").exists()
    assert (tmp_path / "root" / "default" / "manifest.json").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"profile": "ci", "data.n_trajectories": 2, "env.max_steps": 5}))
    assert main(["gen-data", "--tier", "medium", "--config", str(cfg), "--n-trajectories", "3",
                 "--run-dir", str(tmp_path)]) == 0
    snap = json.loads((tmp_path / "manifest.json").read_text())["commands"][0]["config"]
    assert snap["data.n_trajectories"] == 3 and snap["env.max_steps"] == 5 and snap["model.d_model"] == 32


def test_verify_passes(tmp_path, capsys):
    assert run(["verify"], tmp_path) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "entanglement delta 49536" in out


def test_verify_catches_injected_fault(tmp_path, capsys):
    assert run(["verify", "--inject-fault", "standard-alpha=0.3"], tmp_path) == 1
    out = capsys.readouterr().out
    assert "FAIL  alpha=0 attention reduction" in out
