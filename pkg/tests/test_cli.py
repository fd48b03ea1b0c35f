import json

import pytest

from kadapters.checkpoint import load_adapter_state
from kadapters.cli import main

TRAIN_CFG = {"learning_rate": 0.02, "batch_size": 4, "warmup_steps": 10,
             "total_steps": 40, "seed": 3}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def train_cfg_path(tmp_path):
    return write_json(tmp_path / "train.json", TRAIN_CFG)


@pytest.fixture
def null_task_path(tmp_path):
    return write_json(tmp_path / "task.json", {"teacher_scale": 0.0})


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def test_plan_preset_lora4(tmp_path, capsys):
    out = tmp_path / "plan-out"
    assert main(["plan", "--preset", "lora-4", "--dims", "gpt2-small",
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "165,888" in printed
    assert "0.133" in printed
    report = json.loads((out / "report.json").read_text())
    assert report["params_total"] == 165_888
    assert (out / "plan.json").exists()
    assert (out / "manifest.json").exists()


def test_plan_preset_intermediate(capsys):
    assert main(["plan", "--preset", "kernel-mix-qvo-intermediate"]) == 0
    printed = capsys.readouterr().out
    assert "2,009,088" in printed
    assert "1.615" in printed


def test_plan_unknown_preset_exit_2(capsys):
    assert main(["plan", "--preset", "nope"]) == 2
    assert "lora-4" in capsys.readouterr().err


def test_plan_requires_exactly_one_source(capsys):
    assert main(["plan"]) == 2
    assert main(["plan", "--preset", "lora-4", "--config", "x.json"]) == 2


def test_plan_custom_config(tmp_path, capsys):
    cfg = {
        "name": "mine",
        "dims": {"n_layers": 2, "n_heads": 4, "head_dim": 8, "base_param_total": 8448},
        "targets": {"q": {"kind": "lora", "rank_shared": 4}},
    }
    path = write_json(tmp_path / "plan.json", cfg)
    assert main(["plan", "--config", path, "--dims", "toy"]) == 0
    assert "mine" in capsys.readouterr().out


def test_plan_invalid_config_names_field(tmp_path, capsys):
    cfg = {
        "dims": {"n_layers": 2, "n_heads": 4, "head_dim": 8, "base_param_total": 8448},
        "targets": {"v": {"kind": "kernel-wise-lite", "rank_head": 99}},
    }
    path = write_json(tmp_path / "plan.json", cfg)
    assert main(["plan", "--config", path]) == 2
    assert "targets.v" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def test_verify_kernel_suite(tmp_path, capsys):
    report_path = tmp_path / "verify.json"
    assert main(["verify", "--suite", "kernel", "--trials", "50", "--seed", "7",
                 "--json", str(report_path)]) == 0
    assert "pass" in capsys.readouterr().out
    data = json.loads(report_path.read_text())
    assert data["passed"] is True
    assert data["suites"][0]["suite"] == "kernel"


def test_verify_rewrite_suite():
    assert main(["verify", "--suite", "rewrite", "--trials", "30"]) == 0


def test_verify_bogus_suite(capsys):
    assert main(["verify", "--suite", "bogus"]) == 2


def test_verify_all_small(tmp_path):
    assert main(["verify", "--suite", "all", "--trials", "20", "--seed", "1",
                 "--json", str(tmp_path / "all.json")]) == 0
    assert (tmp_path / "manifest.json").exists()


def test_verify_failure_exit_1(tmp_path, monkeypatch, capsys):
    from kadapters import analysis, cli

    def failing(dims, trials, seed, tolerance=1e-12):
        return analysis.SuiteReport(
            suite="kernel", passed=False, trials=trials, tolerance=tolerance,
            worst=1.0, worst_case={"trial": 0},
            failures=[{"trial": 0, "diff": 1.0}],
        )

    monkeypatch.setattr(cli.analysis, "verify_kernel_equivalence", failing)
    report_path = tmp_path / "fail.json"
    assert main(["verify", "--suite", "kernel", "--json", str(report_path)]) == 1
    assert "FAIL" in capsys.readouterr().out
    data = json.loads(report_path.read_text())
    assert data["passed"] is False
    assert data["suites"][0]["failures"]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_null_task(tmp_path, null_task_path, train_cfg_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--task", null_task_path, "--plan", "kernel-wise-lite-qv-small",
                 "--train-config", train_cfg_path, "--out", str(out)])
    assert code == 0
    log = json.loads((out / "train_log.json").read_text())
    assert log["final_loss"] < 1e-12
    assert log["base_digest_before"] == log["base_digest_after"]
    csv_lines = (out / "loss.csv").read_text().splitlines()
    assert csv_lines[0] == "step,loss,lr"
    assert len(csv_lines) == TRAIN_CFG["total_steps"] + 1
    ckpts = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert ckpts == ["layer0_q.ckpt", "layer0_v.ckpt", "layer1_q.ckpt", "layer1_v.ckpt"]
    state = load_adapter_state(out / "checkpoints" / "layer0_q.ckpt")
    assert state.target == "q"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert "timestamp" in manifest


def test_train_rejects_excess_lite_rank(tmp_path, train_cfg_path, capsys):
    # toy dims have p=8; this preset needs lite rank 10
    task = write_json(tmp_path / "task.json", {})
    assert main(["train", "--task", task, "--plan", "kernel-wise-qvo",
                 "--train-config", train_cfg_path, "--out", str(tmp_path / "o")]) == 2
    assert "rank" in capsys.readouterr().err


def test_train_requires_outdir(monkeypatch, null_task_path, train_cfg_path, capsys):
    monkeypatch.delenv("KADAPTERS_OUTDIR", raising=False)
    assert main(["train", "--task", null_task_path, "--plan", "lora-4",
                 "--train-config", train_cfg_path]) == 2


def test_train_uses_outdir_env(monkeypatch, tmp_path, null_task_path, train_cfg_path):
    outdir = tmp_path / "env-out"
    monkeypatch.setenv("KADAPTERS_OUTDIR", str(outdir))
    assert main(["train", "--task", null_task_path, "--plan", "lora-4",
                 "--train-config", train_cfg_path]) == 0
    assert (outdir / "train_log.json").exists()


def test_train_plan_from_json_path(tmp_path, null_task_path, train_cfg_path):
    plan_cfg = {
        "name": "custom-wise",
        "dims": {"n_layers": 2, "n_heads": 4, "head_dim": 8, "base_param_total": 8448},
        "targets": {"v": {"kind": "kernel-wise", "rank_head": 1}},
    }
    plan_path = write_json(tmp_path / "plan.json", plan_cfg)
    out = tmp_path / "run"
    assert main(["train", "--task", null_task_path, "--plan", plan_path,
                 "--train-config", train_cfg_path, "--out", str(out)]) == 0
    ckpts = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert ckpts == ["layer0_v.ckpt", "layer1_v.ckpt"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_3(tmp_path, capsys):
    cfg = write_json(tmp_path / "cfg.json",
                     {"learning_rate": 1e9, "warmup_steps": 1, "total_steps": 40})
    assert main(["train", "--plan", "lora-4", "--train-config", cfg,
                 "--out", str(tmp_path / "d")]) == 3
    assert "diverged" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def test_compare_parity_and_determinism(tmp_path, train_cfg_path, capsys):
    task_path = write_json(tmp_path / "task.json", {})
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    argv = ["compare", "--task", task_path,
            "--plans", "lora-4,kernel-wise-lite-qv-small",
            "--train-config", train_cfg_path]
    assert main(argv + ["--out", str(out_a)]) == 0
    assert main(argv + ["--out", str(out_b)]) == 0
    assert (out_a / "comparison.csv").read_bytes() == (out_b / "comparison.csv").read_bytes()
    assert (out_a / "comparison.json").read_bytes() == (out_b / "comparison.json").read_bytes()
    rows = json.loads((out_a / "comparison.json").read_text())["rows"]
    assert rows[0]["params_total"] == rows[1]["params_total"]


def test_compare_single_plan_exit_2(tmp_path, train_cfg_path, capsys):
    assert main(["compare", "--plans", "lora-4", "--train-config", train_cfg_path,
                 "--out", str(tmp_path / "x")]) == 2
    assert "two plans" in capsys.readouterr().err


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert "kadapters" in capsys.readouterr().out
