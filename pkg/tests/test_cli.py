import json

import numpy as np
import pytest

from subnetkit import checkpoint
from subnetkit.cli import EXIT_CONFIG, EXIT_INTEGRITY, EXIT_OK, EXIT_PREREQ, main
from subnetkit.pipeline import PipelineConfig, Run
from subnetkit.model import DenseModel
from subnetkit.tensor import no_grad

SMALL = {
    "seed": 3,
    "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "d_head": 8, "d_ffn": 32, "max_seq_len": 32},
    "grid": {"depths": [2, 3, 4], "ratios": ["1", "3/4", "1/2"], "k_sample": 3},
    "pretrain": {"steps": 20, "batch": 4, "warmup": 5},
    "finetune": {"steps": 4, "batch": 2},
    "calibration": {"metric": "ppl", "n_facts": 10, "ppl_tokens": 256, "width_tokens": 512},
}


def write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_cfg(tmp, SMALL)
    out = str(tmp / "out")
    for cmd in ("pretrain", "calibrate-depth", "calibrate-width", "finetune"):
        assert main([cmd, "--config", cfg, "--out", out]) == EXIT_OK
    return cfg, out


def test_unknown_field_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**SMALL, "finetune": {"stepz": 3}})
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "finetune.stepz" in capsys.readouterr().err


def test_depth_larger_than_model_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path, {**SMALL, "grid": {"depths": [2, 5]}})
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_max_remove_not_below_n(finished, capsys):
    cfg, out = finished
    assert main(["calibrate-depth", "--config", cfg, "--out", out, "--max-remove", "4"]) == EXIT_CONFIG
    assert "M=4" in capsys.readouterr().err


def test_missing_prerequisite(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["finetune", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_PREREQ
    assert "pretrain" in capsys.readouterr().err


def test_missing_flag(finished):
    cfg, out = finished
    assert main(["extract", "--config", cfg, "--out", out, "--depth", "3"]) == EXIT_CONFIG


def test_extract_matches_adapter_forward(finished, capsys):
    cfg, out = finished
    assert main(["extract", "--config", cfg, "--out", out, "--depth", "3", "--width-ratio", "0.75"]) == EXIT_OK
    path = capsys.readouterr().out.strip()
    arrays, meta = checkpoint.load(path)
    dense = DenseModel(meta, arrays)
    run = Run(PipelineConfig.load(cfg, {"out": out}))
    model = run.load_model()
    shape = run.resolve(3, 0.75)
    x = np.random.default_rng(0).integers(0, 96, (4, 32))
    with no_grad():
        ref = model.forward(x, shape).data
    assert np.max(np.abs(dense.forward(x) - ref)) < 1e-5


def test_eval_profile_and_search(finished, capsys):
    cfg, out = finished
    base = ["--config", cfg, "--out", out]
    assert main(["eval", *base, "--depth", "4", "--width-ratio", "1"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["ppl"] > 1 and 0 <= res["fact_accuracy"] <= 1
    assert main(["search", *base, "--constraint", "max-latency-ms", "--budget", "100"]) == EXIT_PREREQ
    capsys.readouterr()
    assert main(["profile", *base, "--runs", "2"]) == EXIT_OK
    capsys.readouterr()
    for constraint, budget in (("max-params", "30000"), ("max-flops", "1e9"), ("max-latency-ms", "1000")):
        assert main(["search", *base, "--constraint", constraint, "--budget", budget]) == EXIT_OK
        data = json.loads(open(capsys.readouterr().out.strip()).read())
        assert data["feasible"] and data["cost"] <= float(budget)
    assert main(["search", *base, "--budget", "10"]) == EXIT_OK
    data = json.loads(open(capsys.readouterr().out.strip()).read())
    assert data["feasible"] is False


def test_corrupt_artifact_detected(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**SMALL, "pretrain": {"steps": 2, "batch": 2, "warmup": 1}})
    out = str(tmp_path / "o")
    assert main(["pretrain", "--config", cfg, "--out", out]) == EXIT_OK
    path = capsys.readouterr().out.strip()
    with open(path, "r+b") as fh:
        fh.seek(-4, 2)
        fh.write(b"\x00\x01\x02\x03")
    assert main(["calibrate-width", "--config", cfg, "--out", out]) == EXIT_INTEGRITY


def test_redo_stage_invalidates_dependents(finished, tmp_path):
    cfg, out = finished
    run = Run(PipelineConfig.load(cfg, {"out": out}))
    stages = run.manifest()["stages"]
    assert {"pretrain", "calibrate-depth", "calibrate-width", "finetune"} <= set(stages)
    other = Run(PipelineConfig.load(cfg), root=tmp_path)
    other.adopt(run, "pretrain")
    other.adopt(run, "calibrate-width")
    other.adopt(run, "pretrain")
    assert set(other.manifest()["stages"]) == {"pretrain"}


def test_seed_override_changes_run_dir(tmp_path):
    a = PipelineConfig.load(write_cfg(tmp_path, SMALL))
    b = PipelineConfig.load(write_cfg(tmp_path, SMALL), {"seed": 4})
    assert a.run_hash() != b.run_hash()


def test_corpus_flags_and_periodic_checkpoints(tmp_path, capsys):
    from subnetkit.data import DATA_DIR

    corpus = tmp_path / "c.txt"
    corpus.write_bytes((DATA_DIR / "corpus.txt").read_bytes())
    cfg = write_cfg(tmp_path, {**SMALL, "pretrain": {"steps": 2, "batch": 2, "warmup": 1},
                               "finetune": {"steps": 5, "batch": 2, "checkpoint_every": 2}})
    out = str(tmp_path / "o")
    base = ["--config", cfg, "--out", out, "--corpus", str(corpus)]
    for cmd in ("pretrain", "calibrate-depth", "calibrate-width", "finetune"):
        assert main([cmd, *base]) == EXIT_OK
    bank = capsys.readouterr().out.strip().splitlines()[-1]
    ckpts = sorted(p.name for p in (tmp_path / "o").glob("*/checkpoints/*.ckpt"))
    assert ckpts == ["bank_step000002.ckpt", "bank_step000004.ckpt"]
    assert checkpoint.load(bank)[1]["step"] == 5
    assert main(["pretrain", *base[:4], "--corpus", str(tmp_path / "missing.txt")]) == EXIT_CONFIG
