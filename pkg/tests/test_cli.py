"""End-to-end command-line flows on a miniature dataset."""

import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from tasam.cli import EXIT_OK, EXIT_USAGE, EXIT_VERIFY, gradcheck_mod, main
from tasam.tensorio import load_checkpoint, load_tensor, save_checkpoint

SMALL_TOML = """
[train]
depth = 2
d = 16
heads = 4
mlp_ratio = 2
pos_grid = 8
k = 2
temporal_window = 2
scales = [1.0, 2.0]
epochs = 1
batch_size = 4
lr = 0.001
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny dataset plus one finished training run, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--out", str(data), "--n", "8", "--height", "32",
                 "--width", "32", "--frames", "2", "--seed", "3"]) == EXIT_OK
    cfg = root / "small.toml"
    cfg.write_text(SMALL_TOML)
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--config", str(cfg), "--quiet"]) == EXIT_OK
    return {"root": root, "data": data, "cfg": cfg, "run": run}


def test_gen_writes_manifest(workdir):
    manifest = json.loads((workdir["data"] / "manifest.json").read_text())
    assert manifest["n"] == 8 and manifest["T"] == 2 and manifest["seed"] == 3


def test_gen_seed_comes_from_env_unless_flagged(tmp_path, monkeypatch):
    monkeypatch.setenv("TASAM_SEED", "11")
    main(["gen", "--out", str(tmp_path / "a"), "--n", "1",
          "--height", "32", "--width", "32"])
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 11
    main(["gen", "--out", str(tmp_path / "b"), "--n", "1",
          "--height", "32", "--width", "32", "--seed", "4"])
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 4


def test_bad_env_seed_is_a_usage_error(tmp_path, monkeypatch):
    monkeypatch.setenv("TASAM_SEED", "florp")
    assert main(["gen", "--out", str(tmp_path / "x"), "--n", "1"]) == EXIT_USAGE


def test_train_writes_run_artifacts(workdir):
    run = workdir["run"]
    assert (run / "checkpoint.tsmc").exists()
    payload = json.loads((run / "run.json").read_text())
    assert payload["freeze_ok"] is True
    assert payload["config"]["d"] == 16
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["variant"] == "full"


def test_replaying_a_run_config_reproduces_metrics(workdir, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--data", str(workdir["data"]), "--out", str(again),
                 "--config", str(workdir["run"] / "run.json"),
                 "--quiet"]) == EXIT_OK
    a = (workdir["run"] / "metrics.csv").read_bytes()
    b = (again / "metrics.csv").read_bytes()
    assert a == b


def test_eval_reports_and_dumps_predictions(workdir, tmp_path, capsys):
    pred = tmp_path / "pred.tsr"
    assert main(["eval", "--data", str(workdir["data"]),
                 "--run", str(workdir["run"]),
                 "--out", str(tmp_path / "ev"),
                 "--dump-pred", str(pred)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "miou" in out
    assert load_tensor(pred).shape == (8, 32, 32)
    assert (tmp_path / "ev" / "metrics.csv").exists()


def test_eval_rejects_tampered_frozen_weights(workdir, tmp_path):
    arrays = dict(load_checkpoint(workdir["run"] / "checkpoint.tsmc"))
    name = "frozen/patch_embed/w"
    arrays[name] = arrays[name].copy()
    arrays[name].reshape(-1)[0] += 1e-3
    bad = tmp_path / "bad"
    bad.mkdir()
    save_checkpoint(bad / "checkpoint.tsmc", arrays)
    (bad / "run.json").write_text((workdir["run"] / "run.json").read_text())
    assert main(["eval", "--data", str(workdir["data"]),
                 "--run", str(bad)]) == EXIT_VERIFY


def test_missing_dataset_is_a_usage_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_USAGE


def test_unknown_config_key_is_a_usage_error(workdir, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nlearning_rate = 0.1\n")
    assert main(["train", "--data", str(workdir["data"]),
                 "--out", str(tmp_path / "o"), "--config", str(cfg),
                 "--quiet"]) == EXIT_USAGE


def test_malformed_toml_is_a_usage_error(workdir, tmp_path):
    cfg = tmp_path / "broken.toml"
    cfg.write_text("[train\nlr = ")
    assert main(["train", "--data", str(workdir["data"]),
                 "--out", str(tmp_path / "o"), "--config", str(cfg),
                 "--quiet"]) == EXIT_USAGE


def test_ablate_writes_five_variant_rows(workdir, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--data", str(workdir["data"]),
                 "--config", str(workdir["cfg"]), "--out", str(out),
                 "--quiet"]) == EXIT_OK
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == [
        "baseline", "wo_terrain", "wo_temporal", "wo_multiscale", "full"]
    table = json.loads((out / "ablation.json").read_text())
    assert len(table) == 5


def test_sweep_prompts_with_explicit_values(workdir, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--kind", "prompts", "--values", "1,2",
                 "--data", str(workdir["data"]),
                 "--config", str(workdir["cfg"]), "--out", str(out),
                 "--quiet"]) == EXIT_OK
    table = json.loads((out / "sweep_prompts.json").read_text())
    assert [r["variant"] for r in table] == ["k=1", "k=2"]


def test_gradcheck_module_passes_and_corruption_fails(capsys):
    assert main(["gradcheck", "--module", "ta_adapter"]) == EXIT_OK
    assert "ok" in capsys.readouterr().out
    try:
        assert main(["gradcheck", "--module", "ta_adapter",
                     "--corrupt", "0.05"]) == EXIT_VERIFY
    finally:
        gradcheck_mod._CORRUPTION = 0.0
    assert "FAIL" in capsys.readouterr().out


def test_info_prints_module_table(workdir, capsys):
    assert main(["info", "--config", str(workdir["cfg"]),
                 "--no-timing", "--height", "32", "--width", "32"]) == EXIT_OK
    out = capsys.readouterr().out
    for group in ("frozen", "ta_adapter", "tp_prompt", "ms_fusion", "decoder"):
        assert group in out
    assert "trainable" in out


def test_plot_renders_loss_curve_and_rasters(workdir, tmp_path):
    out = tmp_path / "plots"
    assert main(["plot", "--run", str(workdir["run"]),
                 "--data", str(workdir["data"]), "--sample", "0",
                 "--out", str(out)]) == EXIT_OK
    root = ET.parse(out / "loss.svg").getroot()
    assert root.tag.endswith("svg")
    for name in ("input.ppm", "prediction.ppm", "labels.ppm", "gate.ppm"):
        assert (out / name).stat().st_size > 0
    assert (out / "gate.ppm").read_bytes()[:2] == b"P6"


def test_plot_without_inputs_is_a_usage_error(tmp_path):
    assert main(["plot", "--out", str(tmp_path / "p")]) == EXIT_USAGE


def test_verify_checks_run_and_gate_bound(workdir, capsys):
    assert main(["verify", "--run", str(workdir["run"]),
                 "--gate-draws", "100"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "freeze     ok" in out
    assert "gate bound ok" in out
