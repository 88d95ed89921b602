import json

import pytest
from click.testing import CliRunner

from toolrefine.cli import main
from toolrefine.core import load_detections, load_groundtruth, load_manifest

SMALL_NET = ["--model-dim", "8", "--num-heads", "2", "--num-layers", "1",
             "--mlp-hidden-dim", "8", "--ff-hidden-dim", "8"]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def data_dir(runner, tmp_path):
    out = tmp_path / "data"
    result = runner.invoke(main, ["synth-gen", "--out-dir", str(out), "--num-classes", "3", "--feature-dim", "4",
                                  "--num-images", "12", "--corruption-rate", "0.2", "--seed", "5"])
    assert result.exit_code == 0, result.output
    return out


def test_budget_prints_total(runner):
    result = runner.invoke(main, ["budget", "--boxes", "100", "--weak-images", "0"])
    assert result.exit_code == 0
    assert result.output.strip() == "total_seconds=1000"


def test_budget_json(runner):
    result = runner.invoke(main, ["budget", "--boxes", "10", "--weak-images", "50", "--json"])
    assert json.loads(result.output)["total_seconds"] == 150


def test_gradcheck_passes(runner):
    result = runner.invoke(main, ["gradcheck", "--seed", "7"])
    assert result.exit_code == 0, result.output
    assert result.output.strip().endswith("PASS")
    assert "max_rel_error=" in result.output


def test_help_shows_spec_defaults(runner):
    out = runner.invoke(main, ["train", "--help"]).output
    for text in ("0.0001", "0.005", "50", "1e-07", "--num-layers"):
        assert text in out
    assert "[default: 10.0]" in runner.invoke(main, ["budget", "--help"]).output


@pytest.mark.parametrize("cmd", ["synth-gen", "cooccur", "train", "refine", "eval", "budget", "gradcheck", "pipeline"])
def test_every_subcommand_has_help(runner, cmd):
    assert runner.invoke(main, [cmd, "--help"]).exit_code == 0


def test_missing_file_is_single_line_json_error(runner, tmp_path):
    result = runner.invoke(main, ["cooccur", "--manifest", str(tmp_path / "nope.json"),
                                  "--labels", "x", "--out", str(tmp_path / "S.json")])
    assert result.exit_code != 0
    lines = result.stderr.strip().splitlines()
    assert len(lines) == 1
    assert "not found" in json.loads(lines[0])["message"]


def test_unknown_flag_fails(runner):
    assert runner.invoke(main, ["budget", "--bogus"]).exit_code != 0


def test_schema_violation_fails(runner, data_dir, tmp_path):
    bad = tmp_path / "labels.jsonl"
    bad.write_text('{"image_id": "a", "labels": [1]}\n')
    result = runner.invoke(main, ["cooccur", "--manifest", str(data_dir / "manifest.json"),
                                  "--labels", str(bad), "--out", str(tmp_path / "S.json")])
    assert result.exit_code == 2
    assert "length" in json.loads(result.stderr.strip())["message"]


def test_stages_end_to_end(runner, data_dir, tmp_path):
    m = str(data_dir / "manifest.json")
    S = tmp_path / "S.json"
    r = runner.invoke(main, ["cooccur", "--manifest", m, "--labels", str(data_dir / "labels.jsonl"), "--out", str(S)])
    assert r.exit_code == 0, r.output
    assert set(json.loads(S.read_text())) == {"variant", "S"}

    ckpt = tmp_path / "model.ckpt"
    r = runner.invoke(main, ["train", "--manifest", m, "--detections", str(data_dir / "detections.jsonl"),
                             "--labels", str(data_dir / "labels.jsonl"), "--cooccur", str(S),
                             "--out", str(ckpt), "--epochs", "2", *SMALL_NET])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "model.csv").read_text().startswith("epoch,mean_loss,mean_bce,mean_co,lr")

    refined = tmp_path / "refined.jsonl"
    full_gt = tmp_path / "full_gt.jsonl"
    full_gt.write_text('{"image_id": "full0", "boxes": [{"box": [0, 0, 5, 5], "category": 1}]}\n')
    merged = tmp_path / "merged.jsonl"
    r = runner.invoke(main, ["refine", "--manifest", m, "--detections", str(data_dir / "detections.jsonl"),
                             "--checkpoint", str(ckpt), "--out", str(refined),
                             "--merge-groundtruth", str(full_gt), "--merged-out", str(merged)])
    assert r.exit_code == 0, r.output
    manifest = load_manifest(m)
    out = load_detections(refined, manifest)
    assert all(p.is_refined for d in out for p in d.proposals)
    assert len(load_groundtruth(merged, manifest)) == 13

    r = runner.invoke(main, ["eval", "--manifest", m, "--predictions", str(refined),
                             "--groundtruth", str(data_dir / "groundtruth.jsonl"), "--out", str(tmp_path / "ev")])
    assert r.exit_code == 0, r.output
    assert 0 <= json.loads((tmp_path / "ev.json").read_text())["map"] <= 1
    assert (tmp_path / "ev.csv").exists()


def _pipeline_config(tmp_path, name):
    cfg = {
        "seed": 3,
        "paths": {"out_dir": name},
        "synth": {"num_classes": 3, "feature_dim": 4, "num_images": 15, "teacher_corruption_rate": 0.3,
                  "confusable_pairs": [[0, 1, 1.0]]},
        "network": {"model_dim": 8, "num_heads": 2, "num_layers": 1, "mlp_hidden_dim": 8, "ff_hidden_dim": 8},
        "train": {"epochs": 2, "alpha": 0.5},
    }
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_pipeline_is_reproducible(runner, tmp_path):
    for name in ("a", "b"):
        r = runner.invoke(main, ["pipeline", "--config", str(_pipeline_config(tmp_path, name))])
        assert r.exit_code == 0, r.output
    for f in ("model.ckpt", "refined.jsonl", "loss_log.csv", "cooccur.json", "eval_refined.json",
              "data/detections.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert {"map_unrefined", "map_refined", "budget", "loss_log"} <= set(summary)
    assert summary["train_config"]["alpha"] == 0.5


def test_flags_override_config(runner, tmp_path):
    path = _pipeline_config(tmp_path, "c")
    r = runner.invoke(main, ["pipeline", "--config", str(path), "--epochs", "1"])
    assert r.exit_code == 0, r.output
    lines = (tmp_path / "c" / "loss_log.csv").read_text().splitlines()
    assert len(lines) == 2


def test_config_from_environment(runner, tmp_path, monkeypatch):
    path = _pipeline_config(tmp_path, "d")
    monkeypatch.setenv("TOOLREFINE_CONFIG", str(path))
    r = runner.invoke(main, ["pipeline"])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "d" / "summary.json").exists()


def test_shipped_demo_config_improves_map(runner, tmp_path):
    from pathlib import Path
    cfg = json.loads((Path(__file__).parents[1] / "configs" / "demo.json").read_text())
    cfg["paths"]["out_dir"] = str(tmp_path / "demo")
    path = tmp_path / "demo.json"
    path.write_text(json.dumps(cfg))
    r = runner.invoke(main, ["pipeline", "--config", str(path)])
    assert r.exit_code == 0, r.output
    summary = json.loads((tmp_path / "demo" / "summary.json").read_text())
    assert summary["map_refined"] > summary["map_unrefined"]
    assert summary["train_config"]["base_lr"] == 0.005
