import json
import re
import subprocess
import sys

import numpy as np
import pytest

from conftest import tree_digest
from rbcscope.cli import main
from rbcscope.imgcore import write_ppm
from rbcscope.synthgen import CELL_TYPES, load_dataset


# synth

def test_synth_writes_manifest(tmp_path, capsys):
    assert main(["synth", "--scenes", "10", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 10 and manifest["config"]["seed"] == 1
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    assert main(["--seed", "1", "synth", "--scenes", "10", "--out", str(tmp_path / "e")]) == 0
    assert tree_digest(tmp_path / "d") == tree_digest(tmp_path / "e")


def test_synth_zero_scenes(tmp_path):
    assert main(["synth", "--scenes", "0", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["version"] == 1 and manifest["scenes"] == []
    assert load_dataset(tmp_path) == []


def test_synth_negative_scenes_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--scenes", "-1", "--out", str(tmp_path)])
    assert exc.value.code == 2


# usage errors

def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", "--stage", "detector", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
    assert "manifest not found" in capsys.readouterr().err


def test_gbm_without_heads(tmp_path, capsys):
    assert main(["train", "--stage", "gbm", "--data", str(tmp_path), "--out", str(tmp_path / "m")]) == 2
    assert "heads model not found" in capsys.readouterr().err


def test_invalid_experiment_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rbcscope", "eval", "--experiment", "model_z"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2 and "model_z" in proc.stderr


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"heads": {"epochs": 3, "bogus": 1}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_unreadable_image(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"not an image")
    assert main(["analyze", str(tmp_path / "x.ppm"), "--models", str(tmp_path)]) == 2


# train and eval

def test_train_all_writes_every_stage(cli_runs):
    models = cli_runs[0]["models"]
    for name in ("detector.json", "gbm.json", "featurizer.json"):
        assert (models / name).exists()
    for t in CELL_TYPES:
        doc = json.loads((models / "heads" / f"{t}.json").read_text())
        assert doc["cell_type"] == t


def test_reruns_byte_identical(cli_runs):
    a, b = cli_runs
    for key in ("data", "models", "reports"):
        assert tree_digest(a[key]) == tree_digest(b[key]), key


def test_report_fields(cli_runs):
    reports = cli_runs[0]["reports"]
    a = json.loads((reports / "report_model_a.json").read_text())
    b = json.loads((reports / "report_model_b.json").read_text())
    assert set(a["mean"]["auc"]) == set(CELL_TYPES)
    assert "gbm_accuracy" in a["mean"]
    assert a["seeds"] == b["seeds"] and a["seeds"]["folds"] == b["seeds"]["folds"]
    d = json.loads((reports / "report_detector.json").read_text())
    assert 0.0 <= d["mean"]["ap"] <= 1.0 and len(d["per_scene"]) == 6


def test_seed_flag_overrides_every_seed(cli_runs, cli_config, tmp_path):
    data = cli_runs[0]["data"]
    assert main(["eval", "--config", str(cli_config), "--seed", "9", "--experiment", "model_b",
                 "--data", str(data), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report_model_b.json").read_text())
    assert set(doc["seeds"].values()) == {9}


# analyze

def svg_rects(path):
    return re.findall(r"<rect [^>]*>", path.read_text())


def test_analyze_blank_image(cli_runs, tmp_path):
    write_ppm(tmp_path / "blank.ppm", np.full((96, 96, 3), 235, np.uint8))
    assert main(["analyze", str(tmp_path / "blank.ppm"), "--models", str(cli_runs[0]["models"]),
                 "--out", str(tmp_path / "out")]) == 0
    doc = json.loads((tmp_path / "out" / "blank_regions.json").read_text())
    assert doc["regions"] == []
    assert svg_rects(tmp_path / "out" / "blank_overlay.svg") == []


def analyze_scene(cli_runs, tmp_path, index, with_mask=True):
    data = cli_runs[0]["data"]
    image = data / "images" / f"scene_{index:05d}.ppm"
    args = ["analyze", str(image), "--models", str(cli_runs[0]["models"]), "--out", str(tmp_path)]
    if with_mask:
        args += ["--mask", str(data / "masks" / f"scene_{index:05d}.pgm")]
    assert main(args) == 0
    stem = image.stem
    return json.loads((tmp_path / f"{stem}_regions.json").read_text()), tmp_path / f"{stem}_overlay.svg"


def test_overlay_counts_detections_and_misses(cli_runs, tmp_path):
    doc, svg = analyze_scene(cli_runs, tmp_path, 20)
    rects = svg_rects(svg)
    assert len(rects) == len(doc["regions"]) + len(doc["missed"])
    assert sum('class="region missed"' in r for r in rects) == len(doc["missed"])
    h, w = 256, 256
    for r in rects:
        x, y, rw, rh = (int(re.search(f' {k}="(-?\\d+)"', r).group(1)) for k in ("x", "y", "width", "height"))
        assert 0 <= x and 0 <= y and x + rw <= w and y + rh <= h
    for region in doc["regions"]:
        if region["matched_ground_truth"] is not None:
            assert "ground_truth_labels" in region


def test_abnormal_scene_has_hatched_rect(cli_runs, tmp_path):
    scene = load_dataset(cli_runs[0]["data"])[21]
    assert any(i.cell_type != "oval_disc" for i in scene.instances)
    doc, svg = analyze_scene(cli_runs, tmp_path, 21, with_mask=False)
    assert any(r["abnormal"] for r in doc["regions"])
    assert any('fill="url(#hatch)"' in r for r in svg_rects(svg))
    for r, rect in zip(doc["regions"], svg_rects(svg)):
        assert ('fill="url(#hatch)"' in rect) == r["abnormal"]
