"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``analyze``.

Exit codes: 0 success, 1 internal failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import detector as det
from . import evalharness as ev
from . import gbm as gb
from . import heads as hd
from .config import ConfigError, PipelineConfig, load_config
from .featurizer import FeatureExtractor
from .imgcore import read_pgm_mask, read_ppm
from .nn import dumps
from .synthgen import CELL_TYPES, generate_dataset, load_dataset, patch_labelset


class UsageError(Exception):
    pass


def _resolve(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _load_scenes(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args, config: PipelineConfig) -> int:
    ds = config.dataset
    if args.scenes is not None:
        ds = dataclasses.replace(ds, n_scenes=args.scenes)
    out = Path(args.out or config.dataset_dir)
    path = generate_dataset(ds, out)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# train

def _models_dir(args, config) -> Path:
    return Path(args.out or config.models_dir)


def _head_files(models: Path) -> dict:
    return {t: models / "heads" / f"{t}.json" for t in CELL_TYPES}


def load_heads_dir(models: Path) -> list:
    files = _head_files(models)
    missing = [str(p) for p in files.values() if not p.exists()]
    if missing:
        raise UsageError("heads model not found: " + ", ".join(missing))
    return [hd.head_from_json(json.loads(files[t].read_text())) for t in CELL_TYPES]


def _training_patches(scenes, config):
    """Mask-box patches plus jittered copies, as seen by heads applied to detector boxes."""
    extractor = FeatureExtractor(config.featurizer_seed)
    data = ev.build_patch_dataset(scenes, extractor, config.eval.coverage)
    return ev.with_jittered_boxes(scenes, data, extractor, config.box_jitter, config.heads.seed)


def _train_heads(scenes, config, models: Path):
    extractor = FeatureExtractor(config.featurizer_seed)
    data = _training_patches(scenes, config)
    heads, _ = hd.train_heads(data.features, data.labels, config.heads)
    for head, (t, path) in zip(heads, _head_files(models).items()):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps({**hd.head_to_json(head), "cell_type": t}))
    (models / "featurizer.json").write_text(json.dumps(extractor.to_json(), sort_keys=True))
    return data


def cmd_train(args, config: PipelineConfig) -> int:
    data_dir = Path(args.data or config.dataset_dir)
    models = _models_dir(args, config)
    if args.stage == "gbm":
        # dependency check before touching the dataset
        load_heads_dir(models)
    scenes = _load_scenes(data_dir)
    if not scenes:
        raise UsageError(f"dataset {data_dir} has no scenes")
    models.mkdir(parents=True, exist_ok=True)
    stages = ["detector", "heads", "gbm"] if args.stage == "all" else [args.stage]
    data = None
    for stage in stages:
        if stage == "detector":
            n = config.eval.detector_train_scenes
            model, _ = det.train_detector(scenes[:n], config.detector)
            det.save_detector(models / "detector.json", model)
        elif stage == "heads":
            data = _train_heads(scenes, config, models)
        elif stage == "gbm":
            heads = load_heads_dir(models)
            if data is None:
                data = _training_patches(scenes, config)
            probs = hd.predict_probs(heads, data.features)
            y = np.array([gb.labelset_is_abnormal(ls) for ls in data.labels], dtype=np.float64)
            model, _ = gb.fit_gbm(probs, y, config.gbm)
            gb.save_gbm(models / "gbm.json", model)
        print(f"trained {stage} -> {models}")
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args, config: PipelineConfig) -> int:
    data_dir = Path(args.data or config.dataset_dir)
    out = Path(args.out or config.reports_dir)
    scenes = _load_scenes(data_dir)
    if args.experiment == "detector":
        models = Path(args.models or config.models_dir)
        path = models / "detector.json"
        if not path.exists():
            raise UsageError(f"detector model not found: {path}")
        model = det.load_detector(path)
        held_out = scenes[-config.eval.detector_test_scenes:]
        ap, summary = ev.evaluate_detector(model, held_out, config.eval.iou_threshold)
        first = len(scenes) - len(held_out)
        for row in summary:
            row["scene"] += first
        report = {"version": ev.REPORT_VERSION, "experiment": "detector",
                  "seeds": {"dataset": config.dataset.seed, "detector": config.detector.seed},
                  "config": config.to_json(), "per_scene": summary, "mean": {"ap": ap}}
        _write_json(out / "report_detector.json", report)
        print(f"detector  AP={ap:.4f}  scenes={len(held_out)}")
        return 0
    data = ev.build_patch_dataset(scenes, FeatureExtractor(config.featurizer_seed), config.eval.coverage)
    report = ev.run_experiment(args.experiment, data, config.experiment())
    _write_json(out / f"report_{args.experiment}.json", report.to_json())
    aucs = " ".join(f"{t}={v:.3f}" if v is not None else f"{t}=n/a" for t, v in report.mean["auc"].items())
    extra = f"  gbm_acc={report.mean['gbm_accuracy']:.3f}" if "gbm_accuracy" in report.mean else ""
    print(f"{args.experiment}  exact_match={report.mean['exact_match']:.3f}  {aucs}{extra}")
    return 0


# ---------------------------------------------------------------------------
# analyze

GREEN, RED, BLUE = "#1a9850", "#d73027", "#4575b4"


def _find_manifest_entry(image_path: Path):
    """Manifest record for an image that lives inside a generated dataset, if any."""
    root = image_path.resolve().parent.parent
    manifest = root / "manifest.json"
    if not manifest.exists():
        return None, None
    doc = json.loads(manifest.read_text())
    for i, entry in enumerate(doc["scenes"]):
        if (root / entry["image"]).resolve() == image_path.resolve():
            return root, i
    return None, None


def overlay_svg(width: int, height: int, items: list[dict]) -> str:
    """SVG with one rectangle per item; ``hatched`` items get a diagonal-line fill."""
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<defs><pattern id="hatch" patternUnits="userSpaceOnUse" width="6" height="6" patternTransform="rotate(45)">'
        '<line x1="0" y1="0" x2="0" y2="6" stroke="#d73027" stroke-width="2"/></pattern></defs>',
    ]
    for it in items:
        b = it["box"]
        fill = 'url(#hatch)' if it.get("hatched") else "none"
        lines.append(
            f'<rect class="region {it["kind"]}" x="{b[0]}" y="{b[1]}" width="{b[2] - b[0] + 1}" height="{b[3] - b[1] + 1}" '
            f'fill="{fill}" stroke="{it["color"]}" stroke-width="2"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_analyze(args, config: PipelineConfig) -> int:
    image_path = Path(args.image)
    try:
        image = read_ppm(image_path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {image_path}: {exc}") from exc
    models = Path(args.models or config.models_dir)
    for name in ("detector.json", "gbm.json"):
        if not (models / name).exists():
            raise UsageError(f"model not found: {models / name}")
    detector_model = det.load_detector(models / "detector.json")
    heads = load_heads_dir(models)
    gbm_model = gb.load_gbm(models / "gbm.json")
    fz = models / "featurizer.json"
    extractor = FeatureExtractor.from_json(json.loads(fz.read_text())) if fz.exists() else FeatureExtractor(config.featurizer_seed)

    result = ev.analyze_image(image, detector_model, heads, gbm_model, extractor, source=str(image_path))
    doc = result.to_json()
    h, w = image.shape[:2]
    items = []
    if args.mask:
        try:
            mask = read_pgm_mask(args.mask)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read mask {args.mask}: {exc}") from exc
        gt = det.ground_truth_boxes(mask, detector_model.min_area)
        gt_labels = None
        root, idx = _find_manifest_entry(image_path)
        if root is not None:
            scene = load_dataset(root)[idx]
            gt_labels = [patch_labelset(scene, g, config.eval.coverage) for g in gt]
        match = det.match_detections([r.box for r in result.regions], gt, config.eval.iou_threshold)
        matched = {id(sb): j for sb, j in match.true_positives}
        for k, region in enumerate(result.regions):
            j = matched.get(id(region.box))
            if j is not None and gt_labels is not None:
                correct = set(region.labels) == set(gt_labels[j])
            elif j is not None:
                correct = not region.abnormal
            else:
                correct = False
            doc["regions"][k]["matched_ground_truth"] = j
            if gt_labels is not None and j is not None:
                doc["regions"][k]["ground_truth_labels"] = sorted(gt_labels[j])
            items.append({"box": doc["regions"][k]["box"], "kind": "detected", "color": GREEN if correct else RED,
                          "hatched": region.abnormal})
        doc["missed"] = [list(gt[j]) for j in match.false_negatives]
        for b in doc["missed"]:
            items.append({"box": b, "kind": "missed", "color": BLUE, "hatched": False})
    else:
        for k, region in enumerate(result.regions):
            items.append({"box": doc["regions"][k]["box"], "kind": "detected",
                          "color": RED if region.abnormal else GREEN, "hatched": region.abnormal})

    out = Path(args.out or config.analysis_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    _write_json(out / f"{stem}_regions.json", doc)
    (out / f"{stem}_overlay.svg").write_text(overlay_svg(w, h, items))
    n_abn = sum(r.abnormal for r in result.regions)
    print(f"{stem}: {len(result.regions)} regions, {n_abn} abnormal -> {out}")
    return 0


# ---------------------------------------------------------------------------

def _global_flags(default):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="JSON pipeline config")
    common.add_argument("--out", default=default, help="output directory")
    common.add_argument("--seed", type=int, default=default, help="override every seed in the config")
    return common


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subcommand copy from clobbering a value given before it
    common = _global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="rbcscope", parents=[_global_flags(None)],
                                     description="Cell detection and multi-label classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train pipeline stages")
    p.add_argument("--stage", choices=["detector", "heads", "gbm", "all"], default="all")
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="run an experiment and write a report")
    p.add_argument("--experiment", required=True, choices=list(ev.EXPERIMENTS) + ["detector"])
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--models", help="models directory (detector evaluation)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="analyse one full-scale PPM image")
    p.add_argument("image")
    p.add_argument("--mask", help="ground-truth PGM mask")
    p.add_argument("--models", help="models directory")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.scenes is not None and args.scenes < 0:
        parser.error("--scenes must be non-negative")
    try:
        config = _resolve(args)
        return args.func(args, config)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
