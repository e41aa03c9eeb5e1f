"""Cross-validated experiments and end-to-end image analysis.

Experiments follow three train/test settings over ground-truth region patches:

* ``model_a``: train on all patches of the training folds, test on all test patches;
* ``model_a_star``: the same trained heads, tested on single-cell test patches only;
* ``model_b``: train on single-cell training patches only, test on all test patches.

``model_a`` additionally fits the abnormality GBM on the heads' training-fold
outputs and scores it on the test fold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import detector as det
from . import gbm as gb
from . import heads as hd
from .featurizer import PATCH_SIZE, FeatureExtractor, extract_features
from .imgcore import Box, ScoredBox, crop, resize_bilinear
from .synthgen import CELL_TYPES, DatasetConfig, LabeledScene, covered_instances, generate_scenes

EXPERIMENTS = ("model_a", "model_a_star", "model_b")
REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# folds

@dataclass
class FoldAssignment:
    k: int
    assignment: np.ndarray
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)


def kfold_split(n: int, k: int = 5, seed: int = 0, strata: Sequence | None = None) -> FoldAssignment:
    """Shuffled k-fold partition; with ``strata`` each stratum is dealt evenly across folds.

    Indices are shuffled within each stratum, strata are laid end to end in
    sorted key order, and positions are dealt round-robin, so fold sizes differ
    by at most one.
    """
    if k < 2 or n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    if strata is None:
        sequence = rng.permutation(n)
    else:
        if len(strata) != n:
            raise ValueError("need one stratum key per sample")
        keys = sorted(set(strata), key=repr)
        groups = {key: [] for key in keys}
        for i, key in enumerate(strata):
            groups[key].append(i)
        sequence = np.concatenate([rng.permutation(np.asarray(groups[key])) for key in keys])
    assignment = np.empty(n, dtype=np.int64)
    assignment[sequence] = np.arange(n) % k
    return FoldAssignment(k, assignment, seed)


# ---------------------------------------------------------------------------
# patch datasets

@dataclass
class Patch:
    scene: int
    box: Box
    labels: frozenset
    n_cells: int

    @property
    def single(self) -> bool:
        return self.n_cells == 1

    def stratum(self) -> tuple:
        return (tuple(sorted(self.labels)), self.single)


@dataclass
class PatchDataset:
    patches: list[Patch]
    features: np.ndarray  # (n, 2048)

    @property
    def labels(self) -> list[frozenset]:
        return [p.labels for p in self.patches]

    @property
    def single(self) -> np.ndarray:
        return np.array([p.single for p in self.patches])


def region_patches(scenes: Sequence[LabeledScene], coverage: float = 0.3, min_area: int = 30) -> list[Patch]:
    """One patch per ground-truth mask region, labelled by the instances it covers."""
    patches = []
    for si, scene in enumerate(scenes):
        for box in det.ground_truth_boxes(scene.mask, min_area):
            members = covered_instances(scene, box, coverage)
            labels = frozenset(scene.instances[i].cell_type for i in members)
            patches.append(Patch(si, box, labels, len(members)))
    return patches


def patch_pixels(image: np.ndarray, box: Box) -> np.ndarray:
    return resize_bilinear(crop(image, box), PATCH_SIZE, PATCH_SIZE)


def build_patch_dataset(scenes: Sequence[LabeledScene], extractor: FeatureExtractor, coverage: float = 0.3) -> PatchDataset:
    patches = region_patches(scenes, coverage)
    feats = np.array([extract_features(extractor, patch_pixels(scenes[p.scene].image, p.box)) for p in patches])
    return PatchDataset(patches, feats.reshape(len(patches), -1))


def with_jittered_boxes(scenes: Sequence[LabeledScene], data: PatchDataset, extractor: FeatureExtractor,
                        max_grow: int = 3, seed: int = 0) -> PatchDataset:
    """``data`` plus one copy of each patch with every side pushed out by 0..max_grow px.

    Detector boxes run a pixel or two wider than mask boxes; heads that will
    classify proposals are trained on both so the crop scale shift does not
    move their outputs.
    """
    if max_grow <= 0 or not data.patches:
        return data
    rng = np.random.default_rng(seed)
    patches, feats = [], []
    for p in data.patches:
        image = scenes[p.scene].image
        h, w = image.shape[:2]
        g = rng.integers(0, max_grow + 1, 4)
        b = p.box
        box = Box(max(b.x_min - int(g[0]), 0), max(b.y_min - int(g[1]), 0),
                  min(b.x_max + int(g[2]), w - 1), min(b.y_max + int(g[3]), h - 1))
        patches.append(Patch(p.scene, box, p.labels, p.n_cells))
        feats.append(extract_features(extractor, patch_pixels(image, box)))
    return PatchDataset(data.patches + patches, np.vstack([data.features, np.array(feats)]))


# ---------------------------------------------------------------------------
# experiments

@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    featurizer_seed: int = 0
    heads: hd.HeadConfig = hd.HeadConfig(epochs=15)
    gbm: gb.GBMConfig = gb.GBMConfig()
    k: int = 5
    fold_seed: int = 0
    coverage: float = 0.3

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentReport:
    experiment: str
    per_fold: list[dict]
    mean: dict
    seeds: dict
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"version": REPORT_VERSION, "experiment": self.experiment, "seeds": self.seeds,
                "config": self.config, "per_fold": self.per_fold, "mean": self.mean}


def _auc_or_none(scores, positives):
    positives = np.asarray(positives, dtype=bool)
    if positives.all() or not positives.any():
        return None
    return hd.roc_auc(scores, positives)


def _evaluate(probs: np.ndarray, labels: Sequence[frozenset]) -> dict:
    y = hd.label_matrix(labels)
    preds = [hd.probs_to_labels(p) for p in probs]
    return {
        "n_test": len(labels),
        "auc": {t: _auc_or_none(probs[:, k], y[:, k]) for k, t in enumerate(CELL_TYPES)},
        "exact_match": hd.exact_match_accuracy(preds, list(labels)),
        # patches where no head fired; each counts as a mismatch
        "n_empty_predictions": sum(1 for ls in preds if not ls),
    }


def _mean_report(per_fold: list[dict]) -> dict:
    mean = {"auc": {}}
    for t in CELL_TYPES:
        vals = [f["auc"][t] for f in per_fold if f["auc"][t] is not None]
        mean["auc"][t] = float(np.mean(vals)) if vals else None
    mean["exact_match"] = float(np.mean([f["exact_match"] for f in per_fold]))
    for key in ("gbm_accuracy", "gbm_majority_baseline"):
        if all(key in f for f in per_fold):
            mean[key] = float(np.mean([f[key] for f in per_fold]))
    mean["auc_aggregation"] = "fold_mean"
    return mean


def run_experiments(ids: Sequence[str], data: PatchDataset, config: ExperimentConfig = ExperimentConfig()) -> dict:
    """Run several experiment settings on shared folds, training each model once per fold."""
    for eid in ids:
        if eid not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {eid!r}")
    single = data.single
    if single.all() or not single.any():
        raise ValueError("dataset must contain both single-cell and multi-cell patches")
    folds = kfold_split(len(data.patches), config.k, config.fold_seed, [p.stratum() for p in data.patches])
    labels = data.labels
    abnormal = np.array([gb.labelset_is_abnormal(ls) for ls in labels], dtype=np.float64)
    per_fold = {eid: [] for eid in ids}
    for fold in range(config.k):
        train, test = folds.train_indices(fold), folds.test_indices(fold)
        test_labels = [labels[i] for i in test]
        if "model_a" in ids or "model_a_star" in ids:
            heads, _ = hd.train_heads(data.features[train], [labels[i] for i in train], config.heads)
            probs = hd.predict_probs(heads, data.features[test])
            if "model_a" in ids:
                rec = {"fold": fold, "n_train": len(train), **_evaluate(probs, test_labels)}
                train_probs = hd.predict_probs(heads, data.features[train])
                model, losses = gb.fit_gbm(train_probs, abnormal[train], config.gbm)
                rec["gbm_train_loss"] = [float(v) for v in losses]
                flags = model.predict_proba(probs) > 0.5
                rec["gbm_accuracy"] = float(np.mean(flags == abnormal[test].astype(bool)))
                majority = abnormal[train].mean() > 0.5
                rec["gbm_majority_baseline"] = float(np.mean(abnormal[test].astype(bool) == majority))
                per_fold["model_a"].append(rec)
            if "model_a_star" in ids:
                keep = single[test]
                rec = {"fold": fold, "n_train": len(train),
                       **_evaluate(probs[keep], [ls for ls, s in zip(test_labels, keep) if s])}
                per_fold["model_a_star"].append(rec)
        if "model_b" in ids:
            train_b = train[single[train]]
            heads, _ = hd.train_heads(data.features[train_b], [labels[i] for i in train_b], config.heads)
            probs = hd.predict_probs(heads, data.features[test])
            per_fold["model_b"].append({"fold": fold, "n_train": len(train_b), **_evaluate(probs, test_labels)})
    seeds = {"dataset": config.dataset.seed, "featurizer": config.featurizer_seed,
             "heads": config.heads.seed, "folds": config.fold_seed}
    return {eid: ExperimentReport(eid, per_fold[eid], _mean_report(per_fold[eid]), seeds, config.to_json())
            for eid in ids}


def run_experiment(eid: str, data: PatchDataset, config: ExperimentConfig = ExperimentConfig()) -> ExperimentReport:
    return run_experiments([eid], data, config)[eid]


def prepare_dataset(config: ExperimentConfig, scenes: Sequence[LabeledScene] | None = None) -> PatchDataset:
    scenes = generate_scenes(config.dataset) if scenes is None else scenes
    return build_patch_dataset(scenes, FeatureExtractor(config.featurizer_seed), config.coverage)


# ---------------------------------------------------------------------------
# detection and full images

def evaluate_detector(model: det.DetectorModel | None, scenes: Sequence, iou_threshold: float = 0.5,
                      proposals: Sequence[Sequence[ScoredBox]] | None = None):
    """Pooled AP over ``scenes`` plus a per-scene TP/FP/FN summary.

    ``proposals`` may be given directly (one list per scene) instead of a model.
    """
    matches, summary = [], []
    for i, scene in enumerate(scenes):
        gt = det.ground_truth_boxes(scene.mask, model.min_area if model is not None else 30)
        props = proposals[i] if proposals is not None else det.propose_regions(model, scene.image)
        m = det.match_detections(props, gt, iou_threshold)
        matches.append(m)
        summary.append({"scene": i, "n_gt": len(gt), "tp": len(m.true_positives),
                        "fp": len(m.false_positives), "fn": len(m.false_negatives)})
    return det.average_precision(matches), summary


@dataclass
class RegionResult:
    box: ScoredBox
    probs: np.ndarray
    labels: frozenset
    abnormal_prob: float
    abnormal: bool

    def to_json(self) -> dict:
        b = self.box.box
        return {"box": [b.x_min, b.y_min, b.x_max, b.y_max], "score": self.box.score,
                "probs": {t: float(p) for t, p in zip(CELL_TYPES, self.probs)},
                "labels": sorted(self.labels), "abnormal_prob": self.abnormal_prob, "abnormal": self.abnormal}


@dataclass
class AnalyzedImage:
    source: str
    regions: list[RegionResult]

    def to_json(self) -> dict:
        return {"version": 1, "source": self.source, "regions": [r.to_json() for r in self.regions]}


def analyze_image(image: np.ndarray, detector_model: det.DetectorModel, heads, gbm_model: gb.GBMModel,
                  extractor: FeatureExtractor, source: str = "") -> AnalyzedImage:
    """Detect regions, classify each patch and flag abnormal ones."""
    regions = []
    for sb in det.propose_regions(detector_model, image):
        feat = extract_features(extractor, patch_pixels(image, sb.box))
        probs = hd.predict_probs(heads, feat)
        p_abn, flag = gb.predict_abnormal(gbm_model, probs)
        regions.append(RegionResult(sb, probs, hd.probs_to_labels(probs), p_abn, flag))
    return AnalyzedImage(source, regions)


def write_report(path, report: ExperimentReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
