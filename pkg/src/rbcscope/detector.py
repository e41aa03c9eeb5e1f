"""Region proposals for full-scale images and detection scoring.

The proposal model has two small trainable scorers:

* a foreground scorer on 12 window statistics (mean, variance and edge energy
  of R, G, B and luma over a tent-weighted 16x16 window), trained on windows sampled every
  8 pixels with the mask value at the window centre as label;
* an objectness scorer on pooled statistics of a candidate box, trained on
  ground-truth boxes against jittered and background boxes.

At inference the foreground scorer runs at every pixel (window statistics are
separable filters), the thresholded map is split into connected components, each
component box is dilated by 2 px, scored for objectness and passed through NMS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .imgcore import Box, ScoredBox, bounding_box, connected_components, iou, nms

N_WINDOW_FEATURES = 12
N_BOX_FEATURES = 8


# ---------------------------------------------------------------------------
# features

def tent_weights(size: int) -> np.ndarray:
    """1-D triangular weights peaking at the window centre, summing to 1."""
    k = (size / 2 + 0.5) - np.abs(np.arange(size) - (size - 1) / 2)
    return k / k.sum()


def _window_mean(a: np.ndarray, size: int) -> np.ndarray:
    """Tent-weighted mean of ``a`` over the size x size window anchored so the pixel sits at offset size//2.

    Edges are replicated. The separable tent keeps thin objects from being
    averaged away by background at the window rim.
    """
    lo = size // 2
    hi = size - lo
    k = tent_weights(size)
    p = np.pad(a, ((lo, hi - 1), (lo, hi - 1)), mode="edge")
    rows = np.lib.stride_tricks.sliding_window_view(p, size, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, size, axis=1) @ k


def _planes(image: np.ndarray) -> list[np.ndarray]:
    x = image.astype(np.float64) / 255.0
    luma = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    return [x[..., 0], x[..., 1], x[..., 2], luma]


def window_features(image: np.ndarray, window: int = 16) -> np.ndarray:
    """Per-pixel window statistics, shaped ``(h, w, 12)``."""
    feats = []
    for plane in _planes(image):
        m = _window_mean(plane, window)
        var = np.maximum(_window_mean(plane * plane, window) - m * m, 0.0)
        gy, gx = np.gradient(plane)
        edge = _window_mean(gx * gx + gy * gy, window)
        feats += [m, np.sqrt(var), np.sqrt(edge)]
    return np.stack(feats, axis=-1)


def box_features(prob: np.ndarray, luma: np.ndarray, box: Box) -> np.ndarray:
    h, w = prob.shape
    inner = prob[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1]
    ring = box.dilate(3, w, h)
    outer = prob[ring.y_min:ring.y_max + 1, ring.x_min:ring.x_max + 1]
    ring_mean = (outer.sum() - inner.sum()) / max(outer.size - inner.size, 1)
    core = Box(box.x_min + 3, box.y_min + 3, box.x_max - 3, box.y_max - 3)
    if core.x_min <= core.x_max and core.y_min <= core.y_max:
        core_sum = prob[core.y_min:core.y_max + 1, core.x_min:core.x_max + 1].sum()
        border_mean = (inner.sum() - core_sum) / max(inner.size - core.area, 1)
    else:
        border_mean = inner.mean()
    lum = luma[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1]
    return np.array([
        inner.mean(),
        ring_mean,
        border_mean,
        (inner > 0.5).mean(),
        lum.mean(),
        lum.std(),
        np.log(box.area) / 10.0,
        min(box.width, box.height) / max(box.width, box.height),
    ])


# ---------------------------------------------------------------------------
# model

@dataclass
class LogisticScorer:
    """A single dense unit with a sigmoid, on standardised inputs."""

    layer: nn.DenseLayer
    shift: np.ndarray
    scale: np.ndarray

    def prob(self, x: np.ndarray) -> np.ndarray:
        z = nn.dense_forward(self.layer, (np.asarray(x, dtype=np.float64) - self.shift) / self.scale)
        return nn.sigmoid(z[..., 0])

    def to_json(self) -> dict:
        return nn.layers_to_json([self.layer], shift=self.shift.tolist(), scale=self.scale.tolist())

    @classmethod
    def from_json(cls, doc: dict) -> "LogisticScorer":
        (layer,) = nn.layers_from_json(doc)
        return cls(layer, np.asarray(doc["shift"], dtype=np.float64), np.asarray(doc["scale"], dtype=np.float64))


@dataclass
class DetectorModel:
    foreground: LogisticScorer
    objectness: LogisticScorer
    fg_threshold: float = 0.5
    nms_iou: float = 0.5
    min_area: int = 30
    window: int = 16
    dilation: int = 2

    def to_json(self) -> dict:
        return {"version": 1, "foreground": self.foreground.to_json(), "objectness": self.objectness.to_json(),
                "fg_threshold": self.fg_threshold, "nms_iou": self.nms_iou, "min_area": self.min_area,
                "window": self.window, "dilation": self.dilation}

    @classmethod
    def from_json(cls, doc: dict) -> "DetectorModel":
        if doc.get("version") != 1:
            raise ValueError(f"unsupported detector version {doc.get('version')!r}")
        return cls(LogisticScorer.from_json(doc["foreground"]), LogisticScorer.from_json(doc["objectness"]),
                   doc["fg_threshold"], doc["nms_iou"], doc["min_area"], doc["window"], doc["dilation"])


@dataclass(frozen=True)
class DetectorConfig:
    epochs: int = 50
    batch_size: int = 10
    learning_rate: float = 1e-3
    decay: float = 1e-6
    momentum: float = 0.9
    window: int = 16
    stride: int = 8
    fg_threshold: float = 0.5
    nms_iou: float = 0.5
    min_area: int = 30
    dilation: int = 2
    negatives_per_scene: int = 12
    seed: int = 0


@dataclass
class TrainingLog:
    foreground: list[float] = field(default_factory=list)
    objectness: list[float] = field(default_factory=list)


def ground_truth_boxes(mask: np.ndarray, min_area: int = 30) -> list[Box]:
    """Bounding box of every connected mask region of at least ``min_area`` pixels."""
    return [bounding_box(r) for r in connected_components(mask) if len(r) >= min_area]


def _fit_logistic(x: np.ndarray, y: np.ndarray, config: DetectorConfig, rng: np.random.Generator):
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    xs = (x - shift) / scale
    layer = nn.DenseLayer.zeros(x.shape[1], 1)
    params = [layer.weights, layer.bias]
    state = nn.MomentumState(config.learning_rate, config.decay, config.momentum)

    def full_loss():
        p = nn.sigmoid(xs @ layer.weights[0] + layer.bias[0])
        return nn.bce_l2_loss(p, y)[0]

    losses = [full_loss()]
    n = len(xs)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = xs[idx]
            p = nn.sigmoid(xb @ layer.weights[0] + layer.bias[0])
            g = (p - y[idx]) / len(idx)
            nn.momentum_step(params, [(g @ xb)[None, :], np.array([g.sum()])], state)
        losses.append(full_loss())
    return LogisticScorer(layer, shift, scale), losses


def _jitter(box: Box, rng: np.random.Generator, strength: float, w: int, h: int) -> Box:
    bw, bh = box.width, box.height
    dx, dy = rng.uniform(-strength, strength, 2) * (bw, bh)
    sx, sy = np.exp(rng.uniform(-strength, strength, 2))
    cx = (box.x_min + box.x_max) / 2 + dx
    cy = (box.y_min + box.y_max) / 2 + dy
    hw, hh = max(bw * sx / 2, 2), max(bh * sy / 2, 2)
    x0 = int(np.clip(round(cx - hw), 0, w - 1))
    y0 = int(np.clip(round(cy - hh), 0, h - 1))
    x1 = int(np.clip(round(cx + hw), x0, w - 1))
    y1 = int(np.clip(round(cy + hh), y0, h - 1))
    return Box(x0, y0, x1, y1)


def _objectness_samples(scene_image, mask, gt: list[Box], scorer: LogisticScorer, config: DetectorConfig, rng):
    h, w = mask.shape
    feats = window_features(scene_image, config.window)
    prob = scorer.prob(feats)
    luma = _planes(scene_image)[3]
    xs, ys = [], []
    for box in gt:
        xs.append(box_features(prob, luma, box.dilate(config.dilation, w, h)))
        ys.append(1.0)
    for _ in range(config.negatives_per_scene):
        if gt and rng.random() < 0.75:
            src = gt[int(rng.integers(len(gt)))]
            cand = _jitter(src, rng, 0.8, w, h)
            if max(iou(cand, g) for g in gt) >= 0.4:
                continue
        else:
            bw, bh = (int(v) for v in rng.integers(8, 48, 2))
            x0, y0 = int(rng.integers(0, max(w - bw, 1))), int(rng.integers(0, max(h - bh, 1)))
            cand = Box(x0, y0, min(x0 + bw, w - 1), min(y0 + bh, h - 1))
            if gt and max(iou(cand, g) for g in gt) >= 0.4:
                continue
        xs.append(box_features(prob, luma, cand))
        ys.append(0.0)
    return xs, ys


def train_detector(scenes: Sequence, config: DetectorConfig = DetectorConfig()):
    """Train both scorers with momentum SGD; returns ``(model, TrainingLog)``.

    ``scenes`` are objects with ``image`` and ``mask`` attributes.
    """
    if len(scenes) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    half = config.stride // 2
    wx, wy = [], []
    for scene in scenes:
        feats = window_features(scene.image, config.window)
        grid = feats[half::config.stride, half::config.stride]
        wx.append(grid.reshape(-1, N_WINDOW_FEATURES))
        wy.append(scene.mask[half::config.stride, half::config.stride].reshape(-1).astype(np.float64))
    log = TrainingLog()
    fg, log.foreground = _fit_logistic(np.concatenate(wx), np.concatenate(wy), config, rng)

    bx, by = [], []
    for scene in scenes:
        gt = ground_truth_boxes(scene.mask, config.min_area)
        x, y = _objectness_samples(scene.image, scene.mask, gt, fg, config, rng)
        bx += x
        by += y
    obj, log.objectness = _fit_logistic(np.array(bx).reshape(-1, N_BOX_FEATURES), np.array(by), config, rng)
    model = DetectorModel(fg, obj, config.fg_threshold, config.nms_iou, config.min_area, config.window, config.dilation)
    return model, log


def foreground_map(model: DetectorModel, image: np.ndarray) -> np.ndarray:
    return model.foreground.prob(window_features(image, model.window))


def propose_regions(model: DetectorModel, image: np.ndarray) -> list[ScoredBox]:
    h, w = image.shape[:2]
    prob = foreground_map(model, image)
    luma = _planes(image)[3]
    candidates = []
    for region in connected_components(prob > model.fg_threshold):
        if len(region) < model.min_area:
            continue
        box = bounding_box(region).dilate(model.dilation, w, h)
        score = float(model.objectness.prob(box_features(prob, luma, box)))
        candidates.append(ScoredBox(box, score))
    return nms(candidates, model.nms_iou)


def save_detector(path, model: DetectorModel) -> None:
    with open(path, "w") as fh:
        fh.write(nn.dumps(model.to_json()))


def load_detector(path) -> DetectorModel:
    with open(path) as fh:
        return DetectorModel.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class DetectionMatch:
    true_positives: list[tuple[ScoredBox, int]] = field(default_factory=list)
    false_positives: list[tuple[ScoredBox, None]] = field(default_factory=list)
    false_negatives: list[int] = field(default_factory=list)
    n_ground_truth: int = 0

    def scored(self) -> list[tuple[float, bool]]:
        """``(score, is_true_positive)`` for every proposal, true positives first."""
        return [(sb.score, True) for sb, _ in self.true_positives] + [(sb.score, False) for sb, _ in self.false_positives]


def match_detections(proposals: Sequence[ScoredBox], gt_boxes: Sequence[Box], iou_threshold: float = 0.5) -> DetectionMatch:
    """Greedy matching by descending score to the best still-unmatched ground truth."""
    result = DetectionMatch(n_ground_truth=len(gt_boxes))
    taken = [False] * len(gt_boxes)
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].score)
    for i in order:
        prop = proposals[i]
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            o = iou(prop.box, g)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is None:
            result.false_positives.append((prop, None))
        else:
            taken[best] = True
            result.true_positives.append((prop, best))
    result.false_negatives = [j for j, t in enumerate(taken) if not t]
    return result


def average_precision(matches: Sequence[DetectionMatch]) -> float:
    """Area under the pooled precision-recall curve, without interpolation.

    Detections sharing a score enter the curve together, so the sum runs over
    distinct score thresholds: ``sum((R_k - R_{k-1}) * P_k)``.
    """
    n_gt = sum(m.n_ground_truth for m in matches)
    if n_gt == 0:
        raise ValueError("undefined recall")
    pooled = [d for m in matches for d in m.scored()]
    if not pooled:
        return 0.0
    scores = np.array([s for s, _ in pooled])
    tps = np.array([t for _, t in pooled], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(1.0 - tps)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    recall = ctp[ends] / n_gt
    precision = ctp[ends] / (ctp[ends] + cfp[ends])
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * precision))
