"""Six binary-relevance classification heads and multi-label metrics.

Each head is ``2048 -> 512 (ReLU) -> 1 -> sigmoid`` and answers "does this
patch contain a cell of type k?". The six outputs are reported side by side
and are not normalised against each other.

Inputs are standardised per dimension with a fixed shift/scale fitted on the
training features before the first dense layer; the frozen features share a
large common offset that otherwise swamps the tiny Adam steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .synthgen import CELL_TYPES

HIDDEN = 512


@dataclass
class BinaryHead:
    dense1: nn.DenseLayer
    dense2: nn.DenseLayer
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    adam: nn.AdamState = field(default_factory=nn.AdamState)

    @classmethod
    def init(cls, n_in: int, rng: np.random.Generator, learning_rate: float = 1e-5, shift=None, scale=None):
        return cls(nn.DenseLayer.init(n_in, HIDDEN, rng), nn.DenseLayer.init(HIDDEN, 1, rng, scale=np.sqrt(1.0 / HIDDEN)),
                   shift, scale, nn.AdamState(learning_rate=learning_rate))

    @classmethod
    def zeros(cls, n_in: int = 2048):
        return cls(nn.DenseLayer.zeros(n_in, HIDDEN), nn.DenseLayer.zeros(HIDDEN, 1))

    @property
    def params(self) -> list[np.ndarray]:
        return [self.dense1.weights, self.dense1.bias, self.dense2.weights, self.dense2.bias]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.shift is None:
            return x
        return (x - self.shift) / self.scale

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = nn.relu(nn.dense_forward(self.dense1, self.standardize(x)))
        return nn.dense_forward(self.dense2, h)[..., 0]

    def loss(self, x: np.ndarray, y: np.ndarray, lam: float) -> float:
        """Full BCE + L2 loss on already-standardised ``x``."""
        h = nn.relu(nn.dense_forward(self.dense1, x))
        z = nn.dense_forward(self.dense2, h)[:, 0]
        return nn.bce_l2_loss(nn.sigmoid(z), y, [self.dense1.weights, self.dense2.weights], lam)[0]

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, lam: float):
        """Batch BCE + L2 on both weight matrices; grads ordered like :attr:`params`.

        ``x`` must already be standardised.
        """
        pre = nn.dense_forward(self.dense1, x)
        h = nn.relu(pre)
        z = nn.dense_forward(self.dense2, h)[:, 0]
        loss, dz, (gw1_reg, gw2_reg) = nn.bce_l2_loss(nn.sigmoid(z), y, [self.dense1.weights, self.dense2.weights], lam)
        gw2, gb2, dh = nn.dense_backward(self.dense2, h, dz[:, None])
        dpre = dh * (pre > 0)
        gw1, gb1, _ = nn.dense_backward(self.dense1, x, dpre, need_x=False)
        return loss, [gw1 + gw1_reg, gb1, gw2 + gw2_reg, gb2]


@dataclass(frozen=True)
class HeadConfig:
    epochs: int = 200
    batch_size: int = 32
    lam: float = 1e-4
    learning_rate: float = 1e-5
    seed: int = 0


def label_matrix(labels: Sequence[frozenset]) -> np.ndarray:
    """(n, 6) 0/1 matrix in the fixed cell-type order."""
    return np.array([[t in ls for t in CELL_TYPES] for ls in labels], dtype=np.float64).reshape(len(labels), len(CELL_TYPES))


def fit_standardizer(x: np.ndarray):
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return shift, scale


def train_head(x: np.ndarray, y: np.ndarray, config: HeadConfig, index: int, shift=None, scale=None):
    """Train one head with Adam on shuffled minibatches; returns ``(head, epoch_losses)``."""
    rng = np.random.default_rng([config.seed, index])
    head = BinaryHead.init(x.shape[1], rng, config.learning_rate, shift, scale)
    x = head.standardize(x)
    n = len(x)
    history = [head.loss(x, y, config.lam)]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = head.loss_and_grads(x[idx], y[idx], config.lam)
            nn.adam_step(head.params, grads, head.adam)
        history.append(head.loss(x, y, config.lam))
    return head, history


def train_heads(features, labels: Sequence[frozenset], config: HeadConfig = HeadConfig()):
    """Train the six heads; returns ``(heads, histories)`` with one loss curve per head.

    ``histories[k][0]`` is the loss before training and ``histories[k][e]`` the
    full-data loss after epoch ``e``.
    """
    x = np.asarray(features, dtype=np.float64)
    if len(x) == 0 or len(x) != len(labels):
        raise ValueError("need a non-empty feature set with one label set per feature")
    y = label_matrix(labels)
    shift, scale = fit_standardizer(x)
    heads, histories = [], []
    for k in range(len(CELL_TYPES)):
        head, hist = train_head(x, y[:, k], config, k, shift, scale)
        heads.append(head)
        histories.append(hist)
    return heads, histories


def predict_probs(heads: Sequence[BinaryHead], feature) -> np.ndarray:
    """Six independent sigmoid outputs; shape ``(6,)`` or ``(n, 6)`` for a batch."""
    x = np.asarray(feature, dtype=np.float64)
    return np.stack([nn.sigmoid(h.logits(x)) for h in heads], axis=-1)


def probs_to_labels(probs, threshold: float = 0.5) -> frozenset[str]:
    return frozenset(t for t, p in zip(CELL_TYPES, probs) if p > threshold)


def roc_auc(scores, positives) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives).astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC undefined")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    upto = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (upto - below).sum()
    return float(wins / (len(pos) * len(neg)))


def exact_match_accuracy(pred: Sequence[frozenset], gt: Sequence[frozenset]) -> float:
    if len(pred) != len(gt):
        raise ValueError("prediction and ground-truth lists differ in length")
    if not pred:
        raise ValueError("need at least one sample")
    return sum(set(p) == set(g) for p, g in zip(pred, gt)) / len(pred)


def head_to_json(head: BinaryHead) -> dict:
    extra = {}
    if head.shift is not None:
        extra = {"shift": head.shift.tolist(), "scale": head.scale.tolist()}
    return nn.layers_to_json([head.dense1, head.dense2], **extra)


def head_from_json(doc: dict) -> BinaryHead:
    d1, d2 = nn.layers_from_json(doc)
    shift = np.asarray(doc["shift"], dtype=np.float64) if "shift" in doc else None
    scale = np.asarray(doc["scale"], dtype=np.float64) if "scale" in doc else None
    return BinaryHead(d1, d2, shift, scale)


def heads_to_json(heads: Sequence[BinaryHead]) -> dict:
    return {"version": nn.FORMAT_VERSION, "heads": {t: head_to_json(h) for t, h in zip(CELL_TYPES, heads)}}


def heads_from_json(doc: dict) -> list[BinaryHead]:
    if doc.get("version") != nn.FORMAT_VERSION:
        raise ValueError(f"unsupported heads version {doc.get('version')!r}")
    return [head_from_json(doc["heads"][t]) for t in CELL_TYPES]


def save_heads(path, heads) -> None:
    with open(path, "w") as fh:
        fh.write(nn.dumps(heads_to_json(heads)))


def load_heads(path) -> list[BinaryHead]:
    with open(path) as fh:
        return heads_from_json(json.load(fh))
