"""Frozen random convolutional feature extractor (224x224 RGB -> 2048-d).

Four bias-free 3x3 stride-2 convolutions with ReLU (3->16->32->64->128
channels), global average pooling, then a fixed linear projection to 2048
dimensions. All weights are generated from the seed, so an extractor is fully
described by ``{"version", "seed"}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ConvLayer, conv2d_forward, relu

PATCH_SIZE = 224
FEATURE_DIM = 2048
CHANNELS = (3, 16, 32, 64, 128)
KERNEL = 3
STRIDE = 2
# per-layer gain on the orthonormal kernels; keeps activations O(1) through the stack
GAIN = 2.0


def _orthogonal_kernels(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    fan_in = in_c * k * k
    q, r = np.linalg.qr(rng.standard_normal((fan_in, out_c)))
    q *= np.sign(np.diag(r))  # unique decomposition, so the seed fully determines q
    return (q.T * GAIN).reshape(out_c, in_c, k, k)


@dataclass
class FeatureExtractor:
    seed: int = 0
    layers: list[ConvLayer] = field(init=False, repr=False)
    projection: np.ndarray = field(init=False, repr=False)  # (2048, 128)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.layers = [ConvLayer(_orthogonal_kernels(rng, o, i, KERNEL), STRIDE)
                       for i, o in zip(CHANNELS[:-1], CHANNELS[1:])]
        self.projection = rng.standard_normal((FEATURE_DIM, CHANNELS[-1])) / np.sqrt(CHANNELS[-1])
        for layer in self.layers:
            layer.kernels.setflags(write=False)
        self.projection.setflags(write=False)

    def to_json(self) -> dict:
        return {"version": 1, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureExtractor":
        if doc.get("version") != 1:
            raise ValueError(f"unsupported featurizer version {doc.get('version')!r}")
        return cls(seed=int(doc["seed"]))

    def pooled(self, patch: np.ndarray) -> np.ndarray:
        """128-d globally pooled activations of the last convolution."""
        x = _as_input(patch)
        for layer in self.layers:
            x = relu(conv2d_forward(layer, x))
        return x.mean(axis=(1, 2))

    def magnitude_bound(self) -> np.ndarray:
        """Per-coordinate bound on ``|feature|`` for inputs in [0, 1].

        Each layer output is a dot product of one kernel with a window of the
        previous activations, so it is at most (kernel L1 norm) * (max input).
        """
        m = 1.0
        for layer in self.layers:
            m *= np.abs(layer.kernels).reshape(layer.kernels.shape[0], -1).sum(axis=1).max()
        return np.abs(self.projection).sum(axis=1) * m


def _as_input(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.shape != (PATCH_SIZE, PATCH_SIZE, 3):
        raise ValueError("expected 224×224 input")
    return np.transpose(patch.astype(np.float64) / 255.0, (2, 0, 1))


def extract_features(extractor: FeatureExtractor, patch: np.ndarray) -> np.ndarray:
    return extractor.projection @ extractor.pooled(patch)


def extract_batch(extractor: FeatureExtractor, patches) -> list[np.ndarray]:
    out = []
    for i, patch in enumerate(patches):
        try:
            out.append(extract_features(extractor, patch))
        except ValueError as exc:
            raise ValueError(f"patch {i}: {exc}") from exc
    return out
