"""GLCM texture features and a linear one-vs-rest SVM baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CLASS_NAMES, GrayImage, Rng, Tensor
from .errors import DegenerateData, DimMismatch, EmptyPairs, FormatError, ParamError

DEFAULT_OFFSETS = ((1, 0), (0, 1), (1, 1), (1, -1))
FEATURE_NAMES = ("energy", "contrast", "entropy", "correlation")


@dataclass(frozen=True)
class Glcm:
    levels: int
    matrix: np.ndarray
    offset: tuple[int, int]


@dataclass(frozen=True)
class TextureFeatures:
    energy: float
    contrast: float
    entropy: float
    correlation: float

    def as_array(self) -> np.ndarray:
        return np.array([self.energy, self.contrast, self.entropy, self.correlation])


def quantize_levels(img: GrayImage, levels: int) -> np.ndarray:
    return (img.pixels.astype(np.int64) * levels) // 256


def compute_glcm(img: GrayImage, levels: int = 16, offset=(1, 0), symmetric: bool = True) -> Glcm:
    """Normalised co-occurrence of quantised levels at pixel offset (dx, dy)."""
    dx, dy = offset
    if levels < 2:
        raise ParamError("levels must be at least 2")
    if (dx, dy) == (0, 0):
        raise ParamError("offset must be non-zero")
    q = quantize_levels(img, levels)
    h, w = q.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise EmptyPairs(f"offset {offset} leaves no pixel pairs in a {w}x{h} image")
    src = q[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
    dst = q[max(0, dy) : h + min(0, dy), max(0, dx) : w + min(0, dx)]
    counts = np.zeros((levels, levels), dtype=np.int64)
    np.add.at(counts, (src.ravel(), dst.ravel()), 1)
    if symmetric:
        counts = counts + counts.T
    return Glcm(levels, counts / counts.sum(), (dx, dy))


def glcm_features(g: Glcm) -> TextureFeatures:
    p = g.matrix
    idx = np.arange(g.levels, dtype=np.float64)
    i, j = np.meshgrid(idx, idx, indexing="ij")
    energy = float((p * p).sum())
    contrast = float(((i - j) ** 2 * p).sum())
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum()) + 0.0
    mu_i = float((i * p).sum())
    mu_j = float((j * p).sum())
    var_i = float(((i - mu_i) ** 2 * p).sum())
    var_j = float(((j - mu_j) ** 2 * p).sum())
    denom = np.sqrt(var_i * var_j)
    if denom < 1e-12:
        correlation = 0.0
    else:
        correlation = float(((i - mu_i) * (j - mu_j) * p).sum() / denom)
        correlation = min(1.0, max(-1.0, correlation))
    return TextureFeatures(energy, contrast, entropy, correlation)


@dataclass(frozen=True)
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vectors: Sequence[np.ndarray]) -> "FeatureScaler":
        x = np.asarray(vectors, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "FeatureScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class TextureConfig:
    levels: int = 16
    offsets: tuple[tuple[int, int], ...] = DEFAULT_OFFSETS
    symmetric: bool = True


def raw_feature_vector(img: GrayImage, cfg: TextureConfig = TextureConfig()) -> Tensor:
    """Four features per offset, offsets in configured order."""
    parts = [glcm_features(compute_glcm(img, cfg.levels, off, cfg.symmetric)).as_array() for off in cfg.offsets]
    return np.concatenate(parts)


def feature_vector(img: GrayImage, cfg: TextureConfig = TextureConfig(), scaler: FeatureScaler | None = None) -> Tensor:
    """Texture feature vector, standardised when a training-set scaler is given."""
    v = raw_feature_vector(img, cfg)
    return v if scaler is None else scaler.transform(v)


# ---------------------------------------------------------------------------
# Linear SVM
# ---------------------------------------------------------------------------

@dataclass
class LinearSvmModel:
    weights: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)
    classes: tuple[str, ...] = CLASS_NAMES
    lam: float = 1e-3
    epochs: int = 200
    seed: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    def scores(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.weights.shape[1]:
            raise DimMismatch(f"feature length {x.shape[-1]} != model dimension {self.weights.shape[1]}")
        return x @ self.weights.T + self.bias

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "lambda": self.lam,
            "epochs": self.epochs,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, d) -> "LinearSvmModel":
        try:
            return cls(
                np.asarray(d["weights"], dtype=np.float64),
                np.asarray(d["bias"], dtype=np.float64),
                tuple(d["classes"]),
                float(d["lambda"]),
                int(d["epochs"]),
                int(d["seed"]),
            )
        except KeyError as exc:
            raise FormatError(f"model JSON is missing {exc}") from None

    @classmethod
    def load(cls, path) -> "LinearSvmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def svm_objective(w: np.ndarray, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Regularised hinge loss of one binary problem; ``w`` includes the bias as last entry."""
    xa = np.hstack([x, np.ones((len(x), 1))])
    margins = y * (xa @ w)
    return 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - margins).mean())


def svm_train(features, labels, lam: float = 1e-3, epochs: int = 200, rng: Rng | None = None,
              num_classes: int = 3, classes: tuple[str, ...] | None = None) -> LinearSvmModel:
    """One-vs-rest Pegasos with step 1/(lam*t).

    The bias is folded in as a constant feature and regularised with the
    weights. The returned weights are the running average of all iterates;
    ``history`` holds the summed binary objectives of that average after each
    epoch.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if lam <= 0:
        raise ParamError("lambda must be positive")
    if len(x) == 0 or len(np.unique(y)) < 2:
        raise DegenerateData("training data needs at least two classes")
    if rng is None:
        rng = Rng(0)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    targets = np.where(y[None, :] == np.arange(num_classes)[:, None], 1.0, -1.0)  # (K, n)
    w = np.zeros((num_classes, d + 1))
    avg = np.zeros_like(w)
    history = []
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            yi = targets[:, i]
            viol = yi * (w @ xa[i]) < 1.0
            w *= 1.0 - eta * lam
            w[viol] += eta * yi[viol, None] * xa[i]
            avg += (w - avg) / t
        history.append(sum(svm_objective(avg[k], x, targets[k], lam) for k in range(num_classes)))
    seed = getattr(rng, "seed", 0)
    return LinearSvmModel(
        avg[:, :d].copy(), avg[:, d].copy(), classes or CLASS_NAMES[:num_classes], lam, epochs, seed, history
    )


def svm_predict(model: LinearSvmModel, x) -> int:
    """Class index with the highest score; ties go to the lowest index."""
    return int(np.argmax(model.scores(x)))
