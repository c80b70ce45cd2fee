"""Loss, correlation metrics and per-channel z-normalization.

Arrays are plain numpy arrays. Reductions are carried out in float64
regardless of the input dtype.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, FormatError

NUM_EMOTIONS = 7
STD_FLOOR = 1e-6


def mse_loss(pred, target) -> float:
    """Mean squared error over every scalar output (batch x emotions)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise DomainError("mse_loss of an empty batch")
    diff = pred - target
    return float(np.mean(diff * diff))


def pearson_flagged(x, y) -> tuple[float, bool]:
    """Pearson correlation plus a flag that is True when either input is constant.

    A constant input has zero variance and the coefficient is undefined; in that
    case 0.0 is returned with the flag set.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DomainError("pearson needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    # rounding can push |r| a hair past 1
    return max(-1.0, min(1.0, r)), False


def pearson(x, y) -> float:
    return pearson_flagged(x, y)[0]


def mean_pcc(per_emotion: Sequence[float]) -> float:
    values = np.asarray(per_emotion, dtype=np.float64)
    if values.size == 0:
        raise DomainError("mean_pcc of no values")
    if not np.all(np.isfinite(values)):
        raise DomainError("mean_pcc requires finite inputs")
    return float(values.sum() / values.size)


@dataclass(frozen=True)
class Normalizer:
    """Per-channel mean and standard deviation (population convention)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.asarray(self.std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ContractError("mean and std must have the same length")
        if np.any(std <= 0):
            raise DomainError("std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n_features(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def fit_normalizer(dataset: Iterable, eps: float = STD_FLOOR) -> Normalizer:
    """Fit per-feature statistics where the feature axis is the last one.

    For clips this is the colour channel; statistics pool every frame and pixel
    of every tensor in ``dataset``.
    """
    total = None
    total_sq = None
    count = 0
    for t in dataset:
        a = np.asarray(t, dtype=np.float64)
        flat = a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.reshape(-1, 1)
        if total is None:
            total = np.zeros(flat.shape[1])
            total_sq = np.zeros(flat.shape[1])
        elif flat.shape[1] != total.size:
            raise ContractError("inconsistent feature count across dataset")
        total += flat.sum(axis=0)
        count += flat.shape[0]
    if count == 0:
        raise DomainError("cannot fit a normalizer on an empty dataset")
    mean = total / count
    # second pass keeps the variance accurate for large offsets
    for t in dataset:
        a = np.asarray(t, dtype=np.float64)
        flat = a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.reshape(-1, 1)
        total_sq += ((flat - mean) ** 2).sum(axis=0)
    std = np.sqrt(total_sq / count)
    return Normalizer(mean, np.maximum(std, eps))


def znormalize(t, norm: Normalizer) -> np.ndarray:
    a = np.asarray(t)
    n_feat = a.shape[-1] if a.ndim > 1 else 1
    if n_feat != norm.n_features:
        raise ContractError(f"tensor has {n_feat} features, normalizer has {norm.n_features}")
    dtype = a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64
    out = (a.astype(np.float64) - norm.mean) / norm.std
    return out.astype(dtype)


def denormalize(t, norm: Normalizer) -> np.ndarray:
    a = np.asarray(t)
    n_feat = a.shape[-1] if a.ndim > 1 else 1
    if n_feat != norm.n_features:
        raise ContractError(f"tensor has {n_feat} features, normalizer has {norm.n_features}")
    dtype = a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64
    return (a.astype(np.float64) * norm.std + norm.mean).astype(dtype)


@dataclass
class MetricReport:
    pcc_per_emotion: list[float]
    pcc_mean: float
    mse: float
    n_samples: int
    degenerate_emotions: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "pcc_per_emotion": [float(v) for v in self.pcc_per_emotion],
                "pcc_mean": float(self.pcc_mean),
                "mse": float(self.mse),
                "n_samples": int(self.n_samples),
                "degenerate_emotions": [int(i) for i in self.degenerate_emotions],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        try:
            d = json.loads(text)
            report = cls(
                pcc_per_emotion=[float(v) for v in d["pcc_per_emotion"]],
                pcc_mean=float(d["pcc_mean"]),
                mse=float(d["mse"]),
                n_samples=int(d["n_samples"]),
                degenerate_emotions=[int(i) for i in d["degenerate_emotions"]],
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad metric report: {exc}") from exc
        if len(report.pcc_per_emotion) != NUM_EMOTIONS:
            raise FormatError("metric report must carry 7 per-emotion coefficients")
        return report


def evaluate_predictions(pred, target) -> MetricReport:
    """Per-emotion Pearson coefficients, their mean and the MSE for a split."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ContractError(f"expected matching [n, 7] arrays, got {pred.shape} and {target.shape}")
    coeffs, degenerate = [], []
    for j in range(pred.shape[1]):
        r, flag = pearson_flagged(pred[:, j], target[:, j])
        coeffs.append(r)
        if flag:
            degenerate.append(j)
    return MetricReport(
        pcc_per_emotion=coeffs,
        pcc_mean=mean_pcc(coeffs),
        mse=mse_loss(pred, target),
        n_samples=pred.shape[0],
        degenerate_emotions=degenerate,
    )
