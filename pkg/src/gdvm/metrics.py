"""Task losses, decision rules and evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

BCE_CLAMP = 1e-7
MULTILABEL_THRESHOLD = 0.5


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise DataError(f"label {bad} outside [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels.astype(np.int64)] = 1
    picked = ad.sum(ad.mul(ad.log_softmax(logits), Tensor._wrap(onehot)))
    return ad.scale(picked, -1.0 / n)


def binary_cross_entropy_loss(probs: Tensor, targets) -> Tensor:
    targets = np.asarray(targets)
    if targets.shape != probs.shape:
        raise DataError(f"targets {targets.shape} do not match probabilities {probs.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise DataError("multi-label targets must be 0 or 1")
    t = targets.astype(probs.dtype)
    p = ad.clip(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = ad.add(ad.mul(ad.log(p), Tensor._wrap(t)), ad.mul(ad.log(ad.sub(1.0, p)), Tensor._wrap(1 - t)))
    return ad.scale(ad.mean(ll), -1.0)


def l2_semantic_loss(pred: Tensor, target) -> Tensor:
    """Mean over rows of the squared Euclidean distance to the target vectors."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DataError(f"targets {target.shape} do not match predictions {pred.shape}")
    diff = ad.sub(pred, Tensor._wrap(target))
    return ad.mean(ad.sum(ad.mul(diff, diff), axis=1))


def argmax_decision(scores: np.ndarray) -> np.ndarray:
    return np.asarray(scores).argmax(axis=1)


def threshold_decision(probs: np.ndarray, threshold: float = MULTILABEL_THRESHOLD) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.int64)


def accuracy(pred_labels, truth) -> float:
    pred_labels, truth = np.asarray(pred_labels), np.asarray(truth)
    return float(np.mean(pred_labels == truth)) if truth.size else float("nan")


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def micro_macro_f1(pred, truth) -> tuple[float, float]:
    """Micro F1 pools TP/FP/FN over labels; macro averages per-label F1.

    A label with no predicted and no true positives scores 0.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise DataError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    micro = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    macro = float(np.mean(_f1(tp, fp, fn))) if tp.size else 0.0
    return micro, macro


def nearest_prototype(pred_semantic, prototypes) -> np.ndarray:
    """Row index of the closest prototype (Euclidean; ties go to the lower index)."""
    pred = np.asarray(pred_semantic, dtype=np.float64)
    protos = np.asarray(prototypes, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] == 0:
        raise ConfigError("prototype set is empty")
    d2 = ((pred[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def zero_shot_top1(pred_semantic, prototypes, truth) -> float:
    """Fraction of rows whose nearest prototype row is ``truth``."""
    return accuracy(nearest_prototype(pred_semantic, prototypes), truth)


def _pairwise_distances(x: np.ndarray, chunk: int = 256) -> np.ndarray:
    # explicit differences rather than the Gram expansion, so coincident points are exactly 0 apart
    out = np.empty((len(x), len(x)))
    for start in range(0, len(x), chunk):
        diff = x[start:start + chunk, None, :] - x[None, :, :]
        out[start:start + chunk] = np.sqrt((diff * diff).sum(axis=2))
    return out


def latent_separation(embeddings, labels) -> float:
    """Mean silhouette coefficient of ``embeddings`` grouped by ``labels``.

    Singleton classes score 0 for their member, as does any point with
    ``a == b == 0``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, inv = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise DataError("silhouette needs at least two classes")
    dist = _pairwise_distances(x)
    onehot = np.eye(classes.size)[inv]
    counts = onehot.sum(axis=0)
    sums = dist @ onehot  # per-point total distance to every class
    own = counts[inv]
    a = np.where(own > 1, sums[np.arange(len(x)), inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / counts
    mean_other[np.arange(len(x)), inv] = np.inf
    b = mean_other.min(axis=1)
    top = np.maximum(a, b)
    s = np.where((own > 1) & (top > 0), (b - a) / np.where(top > 0, top, 1.0), 0.0)
    return float(s.mean())


# ---------------------------------------------------------------- reporting


def mean_std(values: Sequence[float]) -> tuple[float, Optional[float]]:
    """Mean and sample (n-1) standard deviation; std is ``None`` for one value."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return float("nan"), None
    std = float(vals.std(ddof=1)) if vals.size > 1 else None
    return float(vals.mean()), std


@dataclass
class MetricsReport:
    """Per-seed metric rows plus their mean ± sample std."""

    rows: list[dict] = field(default_factory=list)
    context: dict = field(default_factory=dict)

    def add(self, seed: int, **metrics) -> None:
        self.rows.append({"seed": seed, **metrics})

    def metric_names(self) -> list[str]:
        names = []
        for row in self.rows:
            for k in row:
                if k != "seed" and k not in names:
                    names.append(k)
        return names

    def aggregate(self) -> dict:
        out = {}
        for name in self.metric_names():
            vals = [r.get(name) for r in self.rows]
            if all(isinstance(v, (int, float)) or v is None for v in vals):
                m, s = mean_std(vals)
                out[name] = {"mean": _finite_or_none(m), "std": s, "n": sum(v is not None for v in vals)}
        return out

    def to_json(self) -> str:
        payload = {"n_seeds": len(self.rows), "aggregate": self.aggregate(), "context": self.context}
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["seed"] + self.metric_names()
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})
        return buf.getvalue()


def _finite_or_none(v):
    return v if v is not None and math.isfinite(v) else None


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v
