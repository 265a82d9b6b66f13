"""Zero-shot evaluation: prompt templates, label index, cosine KNN, flat hit@k."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import InputError, LabelIndexError, MetricError, QueryError
from .model import TowerParams, TwoTowerModel, forward

DEFAULT_TEMPLATE = "a photo of {label}"
DEFAULT_KS = (1, 2, 5, 10)
PLACEHOLDER = "{label}"


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.pattern.count(PLACEHOLDER) != 1:
            raise InputError(f"template must contain {PLACEHOLDER} exactly once: {self.pattern!r}")


def apply_prompt(template: PromptTemplate, label: str) -> str:
    if not label:
        raise InputError("label must be non-empty")
    # plain replace, so braces inside the label stay verbatim
    return template.pattern.replace(PLACEHOLDER, label)


@dataclass(frozen=True)
class LabelIndex:
    labels: tuple
    embeddings: np.ndarray  # C x D, unit rows

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            seen, dup = set(), None
            for lab in self.labels:
                if lab in seen:
                    dup = lab
                    break
                seen.add(lab)
            raise LabelIndexError(f"duplicate label {dup!r}")
        if self.embeddings.shape[0] != len(self.labels):
            raise LabelIndexError(f"{len(self.labels)} labels but {self.embeddings.shape[0]} embedding rows")

    def __len__(self):
        return len(self.labels)


def build_label_index(label_features: np.ndarray, labels, text_tower: TowerParams) -> LabelIndex:
    labels = tuple(labels)
    if len(labels) != label_features.shape[0]:
        raise LabelIndexError(f"{len(labels)} labels for {label_features.shape[0]} feature rows")
    if not np.all(np.isfinite(label_features)):
        raise LabelIndexError("label features contain NaN or Inf")
    if len(set(labels)) != len(labels):
        LabelIndex(labels, np.zeros((len(labels), 1)))  # raises with the offending name
    emb, _ = forward(text_tower, label_features)
    return LabelIndex(labels, emb)


def topk_indices(index: LabelIndex, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k label rows per query by dot product, ties to the lower label index."""
    if not 1 <= k <= len(index):
        raise QueryError(f"k={k} outside [1, {len(index)}] (C = {len(index)} labels)")
    sims = queries @ index.embeddings.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def knn_predict(index: LabelIndex, image_embedding: np.ndarray, k: int) -> list[tuple]:
    order, sims = topk_indices(index, np.asarray(image_embedding)[None, :], k)
    return [(index.labels[j], float(s)) for j, s in zip(order[0], sims[0])]


def flat_hit_at_k(predictions, truth, k: int) -> float:
    """Fraction of items whose first ``k`` predictions hit any true label."""
    if len(predictions) != len(truth):
        raise MetricError(f"{len(predictions)} prediction lists vs {len(truth)} truth sets")
    if not predictions:
        raise MetricError("no items to score")
    hits = 0
    for i, (pred, true) in enumerate(zip(predictions, truth)):
        if not true:
            raise MetricError(f"item {i} has an empty truth set; hit@k is undefined")
        if len(pred) < k:
            raise MetricError(f"item {i} has {len(pred)} predictions, fewer than k={k}")
        if not set(pred[:k]).isdisjoint(true):
            hits += 1
    return hits / len(predictions)


def random_baseline(truth, num_labels: int, k: int) -> float:
    """Expected hit@k when the top-k is a uniformly random k-subset of the labels."""
    total = comb(num_labels, k)
    return float(np.mean([1.0 - comb(num_labels - len(t), k) / total for t in truth]))


@dataclass
class EvalResult:
    fh: dict  # k -> flat hit@k
    n: int
    baseline: dict = field(default_factory=dict)
    predictions: list = field(default_factory=list)
    truth: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "fh": {str(k): v for k, v in self.fh.items()},
            "n": self.n,
            "baseline": {str(k): v for k, v in self.baseline.items()},
        }


def evaluate(
    model: TwoTowerModel,
    images: np.ndarray,
    truth,
    label_features: np.ndarray,
    labels,
    ks=DEFAULT_KS,
) -> EvalResult:
    """Embed images, retrieve top-k labels from the text-tower index, score hit@k per k."""
    ks = [int(k) for k in ks]
    if ks != sorted(ks):
        raise QueryError(f"ks must be ascending, got {ks}")
    index = build_label_index(label_features, labels, model.text_tower)
    if ks[-1] > len(index):
        raise QueryError(f"k={ks[-1]} exceeds the number of labels C = {len(index)}")
    z, _ = forward(model.image_tower, images)
    order, _ = topk_indices(index, z, ks[-1])
    preds = [[index.labels[j] for j in row] for row in order]
    truth = [set(t) for t in truth]
    fh = {k: flat_hit_at_k(preds, truth, k) for k in ks}
    base = {k: random_baseline(truth, len(index), k) for k in ks}
    return EvalResult(fh, len(preds), base, preds, truth)
