"""Downstream metrics and the flat record format they are reported in.

Conventions: accuracy, mIoU, and mAP are percentages in [0, 100]. PSNR uses
mean squared error on the 255-level scale, so identical 8-bit images give
+inf and one-level-everywhere noise gives about 48 dB.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .backbone import AggregationSpec, BackboneHandle, MEAN_PATCH_AGG, forward_features
from .errors import (
    DegenerateBaseline,
    DegenerateFeature,
    DimensionMismatch,
    InsufficientData,
    IoFailure,
    QueryWithoutRelevants,
)
from .image import ImageTensor

RECORD_COLUMNS = (
    "model_id",
    "task",
    "dataset_id",
    "condition",
    "detail",
    "metric_name",
    "value",
)


@dataclass(frozen=True)
class MetricRecord:
    """One scalar result: which model, task, dataset, and condition it covers."""

    model_id: str
    task: str
    dataset_id: str
    condition: str
    detail: str
    metric_name: str
    value: float


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    if reference.shape != test.shape:
        raise DimensionMismatch(
            f"psnr needs equal shapes, got {reference.shape} vs {test.shape}"
        )
    diff = (reference.astype(np.float64) - test.astype(np.float64)) * 255.0
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(255.0**2 / mse)


def relative_efficiency(
    perf_attack: float, perf_baseline: float, perf_clean: float
) -> float:
    """Attack harm as a percentage of the task-specific baseline's harm."""
    denom = perf_baseline - perf_clean
    if denom == 0.0:
        raise DegenerateBaseline(
            "task-specific baseline did not move the metric; efficiency undefined"
        )
    return 100.0 * (perf_attack - perf_clean) / denom


def accuracy_percent(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionMismatch(
            f"prediction/label shape mismatch {predictions.shape} vs {labels.shape}"
        )
    if predictions.size == 0:
        raise InsufficientData("accuracy over an empty set is undefined")
    return 100.0 * float(np.mean(predictions == labels))


class MiouAccumulator:
    """Dataset-global intersection-over-union via one confusion matrix.

    Classes absent from both prediction and ground truth across the whole
    dataset are excluded from the mean.
    """

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, prediction: np.ndarray, ground_truth: np.ndarray) -> None:
        prediction = np.asarray(prediction)
        ground_truth = np.asarray(ground_truth)
        if prediction.shape != ground_truth.shape:
            raise DimensionMismatch(
                f"mask shape mismatch {prediction.shape} vs {ground_truth.shape}"
            )
        p = prediction.reshape(-1).astype(np.int64)
        g = ground_truth.reshape(-1).astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.num_classes):
            raise ValueError("prediction labels outside [0, num_classes)")
        if g.size and (g.min() < 0 or g.max() >= self.num_classes):
            raise ValueError("ground-truth labels outside [0, num_classes)")
        np.add.at(self.confusion, (g, p), 1)

    def value(self) -> float:
        inter = np.diag(self.confusion).astype(np.float64)
        union = (
            self.confusion.sum(axis=0) + self.confusion.sum(axis=1)
        ).astype(np.float64) - inter
        present = union > 0
        if not present.any():
            raise InsufficientData("no class appears in predictions or ground truth")
        return 100.0 * float(np.mean(inter[present] / union[present]))


def average_precision(scores: np.ndarray, relevant: np.ndarray) -> float:
    """Mean of precision-at-k over the ranks of relevant items, in [0, 1].

    Ties in score break by original index (stable descending sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    if scores.shape != relevant.shape or scores.ndim != 1:
        raise DimensionMismatch("scores and relevance must be matching 1-D arrays")
    if not relevant.any():
        raise QueryWithoutRelevants("query has no relevant items in the gallery")
    order = np.argsort(-scores, kind="stable")
    rel_sorted = relevant[order]
    cum_hits = np.cumsum(rel_sorted)
    ranks = np.arange(1, scores.size + 1)
    precision_at_rank = cum_hits / ranks
    return float(precision_at_rank[rel_sorted].mean())


@dataclass
class RetrievalResult:
    map_pct: float
    aps: list
    num_excluded: int


# ---------------------------------------------------------------------------
# Dataset-level evaluation against a backbone (and, for tasks, a fitted head)
# ---------------------------------------------------------------------------


def evaluate_classification(model, head, images, labels) -> float:
    """Top-1 accuracy (percent) of a fitted head over a labeled image list."""
    from .heads import predict_class

    if len(images) != len(labels):
        raise DimensionMismatch("images and labels differ in length")
    preds = np.array([predict_class(model, head, img) for img in images])
    return accuracy_percent(preds, np.asarray(labels))


def evaluate_segmentation(model, head, images, masks) -> float:
    """Dataset-global mIoU (percent) of a fitted head over masks."""
    from .heads import predict_mask

    if len(images) != len(masks):
        raise DimensionMismatch("images and masks differ in length")
    acc = MiouAccumulator(head.num_classes)
    for img, gt in zip(images, masks):
        acc.update(predict_mask(model, head, img), gt)
    return acc.value()


def _embed(
    model: BackboneHandle,
    images: Sequence[ImageTensor],
    layer: Optional[int],
    agg: AggregationSpec,
) -> np.ndarray:
    out = np.stack(
        [forward_features(model, img, layer, agg).astype(np.float64) for img in images]
    )
    norms = np.linalg.norm(out, axis=1)
    if (norms < 1e-12).any():
        raise DegenerateFeature("zero-norm embedding; cosine retrieval undefined")
    return out / norms[:, None]


def evaluate_retrieval(
    model: BackboneHandle,
    query_images: Sequence[ImageTensor],
    query_labels: Sequence[int],
    gallery_images: Sequence[ImageTensor],
    gallery_labels: Sequence[int],
    layer: Optional[int] = None,
    agg: AggregationSpec = MEAN_PATCH_AGG,
) -> RetrievalResult:
    """Cosine-similarity retrieval; mAP (percent) over answerable queries.

    Queries whose group never occurs in the gallery are excluded and counted.
    """
    if len(query_images) != len(query_labels):
        raise DimensionMismatch("query images and labels differ in length")
    if len(gallery_images) != len(gallery_labels):
        raise DimensionMismatch("gallery images and labels differ in length")
    q = _embed(model, query_images, layer, agg)
    g = _embed(model, gallery_images, layer, agg)
    sims = q @ g.T
    gallery_labels = np.asarray(gallery_labels)
    aps = []
    excluded = 0
    for i, label in enumerate(query_labels):
        relevant = gallery_labels == label
        if not relevant.any():
            excluded += 1
            continue
        aps.append(average_precision(sims[i], relevant))
    if not aps:
        raise QueryWithoutRelevants("no query has relevant gallery items")
    return RetrievalResult(
        map_pct=100.0 * float(np.mean(aps)), aps=aps, num_excluded=excluded
    )


# ---------------------------------------------------------------------------
# Record serialization: CSV and a JSON mirror that round-trip losslessly.
# ---------------------------------------------------------------------------


def _value_to_text(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


def _value_from_text(text: str) -> float:
    return float(text)


def write_records_csv(records: Sequence[MetricRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(RECORD_COLUMNS)
            for r in records:
                writer.writerow(
                    [
                        r.model_id,
                        r.task,
                        r.dataset_id,
                        r.condition,
                        r.detail,
                        r.metric_name,
                        _value_to_text(r.value),
                    ]
                )
    except OSError as e:
        raise IoFailure(f"cannot write records to {path}: {e}") from e
    return path


def read_records_csv(path: Union[str, Path]) -> list:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise IoFailure(f"cannot read records from {path}: {e}") from e
    if not rows or tuple(rows[0]) != RECORD_COLUMNS:
        raise IoFailure(f"{path} is not a metric-record CSV")
    out = []
    for row in rows[1:]:
        if len(row) != len(RECORD_COLUMNS):
            raise IoFailure(f"{path} has a malformed row: {row!r}")
        out.append(
            MetricRecord(
                model_id=row[0],
                task=row[1],
                dataset_id=row[2],
                condition=row[3],
                detail=row[4],
                metric_name=row[5],
                value=_value_from_text(row[6]),
            )
        )
    return out


def write_records_json(records: Sequence[MetricRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    payload = []
    for r in records:
        d = {k: getattr(r, k) for k in RECORD_COLUMNS}
        if math.isinf(r.value):
            d["value"] = "inf" if r.value > 0 else "-inf"
        payload.append(d)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write records to {path}: {e}") from e
    return path


def read_records_json(path: Union[str, Path]) -> list:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"cannot read records from {path}: {e}") from e
    out = []
    for d in payload:
        value = d["value"]
        if isinstance(value, str):
            value = float(value)
        out.append(
            MetricRecord(
                model_id=d["model_id"],
                task=d["task"],
                dataset_id=d["dataset_id"],
                condition=d["condition"],
                detail=d["detail"],
                metric_name=d["metric_name"],
                value=value,
            )
        )
    return out
