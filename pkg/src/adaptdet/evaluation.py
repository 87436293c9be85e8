"""Detection evaluation (per-class AP, mAP@0.5) and embedding export.

AP uses score-descending greedy matching (each ground-truth box claimed at
most once) and the exact all-points interpolated area under the
precision-recall curve. Classes without ground truth are excluded from the
mean and reported in the result's ``flagged`` list.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import batch_to_tensor
from .checkpoint import load_checkpoint
from .data import AnnotatedImage, Dataset
from .detector import Detection, iou
from .errors import ConfigurationError
from .model import AdaptiveDetector


def average_precision(
    detections: list[tuple[str, tuple, float]],
    ground_truth: dict[str, list],
    iou_threshold: float = 0.5,
) -> float:
    """AP for one class.

    detections: (image_id, box, score) triples; ground_truth: image_id ->
    list of boxes. Detections are ranked by descending score with ties
    broken by image_id then input position. Returns NaN when the class has
    no ground truth (the caller excludes such classes from the mean).
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        return float("nan")
    if not detections:
        return 0.0

    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i][2], detections[i][0], i),
    )
    matched = {image_id: [False] * len(boxes) for image_id, boxes in ground_truth.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        image_id, box, _score = detections[i]
        gt_boxes = ground_truth.get(image_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes):
            value = iou(box, gt)
            if value > best_iou:
                best_iou, best_j = value, j
        if best_j >= 0 and best_iou >= iou_threshold and not matched[image_id][best_j]:
            tp[rank] = 1.0
            matched[image_id][best_j] = True
        else:
            fp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map50: float
    counts: dict[int, dict[str, int]]
    flagged: list[int] = field(default_factory=list)  # classes with zero ground truth

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "classes_without_gt": self.flagged,
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def detections_to_json(detections_by_image: dict[str, list[Detection]]) -> list[dict]:
    rows = []
    for image_id, dets in detections_by_image.items():
        for d in dets:
            rows.append(
                {
                    "image_id": image_id,
                    "class_id": d.class_id,
                    "score": d.score,
                    "box": list(d.box),
                }
            )
    return rows


def evaluate_detections(
    detections_by_image: dict[str, list[Detection]],
    dataset: Dataset,
    iou_threshold: float = 0.5,
) -> EvalResult:
    """Score a prepared detection set against an annotated dataset."""
    K = dataset.manifest.K
    per_class_dets: dict[int, list] = {k: [] for k in range(K)}
    per_class_gt: dict[int, dict[str, list]] = {k: {} for k in range(K)}
    for record in dataset:
        if not isinstance(record, AnnotatedImage):
            raise ConfigurationError(f"record {record.image_id} has no ground truth")
        for box, cid in zip(record.boxes, record.class_ids):
            per_class_gt[int(cid)].setdefault(record.image_id, []).append(tuple(box))
        for det in detections_by_image.get(record.image_id, []):
            per_class_dets[det.class_id].append((record.image_id, det.box, det.score))

    per_class_ap: dict[int, float] = {}
    counts: dict[int, dict[str, int]] = {}
    flagged: list[int] = []
    for k in range(K):
        n_gt = sum(len(v) for v in per_class_gt[k].values())
        counts[k] = {"detections": len(per_class_dets[k]), "ground_truth": n_gt}
        ap = average_precision(per_class_dets[k], per_class_gt[k], iou_threshold)
        if np.isnan(ap):
            flagged.append(k)
        else:
            per_class_ap[k] = ap
    map50 = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalResult(per_class_ap=per_class_ap, map50=map50, counts=counts, flagged=flagged)


def evaluate(
    model: AdaptiveDetector | str | Path,
    dataset: Dataset,
    iou_threshold: float = 0.5,
    score_threshold: float = 0.05,
    nms_threshold: float = 0.5,
    batch_size: int = 16,
) -> EvalResult:
    """Run inference over an annotated dataset and compute per-class AP/mAP."""
    if not isinstance(model, AdaptiveDetector):
        model, _ = load_checkpoint(model)
    if model.config.num_classes != dataset.manifest.K:
        raise ConfigurationError(
            f"model has {model.config.num_classes} classes, dataset manifest says {dataset.manifest.K}"
        )
    detections_by_image: dict[str, list[Detection]] = {}
    records = list(dataset)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        results = model.detect(
            [r.image for r in chunk],
            score_threshold=score_threshold,
            nms_threshold=nms_threshold,
        )
        for record, dets in zip(chunk, results):
            detections_by_image[record.image_id] = dets
    return evaluate_detections(detections_by_image, dataset, iou_threshold)


def export_embeddings(
    model: AdaptiveDetector | str | Path,
    datasets: list[tuple[Dataset, str]],
    batch_size: int = 32,
) -> tuple[list[str], list[list]]:
    """Per-image reduced feature vectors with domain labels.

    Returns (header, rows) where header is image_id, domain, g_0..g_{d-1};
    one row per image across all given (dataset, domain_label) pairs.
    """
    if not isinstance(model, AdaptiveDetector):
        model, _ = load_checkpoint(model)
    model.eval()
    dim = model.config.reduce_channels
    header = ["image_id", "domain"] + [f"g_{i}" for i in range(dim)]
    rows: list[list] = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for dataset, domain in datasets:
            records = list(dataset)
            for start in range(0, len(records), batch_size):
                chunk = records[start : start + batch_size]
                feats = model.features(batch_to_tensor([r.image for r in chunk], dtype))
                g = model.embed(feats)
                for record, vec in zip(chunk, g):
                    rows.append([record.image_id, domain] + [float(v) for v in vec])
    return header, rows


def write_embeddings_csv(path: str | Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_embeddings_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Returns (feature matrix, domain labels) from an exported embeddings CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        feats, domains = [], []
        for row in reader:
            domains.append(row[1])
            feats.append([float(v) for v in row[2:]])
    return np.asarray(feats, dtype=np.float64), domains


def domain_probe_accuracy(features: np.ndarray, domains: list[str], steps: int = 300) -> float:
    """In-sample accuracy of a logistic regression probe separating domains.

    Lower accuracy means better-aligned (less domain-separable) features.
    Deterministic: standardized inputs, zero init, full-batch LBFGS.
    """
    labels = np.asarray([1.0 if d == "source" else 0.0 for d in domains])
    x = np.asarray(features, dtype=np.float64)
    mean, std = x.mean(axis=0), x.std(axis=0)
    x = (x - mean) / np.maximum(std, 1e-8)

    xt = torch.from_numpy(x)
    yt = torch.from_numpy(labels)
    w = torch.zeros(x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=steps, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        logits = xt @ w + b
        loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, yt)
        loss = loss + 1e-4 * (w * w).sum()
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        pred = (xt @ w + b) > 0
    return float((pred.numpy().astype(float) == labels).mean())
