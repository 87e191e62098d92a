"""Pixel-level precision/recall/F1 per image, averaged over images.

A *model* here is anything with ``predict_logits(images) -> (det, dist)``
taking uint8 (N, H, W, 3) images and returning (N, 2, H, W) and
(N, 3, H, W) logits; :class:`copymove.network.DualBranchNet` qualifies.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .data import PRISTINE, SOURCE, TARGET, binary_mask

DETECTION_CLASSES = {"forged": 1, "pristine": 0}
DISTINGUISH_CLASSES = {"source": SOURCE, "target": TARGET, "pristine": PRISTINE}
CORRECT_THRESHOLD = 0.5

# pristine black, source green, target red
TRI_PALETTE = np.array([[0, 0, 0], [0, 255, 0], [255, 0, 0]], dtype=np.uint8)

CATEGORY_HEADER = ["attack_tag", "n_images", "n_correct", "class", "precision", "recall", "f1"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.precision, self.recall, self.f1)


def confusion(pred: np.ndarray, truth: np.ndarray, label: int) -> ConfusionCounts:
    """One-vs-rest counts for ``label``."""
    p = np.asarray(pred) == label
    t = np.asarray(truth) == label
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(t)) - tp
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def prf(counts: ConfusionCounts) -> PRF:
    """Precision, recall and F1 with fixed rules for empty denominators.

    A class that is absent and never predicted scores 1 across the board;
    otherwise an empty denominator yields 0.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp + fp + fn == 0:
        return PRF(1.0, 1.0, 1.0)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f1)


@dataclass
class ImageMetrics:
    sample_id: int
    attack_tag: str
    detection: dict[str, PRF]
    distinguishment: dict[str, PRF]

    @property
    def forged_f1(self) -> float:
        return self.detection["forged"].f1


def image_metrics(sample_id: int, bin_pred, tri_pred, tri_truth, attack_tag: str = "BASE") -> ImageMetrics:
    bin_truth = binary_mask(tri_truth)
    det = {name: prf(confusion(bin_pred, bin_truth, lab)) for name, lab in DETECTION_CLASSES.items()}
    dist = {name: prf(confusion(tri_pred, tri_truth, lab)) for name, lab in DISTINGUISH_CLASSES.items()}
    return ImageMetrics(sample_id, attack_tag, det, dist)


def argmax_masks(det_logits: torch.Tensor, dist_logits: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    # torch.argmax returns the first maximal index, so ties go to the lower class
    return (
        det_logits.argmax(dim=-3).to(torch.uint8).cpu().numpy(),
        dist_logits.argmax(dim=-3).to(torch.uint8).cpu().numpy(),
    )


def predict_masks(model, images: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Binary and tri-class label maps for uint8 images (single or batched)."""
    single = images.ndim == 3
    batch = images[None] if single else images
    det, dist = model.predict_logits(batch, batch_size=batch_size)
    b, t = argmax_masks(det, dist)
    return (b[0], t[0]) if single else (b, t)


def evaluate_images(model, dataset, batch_size: int = 8) -> list[ImageMetrics]:
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    out = []
    for start in range(0, n, batch_size):
        items = [dataset[i] for i in range(start, min(n, start + batch_size))]
        bins, tris = predict_masks(model, np.stack([it.image for it in items]), batch_size)
        for it, b, t in zip(items, bins, tris):
            out.append(image_metrics(it.sample_id, b, t, it.tri_mask, it.attack_tag))
    return out


def mean_prf(records: Iterable[PRF]) -> PRF:
    arr = np.array([r.as_tuple() for r in records], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no records to average")
    # fsum keeps the mean independent of record order
    n = len(arr)
    return PRF(*(math.fsum(arr[:, k]) / n for k in range(3)))


def detection_summary(metrics: Sequence[ImageMetrics]) -> dict[str, PRF]:
    return {c: mean_prf(m.detection[c] for m in metrics) for c in DETECTION_CLASSES}


def distinguishment_summary(metrics: Sequence[ImageMetrics]) -> dict[str, PRF]:
    return {c: mean_prf(m.distinguishment[c] for m in metrics) for c in DISTINGUISH_CLASSES}


def evaluate_detection(model, dataset, batch_size: int = 8) -> tuple[PRF, list[ImageMetrics]]:
    metrics = evaluate_images(model, dataset, batch_size)
    return detection_summary(metrics)["forged"], metrics


def evaluate_distinguishment(model, dataset, batch_size: int = 8) -> dict[str, PRF]:
    return distinguishment_summary(evaluate_images(model, dataset, batch_size))


def selection_score_from(metrics: Sequence[ImageMetrics]) -> float:
    """Mean of detection forged F1 and source/target/pristine distinguishment F1."""
    det = detection_summary(metrics)
    dist = distinguishment_summary(metrics)
    return (det["forged"].f1 + dist["source"].f1 + dist["target"].f1 + dist["pristine"].f1) / 4.0


@dataclass
class CategoryReport:
    attack_tag: str
    n_images: int
    n_correct: int
    classes: dict[str, PRF] = field(default_factory=dict)


def category_reports(metrics: Sequence[ImageMetrics], threshold: float = CORRECT_THRESHOLD) -> dict[str, CategoryReport]:
    """Group by attack tag; an image counts as correct when forged F1 > threshold."""
    groups: dict[str, list[ImageMetrics]] = defaultdict(list)
    for m in metrics:
        groups[m.attack_tag].append(m)
    reports = {}
    for tag in sorted(groups):
        ms = groups[tag]
        classes = {"forged": mean_prf(m.detection["forged"] for m in ms)}
        classes.update(distinguishment_summary(ms))
        n_correct = sum(1 for m in ms if m.forged_f1 > threshold)
        reports[tag] = CategoryReport(tag, len(ms), n_correct, classes)
    return reports


def correct_detection_count(model, dataset, threshold: float = CORRECT_THRESHOLD, batch_size: int = 8):
    return category_reports(evaluate_images(model, dataset, batch_size), threshold)


def table_row(metrics: Sequence[ImageMetrics]) -> dict[str, float]:
    """Flattened results columns: detection forged/pristine then source/target/pristine."""
    row = {}
    for c, v in detection_summary(metrics).items():
        for k, x in zip(("precision", "recall", "f1"), v.as_tuple()):
            row[f"detection_{c}_{k}"] = x
    for c, v in distinguishment_summary(metrics).items():
        for k, x in zip(("precision", "recall", "f1"), v.as_tuple()):
            row[f"distinguishment_{c}_{k}"] = x
    return row


TABLE_COLUMNS = [
    f"{task}_{cls}_{k}"
    for task, classes in (("detection", DETECTION_CLASSES), ("distinguishment", DISTINGUISH_CLASSES))
    for cls in classes
    for k in ("precision", "recall", "f1")
]


# ------------------------------------------------------------------ reports


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_category_csv(reports: dict[str, CategoryReport], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CATEGORY_HEADER)
        for tag, rep in reports.items():
            for cls, v in rep.classes.items():
                w.writerow([tag, rep.n_images, rep.n_correct, cls, *map(_fmt, v.as_tuple())])


def write_summary_csv(rows: dict[str, PRF], task: str, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", "class", "precision", "recall", "f1"])
        for cls, v in rows.items():
            w.writerow([task, cls, *map(_fmt, v.as_tuple())])


def write_per_image_csv(metrics: Sequence[ImageMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "attack_tag", "task", "class", "precision", "recall", "f1"])
        for m in metrics:
            for task, recs in (("detection", m.detection), ("distinguishment", m.distinguishment)):
                for cls, v in recs.items():
                    w.writerow([m.sample_id, m.attack_tag, task, cls, *map(_fmt, v.as_tuple())])


def render_maps(bin_pred: np.ndarray, tri_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return (np.asarray(bin_pred, dtype=np.uint8) * 255, TRI_PALETTE[np.asarray(tri_pred, dtype=np.intp)])


def export_maps(model, dataset, out_dir: str | Path, batch_size: int = 8) -> list[Path]:
    """``<id>_binary.png`` (white = forged) and ``<id>_tri.png`` (palette above) per sample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for start in range(0, len(dataset), batch_size):
        items = [dataset[i] for i in range(start, min(len(dataset), start + batch_size))]
        bins, tris = predict_masks(model, np.stack([it.image for it in items]), batch_size)
        for it, b, t in zip(items, bins, tris):
            bin_img, tri_img = render_maps(b, t)
            for suffix, arr in (("binary", bin_img), ("tri", tri_img)):
                path = out_dir / f"{it.sample_id:06d}_{suffix}.png"
                Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)
                written.append(path)
    return written
