"""Detection/classification evaluators used by the pruning sweep.

The mAP computation is VOC-style: per class, detections are ranked by
score across all images, greedily matched to unmatched ground truth at an
IoU threshold, and AP is the area under the all-point interpolated
precision-recall curve. The mean runs over classes present in the truths.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ModelFormatError
from .model import Model, float_infer
from .tensor import FeatureMap, load_tensor

THREADS_ENV = "CNNADAPT_THREADS"


def worker_count() -> int:
    """Worker cap from CNNADAPT_THREADS (0 or unset = auto)."""
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def ordered_map(fn: Callable, items: Sequence):
    """Apply fn over items, possibly threaded; results keep input order."""
    workers = min(worker_count(), len(items)) or 1
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned box in pixels, top-left origin."""

    x: float
    y: float
    w: float
    h: float
    class_id: int

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box extents must be non-negative, got w={self.w}, h={self.h}")


@dataclass(frozen=True)
class Detection(GroundTruthBox):
    score: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def iou(a: GroundTruthBox, b: GroundTruthBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    # all-point interpolation: integrate max precision to the right of each recall level
    mrec = np.concatenate(([0.0], recall, [recall[-1] if recall.size else 0.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def evaluate_map(predictions: Sequence[Sequence[Detection]],
                 truths: Sequence[Sequence[GroundTruthBox]],
                 iou_threshold: float = 0.5) -> float:
    """Mean average precision over the classes present in the ground truth.

    Score ties break by stable input order (image, then within-image order),
    so the result is deterministic for a fixed input.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} prediction lists vs {len(truths)} truth lists")

    classes = sorted({box.class_id for img in truths for box in img})
    if not classes:
        return 0.0

    aps = []
    for cls in classes:
        gt_per_image = [[b for b in img if b.class_id == cls] for img in truths]
        n_gt = sum(len(g) for g in gt_per_image)
        dets = [(det.score, img_idx, det)
                for img_idx, img in enumerate(predictions)
                for det in img if det.class_id == cls]
        dets.sort(key=lambda t: -t[0])  # stable: ties keep input order
        if not dets:
            aps.append(0.0)
            continue

        matched: set[tuple[int, int]] = set()
        tp = np.zeros(len(dets))
        for i, (_, img_idx, det) in enumerate(dets):
            best_iou, best_j = 0.0, -1
            for j, gt in enumerate(gt_per_image[img_idx]):
                if (img_idx, j) in matched:
                    continue
                v = iou(det, gt)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_threshold:
                matched.add((img_idx, best_j))
                tp[i] = 1.0

        cum_tp = np.cumsum(tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.arange(1, len(dets) + 1)
        aps.append(_interpolated_ap(recall, precision))
    return float(np.mean(aps))


def decode_regression_head(output: FeatureMap, score_threshold: float = 0.5) -> list[Detection]:
    """Toy direct-regression decode for desk-scale detection tests.

    Each cell predicts one box over channels [x, y, w, h, score,
    class_0 .. class_k]; cells whose score exceeds the threshold emit a
    detection with the argmax class. Cells scan in row-major order.
    """
    if output.channels < 6:
        raise ValueError(
            f"regression head needs >= 6 channels (x, y, w, h, score, classes), got {output.channels}")
    dets = []
    data = output.data
    for r in range(output.height):
        for c in range(output.width):
            cell = data[r, c]
            score = float(cell[4])
            if score <= score_threshold:
                continue
            w, h = max(float(cell[2]), 0.0), max(float(cell[3]), 0.0)
            dets.append(Detection(x=float(cell[0]), y=float(cell[1]), w=w, h=h,
                                  class_id=int(np.argmax(cell[5:])),
                                  score=min(max(score, 0.0), 1.0)))
    return dets


# ---------------------------------------------------------------------------
# Pruning dataset directory: pairs <name>.tnsr + <name>.json
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    name: str
    input: FeatureMap
    label: dict


def load_dataset(directory) -> list[Sample]:
    directory = os.fspath(directory)
    names = sorted(f[:-5] for f in os.listdir(directory) if f.endswith(".tnsr"))
    if not names:
        raise ModelFormatError(f"{directory}: no .tnsr inputs found")
    samples = []
    for name in names:
        label_path = os.path.join(directory, f"{name}.json")
        if not os.path.exists(label_path):
            raise ModelFormatError(f"{directory}: {name}.tnsr has no {name}.json label")
        fm = load_tensor(os.path.join(directory, f"{name}.tnsr"))
        if not isinstance(fm, FeatureMap):
            raise ModelFormatError(f"{directory}: {name}.tnsr is not a float tensor")
        with open(label_path) as fh:
            label = json.load(fh)
        if "class" not in label and "boxes" not in label:
            raise ModelFormatError(f"{label_path}: label needs 'class' or 'boxes'")
        samples.append(Sample(name, fm, label))
    return samples


def _model_outputs(model: Model, fm: FeatureMap) -> list[FeatureMap]:
    trace = float_infer(model, fm, taps=False)
    return [trace[lid] for lid in model.output_ids()]


def predict_class(model: Model, fm: FeatureMap) -> int:
    """Top-1 class: argmax over channels of the spatially averaged last output."""
    out = _model_outputs(model, fm)[-1]
    return int(np.argmax(out.data.mean(axis=(0, 1))))


def accuracy_evaluator(samples: Iterable[Sample]) -> Callable[[Model], float]:
    """Top-1 accuracy over {"class": int} labels."""
    samples = list(samples)
    bad = [s.name for s in samples if "class" not in s.label]
    if bad:
        raise ModelFormatError(f"samples without class labels: {bad}")

    def evaluate(model: Model) -> float:
        hits = ordered_map(
            lambda s: predict_class(model, s.input) == int(s.label["class"]), samples)
        return sum(hits) / len(samples)

    return evaluate


def map_evaluator(samples: Iterable[Sample], iou_threshold: float = 0.5,
                  score_threshold: float = 0.5,
                  postprocessor: Callable[[FeatureMap, float], list[Detection]]
                  = decode_regression_head) -> Callable[[Model], float]:
    """mAP over {"boxes": [...]} labels, decoding raw head outputs via postprocessor."""
    samples = list(samples)
    bad = [s.name for s in samples if "boxes" not in s.label]
    if bad:
        raise ModelFormatError(f"samples without box labels: {bad}")
    truths = [[GroundTruthBox(x=b["x"], y=b["y"], w=b["w"], h=b["h"], class_id=b["class"])
               for b in s.label["boxes"]] for s in samples]

    def evaluate(model: Model) -> float:
        def decode_one(sample: Sample) -> list[Detection]:
            dets: list[Detection] = []
            for out in _model_outputs(model, sample.input):
                dets.extend(postprocessor(out, score_threshold))
            return dets

        predictions = ordered_map(decode_one, samples)
        return evaluate_map(predictions, truths, iou_threshold)

    return evaluate
