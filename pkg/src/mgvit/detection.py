"""Set-prediction detection loss with Hungarian matching, and AP@IoU evaluation.

Boxes inside the model are normalized ``(cx, cy, w, h)``; ground truth on
disk is pixel ``(x0, y0, x1, y1)``.  Class index ``num_classes`` is the
no-object class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError
from .tensor import Tensor, cross_entropy, no_grad


@dataclass(frozen=True)
class DetectionLossConfig:
    class_weight: float = 1.0
    box_weight: float = 5.0
    noobject_weight: float = 0.1

    def __post_init__(self):
        w = (self.class_weight, self.box_weight, self.noobject_weight)
        if min(w) < 0 or max(w) == 0:
            raise InputError(f"detection loss weights must be >= 0 and not all zero, got {w}")


def xyxy_to_cxcywh(boxes, width: float, height: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (b[:, 0] + b[:, 2]) / 2 / width
    cy = (b[:, 1] + b[:, 3]) / 2 / height
    return np.stack([cx, cy, (b[:, 2] - b[:, 0]) / width, (b[:, 3] - b[:, 1]) / height], axis=1)


def cxcywh_to_xyxy(boxes, width: float, height: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0 = (b[:, 0] - b[:, 2] / 2) * width
    y0 = (b[:, 1] - b[:, 3] / 2) * height
    return np.stack([x0, y0, x0 + b[:, 2] * width, y0 + b[:, 3] * height], axis=1)


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def match_cost(pred_boxes, pred_logits, gt_boxes, gt_labels,
               cfg: DetectionLossConfig = DetectionLossConfig()) -> np.ndarray:
    """``(M, G)`` cost: ``-class_weight * p(gt class) + box_weight * L1(boxes)``."""
    prob = _softmax(np.asarray(pred_logits, dtype=np.float64))
    pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gb = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    l1 = np.abs(pb[:, None, :] - gb[None, :, :]).sum(axis=-1)
    return -cfg.class_weight * prob[:, np.asarray(gt_labels, dtype=int)] + cfg.box_weight * l1


def hungarian_match(pred_boxes, pred_logits, gt_boxes, gt_labels,
                    cfg: DetectionLossConfig = DetectionLossConfig()) -> np.ndarray:
    """Minimum-cost assignment; entry ``i`` is the matched ground-truth index or -1 (no object)."""
    m = len(pred_logits)
    g = len(gt_labels)
    if g > m:
        raise InputError(f"{g} ground-truth boxes but only {m} predictions")
    out = np.full(m, -1, dtype=np.int64)
    if g == 0:
        return out
    rows, cols = linear_sum_assignment(match_cost(pred_boxes, pred_logits, gt_boxes, gt_labels, cfg))
    out[rows] = cols
    return out


def detection_targets(records, width: int, height: int):
    """Per record: (normalized cxcywh gt boxes, gt labels)."""
    return [(xyxy_to_cxcywh(r.boxes or [], width, height), np.asarray(r.box_labels or [], dtype=int))
            for r in records]


def detection_loss(logits: Tensor, boxes: Tensor, targets, num_classes: int,
                   cfg: DetectionLossConfig = DetectionLossConfig(),
                   reduction: str = "mean"):
    """Matched class CE (no-object down-weighted) plus L1 on matched boxes.

    ``logits`` is ``(B, M, C+1)`` and ``boxes`` ``(B, M, 4)``.  With
    ``reduction="sum"`` the per-image losses are added, which keeps
    per-image gradients independent; ``"none"`` returns a numpy vector.
    """
    b, m, _ = logits.shape
    per_image = []
    for i, (gt_boxes, gt_labels) in enumerate(targets):
        lg, bx = logits[i], boxes[i]
        assign = hungarian_match(bx.data, lg.data, gt_boxes, gt_labels, cfg)
        cls_target = np.full(m, num_classes, dtype=np.int64)
        matched = np.flatnonzero(assign >= 0)
        cls_target[matched] = gt_labels[assign[matched]]
        weights = np.where(cls_target == num_classes, cfg.noobject_weight, 1.0)
        ce = cross_entropy(lg, cls_target, reduction="none")
        loss = (ce * Tensor(weights)).sum() * (cfg.class_weight / weights.sum())
        if matched.size:
            l1 = (bx[matched] - Tensor(gt_boxes[assign[matched]])).abs().sum()
            loss = loss + l1 * (cfg.box_weight / matched.size)
        per_image.append(loss)
    if reduction == "none":
        return np.array([l.item() for l in per_image])
    total = per_image[0]
    for l in per_image[1:]:
        total = total + l
    return total * (1.0 / b) if reduction == "mean" else total


def detection_salience_loss(cfg: DetectionLossConfig = DetectionLossConfig()):
    """Loss callback for :func:`mgvit.maskgen.salience_batch` on detection targets."""
    def loss_fn(model, seq, targets):
        logits, boxes = model.detect_head(seq)
        return detection_loss(logits, boxes, targets, model.config.num_classes, cfg, reduction="sum")
    return loss_fn


def per_image_detection_loss(model, records, cfg: DetectionLossConfig = DetectionLossConfig(),
                             batch_size: int = 64) -> np.ndarray:
    c = model.config
    out = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            seq = model.forward(np.stack([r.image for r in chunk]))
            logits, boxes = model.detect_head(seq)
            targets = detection_targets(chunk, c.image_width, c.image_height)
            out.append(detection_loss(logits, boxes, targets, c.num_classes, cfg, reduction="none"))
    return np.concatenate(out) if out else np.zeros(0)


# ----------------------------------------------------------------------
# evaluation


def average_precision(predictions, ground_truth, iou_threshold: float = 0.5) -> float:
    """All-points interpolated AP.

    ``predictions``: iterable of ``(image_key, score, xyxy box)``.
    ``ground_truth``: mapping ``image_key -> list of xyxy boxes``.
    Predictions are visited by descending score (stable on ties) and
    greedily matched to the unmatched ground truth of highest IoU.
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    preds = sorted(predictions, key=lambda p: -p[1])
    if n_gt == 0 or not preds:
        return 0.0
    used = {k: np.zeros(len(v), dtype=bool) for k, v in ground_truth.items()}
    tp = np.zeros(len(preds))
    for i, (key, _score, box) in enumerate(preds):
        gts = ground_truth.get(key, [])
        if len(gts) == 0:
            continue
        ious = box_iou([box], gts)[0]
        ious[used[key]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            tp[i] = 1
            used[key][j] = True
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(preds) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def predict_boxes(model, records, batch_size: int = 64, flow: str | None = None):
    """``(image id, score, xyxy box)`` for every detect token of every record."""
    c = model.config
    out = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            imgs = np.stack([r.image for r in chunk])
            seq = model.forward_vanilla(imgs) if flow == "vanilla" else model.forward(imgs)
            logits, boxes = model.detect_head(seq)
            prob = _softmax(logits.data)[..., : c.num_classes]
            scores = prob.max(axis=-1)
            for r, sc, bx in zip(chunk, scores, boxes.data):
                xyxy = cxcywh_to_xyxy(bx, c.image_width, c.image_height)
                out.extend((r.id, float(s), b) for s, b in zip(sc, xyxy))
    return out


def evaluate_detection(model, records, iou_threshold: float = 0.5, flow: str | None = None) -> float:
    if not records:
        raise InputError("evaluate_detection needs a nonempty split")
    gt = {r.id: [list(b) for b in (r.boxes or [])] for r in records}
    return average_precision(predict_boxes(model, records, flow=flow), gt, iou_threshold)
