"""Box decoding, non-maximum suppression, and COCO-style AP / mAP evaluation."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

EVAL_CONF = 0.001
EVAL_NMS_IOU = 0.65
PREDICT_CONF = 0.25


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Box
    cls: int
    score: float
    image_id: int = 0


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    cls: int
    image_id: int = 0


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) xyxy arrays."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def decode_level(cls_logits, reg, stride: int, image_size: int, conf_threshold: float):
    """Vectorized decode of one level; returns (image_idx, class, score, boxes (k, 4))."""
    cls_logits, reg = _arr(cls_logits), _arr(reg)
    n, _, h, w = cls_logits.shape
    scores = expit(cls_logits)
    img, cls, gy, gx = np.nonzero(scores >= conf_threshold)
    s = scores[img, cls, gy, gx]
    dist = np.logaddexp(0.0, reg[img, :, gy, gx]) * stride
    cx = (gx + 0.5) * stride
    cy = (gy + 0.5) * stride
    boxes = np.stack([cx - dist[:, 0], cy - dist[:, 1], cx + dist[:, 2], cy + dist[:, 3]], axis=1)
    np.clip(boxes, 0, image_size, out=boxes)
    return img, cls, s, boxes


def decode(pyramid, conf_threshold: float = EVAL_CONF, image_ids=None) -> list[Detection]:
    """Turn per-level (cls, reg) maps into scored boxes.

    Score = sigmoid(logit); box edges sit softplus(reg) * stride from the cell
    centre ((col + 0.5) * stride, (row + 0.5) * stride); boxes are clipped to
    the image.
    """
    dets = []
    for lv in pyramid.levels:
        img, cls, s, boxes = decode_level(lv.cls, lv.reg, lv.stride, pyramid.image_size, conf_threshold)
        for i, c, sc, bx in zip(img, cls, s, boxes):
            iid = int(image_ids[i]) if image_ids is not None else int(i)
            dets.append(Detection(Box(*map(float, bx)), int(c), float(sc), iid))
    return dets


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy single-class suppression; returns kept indices in descending-score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    if len(order) == 0:
        return []
    ious = iou_matrix(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(int(order[i]))
        alive[i + 1:] &= ious[i, i + 1:] <= iou_threshold
    return keep


def nms(dets: list[Detection], iou_threshold: float = EVAL_NMS_IOU) -> list[Detection]:
    """Per-class, per-image greedy NMS; output sorted by descending score (stable)."""
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        groups[(d.image_id, d.cls)].append(i)
    kept = []
    for idx in groups.values():
        boxes = np.array([dets[i].box.as_array() for i in idx])
        scores = np.array([dets[i].score for i in idx])
        kept.extend(idx[k] for k in nms_indices(boxes, scores, iou_threshold))
    kept.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept]


def postprocess(pyramid, conf_threshold: float = EVAL_CONF, iou_threshold: float = EVAL_NMS_IOU,
                max_det: int = 100, image_ids=None) -> list[Detection]:
    """decode -> per-class NMS -> keep the top ``max_det`` per image."""
    out = []
    n = pyramid.levels[0].cls.shape[0]
    per_img: dict[int, list] = defaultdict(list)
    for lv in pyramid.levels:
        img, cls, s, boxes = decode_level(lv.cls, lv.reg, lv.stride, pyramid.image_size, conf_threshold)
        for i in range(n):
            sel = img == i
            per_img[i].append((cls[sel], s[sel], boxes[sel]))
    for i in range(n):
        cls = np.concatenate([p[0] for p in per_img[i]])
        s = np.concatenate([p[1] for p in per_img[i]])
        boxes = np.concatenate([p[2] for p in per_img[i]]).reshape(-1, 4)
        iid = int(image_ids[i]) if image_ids is not None else i
        keep = []
        for c in np.unique(cls):
            idx = np.nonzero(cls == c)[0]
            keep.extend(idx[k] for k in nms_indices(boxes[idx], s[idx], iou_threshold))
        keep.sort(key=lambda k: (-s[k], k))
        for k in keep[:max_det]:
            out.append(Detection(Box(*map(float, boxes[k])), int(cls[k]), float(s[k]), iid))
    return out


def _match(dets: list[Detection], gts: list[GroundTruthBox], iou_threshold: float) -> tuple[np.ndarray, int]:
    """Greedy matching in descending score order; returns TP flags (score order) and GT count."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_img: dict[int, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_img[g.image_id].append(j)
    gt_boxes = {img: np.array([gts[j].box.as_array() for j in idx]) for img, idx in by_img.items()}
    matched = {img: np.zeros(len(idx), dtype=bool) for img, idx in by_img.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        if d.image_id not in gt_boxes:
            continue
        ious = iou_matrix(d.box.as_array(), gt_boxes[d.image_id])[0]
        ious[matched[d.image_id]] = -1.0
        best = int(np.argmax(ious))  # first index wins ties
        if ious[best] >= iou_threshold:
            matched[d.image_id][best] = True
            tp[rank] = True
    return tp, len(gts)


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags in descending-score order."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # envelope: best precision achievable at this recall or beyond
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return math.fsum(vals) / len(RECALL_POINTS)


def average_precision(dets: list[Detection], gts: list[GroundTruthBox], class_id: int,
                      iou_threshold: float = 0.5) -> float:
    """AP for one class; NaN when the class has no ground truth."""
    d = [x for x in dets if x.cls == class_id]
    g = [x for x in gts if x.cls == class_id]
    tp, num_gt = _match(d, g, iou_threshold)
    return interpolated_ap(tp, num_gt)


def map50_95(dets: list[Detection], gts: list[GroundTruthBox], num_classes: int) -> tuple[float, float]:
    """(mAP@0.5, mAP@0.5:0.95) over classes that have ground truth."""
    per_thr = np.full((len(IOU_THRESHOLDS), num_classes), np.nan)
    for c in range(num_classes):
        d = [x for x in dets if x.cls == c]
        g = [x for x in gts if x.cls == c]
        if not g:
            continue
        for t, thr in enumerate(IOU_THRESHOLDS):
            tp, n = _match(d, g, thr)
            per_thr[t, c] = interpolated_ap(tp, n)
    present = ~np.isnan(per_thr[0])
    if not present.any():
        return 0.0, 0.0
    ap = per_thr[:, present]
    # correctly rounded sums keep exact cases exact (e.g. one of ten thresholds -> 0.1)
    return math.fsum(ap[0]) / ap.shape[1], math.fsum(ap.ravel()) / ap.size


def format_predictions(dets: list[Detection]) -> str:
    return "".join(f"{d.image_id} {d.cls} {d.score:.6f} {d.box.x1:.2f} {d.box.y1:.2f} {d.box.x2:.2f} {d.box.y2:.2f}\n"
                   for d in dets)


def parse_predictions(text: str) -> list[Detection]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        img, cls, score, x1, y1, x2, y2 = line.split()
        out.append(Detection(Box(float(x1), float(y1), float(x2), float(y2)), int(cls), float(score), int(img)))
    return out
