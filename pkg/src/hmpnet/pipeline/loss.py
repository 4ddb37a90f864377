"""Detection loss: IoU loss on assigned cells plus BCE over every cell and class."""
from __future__ import annotations

import numpy as np

from ..tensor import Tensor
from ..tensor import ops
from .assign import TargetAssignment


def _decoded_boxes(reg: Tensor, idx: np.ndarray, stride: int, centres: np.ndarray) -> list[Tensor]:
    """Gather (l, t, r, b) at flat cell indices and turn them into x1, y1, x2, y2 tensors."""
    flat = ops.reshape(ops.transpose(reg, (0, 2, 3, 1)), (-1, 4))
    dist = ops.mul(ops.softplus(ops.getitem(flat, idx)), float(stride))
    dt = reg.dtype
    cx = Tensor(centres[:, 0], dtype=dt)
    cy = Tensor(centres[:, 1], dtype=dt)
    l, t, r, b = (ops.getitem(dist, (slice(None), k)) for k in range(4))
    return [ops.sub(cx, l), ops.sub(cy, t), ops.add(cx, r), ops.add(cy, b)]


def iou_loss_terms(pred: list[Tensor], gt: np.ndarray) -> Tensor:
    """Per-box 1 - IoU between predicted xyxy tensors and constant (P, 4) targets."""
    dt = pred[0].dtype
    g = [Tensor(gt[:, k], dtype=dt) for k in range(4)]
    iw = ops.maximum(ops.sub(ops.minimum(pred[2], g[2]), ops.maximum(pred[0], g[0])), 0.0)
    ih = ops.maximum(ops.sub(ops.minimum(pred[3], g[3]), ops.maximum(pred[1], g[1])), 0.0)
    inter = ops.mul(iw, ih)
    area_p = ops.mul(ops.sub(pred[2], pred[0]), ops.sub(pred[3], pred[1]))
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = ops.sub(ops.add(area_p, Tensor(area_g, dtype=dt)), inter)
    return ops.sub(1.0, ops.div(inter, union))


def detection_loss(pyramid, assignment: TargetAssignment, parts: dict | None = None) -> Tensor:
    """mean_pos(1 - IoU) + sum(BCE) / num_pos; without positives only the BCE sum remains."""
    num_pos = assignment.num_positive
    norm = float(max(num_pos, 1))
    cls_total = None
    box_total = None
    for lv, tg in zip(pyramid.levels, assignment.levels):
        if lv.cls.shape[2:] != tg.positive.shape[1:] or lv.cls.shape[0] != tg.positive.shape[0]:
            raise ValueError(f"{lv.name}: prediction grid {lv.cls.shape} does not match targets")
        nc = lv.cls.shape[1]
        onehot = np.zeros(lv.cls.shape, dtype=lv.cls.dtype)
        n_idx, r_idx, c_idx = np.nonzero(tg.positive)
        onehot[n_idx, tg.cls[n_idx, r_idx, c_idx], r_idx, c_idx] = 1.0
        if (tg.cls[n_idx, r_idx, c_idx] >= nc).any():
            raise ValueError("target class id exceeds the number of predicted classes")
        bce = ops.sum(ops.bce_with_logits(lv.cls, onehot))
        cls_total = bce if cls_total is None else ops.add(cls_total, bce)
        if len(n_idx):
            h, w = tg.positive.shape[1:]
            flat_idx = (n_idx * h + r_idx) * w + c_idx
            centres = np.stack([(c_idx + 0.5) * tg.stride, (r_idx + 0.5) * tg.stride], axis=1)
            pred = _decoded_boxes(lv.reg, flat_idx, tg.stride, centres)
            terms = ops.sum(iou_loss_terms(pred, tg.boxes[n_idx, r_idx, c_idx]))
            box_total = terms if box_total is None else ops.add(box_total, terms)
    cls_term = ops.mul(cls_total, 1.0 / norm)
    total = cls_term if box_total is None else ops.add(cls_term, ops.mul(box_total, 1.0 / norm))
    if parts is not None:
        parts["cls"] = cls_term.item()
        parts["box"] = 0.0 if box_total is None else box_total.item() / norm
        parts["num_pos"] = num_pos
    return total
