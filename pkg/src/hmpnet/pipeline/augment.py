"""Horizontal flips and small rotations that keep labels consistent."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..detect import Box
from .data import Label

log = logging.getLogger(__name__)

MIN_AREA = 4.0


@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = True
    rotation_deg: float = 10.0


def hflip(image: np.ndarray, labels: list[Label]) -> tuple[np.ndarray, list[Label]]:
    return image[:, ::-1].copy(), [Label(lb.cls, 1.0 - lb.cx, lb.cy, lb.w, lb.h) for lb in labels]


def hflip_box(box: Box, width: float) -> Box:
    return Box(width - box.x2, box.y1, width - box.x1, box.y2)


def rotate(image: np.ndarray, labels: list[Label], degrees: float) -> tuple[np.ndarray, list[Label]]:
    """Rotate about the image centre (bilinear, edge fill); boxes become the hull of their rotated corners."""
    if degrees == 0:
        return image.copy(), list(labels)
    h, w = image.shape[:2]
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    # output (row, col) samples input at A @ (row, col) + offset
    a = np.array([[c, -s], [s, c]])
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - a @ centre
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[:, :, ch] = np.clip(np.round(ndimage.affine_transform(
            image[:, :, ch].astype(np.float64), a, offset=offset, order=1, mode="nearest")), 0, 255)
    cx0, cy0 = w / 2, h / 2
    kept = []
    for lb in labels:
        b = lb.to_box(w, h)
        xs = np.array([b.x1, b.x2, b.x2, b.x1]) - cx0
        ys = np.array([b.y1, b.y1, b.y2, b.y2]) - cy0
        rx = c * xs - s * ys + cx0
        ry = s * xs + c * ys + cy0
        nb = Box(float(np.clip(rx.min(), 0, w)), float(np.clip(ry.min(), 0, h)),
                 float(np.clip(rx.max(), 0, w)), float(np.clip(ry.max(), 0, h)))
        if nb.area < MIN_AREA:
            log.info("rotation dropped a class-%d box (area %.2f px)", lb.cls, nb.area)
            continue
        kept.append(Label.from_box(lb.cls, nb, w, h))
    return out, kept


def augment(image: np.ndarray, labels: list[Label], flags: AugmentFlags, rng) -> tuple[np.ndarray, list[Label]]:
    if flags.hflip and rng.random() < 0.5:
        image, labels = hflip(image, labels)
    if flags.rotation_deg > 0:
        image, labels = rotate(image, labels, float(rng.uniform(-flags.rotation_deg, flags.rotation_deg)))
    return image, labels
