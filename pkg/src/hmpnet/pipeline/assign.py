"""One-cell-per-object target assignment across the three pyramid levels."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..detect import Box
from ..model.config import STRIDES

log = logging.getLogger(__name__)

_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class LevelTargets:
    stride: int
    positive: np.ndarray  # (N, H, W) bool
    cls: np.ndarray  # (N, H, W) int, -1 where negative
    boxes: np.ndarray  # (N, H, W, 4) xyxy pixels

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


@dataclass
class TargetAssignment:
    levels: list[LevelTargets]
    dropped: int = 0

    @property
    def num_positive(self) -> int:
        return sum(lv.num_positive for lv in self.levels)


def level_for(box: Box, image_size: int) -> int:
    """Level index by longest side: < size/10 -> P3, < size/5 -> P4, else P5 (64/128 px at 640)."""
    side = max(box.x2 - box.x1, box.y2 - box.y1)
    if side < image_size * 64 / 640:
        return 0
    if side < image_size * 128 / 640:
        return 1
    return 2


def _cell_overlap(box: Box, row: int, col: int, stride: int) -> float:
    iw = min(box.x2, (col + 1) * stride) - max(box.x1, col * stride)
    ih = min(box.y2, (row + 1) * stride) - max(box.y1, row * stride)
    return max(iw, 0.0) * max(ih, 0.0)


def assign_targets(gts: list[list[tuple[int, Box]]], image_size: int, strides=STRIDES) -> TargetAssignment:
    """Assign each (class, box) of each image to the cell containing its centre.

    A collision moves the later object to the free neighbouring cell its box
    overlaps most; with no overlapping free neighbour it is dropped.
    """
    n = len(gts)
    levels = []
    for s in strides:
        g = image_size // s
        levels.append(LevelTargets(s, np.zeros((n, g, g), bool), np.full((n, g, g), -1, np.int64),
                                   np.zeros((n, g, g, 4), np.float64)))
    dropped = 0
    for i, objs in enumerate(gts):
        for cls, box in objs:
            lv = levels[level_for(box, image_size)]
            s, g = lv.stride, lv.positive.shape[1]
            cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
            row, col = min(max(int(cy // s), 0), g - 1), min(max(int(cx // s), 0), g - 1)
            if lv.positive[i, row, col]:
                best, spot = 0.0, None
                for dr, dc in _NEIGHBOURS:
                    r, c = row + dr, col + dc
                    if 0 <= r < g and 0 <= c < g and not lv.positive[i, r, c]:
                        ov = _cell_overlap(box, r, c, s)
                        if ov > best:
                            best, spot = ov, (r, c)
                if spot is None:
                    dropped += 1
                    log.warning("image %d: dropped class-%d box %s (cell collision, no free neighbour)",
                                i, cls, box)
                    continue
                row, col = spot
            lv.positive[i, row, col] = True
            lv.cls[i, row, col] = cls
            lv.boxes[i, row, col] = (box.x1, box.y1, box.x2, box.y2)
    return TargetAssignment(levels, dropped)
