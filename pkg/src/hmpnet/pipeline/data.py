"""PPM images, YOLO-style label files, and split manifests."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..detect import Box, GroundTruthBox

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Label:
    """One object, normalized to [0, 1]: class, centre x/y, width, height."""

    cls: int
    cx: float
    cy: float
    w: float
    h: float

    def to_box(self, width: int, height: int) -> Box:
        return Box((self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                   (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height)

    @classmethod
    def from_box(cls, c: int, box: Box, width: int, height: int) -> "Label":
        return cls(int(c), (box.x1 + box.x2) / 2 / width, (box.y1 + box.y2) / 2 / height,
                   (box.x2 - box.x1) / width, (box.y2 - box.y1) / height)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM writer needs an (H, W, 3) uint8 array")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def format_labels(labels: list[Label]) -> str:
    return "".join(f"{int(lb.cls)} {float(lb.cx)!r} {float(lb.cy)!r} {float(lb.w)!r} {float(lb.h)!r}\n" for lb in labels)


def parse_labels(text: str) -> list[Label]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ValueError(f"label line {n}: expected 5 fields, got {len(parts)}")
        out.append(Label(int(parts[0]), *(float(p) for p in parts[1:])))
    return out


def label_path(image_path: Path) -> Path:
    return image_path.parent.parent / "labels" / (image_path.stem + ".txt")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    labels: list[Label]
    path: str


class Dataset:
    """A split listed by ``<root>/<split>.txt``; images are cached after first read."""

    def __init__(self, root, split: str = "train"):
        self.root = Path(root)
        manifest = self.root / f"{split}.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"missing split manifest {manifest}")
        self.paths = [p for p in manifest.read_text().split("\n") if p.strip()]
        self._cache: dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> Sample:
        if i not in self._cache:
            p = self.root / self.paths[i]
            img = read_ppm(p)
            lp = label_path(p)
            labels = parse_labels(lp.read_text()) if lp.exists() else []
            self._cache[i] = Sample(img, labels, self.paths[i])
        return self._cache[i]

    def ground_truth(self, i: int, image_id: int | None = None) -> list[GroundTruthBox]:
        s = self[i]
        h, w = s.image.shape[:2]
        iid = i if image_id is None else image_id
        return [GroundTruthBox(lb.to_box(w, h), lb.cls, iid) for lb in s.labels]


def to_chw(images: list[np.ndarray]) -> np.ndarray:
    """Stack uint8 HWC images into a float32 NCHW batch scaled to [0, 1]."""
    return np.stack([im.transpose(2, 0, 1) for im in images]).astype(np.float32) / 255.0
