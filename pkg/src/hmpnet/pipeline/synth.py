"""Procedural maritime scenes: sky, horizon, waves, and twelve object archetypes."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..detect import Box, iou
from .data import Label, format_labels, write_ppm

# Ordered so that small class counts still get visually distinct shapes.
CLASS_NAMES = (
    "cargo_ship", "buoy", "lighthouse", "wind_turbine", "speedboat", "island",
    "beacon", "passenger_ferry", "transport_ship", "workboat", "freighter", "cruise_ship",
)

# width / height of each archetype's bounding box
_ASPECT = {
    "cargo_ship": 2.4, "buoy": 0.6, "lighthouse": 0.38, "wind_turbine": 0.85, "speedboat": 2.0,
    "island": 2.6, "beacon": 0.45, "passenger_ferry": 2.0, "transport_ship": 2.8, "workboat": 1.5,
    "freighter": 2.6, "cruise_ship": 2.2,
}


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 160
    num_classes: int = 3
    dusk_frac: float = 0.25
    noise_amp: float = 0.03
    min_objects: int = 1
    max_objects: int = 4
    # box long side as a fraction of the image side
    min_scale: float = 0.08
    max_scale: float = 0.40

    def validate(self) -> "SceneSpec":
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        if self.image_size < 16:
            raise ValueError("image_size too small")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.min_scale <= self.max_scale <= 1:
            raise ValueError("need 0 < min_scale <= max_scale <= 1")
        if not 0 <= self.dusk_frac <= 1:
            raise ValueError("dusk_frac must be in [0, 1]")
        return self


# -------------------------------------------------------------- archetypes
# Each painter returns [(mask, rgb)] over a local (bh, bw) grid, painted in order.

def _grid(bh, bw):
    yy, xx = np.mgrid[0:bh, 0:bw]
    return (xx + 0.5) / bw, (yy + 0.5) / bh


def _rect(u, v, u0, u1, v0, v1):
    return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


def _thin(mask_fn, u, v, bw, bh, width_px=1.0):
    return mask_fn(max(width_px / bw, 0.5 / bw), max(width_px / bh, 0.5 / bh))


def _hull(u, v, top, lean=0.12):
    t = np.clip((v - top) / max(1 - top, 1e-6), 0, 1)
    return (v >= top) & (u >= lean * t) & (u <= 1 - 0.5 * lean * t)


def _cargo_ship(u, v, bw, bh, rng):
    parts = [(_hull(u, v, 0.55), (110, 30, 30))]
    cols = [(200, 80, 40), (40, 90, 160), (60, 140, 70), (180, 160, 40)]
    for i, x0 in enumerate(np.linspace(0.08, 0.58, 4)):
        parts.append((_rect(u, v, x0, x0 + 0.11, 0.33, 0.56), cols[i % 4]))
    parts.append((_rect(u, v, 0.72, 0.9, 0.08, 0.56), (235, 235, 230)))
    return parts


def _buoy(u, v, bw, bh, rng):
    color = (210, 40, 30) if rng.random() < 0.5 else (40, 170, 60)
    disc = ((u - 0.5) / 0.5) ** 2 + ((v - 0.68) / 0.32) ** 2 <= 1.0
    pole = _thin(lambda du, dv: _rect(u, v, 0.5 - 1.5 * du, 0.5 + 1.5 * du, 0.0, 0.4), u, v, bw, bh, 1.0)
    cap = ((u - 0.5) / 0.22) ** 2 + ((v - 0.1) / 0.1) ** 2 <= 1.0
    return [(pole, (40, 40, 40)), (disc, color), (cap, (250, 220, 60))]


def _lighthouse(u, v, bw, bh, rng):
    half = 0.28 + 0.2 * v
    body = (np.abs(u - 0.5) <= half) & (v >= 0.22)
    stripes = body & ((np.floor((v - 0.22) / 0.13) % 2) == 0)
    lamp = _rect(u, v, 0.22, 0.78, 0.05, 0.22)
    roof = (v < 0.06) & (np.abs(u - 0.5) <= 0.5 * v / 0.06 + 0.05)
    return [(body, (240, 240, 240)), (stripes, (200, 30, 30)), (lamp, (255, 235, 90)), (roof, (50, 50, 50))]


def _wind_turbine(u, v, bw, bh, rng):
    mast = _thin(lambda du, dv: (np.abs(u - 0.5) <= max(0.04, 1.5 * du)) & (v >= 0.33), u, v, bw, bh)
    hub = ((u - 0.5) / 0.08) ** 2 + ((v - 0.33) / 0.06) ** 2 <= 1.0
    parts = [(mast, (235, 235, 235))]
    phase = rng.uniform(0, 2 * np.pi / 3)
    px, py = (u - 0.5) * bw, (v - 0.33) * bh
    length = 0.5 * min(bw, bh / 0.66)
    for k in range(3):
        ang = phase + k * 2 * np.pi / 3
        dx, dy = np.cos(ang), np.sin(ang)
        along = px * dx + py * dy
        across = np.abs(-px * dy + py * dx)
        blade = (along >= 0) & (along <= length) & (across <= max(1.0, 0.06 * length))
        parts.append((blade, (225, 225, 225)))
    parts.append((hub, (180, 180, 180)))
    return parts


def _speedboat(u, v, bw, bh, rng):
    hull = (v >= 0.45) & (u <= 1 - 0.9 * (v - 0.45)) & (u >= 0.02)
    stripe = hull & (v >= 0.62) & (v <= 0.72)
    shield = _rect(u, v, 0.35, 0.55, 0.2, 0.45) & (u >= 0.35 + 0.5 * (0.45 - v))
    return [(hull, (245, 245, 250)), (stripe, (30, 60, 200)), (shield, (60, 80, 100))]


def _island(u, v, bw, bh, rng):
    phases = rng.uniform(0, 2 * np.pi, 3)
    edge = 0.25 + 0.12 * np.sin(6 * u + phases[0]) + 0.08 * np.sin(13 * u + phases[1])
    body = (v >= edge + 0.3 * (2 * np.abs(u - 0.5)) ** 2) & (u >= 0.0)
    base = body & (v >= 0.8)
    return [(body, (50, 120, 50)), (base, (130, 100, 60))]


def _beacon(u, v, bw, bh, rng):
    pole = _thin(lambda du, dv: (np.abs(u - 0.5) <= max(0.07, 1.5 * du)) & (v >= 0.35), u, v, bw, bh)
    tri = (v >= 0.02) & (v <= 0.38) & (np.abs(u - 0.5) <= 0.5 * (v - 0.02) / 0.36)
    band = pole & (v >= 0.6) & (v <= 0.75)
    return [(pole, (30, 30, 30)), (band, (250, 210, 0)), (tri, (250, 210, 0))]


def _ferry(u, v, bw, bh, rng):
    parts = [(_hull(u, v, 0.6), (30, 60, 140)), (_rect(u, v, 0.08, 0.85, 0.38, 0.6), (240, 240, 240)),
             (_rect(u, v, 0.2, 0.7, 0.2, 0.38), (240, 240, 240))]
    windows = _rect(u, v, 0.1, 0.83, 0.45, 0.52) & ((np.floor(u * 18) % 2) == 0)
    parts.append((windows, (40, 40, 60)))
    return parts


def _transport(u, v, bw, bh, rng):
    parts = [(_hull(u, v, 0.6, 0.06), (90, 90, 100)), (_rect(u, v, 0.05, 0.95, 0.5, 0.6), (150, 150, 150))]
    crane = _thin(lambda du, dv: _rect(u, v, 0.3 - du, 0.3 + du, 0.05, 0.5), u, v, bw, bh, 1.0)
    jib = _thin(lambda du, dv: _rect(u, v, 0.3, 0.55, 0.05 - dv, 0.05 + dv), u, v, bw, bh, 1.0)
    parts += [(crane, (220, 180, 40)), (jib, (220, 180, 40)), (_rect(u, v, 0.8, 0.93, 0.25, 0.5), (230, 230, 230))]
    return parts


def _workboat(u, v, bw, bh, rng):
    mast = _thin(lambda du, dv: _rect(u, v, 0.45 - du, 0.45 + du, 0.0, 0.4), u, v, bw, bh, 1.0)
    return [(_hull(u, v, 0.55, 0.15), (230, 110, 20)), (_rect(u, v, 0.3, 0.62, 0.3, 0.56), (245, 245, 240)),
            (mast, (60, 60, 60))]


def _freighter(u, v, bw, bh, rng):
    parts = [(_hull(u, v, 0.55), (25, 25, 25)), (_hull(u, v, 0.85), (150, 30, 30))]
    for x in (0.25, 0.45, 0.65):
        parts.append((_thin(lambda du, dv, x=x: _rect(u, v, x - du, x + du, 0.12, 0.55), u, v, bw, bh, 1.0),
                      (200, 200, 200)))
    parts.append((_rect(u, v, 0.78, 0.92, 0.2, 0.55), (230, 230, 220)))
    return parts


def _cruise(u, v, bw, bh, rng):
    parts = [(_hull(u, v, 0.7, 0.08), (30, 40, 80))]
    for i, top in enumerate((0.15, 0.32, 0.5)):
        parts.append((_rect(u, v, 0.06 + 0.05 * i, 0.9 - 0.03 * i, top, 0.7), (248, 248, 248)))
    windows = (v >= 0.2) & (v <= 0.66) & ((np.floor(v * 14) % 2) == 0) & ((np.floor(u * 24) % 2) == 0)
    parts.append((windows & _rect(u, v, 0.1, 0.85, 0.0, 1.0), (60, 110, 170)))
    return parts


_PAINTERS = {
    "cargo_ship": _cargo_ship, "buoy": _buoy, "lighthouse": _lighthouse, "wind_turbine": _wind_turbine,
    "speedboat": _speedboat, "island": _island, "beacon": _beacon, "passenger_ferry": _ferry,
    "transport_ship": _transport, "workboat": _workboat, "freighter": _freighter, "cruise_ship": _cruise,
}


# ------------------------------------------------------------------ scenes

def _background(size: int, dusk: bool, noise_amp: float, rng) -> tuple[np.ndarray, int]:
    horizon = int(size * rng.uniform(0.28, 0.45))
    y = np.arange(size)[:, None] / size
    if dusk:
        sky_top, sky_low = np.array([70, 50, 90]), np.array([230, 130, 70])
        sea_a, sea_b = np.array([25, 30, 55]), np.array([45, 45, 70])
    else:
        sky_top, sky_low = np.array([110, 160, 220]), np.array([210, 225, 240])
        sea_a, sea_b = np.array([30, 80, 130]), np.array([50, 110, 160])
    img = np.zeros((size, size, 3))
    t = np.clip(y / max(horizon / size, 1e-6), 0, 1)[:, :, None]
    img[:] = sky_top * (1 - t) + sky_low * t
    sea_rows = np.arange(horizon, size)
    if len(sea_rows):
        xx = np.arange(size)[None, :]
        depth = (sea_rows[:, None] - horizon) / max(size - horizon, 1)
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.15, 0.35)
        wave = 0.5 + 0.5 * np.sin(freq * xx * (1 + 2 * depth) + 0.9 * sea_rows[:, None] + phase)
        mix = (wave * (0.3 + 0.7 * depth))[:, :, None]
        img[horizon:] = sea_a * (1 - mix) + sea_b * mix
    img += rng.normal(0, noise_amp * 255, img.shape)
    return img, horizon


def _place(size, bw, bh, horizon, placed, rng, tries=30):
    for _ in range(tries):
        x1 = int(rng.integers(0, size - bw + 1))
        low = max(horizon - bh // 2, 0)
        y1 = int(rng.integers(min(low, size - bh), size - bh + 1))
        cand = Box(x1, y1, x1 + bw, y1 + bh)
        if all(iou(cand, p) < 0.05 for p in placed):
            return x1, y1
    return None


def render_scene(spec: SceneSpec, classes: list[int], rng) -> tuple[np.ndarray, list[Label], np.ndarray]:
    """Paint one image. Returns (uint8 HWC image, labels, per-pixel object index map, -1 = background)."""
    size = spec.image_size
    dusk = rng.random() < spec.dusk_frac
    img, horizon = _background(size, dusk, spec.noise_amp, rng)
    owner = np.full((size, size), -1, dtype=np.int32)
    labels, placed = [], []
    lo, hi = np.log(spec.min_scale), np.log(spec.max_scale)
    for cls in classes:
        name = CLASS_NAMES[cls]
        spot = None
        for shrink in (1.0, 0.8, 0.6, 0.45, 0.3):
            side = np.exp(rng.uniform(lo, hi)) * size * shrink
            aspect = _ASPECT[name] * rng.uniform(0.85, 1.15)
            bw = int(np.clip(round(side if aspect >= 1 else side * aspect), 3, size))
            bh = int(np.clip(round(side / aspect if aspect >= 1 else side), 3, size))
            spot = _place(size, bw, bh, horizon, placed, rng)
            if spot is not None:
                break
        if spot is None:
            continue
        x1, y1 = spot
        u, v = _grid(bh, bw)
        painted = np.zeros((bh, bw), dtype=bool)
        light = 0.6 if dusk else 1.0
        tint = np.array([1.1, 0.85, 0.7]) if dusk else np.ones(3)
        region = img[y1:y1 + bh, x1:x1 + bw]
        for mask, rgb in _PAINTERS[name](u, v, bw, bh, rng):
            region[mask] = np.clip(np.array(rgb) * light * tint, 0, 255)
            painted |= mask
        ys, xs = np.nonzero(painted)
        if len(ys) == 0:
            continue
        bx = Box(x1 + xs.min(), y1 + ys.min(), x1 + xs.max() + 1, y1 + ys.max() + 1)
        if bx.area < 4:
            continue
        owner_region = owner[y1:y1 + bh, x1:x1 + bw]
        owner_region[painted] = len(labels)
        placed.append(bx)
        labels.append(Label.from_box(cls, bx, size, size))
    img += rng.normal(0, spec.noise_amp * 255 * 0.5, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), labels, owner


def plan_classes(spec: SceneSpec, n_images: int) -> list[list[int]]:
    """Object classes for every image, drawn from a shuffled, class-balanced deck."""
    rng = np.random.default_rng([spec.seed, 7919])
    counts = rng.integers(spec.min_objects, spec.max_objects + 1, size=n_images)
    total = int(counts.sum())
    deck = np.resize(np.arange(spec.num_classes), total)
    rng.shuffle(deck)
    out, pos = [], 0
    for c in counts:
        out.append([int(x) for x in deck[pos:pos + c]])
        pos += c
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HMPNET_THREADS", "1")))
    except ValueError:
        return 1


def synth_dataset(spec: SceneSpec, n_images: int, out_dir, val_frac: float = 1 / 6) -> Path:
    """Write ``n_images`` scenes with labels and train/val manifests under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    plan = plan_classes(spec, n_images)

    def make(i):
        img, labels, _ = render_scene(spec, plan[i], np.random.default_rng([spec.seed, i]))
        write_ppm(out / "images" / f"{i:06d}.ppm", img)
        (out / "labels" / f"{i:06d}.txt").write_text(format_labels(labels))

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(make, range(n_images)))
    else:
        for i in range(n_images):
            make(i)
    n_val = int(round(n_images * val_frac))
    names = [f"images/{i:06d}.ppm" for i in range(n_images)]
    (out / "train.txt").write_text("".join(n + "\n" for n in names[:n_images - n_val]))
    (out / "val.txt").write_text("".join(n + "\n" for n in names[n_images - n_val:]))
    meta = {"spec": asdict(spec), "n_images": n_images, "val": n_val,
            "classes": list(CLASS_NAMES[:spec.num_classes])}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out
