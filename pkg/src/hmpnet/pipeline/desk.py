"""Desk-scale checks: the synthetic convergence run and the small-batch overfit."""
from __future__ import annotations

import json
import time
from dataclasses import asdict
from pathlib import Path

from ..model import build, toy_config
from .data import Dataset
from .optim import SGD, cosine_lr
from .synth import SceneSpec, synth_dataset
from .train import TrainConfig, batch_targets, desk_config, thread_limit, train, train_step

DESK_IMAGES = 360  # 300 train / 60 val with the default 1/6 validation share
DESK_SIZE = 160
DESK_CLASSES = 3


def desk_dataset(root, seed: int = 0) -> Path:
    root = Path(root)
    if not (root / "train.txt").exists():
        synth_dataset(SceneSpec(seed=seed, image_size=DESK_SIZE, num_classes=DESK_CLASSES), DESK_IMAGES, root)
    return root


def run_convergence(work, seed: int = 0, verbose: bool = False, **changes) -> dict:
    """Train the toy model on the desk dataset; writes and returns ``summary.json``."""
    work = Path(work)
    data = desk_dataset(work / "data", seed)
    cfg = desk_config(seed=seed, **changes)
    model = build(toy_config(input_size=DESK_SIZE, num_classes=DESK_CLASSES), seed=seed)
    t0 = time.perf_counter()
    res = train(model, Dataset(data, "train"), cfg, work / "last.ckpt", val=Dataset(data, "val"), verbose=verbose)
    summary = {"best_map50": res.best_map50, "final": res.history[-1], "minutes": (time.perf_counter() - t0) / 60,
               "config": asdict(cfg)}
    (work / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def overfit(data: Dataset, n_images: int = 8, steps: int = 500, target: float = 0.05, seed: int = 0,
            cfg: TrainConfig | None = None) -> list[float]:
    """Repeat one fixed batch of ``n_images`` without augmentation; stops once the loss is below ``target``.

    Uses the training recipe with the cosine schedule stretched over ``steps``.
    """
    cfg = cfg or TrainConfig()
    model = build(toy_config(input_size=data[0].image.shape[0], num_classes=DESK_CLASSES), seed=seed)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    x, tgt = batch_targets([data[i].image for i in range(n_images)], [data[i].labels for i in range(n_images)],
                           model.config.input_size)
    losses = []
    with thread_limit():
        for step in range(steps):
            losses.append(train_step(model, opt, x, tgt, cosine_lr(step, cfg.lr0, cfg.lr_min, steps)))
            if losses[-1] < target:
                break
    return losses
