"""Training loop, evaluation, and training-state persistence."""
from __future__ import annotations

import json
import logging
import os
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..detect import EVAL_CONF, EVAL_NMS_IOU, map50_95, postprocess
from ..model import HMPNet, load_state, read_container, save_checkpoint, write_container
from ..tensor import NonFiniteError, Tape, Tensor, backward
from .assign import assign_targets
from .augment import AugmentFlags, augment
from .data import Dataset, to_chw
from .loss import detection_loss
from .optim import SGD, cosine_lr

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; the defaults are the full-scale 640 px regime."""

    lr0: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    batch: int = 64
    epochs: int = 200
    lr_min: float = 1e-4
    warmup_epochs: int = 0
    hflip: bool = True
    rotation_deg: float = 10.0
    seed: int = 0
    eval_every: int = 5
    # dynamic-conv attention temperature, annealed linearly to 1 over this many epochs
    temperature0: float = 30.0
    temperature_epochs: int = 10

    def validate(self) -> "TrainConfig":
        for name in ("lr0", "batch", "epochs", "temperature0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        for name in ("momentum", "weight_decay", "lr_min", "rotation_deg", "warmup_epochs", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be non-negative")
        if self.lr_min > self.lr0:
            raise ValueError("TrainConfig.lr_min exceeds lr0")
        return self

    @property
    def flags(self) -> AugmentFlags:
        return AugmentFlags(self.hflip, self.rotation_deg)

    def with_(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes}).validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d).validate()


def desk_config(**changes) -> TrainConfig:
    """Desk-scale regime: 160 px synthetic data, batch 16, 60 epochs."""
    return TrainConfig(**{"batch": 16, "epochs": 60, **changes}).validate()


def temperature_at(epoch: int, cfg: TrainConfig) -> float:
    if cfg.temperature_epochs <= 0 or epoch >= cfg.temperature_epochs:
        return 1.0
    return cfg.temperature0 + (1.0 - cfg.temperature0) * epoch / cfg.temperature_epochs


def lr_at(epoch: int, step: int, steps: int, cfg: TrainConfig) -> float:
    """Cosine over epochs; an optional linear warmup over the first steps."""
    lr = cosine_lr(epoch, cfg.lr0, cfg.lr_min, cfg.epochs)
    if cfg.warmup_epochs:
        done = epoch * steps + step + 1
        total = cfg.warmup_epochs * steps
        if done < total:
            lr *= done / total
    return lr


def thread_limit():
    """Cap BLAS threads to HMPNET_THREADS when set."""
    n = os.environ.get("HMPNET_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


# -------------------------------------------------------------- batching

def batch_targets(images: list[np.ndarray], labels: list, image_size: int):
    gts = []
    for im, lbs in zip(images, labels):
        h, w = im.shape[:2]
        gts.append([(lb.cls, lb.to_box(w, h)) for lb in lbs])
    return to_chw(images), assign_targets(gts, image_size)


def train_step(model: HMPNet, opt: SGD, images: np.ndarray, assignment, lr: float,
               parts: dict | None = None) -> float:
    """One forward/backward/update on a prepared batch; returns the loss."""
    with Tape() as tape:
        pyr = model(Tensor(images, dtype=images.dtype))
        loss = detection_loss(pyr, assignment, parts)
        backward(loss)
    tape.release()
    opt.step(lr)
    opt.zero_grad()
    return loss.item()


def predict_batches(model: HMPNet, ds: Dataset, conf: float = EVAL_CONF, nms_iou: float = EVAL_NMS_IOU,
                    batch: int = 16):
    dets = []
    for start in range(0, len(ds), batch):
        idx = list(range(start, min(start + batch, len(ds))))
        x = to_chw([ds[i].image for i in idx])
        pyr = model(Tensor(x))
        dets.extend(postprocess(pyr, conf, nms_iou, image_ids=idx))
    return dets


def evaluate(model: HMPNet, ds: Dataset, conf: float = EVAL_CONF, nms_iou: float = EVAL_NMS_IOU,
             batch: int = 16) -> tuple[float, float]:
    """(mAP.50, mAP.50:.95) of ``model`` on a dataset split."""
    dets = predict_batches(model, ds, conf, nms_iou, batch)
    gts = [g for i in range(len(ds)) for g in ds.ground_truth(i)]
    return map50_95(dets, gts, model.config.num_classes)


# ---------------------------------------------------------------- state

def state_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.stem + ".state")


def save_train_state(path, model: HMPNet, opt: SGD, epoch: int, best: float, cfg: TrainConfig) -> None:
    meta = {"epoch": epoch, "best": best, "train": asdict(cfg), "model": model.config.to_dict()}
    tensors = [(f"param/{n}", p.data) for n, p in model.named_parameters()] + opt.state()
    write_container(path, meta, tensors)


def load_train_state(path, model: HMPNet, opt: SGD) -> dict:
    meta, tensors = read_container(path)
    load_state(model, [(n[len("param/"):], a) for n, a in tensors if n.startswith("param/")])
    opt.params = model.parameters()
    opt.velocity = {id(p): np.zeros_like(p.data) for p in opt.params}
    opt.load_state(tensors)
    return meta


# ----------------------------------------------------------------- train

@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_map50: float = -1.0
    last: Path | None = None
    best: Path | None = None


def train(model: HMPNet, data: Dataset, cfg: TrainConfig, out, val: Dataset | None = None,
          log_path=None, resume=None, max_epochs: int | None = None, verbose: bool = False) -> TrainResult:
    """Train ``model`` in place.

    ``out`` is the last-checkpoint path; the best checkpoint (by validation
    mAP.50) goes beside it as ``<stem>.best<suffix>`` and the optimizer state
    as ``<stem>.state``. ``log_path`` receives one JSON object per epoch.
    ``max_epochs`` stops early without changing the schedule (used to test
    resumption).
    """
    cfg.validate()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    best_path = out.with_name(out.stem + ".best" + out.suffix)
    log_path = Path(log_path) if log_path else out.with_suffix(".jsonl")
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    res = TrainResult(last=out, best=best_path)
    start = 0
    if resume is not None:
        meta = load_train_state(resume, model, opt)
        start, res.best_map50 = meta["epoch"] + 1, meta["best"]
    elif log_path.exists():
        log_path.unlink()
    size = model.config.input_size
    n = len(data)
    steps = max(1, -(-n // cfg.batch))
    end = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    with thread_limit():
        for epoch in range(start, end):
            t0 = time.perf_counter()
            model.set_temperature(temperature_at(epoch, cfg))
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            losses, boxes, clss = [], [], []
            for b in range(steps):
                idx = order[b * cfg.batch:(b + 1) * cfg.batch]
                rng = np.random.default_rng([cfg.seed, epoch, b])
                ims, lbs = [], []
                for i in idx:
                    s = data[int(i)]
                    im, lb = augment(s.image, s.labels, cfg.flags, rng)
                    ims.append(im)
                    lbs.append(lb)
                x, tgt = batch_targets(ims, lbs, size)
                lr = lr_at(epoch, b, steps, cfg)
                parts: dict = {}
                try:
                    loss = train_step(model, opt, x, tgt, lr, parts)
                except NonFiniteError as e:
                    msg = f"non-finite value at epoch {epoch} batch {b} (batch seed [{cfg.seed}, {epoch}, {b}]): {e}"
                    log.error(msg)
                    raise TrainingError(msg) from e
                if not np.isfinite(loss):
                    msg = f"non-finite loss at epoch {epoch} batch {b} (batch seed [{cfg.seed}, {epoch}, {b}])"
                    log.error(msg)
                    raise TrainingError(msg)
                losses.append(loss)
                boxes.append(parts["box"])
                clss.append(parts["cls"])
            rec = {"epoch": epoch, "lr": lr_at(epoch, 0, steps, cfg), "temperature": temperature_at(epoch, cfg),
                   "loss": float(np.mean(losses)), "box": float(np.mean(boxes)), "cls": float(np.mean(clss))}
            last_epoch = epoch == cfg.epochs - 1
            if val is not None and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last_epoch):
                m50, m5095 = evaluate(model, val)
                rec["map50"], rec["map50_95"] = m50, m5095
                if m50 > res.best_map50:
                    res.best_map50 = m50
                    save_checkpoint(model, best_path)
            res.history.append(rec)
            with open(log_path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            save_checkpoint(model, out)
            save_train_state(state_path(out), model, opt, epoch, res.best_map50, cfg)
            if verbose:
                extra = f" map50 {rec['map50']:.3f}" if "map50" in rec else ""
                print(f"epoch {epoch:3d} loss {rec['loss']:.4f} (box {rec['box']:.3f} cls {rec['cls']:.3f})"
                      f"{extra} [{time.perf_counter() - t0:.1f}s]", flush=True)
    if not best_path.exists() and out.exists():
        best_path.write_bytes(out.read_bytes())
    return res
