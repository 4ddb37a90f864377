"""Command-line entry point: ``hmpnet synth|train|eval|predict|analyze|ablate|gradcheck``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .detect import EVAL_CONF, EVAL_NMS_IOU, PREDICT_CONF, format_predictions, postprocess
from .model import CheckpointError, ConfigError, ModelConfig, build, load_checkpoint
from .tensor import Tensor


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line failures instead of usage dumps
        raise CLIError(message)


def load_run_config(path):
    """Read a config file: either a bare model config or {"model": {...}, "train": {...}}."""
    from .pipeline.train import TrainConfig

    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if "model" in raw:
        extra = set(raw) - {"model", "train"}
        if extra:
            raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
        return ModelConfig.from_dict(raw["model"]), TrainConfig.from_dict(raw.get("train", {}))
    return ModelConfig.from_dict(raw), TrainConfig()


def cmd_synth(a):
    from .pipeline.synth import SceneSpec, synth_dataset

    spec = SceneSpec(seed=a.seed, image_size=a.size, num_classes=a.classes, dusk_frac=a.dusk_frac)
    try:
        out = synth_dataset(spec, a.n, a.out)
    except OSError as e:
        raise CLIError(f"cannot write dataset to {a.out}: {e.strerror or e}") from None
    meta = json.loads((out / "dataset.json").read_text())
    print(f"wrote {a.n} images ({a.n - meta['val']} train / {meta['val']} val) to {out}")


def cmd_train(a):
    from .pipeline.data import Dataset
    from .pipeline.train import train

    model_cfg, train_cfg = load_run_config(a.config)
    changes = {k: v for k, v in (("epochs", a.epochs), ("batch", a.batch), ("seed", a.seed)) if v is not None}
    train_cfg = train_cfg.with_(**changes)
    if a.deterministic:
        os.environ["HMPNET_THREADS"] = "1"
    data = Path(a.data)
    ds = Dataset(data, "train")
    val = Dataset(data, "val") if (data / "val.txt").exists() else None
    model = build(model_cfg, seed=train_cfg.seed)
    res = train(model, ds, train_cfg, a.out, val=val, resume=a.resume, verbose=True)
    print(f"best mAP.50 {max(res.best_map50, 0.0):.4f}; last checkpoint {res.last}, best {res.best}")


def cmd_eval(a):
    from .pipeline.data import Dataset
    from .pipeline.train import evaluate

    model = load_checkpoint(a.ckpt)
    ds = Dataset(a.data, a.split)
    m50, m5095 = evaluate(model, ds, a.conf, a.nms_iou)
    print(f"mAP.50 {m50:.4f}  mAP.50:.95 {m5095:.4f}  ({len(ds)} images)")


def draw_boxes(image: np.ndarray, dets) -> np.ndarray:
    """Overlay 1-px box outlines, one colour per class."""
    palette = np.array([[255, 64, 64], [64, 255, 64], [64, 128, 255], [255, 220, 0], [255, 0, 255],
                        [0, 255, 255]], dtype=np.uint8)
    out = image.copy()
    h, w = out.shape[:2]
    for d in dets:
        c = palette[d.cls % len(palette)]
        x1, y1 = int(np.clip(d.box.x1, 0, w - 1)), int(np.clip(d.box.y1, 0, h - 1))
        x2, y2 = int(np.clip(d.box.x2, 0, w - 1)), int(np.clip(d.box.y2, 0, h - 1))
        out[y1, x1:x2 + 1] = c
        out[y2, x1:x2 + 1] = c
        out[y1:y2 + 1, x1] = c
        out[y1:y2 + 1, x2] = c
    return out


def cmd_predict(a):
    from .pipeline.data import read_ppm, to_chw, write_ppm

    model = load_checkpoint(a.ckpt)
    img = read_ppm(a.image)
    size = model.config.input_size
    if img.shape[:2] != (size, size):
        raise CLIError(f"{a.image} is {img.shape[1]}x{img.shape[0]}; the model expects {size}x{size}")
    dets = postprocess(model(Tensor(to_chw([img]))), a.conf, EVAL_NMS_IOU)
    sys.stdout.write(format_predictions(dets))
    if a.overlay:
        write_ppm(a.overlay, draw_boxes(img, dets))


def cmd_analyze(a):
    from .analysis import cost_report

    model_cfg, _ = load_run_config(a.config)
    rep = cost_report(build(model_cfg), a.imgsz)
    print(rep.table(detail=a.detail))
    if a.csv:
        Path(a.csv).write_text(rep.to_csv())


def cmd_ablate(a):
    from .analysis import ablation_report, format_ablation

    model_cfg, _ = load_run_config(a.config)
    print(format_ablation(ablation_report(model_cfg), model_cfg.input_size))


def cmd_gradcheck(a):
    from .pipeline.gradsuite import format_results, run_gradient_suite

    results = run_gradient_suite(a.seed, a.eps)
    print(format_results(results))
    return 0 if all(r.ok for r in results) else 1


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hmpnet", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic maritime dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--dusk-frac", type=float, default=0.25)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    s.add_argument("--resume", help="training-state file written beside a previous checkpoint")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="mAP of a checkpoint on a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--conf", type=float, default=EVAL_CONF)
    s.add_argument("--nms-iou", type=float, default=EVAL_NMS_IOU)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="detect objects in one PPM image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--overlay")
    s.add_argument("--conf", type=float, default=PREDICT_CONF)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("analyze", help="parameter / FLOP report")
    s.add_argument("--config", required=True)
    s.add_argument("--imgsz", type=int, required=True)
    s.add_argument("--csv")
    s.add_argument("--detail", action="store_true", help="one line per layer")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("ablate", help="cost of the cumulative MCPC / PWS / HDM toggles")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-5)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        a = make_parser().parse_args(argv)
        return a.fn(a) or 0
    except CLIError as e:
        print(f"hmpnet: error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"hmpnet: error: missing file {e.filename or e}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, ValueError, RuntimeError) as e:
        print(f"hmpnet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
