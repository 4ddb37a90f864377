import json
import shutil

import numpy as np
import pytest

from hmpnet.cli import main
from hmpnet.detect import PREDICT_CONF, postprocess
from hmpnet.model import ModelConfig, build, save_checkpoint
from hmpnet.pipeline.data import Label, format_labels, read_ppm, to_chw
from hmpnet.tensor import Tensor

TINY = dict(num_classes=3, input_size=64, stem_width=8, widths=[8, 8, 16, 16], repeats=[1, 1, 1, 1],
            neck_width=8, head_width=8, gn_groups=4)


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps({"model": TINY, "train": {"batch": 8, "epochs": 1, "eval_every": 1}}))
    return p


def test_synth_cli(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n", "6", "--size", "64", "--seed", "2",
                 "--classes", "4", "--dusk-frac", "0.5"]) == 0
    assert "6 images" in capsys.readouterr().out
    meta = json.loads((tmp_path / "d" / "dataset.json").read_text())
    assert meta["spec"]["num_classes"] == 4 and meta["spec"]["dusk_frac"] == 0.5
    assert len(list((tmp_path / "d" / "images").glob("*.ppm"))) == 6


def test_analyze_and_ablate(tmp_path, capsys):
    assert main(["analyze", "--config", "configs/default.json", "--imgsz", "640", "--csv",
                 str(tmp_path / "c.csv")]) == 0
    out = capsys.readouterr().out
    assert "1,953,547" in out and "total" in out
    assert (tmp_path / "c.csv").read_text().startswith("path,kind,out_shape,params,flops\n")
    assert main(["ablate", "--config", "configs/toy.json"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 5


def test_gradcheck_cli(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "GNDConv" in out and "FAIL" not in out


def test_gradcheck_exit_code_on_failure(monkeypatch):
    import hmpnet.pipeline.gradsuite as gs
    monkeypatch.setattr(gs, "TOLERANCE", 0.0)
    assert main(["gradcheck"]) == 1


@pytest.mark.parametrize("argv,code", [
    (["analyze", "--config", "configs/default.json"], 2),
    (["analyze", "--config", "configs/default.json", "--imgsz", "640", "--bogus"], 2),
    (["analyze", "--config", "missing.json", "--imgsz", "640"], 1),
    (["analyze", "--config", "configs/default.json", "--imgsz", "100"], 1),
    (["eval", "--ckpt", "missing.ckpt", "--data", "."], 1),
    (["frobnicate"], 2),
])
def test_errors_are_one_line(argv, code, capsys):
    assert main(argv) == code
    err = capsys.readouterr().err.strip()
    assert err.startswith("hmpnet: error:") and len(err.splitlines()) == 1


def test_train_eval_predict(tmp_path, tiny_data, tiny_cfg, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(tiny_cfg), "--data", str(tiny_data), "--out", str(ckpt),
                 "--epochs", "1", "--batch", "12", "--seed", "3", "--deterministic"]) == 0
    assert ckpt.exists() and (tmp_path / "m.jsonl").exists()
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(tiny_data)]) == 0
    assert "mAP.50" in capsys.readouterr().out
    img = sorted((tiny_data / "images").glob("*.ppm"))[0]
    assert main(["predict", "--ckpt", str(ckpt), "--image", str(img), "--overlay", str(tmp_path / "o.ppm"),
                 "--conf", "0.0"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and len(lines[0].split()) == 7
    assert read_ppm(tmp_path / "o.ppm").shape == (64, 64, 3)


def test_eval_on_self_predicted_dataset_is_perfect(tmp_path, tiny_data, capsys):
    model = build(ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in TINY.items()}), seed=4)
    model.head.branches[0].cls.bias.data[:] = 0.5  # make confident predictions exist
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(model, ckpt)
    root = tmp_path / "self"
    (root / "images").mkdir(parents=True)
    (root / "labels").mkdir()
    names = []
    for src in sorted((tiny_data / "images").glob("*.ppm"))[:6]:
        shutil.copy(src, root / "images" / src.name)
        dets = postprocess(model(Tensor(to_chw([read_ppm(src)]))), PREDICT_CONF)
        labels = [Label.from_box(d.cls, d.box, 64, 64) for d in dets]
        (root / "labels" / (src.stem + ".txt")).write_text(format_labels(labels))
        names.append(f"images/{src.name}")
    assert any((root / "labels" / (n[7:-4] + ".txt")).read_text() for n in names)
    (root / "val.txt").write_text("\n".join(names) + "\n")
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(root)]) == 0
    assert "mAP.50 1.0000" in capsys.readouterr().out
