import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from oneshotseg import cli
from oneshotseg.nets import EncoderConfig, ModelConfig, init_bundle, read_tensors
from oneshotseg.synth import base_intensity
from oneshotseg.train import save_checkpoint
from oneshotseg.volume import Volume, read_field, read_labels, read_volume, write_volume

TINY = {
    "synthetic": {"dims": [8, 8, 8], "seed": 9},
    "model": {"encoder": {"stage_channels": [4, 8, 8]}, "teacher": {"stage_channels": [8, 8, 16]}},
    "pretrain": {"steps": 2, "seed": 1},
    "finetune": {"steps": 2},
}


def _write_cfg(path: Path, cfg: dict) -> str:
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "cfg.json", TINY)
    assert cli.main(["gen-data", "--config", cfg, "--out-dir", str(root / "data"),
                     "--count-pre", "2", "--count-fin", "2", "--count-test", "2"]) == 0
    return root, cfg


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_layout_and_determinism(workdir, tmp_path):
    root, cfg = workdir
    manifest = json.loads((root / "data/manifest.json").read_text())
    assert len(manifest["pre"]) == 2 and len(manifest["fin"]) == 2 and len(manifest["test"]) == 2
    for rel in manifest["pre"] + manifest["fin"] + [e[k] for e in manifest["test"] for k in ("image", "gt")]:
        assert (root / "data" / rel).is_file()
    assert read_volume(root / "data/atlas/image.rrlv").dims == (8, 8, 8)
    assert cli.main(["gen-data", "--config", cfg, "--out-dir", str(tmp_path / "again"),
                     "--count-pre", "2", "--count-fin", "2", "--count-test", "2"]) == 0
    assert _tree(root / "data") == _tree(tmp_path / "again")


def test_pretrain_zero_steps_is_init(workdir, tmp_path):
    root, _ = workdir
    cfg = _write_cfg(tmp_path / "c.json", dict(TINY, pretrain={"steps": 0, "seed": 1}))
    out = tmp_path / "p.ckpt"
    assert cli.main(["pretrain", "--config", cfg, "--data-dir", str(root / "data"),
                     "--out-ckpt", str(out)]) == 0
    mc = ModelConfig(EncoderConfig(stage_channels=(4, 8, 8)), EncoderConfig(stage_channels=(8, 8, 16)), 3)
    save_checkpoint(tmp_path / "ref.ckpt", init_bundle(mc, 1))
    assert out.read_bytes() == (tmp_path / "ref.ckpt").read_bytes()


@pytest.fixture(scope="module")
def pretrained(workdir):
    root, cfg = workdir
    ckpt = root / "pre.ckpt"
    assert cli.main(["pretrain", "--config", cfg, "--data-dir", str(root / "data"),
                     "--out-ckpt", str(ckpt)]) == 0
    return ckpt


def test_pretrain_writes_runlog(pretrained):
    rows = list(csv.reader(Path(str(pretrained) + ".runlog.csv").open()))
    assert rows[0][0] == "step" and [r[0] for r in rows[1:]] == ["0", "1"]


@pytest.mark.parametrize("flags", [[], ["--no-ema"], ["--ema-dir", "s2t"], ["--ema-dir", "t2s"], ["--no-prompt"]])
def test_finetune_variants(workdir, pretrained, tmp_path, flags):
    root, cfg = workdir
    out = tmp_path / "ft.ckpt"
    assert cli.main(["finetune", "--config", cfg, "--data-dir", str(root / "data"),
                     "--init-ckpt", str(pretrained), "--out-ckpt", str(out)] + flags) == 0
    assert any(k.startswith("opt.ft_med.") for k in read_tensors(out))


def test_usage_errors(workdir, pretrained, tmp_path, capsys):
    root, cfg = workdir
    base = ["finetune", "--config", cfg, "--data-dir", str(root / "data"), "--out-ckpt", str(tmp_path / "x")]
    with pytest.raises(SystemExit) as e:
        cli.main(base)
    assert e.value.code == 1
    assert cli.main(base + ["--init-ckpt", str(pretrained), "--no-ema", "--ema-dir", "t2s"]) == 1
    bad = _write_cfg(tmp_path / "bad.json", {"pretrain": {"stepz": 3}})
    assert cli.main(["pretrain", "--config", bad, "--data-dir", str(root / "data"),
                     "--out-ckpt", str(tmp_path / "y")]) == 1
    assert cli.main(base[:-2] + ["--init-ckpt", str(tmp_path / "missing.ckpt"),
                                 "--out-ckpt", str(tmp_path / "z")]) == 2
    capsys.readouterr()


def test_infer_outputs(workdir, pretrained, tmp_path):
    root, _ = workdir
    img = root / "data/test/test_000.rrlv"
    outs = []
    for tag in ("a", "b"):
        lab, fld = tmp_path / f"{tag}.rrlv", tmp_path / f"{tag}_field.rrlv"
        assert cli.main(["infer", "--ckpt", str(pretrained), "--in-volume", str(img),
                         "--atlas", str(root / "data"), "--out-labels", str(lab),
                         "--out-field", str(fld)]) == 0
        outs.append((lab.read_bytes(), fld.read_bytes()))
    assert outs[0] == outs[1]
    assert read_labels(tmp_path / "a.rrlv").dims == (8, 8, 8)
    assert read_field(tmp_path / "a_field.rrlv").shape == (3, 8, 8, 8)
    write_volume(tmp_path / "small.rrlv", Volume(np.zeros((4, 4, 4), np.float32)))
    assert cli.main(["infer", "--ckpt", str(pretrained), "--in-volume", str(tmp_path / "small.rrlv"),
                     "--atlas", str(root / "data"), "--out-labels", str(tmp_path / "c.rrlv")]) == 2


def _oracle_checkpoint(path, num_classes=3, gain=50.0):
    """Medical seg decoder that classifies each voxel by its nearest class intensity."""
    mc = ModelConfig(EncoderConfig(stage_channels=(4, 8, 8)), EncoderConfig(stage_channels=(4, 8, 8)), num_classes)
    b = init_bundle(mc, 0)
    with torch.no_grad():
        for t in b.med_seg_decoder.values():
            t.zero_()
        w0 = b.med_seg_decoder["l0.w"]
        w0[0, w0.shape[1] - 1, 1, 1, 1] = 1.0  # copy the raw image into channel 0
        for c in range(num_classes):
            mu = base_intensity(c, num_classes)
            b.med_seg_decoder["head.w"][c, 0, 1, 1, 1] = gain * 2 * mu
            b.med_seg_decoder["head.b"][c] = -gain * mu * mu
    save_checkpoint(path, b)


def test_eval_with_oracle_checkpoint(tmp_path):
    clean = {"synthetic": {"dims": [8, 8, 8], "seed": 4, "a_max": 0.0, "noise": 0.0, "edge_width": 0.0}}
    cfg = _write_cfg(tmp_path / "clean.json", clean)
    data = tmp_path / "clean"
    assert cli.main(["gen-data", "--config", cfg, "--out-dir", str(data), "--count-pre", "0",
                     "--count-fin", "0", "--count-test", "3"]) == 0
    _oracle_checkpoint(tmp_path / "oracle.ckpt")
    out = tmp_path / "eval.csv"
    assert cli.main(["eval", "--ckpt", str(tmp_path / "oracle.ckpt"), "--data-dir", str(data),
                     "--out-csv", str(out)]) == 0
    rows = {(r[0], r[1]): r for r in csv.reader(out.open())}
    assert float(rows[("mean", "mean")][2]) == 1.0
    assert float(rows[("mean", "mean")][3]) == 1.0


def test_eval_rejects_class_mismatch(workdir, tmp_path):
    root, _ = workdir
    _oracle_checkpoint(tmp_path / "four.ckpt", num_classes=4)
    assert cli.main(["eval", "--ckpt", str(tmp_path / "four.ckpt"), "--data-dir", str(root / "data"),
                     "--out-csv", str(tmp_path / "e.csv")]) == 2
