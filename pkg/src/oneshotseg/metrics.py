"""Hard Dice, global NCC, and dataset-level evaluation reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import nets
from .diffops import ShapeError
from .synth import SyntheticCase
from .train import as_tensor, general_probs
from .volume import AtlasPair, LabelMap, Volume
from .warp import grid_sample_trilinear, warp_labels


def dice_hard(pred: LabelMap, gt: LabelMap, classes=None,
              include_background: bool = False) -> tuple[dict, float]:
    """Per-class Dice and their mean. Both-empty scores 1.0, one-empty 0.0."""
    if pred.dims != gt.dims:
        raise ShapeError(f"dims differ: {pred.dims} vs {gt.dims}")
    if classes is None:
        classes = range(max(pred.num_classes, gt.num_classes))
    per_class = {}
    for c in sorted(classes):
        p, g = pred.data == c, gt.data == c
        denom = int(p.sum()) + int(g.sum())
        per_class[c] = 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom
    scored = [v for c, v in per_class.items() if include_background or c != 0]
    return per_class, float(np.mean(scored)) if scored else float("nan")


def ncc_global(a: Volume, b: Volume) -> float:
    if a.dims != b.dims:
        raise ShapeError(f"dims differ: {a.dims} vs {b.dims}")
    x = a.data.astype(np.float64).ravel()
    y = b.data.astype(np.float64).ravel()
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((x * y).sum() / denom, -1.0, 1.0))


@dataclass
class CaseResult:
    case_id: str
    per_class_s: dict
    per_class_r: dict
    s_dice: float
    r_dice: float
    ncc: float


@dataclass
class EvalReport:
    cases: list = field(default_factory=list)

    def _stat(self, attr):
        vals = np.array([getattr(c, attr) for c in self.cases], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), std

    @property
    def s_dice(self):
        return self._stat("s_dice")

    @property
    def r_dice(self):
        return self._stat("r_dice")

    @property
    def ncc(self):
        return self._stat("ncc")

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "class", "s_dice", "r_dice", "ncc"])
            for c in self.cases:
                for k in c.per_class_s:
                    w.writerow([c.case_id, k, f"{c.per_class_s[k]:.6f}",
                                f"{c.per_class_r[k]:.6f}", f"{c.ncc:.6f}"])
                w.writerow([c.case_id, "mean", f"{c.s_dice:.6f}", f"{c.r_dice:.6f}", f"{c.ncc:.6f}"])
            for label, idx in (("mean", 0), ("std", 1)):
                w.writerow([label, "mean", f"{self.s_dice[idx]:.6f}",
                            f"{self.r_dice[idx]:.6f}", f"{self.ncc[idx]:.6f}"])

    def summary(self) -> str:
        s, r, n = self.s_dice, self.r_dice, self.ncc
        return (f"{len(self.cases)} cases  S-Dice {s[0]:.4f} ± {s[1]:.4f}  "
                f"R-Dice {r[0]:.4f} ± {r[1]:.4f}  NCC {n[0]:.4f} ± {n[1]:.4f}")


@torch.no_grad()
def predict(bundle: nets.ModelBundle, image: Volume, atlas: AtlasPair,
            use_prompt: bool = True) -> tuple[LabelMap, torch.Tensor]:
    """Medical-branch segmentation (auto-prompted by the general branch) and field."""
    xu, xa = as_tensor(image), as_tensor(atlas.image)
    for x in (xu, xa):
        if x.shape[2:] != xa.shape[2:]:
            raise ShapeError("image and atlas dims differ")
    fa = nets.encode(bundle.med_encoder, xa)
    fu = nets.encode(bundle.med_encoder, xu)
    phi = nets.reg_forward(bundle.reg_decoder, fa, fu, (xa, xu))
    prompt = None
    if use_prompt:
        prompt = nets.prompt_encode(bundle.prompt_encoder, general_probs(bundle, xu))
    logits = nets.seg_forward(bundle.med_seg_decoder, fu, xu, prompt)
    labels = logits[0].argmax(dim=0).numpy().astype(np.uint8)
    return LabelMap(labels, atlas.labels.num_classes), phi


def evaluate(bundle: nets.ModelBundle, cases: Sequence[SyntheticCase], atlas: AtlasPair,
             use_prompt: bool = True, include_background: bool = False,
             case_ids: Sequence[str] | None = None,
             predictor: Callable | None = None) -> EvalReport:
    """Score cases against their hidden ground truth.

    Only ``case.image`` reaches the model; ``predictor`` (default :func:`predict`)
    may be swapped for a hand-built oracle.
    """
    if not cases:
        raise ValueError("need at least one case")
    predictor = predictor or (lambda img: predict(bundle, img, atlas, use_prompt))
    ids = list(case_ids) if case_ids is not None else [f"case{i:03d}" for i in range(len(cases))]
    classes = range(atlas.labels.num_classes)
    report = EvalReport()
    for cid, case in sorted(zip(ids, cases), key=lambda p: p[0]):
        pred, phi = predictor(case.image)
        s_cls, s_mean = dice_hard(pred, case.hidden_gt, classes, include_background)
        warped_lab = warp_labels(atlas.labels, phi, "nearest")
        r_cls, r_mean = dice_hard(warped_lab, case.hidden_gt, classes, include_background)
        with torch.no_grad():
            warped_img = grid_sample_trilinear(as_tensor(atlas.image), phi)[0, 0].numpy()
        report.cases.append(CaseResult(cid, s_cls, r_cls, s_mean, r_mean,
                                       ncc_global(Volume(warped_img), case.image)))
    return report
