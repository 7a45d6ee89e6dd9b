"""Training objectives: feature distillation, registration and pseudo-label Dice."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffops import ShapeError
from .warp import field_gradient


@dataclass
class LossWeights:
    # unit weights keep the field pinned at identity on the phantoms: the
    # smoothness and Dice terms outvote the sparse NCC signal
    smooth: float = 0.1
    sim: float = 1.0
    dice: float = 0.1

    def __post_init__(self):
        for name in ("smooth", "sim", "dice"):
            v = float(getattr(self, name))
            if not v >= 0 or v == float("inf"):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class NccConfig:
    window: int = 5
    eps: float = 1e-5

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"NCC window must be a positive odd integer, got {self.window}")
        if not self.eps > 0:
            raise ValueError("NCC eps must be > 0")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def loss_rec(student_feat: torch.Tensor, teacher_feat: torch.Tensor) -> torch.Tensor:
    _same_shape(student_feat, teacher_feat, "loss_rec")
    return ((student_feat - teacher_feat.detach()) ** 2).mean()


def loss_smooth(field: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    sq = (field_gradient(field) ** 2).sum(dim=(1, 2))
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def _window_sum(x: torch.Tensor, w: int) -> torch.Tensor:
    if w == 1:
        return x
    r = w // 2
    padded = F.pad(x, (r, r, r, r, r, r), mode="replicate")
    kernel = torch.ones((1, 1, w, w, w), dtype=x.dtype, device=x.device)
    return F.conv3d(padded, kernel)


def loss_ncc_local(a: torch.Tensor, b: torch.Tensor, cfg: NccConfig | None = None) -> torch.Tensor:
    """1 - mean squared local correlation over clamp-padded w^3 windows.

    Tensors are [N, 1, D, H, W]. Window sums are taken in float64 to keep the
    one-pass variance formula from cancelling.
    """
    cfg = cfg or NccConfig()
    _same_shape(a, b, "loss_ncc_local")
    if a.dim() != 5 or a.shape[1] != 1:
        raise ShapeError(f"loss_ncc_local expects [N,1,D,H,W], got {tuple(a.shape)}")
    out_dtype = a.dtype
    a, b = a.double(), b.double()
    n = float(cfg.window ** 3)
    sa, sb = _window_sum(a, cfg.window), _window_sum(b, cfg.window)
    saa, sbb = _window_sum(a * a, cfg.window), _window_sum(b * b, cfg.window)
    sab = _window_sum(a * b, cfg.window)
    cross = sab - sa * sb / n
    var_a = saa - sa * sa / n
    var_b = sbb - sb * sb / n
    cc = cross * cross / (var_a * var_b + cfg.eps)
    return (1.0 - cc.mean()).to(out_dtype)


def loss_dice_soft(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    _same_shape(pred, target, "loss_dice_soft")
    if pred.dim() < 3:
        raise ShapeError("loss_dice_soft expects [N, C, ...] tensors")
    for t, name in ((pred, "pred"), (target, "target")):
        lo, hi = t.min().item(), t.max().item()
        if lo < -1e-4 or hi > 1 + 1e-4:
            raise ValueError(f"{name} probabilities outside [0, 1]: [{lo}, {hi}]")
    dims = (0,) + tuple(range(2, pred.dim()))
    inter = (pred * target).sum(dim=dims)
    denom = pred.sum(dim=dims) + target.sum(dim=dims)
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


def loss_reg(warped_atlas_img, target_img, field, warped_atlas_labels_soft, seg_probs,
             weights: LossWeights | None = None, ncc: NccConfig | None = None,
             smooth_reduction: str = "mean", parts: dict | None = None) -> torch.Tensor:
    """Weighted smoothness + similarity + Dice; the segmentation side enters detached.

    When ``parts`` is given it receives the unweighted component values.
    """
    weights = weights or LossWeights()
    l_smooth = loss_smooth(field, smooth_reduction)
    l_sim = loss_ncc_local(warped_atlas_img, target_img, ncc)
    l_dice = loss_dice_soft(warped_atlas_labels_soft, seg_probs.detach())
    if parts is not None:
        parts.update(l_smooth=l_smooth.item(), l_sim=l_sim.item(), l_dice_reg=l_dice.item())
    return weights.smooth * l_smooth + weights.sim * l_sim + weights.dice * l_dice


def loss_seg(pred_probs: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    return loss_dice_soft(pred_probs, pseudo_labels.detach())
