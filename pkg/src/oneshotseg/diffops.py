"""Differentiable primitives every network and loss is assembled from.

Tensors are ``torch.Tensor``; torch autograd keeps the reverse-mode record.
The functions here pin down the conventions (padding, interpolation
alignment, activation subgradients) and validate shapes up front.
"""
from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"step {step}: {msg}")
        self.step = step


def check_finite(t: torch.Tensor, what: str = "tensor", step: int | None = None) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}", step)
    return t


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    if x.dim() != 5 or weight.dim() != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {tuple(x.shape)}, {tuple(weight.shape)}")
    cout, cin, kd, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if not (kd == kh == kw) or kd % 2 == 0:
        raise ShapeError(f"kernel must be cubic with odd size, got {(kd, kh, kw)}")
    if bias is not None and tuple(bias.shape) != (cout,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({cout},)")
    for n in x.shape[2:]:
        if (n + 2 * padding - kd) // stride + 1 < 1:
            raise ShapeError(f"non-positive output size for input {tuple(x.shape)}")
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def upsample_trilinear2x(x: torch.Tensor) -> torch.Tensor:
    # corner-aligned: output o reads input o*(n-1)/(2n-1)
    if x.dim() != 5:
        raise ShapeError(f"expected [N,C,D,H,W], got {tuple(x.shape)}")
    size = tuple(2 * n for n in x.shape[2:])
    return F.interpolate(x, size=size, mode="trilinear", align_corners=True)


def leaky_relu(x: torch.Tensor, slope: float = 0.01) -> torch.Tensor:
    # x >= 0 takes the identity branch, so d/dx at 0 is 1
    return torch.where(x >= 0, x, slope * x)


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel standardization over the spatial axes (no affine)."""
    dims = tuple(range(2, x.dim()))
    centered = x - x.mean(dim=dims, keepdim=True)
    var = (centered * centered).mean(dim=dims, keepdim=True)
    return centered / torch.sqrt(var + eps)


def channel_softmax(x: torch.Tensor) -> torch.Tensor:
    shifted = x - x.amax(dim=1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def concat_channels(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {tuple(t.shape)} with {tuple(ref)}")
    return torch.cat(list(tensors), dim=1)


def grad_check(f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = 1e-3) -> float:
    """Largest relative disagreement between autograd and central differences.

    Runs in float64 so the comparison measures the gradient code rather than
    f32 rounding. ``f`` must accept the inputs positionally and return a scalar.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = f(*xs)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    check_finite(out, "grad_check output")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, analytic):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = gflat[i].item()
                if num != num or a != a:
                    raise NumericalError("NaN encountered in grad_check")
                err = abs(a - num) / max(1e-8, abs(a) + abs(num))
                worst = max(worst, err)
    return worst
