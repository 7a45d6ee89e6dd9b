"""Dense displacement-field resampling.

A field has shape [N, 3, D, H, W] with channels (dz, dy, dx) in voxel units;
``out(i) = in(i + field(i))``. Sample positions are clamped to the volume.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .diffops import ShapeError
from .volume import LabelMap


def _check_pair(x: torch.Tensor, field: torch.Tensor) -> None:
    if x.dim() != 5 or field.dim() != 5 or field.shape[1] != 3:
        raise ShapeError(f"expected [N,C,D,H,W] and [N,3,D,H,W], got "
                         f"{tuple(x.shape)} and {tuple(field.shape)}")
    if x.shape[0] != field.shape[0] or x.shape[2:] != field.shape[2:]:
        raise ShapeError(f"input {tuple(x.shape)} and field {tuple(field.shape)} disagree")


def _axis_coords(field: torch.Tensor, axis: int):
    n = field.shape[2 + axis]
    shape = [1, 1, 1]
    shape[axis] = n
    base = torch.arange(n, dtype=field.dtype, device=field.device).view(shape)
    pos = (base + field[:, axis]).clamp(0, n - 1)
    lo = pos.detach().floor().clamp(max=max(n - 2, 0))
    frac = pos - lo
    hi = (lo + 1).clamp(max=n - 1)
    return lo.long(), hi.long(), frac


def grid_sample_trilinear(x: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    _check_pair(x, field)
    N, C, D, H, W = x.shape
    z0, z1, fz = _axis_coords(field, 0)
    y0, y1, fy = _axis_coords(field, 1)
    x0, x1, fx = _axis_coords(field, 2)
    flat = x.reshape(N, C, D * H * W)

    def corner(zi, yi, xi):
        idx = (zi * H + yi) * W + xi
        idx = idx.reshape(N, 1, -1).expand(N, C, -1)
        return torch.gather(flat, 2, idx).reshape(N, C, D, H, W)

    fz, fy, fx = fz.unsqueeze(1), fy.unsqueeze(1), fx.unsqueeze(1)
    gz, gy, gx = 1 - fz, 1 - fy, 1 - fx
    return (gz * gy * gx * corner(z0, y0, x0) + gz * gy * fx * corner(z0, y0, x1)
            + gz * fy * gx * corner(z0, y1, x0) + gz * fy * fx * corner(z0, y1, x1)
            + fz * gy * gx * corner(z1, y0, x0) + fz * gy * fx * corner(z1, y0, x1)
            + fz * fy * gx * corner(z1, y1, x0) + fz * fy * fx * corner(z1, y1, x1))


def one_hot(labels: LabelMap, dtype=torch.float32) -> torch.Tensor:
    t = torch.from_numpy(labels.data.astype(np.int64))
    return F.one_hot(t, labels.num_classes).permute(3, 0, 1, 2).unsqueeze(0).to(dtype)


def warp_labels(labels: LabelMap, field: torch.Tensor, mode: str = "soft"):
    """Warp an atlas label map: soft -> [1,C,D,H,W] probabilities, nearest -> LabelMap."""
    if field.dim() != 5 or field.shape[0] != 1 or tuple(field.shape[2:]) != labels.dims:
        raise ShapeError(f"field {tuple(field.shape)} does not match labels {labels.dims}")
    if mode == "soft":
        return grid_sample_trilinear(one_hot(labels, field.dtype), field)
    if mode == "nearest":
        phi = field.detach()[0].cpu().numpy().astype(np.float64)
        dims = labels.dims
        idx = []
        for axis, n in enumerate(dims):
            shape = [1, 1, 1]
            shape[axis] = n
            pos = np.arange(n, dtype=np.float64).reshape(shape) + phi[axis]
            idx.append(np.clip(np.floor(pos + 0.5), 0, n - 1).astype(np.intp))
        return LabelMap(labels.data[idx[0], idx[1], idx[2]], labels.num_classes)
    raise ValueError(f"unknown warp mode {mode!r}")


def field_gradient(field: torch.Tensor) -> torch.Tensor:
    """Forward differences, [N, 3 components, 3 axes, D, H, W]; zero on the last slice."""
    if field.dim() != 5 or field.shape[1] != 3:
        raise ShapeError(f"expected [N,3,D,H,W], got {tuple(field.shape)}")
    if min(field.shape[2:]) < 2:
        raise ShapeError("field_gradient needs every spatial dim >= 2")
    grads = []
    for axis in (2, 3, 4):
        d = torch.diff(field, dim=axis)
        pad = torch.zeros_like(field.narrow(axis, 0, 1))
        grads.append(torch.cat([d, pad], dim=axis))
    return torch.stack(grads, dim=2)
