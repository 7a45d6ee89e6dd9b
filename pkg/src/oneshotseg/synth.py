"""Synthetic atlas phantoms and randomly deformed cases with known ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .volume import AtlasPair, LabelMap, Volume
from .warp import grid_sample_trilinear, warp_labels


@dataclass
class SyntheticSpec:
    dims: tuple = (16, 16, 16)
    num_classes: int = 3
    num_shapes: int = 1          # ellipsoids per foreground class
    a_max: float = 2.0           # max displacement, voxels
    sigma: float = 4.0           # field smoothing, voxels
    noise: float = 0.02          # intensity noise std
    edge_width: float = 0.5      # soft-edge scale, voxels; 0 gives hard edges
    seed: int = 42

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims must be three integers >= 8, got {self.dims}")
        if self.num_classes < 2 or self.num_classes > 255:
            raise ValueError("num_classes must be in [2, 255]")
        if self.num_shapes < 1:
            raise ValueError("num_shapes must be >= 1")
        if self.a_max < 0:
            raise ValueError("a_max must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.noise < 0 or self.edge_width < 0:
            raise ValueError("noise and edge_width must be >= 0")


@dataclass
class SyntheticCase:
    image: Volume
    hidden_gt: LabelMap
    gen_field: np.ndarray  # (3, D, H, W); diagnostics only


def base_intensity(k: int, num_classes: int) -> float:
    return k / (num_classes - 1)


def _radius_range(dims):
    m = min(dims)
    return max(2.0, 0.18 * m), 0.3 * m


def generate_phantom(spec: SyntheticSpec) -> AtlasPair:
    """Painter-ordered soft ellipsoids, one class after another, over background 0."""
    r_lo, r_hi = _radius_range(spec.dims)
    n_shapes = (spec.num_classes - 1) * spec.num_shapes
    if n_shapes * 4.0 / 3.0 * np.pi * r_lo ** 3 > 0.5 * np.prod(spec.dims):
        raise ValueError(f"dims {spec.dims} too small for {n_shapes} shapes")

    rng = np.random.default_rng(spec.seed)
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in spec.dims),
                                indexing="ij"))
    lo = np.array(spec.dims) * 0.25
    hi = np.array(spec.dims) * 0.75 - 1
    for _ in range(50):
        labels = np.zeros(spec.dims, dtype=np.uint8)
        image = np.zeros(spec.dims, dtype=np.float64)
        for k in range(1, spec.num_classes):
            mu = base_intensity(k, spec.num_classes)
            for _ in range(spec.num_shapes):
                center = rng.uniform(lo, hi)
                radii = rng.uniform(r_lo, r_hi, size=3)
                rho = np.sqrt((((grid - center[:, None, None, None])
                                / radii[:, None, None, None]) ** 2).sum(0))
                inside = rho < 1.0
                if spec.edge_width > 0:
                    dist = (1.0 - rho) * radii.mean()
                    soft = 1.0 / (1.0 + np.exp(-dist / spec.edge_width))
                else:
                    soft = inside.astype(np.float64)
                labels[inside] = k
                image = image * (1.0 - soft) + mu * soft
        counts = np.bincount(labels.ravel(), minlength=spec.num_classes)
        if (counts > 0).all():
            break
    else:
        raise ValueError(f"could not place all {spec.num_classes} classes in dims {spec.dims}")

    if spec.noise > 0:
        smooth = gaussian_filter(rng.standard_normal(spec.dims), 1.0, mode="nearest")
        image = image + spec.noise * smooth / smooth.std()
    return AtlasPair(Volume(image.astype(np.float32)), LabelMap(labels, spec.num_classes))


def random_field(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Smoothed white-noise displacement field with max vector norm a_max."""
    raw = rng.standard_normal((3, *spec.dims))
    field = np.stack([gaussian_filter(c, spec.sigma, mode="wrap") for c in raw])
    peak = np.sqrt((field ** 2).sum(0)).max()
    if spec.a_max == 0 or peak == 0:
        return np.zeros((3, *spec.dims), dtype=np.float32)
    out = (field * (spec.a_max / peak)).astype(np.float32)
    # f32 rounding can overshoot the bound by an ulp
    while np.sqrt((out.astype(np.float64) ** 2).sum(0)).max() > spec.a_max:
        out = (out * np.float32(1 - 1e-6)).astype(np.float32)
    return out


def deform_sample(atlas: AtlasPair, spec: SyntheticSpec, case_seed: int) -> SyntheticCase:
    rng = np.random.default_rng([spec.seed, case_seed])
    field = random_field(spec, rng)
    phi = torch.from_numpy(field).unsqueeze(0)
    with torch.no_grad():
        img = torch.from_numpy(atlas.image.data).view(1, 1, *atlas.image.dims)
        warped = grid_sample_trilinear(img, phi)[0, 0].numpy().astype(np.float64)
    gt = warp_labels(atlas.labels, phi, "nearest")
    noise = rng.standard_normal(atlas.image.dims) * spec.noise
    return SyntheticCase(Volume((warped + noise).astype(np.float32)), gt, field)
