"""Functional networks for the general and medical branches.

Every network is a flat ``dict[str, Tensor]`` of parameters (a "param set")
plus a pure forward function, so EMA, Adam and checkpointing all operate on
the same plain mapping.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffops import (ShapeError, concat_channels, conv3d, instance_norm, leaky_relu,
                      upsample_trilinear2x)

ParamSet = dict  # name -> torch.Tensor

ROLES = ("teacher", "gen_enc", "med_enc", "adapter", "reg_dec", "gen_seg", "med_seg", "prompt")


@dataclass
class EncoderConfig:
    in_channels: int = 1
    stage_channels: tuple = (8, 16, 32)
    kernel: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 2 or any(c <= 0 for c in self.stage_channels):
            raise ValueError(f"need >= 2 positive stage widths, got {self.stage_channels}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")


def _teacher_default():
    return EncoderConfig(stage_channels=(16, 32, 64))


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    teacher: EncoderConfig = field(default_factory=_teacher_default)
    num_classes: int = 3

    def __post_init__(self):
        if len(self.encoder.stage_channels) != len(self.teacher.stage_channels):
            raise ValueError("teacher and student need the same number of stages")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class ModelBundle:
    cfg: ModelConfig
    teacher: ParamSet
    gen_encoder: ParamSet
    med_encoder: ParamSet
    adapter: ParamSet
    reg_decoder: ParamSet
    gen_seg_decoder: ParamSet
    med_seg_decoder: ParamSet
    prompt_encoder: ParamSet

    _attrs = dict(teacher="teacher", gen_enc="gen_encoder", med_enc="med_encoder",
                  adapter="adapter", reg_dec="reg_decoder", gen_seg="gen_seg_decoder",
                  med_seg="med_seg_decoder", prompt="prompt_encoder")

    def role(self, name: str) -> ParamSet:
        return getattr(self, self._attrs[name])

    def flat(self) -> dict[str, torch.Tensor]:
        return {f"{r}.{k}": v for r in ROLES for k, v in self.role(r).items()}


def signature(params: ParamSet) -> tuple:
    return tuple((k, tuple(v.shape)) for k, v in params.items())


# ---------------------------------------------------------------- shapes

def _conv_shape(cout, cin, k):
    return {"w": (cout, cin, k, k, k), "b": (cout,)}


def encoder_shapes(cfg: EncoderConfig) -> dict:
    shapes, cin, k = {}, cfg.in_channels, cfg.kernel
    for i, c in enumerate(cfg.stage_channels, 1):
        for part, ci in (("down", cin), ("conv", c)):
            for suffix, shp in _conv_shape(c, ci, k).items():
                shapes[f"s{i}.{part}.{suffix}"] = shp
        cin = c
    return shapes


def _decoder_shapes(chs, k, out_ch, mult, extra_full):
    # mult=2 for the registration decoder (atlas and target features concatenated)
    shapes = {}
    n = len(chs)
    layers = [(f"l{n}", mult * chs[-1], chs[-1])]
    for lvl in range(n - 1, 0, -1):
        layers.append((f"l{lvl}", chs[lvl] + mult * chs[lvl - 1], chs[lvl - 1]))
    layers.append(("l0", chs[0] + extra_full, chs[0]))
    layers.append(("head", chs[0], out_ch))
    for name, cin, cout in layers:
        for suffix, shp in _conv_shape(cout, cin, k).items():
            shapes[f"{name}.{suffix}"] = shp
    return shapes


def reg_decoder_shapes(cfg: EncoderConfig) -> dict:
    return _decoder_shapes(cfg.stage_channels, cfg.kernel, 3, 2, 2 * cfg.in_channels)


def seg_decoder_shapes(cfg: EncoderConfig, num_classes: int) -> dict:
    return _decoder_shapes(cfg.stage_channels, cfg.kernel, num_classes, 1, cfg.in_channels)


def prompt_encoder_shapes(cfg: EncoderConfig, num_classes: int) -> dict:
    shapes, cin = {}, num_classes
    for i, c in enumerate(cfg.stage_channels, 1):
        for suffix, shp in _conv_shape(c, cin, cfg.kernel).items():
            shapes[f"s{i}.{suffix}"] = shp
        cin = c
    return shapes


def adapter_shapes(student: EncoderConfig, teacher: EncoderConfig) -> dict:
    return _conv_shape(teacher.stage_channels[-1], student.stage_channels[-1], 1)


def bundle_shapes(cfg: ModelConfig) -> dict[str, dict]:
    enc = encoder_shapes(cfg.encoder)
    return {
        "teacher": encoder_shapes(cfg.teacher),
        "gen_enc": enc,
        "med_enc": dict(enc),
        "adapter": adapter_shapes(cfg.encoder, cfg.teacher),
        "reg_dec": reg_decoder_shapes(cfg.encoder),
        "gen_seg": seg_decoder_shapes(cfg.encoder, cfg.num_classes),
        "med_seg": seg_decoder_shapes(cfg.encoder, cfg.num_classes),
        "prompt": prompt_encoder_shapes(cfg.encoder, cfg.num_classes),
    }


# ---------------------------------------------------------------- init

def init_bound(fan_in: int) -> float:
    return float(np.sqrt(6.0 / fan_in))


def _init_tensor(seed: int, stream: str, shape: tuple) -> torch.Tensor:
    if len(shape) == 1:
        return torch.zeros(shape, dtype=torch.float32)
    fan_in = int(np.prod(shape[1:]))
    rng = np.random.default_rng([seed, zlib.crc32(stream.encode())])
    b = init_bound(fan_in)
    return torch.from_numpy(rng.uniform(-b, b, size=shape).astype(np.float32))


def init_bundle(cfg: ModelConfig, seed: int, teacher_path=None) -> ModelBundle:
    """Seeded initialization. Both student encoders draw from the same streams."""
    sets = {}
    for role, shapes in bundle_shapes(cfg).items():
        stream_role = "enc" if role in ("gen_enc", "med_enc") else role
        params = {}
        for name, shp in shapes.items():
            if role == "reg_dec" and name.startswith("head."):
                t = torch.zeros(shp, dtype=torch.float32)  # identity transform at init
            else:
                t = _init_tensor(seed, f"{stream_role}.{name}", shp)
            params[name] = t.requires_grad_(role != "teacher")
        sets[role] = params
    if teacher_path is not None:
        stored = read_tensors(teacher_path)
        for name in sets["teacher"]:
            key = f"teacher.{name}"
            if key not in stored:
                raise KeyError(f"{teacher_path}: missing tensor {key}")
            if tuple(stored[key].shape) != tuple(sets["teacher"][name].shape):
                raise ShapeError(f"{teacher_path}: {key} has shape {tuple(stored[key].shape)}")
            sets["teacher"][name] = stored[key]
    return ModelBundle(cfg, *(sets[r] for r in ROLES))


# ---------------------------------------------------------------- forward

def encode(params: ParamSet, x: torch.Tensor) -> list[torch.Tensor]:
    n_stages = sum(1 for k in params if k.endswith(".down.w"))
    if x.dim() != 5:
        raise ShapeError(f"encode expects [N,C,D,H,W], got {tuple(x.shape)}")
    if any(n % (2 ** n_stages) for n in x.shape[2:]):
        raise ShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by {2 ** n_stages}")
    feats, h = [], x
    for i in range(1, n_stages + 1):
        k = params[f"s{i}.down.w"].shape[-1]
        h = leaky_relu(conv3d(h, params[f"s{i}.down.w"], params[f"s{i}.down.b"], 2, k // 2))
        h = leaky_relu(conv3d(h, params[f"s{i}.conv.w"], params[f"s{i}.conv.b"], 1, k // 2))
        feats.append(h)
    return feats


def _layer(params, name, x, act=True, norm=False):
    w = params[f"{name}.w"]
    y = conv3d(x, w, params[f"{name}.b"], 1, w.shape[-1] // 2)
    if norm:
        y = instance_norm(y)
    return leaky_relu(y) if act else y


def _decode(params, bottom, skips, full=None):
    # coarse layers are instance-normalized; without it the soft-Dice objective
    # routinely collapses to all-background from random init
    n = len(skips) + 1
    h = _layer(params, f"l{n}", bottom, norm=True)
    for lvl in range(n - 1, 0, -1):
        h = _layer(params, f"l{lvl}", concat_channels([upsample_trilinear2x(h), skips[lvl - 1]]),
                   norm=True)
    h = upsample_trilinear2x(h)
    if full is not None:
        h = concat_channels([h, full])
    h = _layer(params, "l0", h)
    return _layer(params, "head", h, act=False)


def reg_forward(params: ParamSet, feats_atlas, feats_target, images: tuple) -> torch.Tensor:
    """Displacement field [N,3,D,H,W] taking the atlas onto the target.

    ``images`` = (atlas, target) raw volumes, joined at the full-resolution layer.
    """
    if len(feats_atlas) != len(feats_target):
        raise ShapeError("feature pyramids have different depths")
    pairs = [concat_channels([a, t]) for a, t in zip(feats_atlas, feats_target)]
    return _decode(params, pairs[-1], pairs[:-1], concat_channels(list(images)))


def seg_forward(params: ParamSet, feats, image: torch.Tensor,
                prompt: torch.Tensor | None = None) -> torch.Tensor:
    """Segmentation logits; a prompt embedding is added at the bottleneck."""
    bottom = feats[-1]
    if prompt is not None:
        if prompt.shape != bottom.shape:
            raise ShapeError(f"prompt {tuple(prompt.shape)} != bottleneck {tuple(bottom.shape)}")
        bottom = bottom + prompt
    return _decode(params, bottom, feats[:-1], image)


def prompt_encode(params: ParamSet, mask_probs: torch.Tensor) -> torch.Tensor:
    h = mask_probs.detach()
    n = sum(1 for k in params if k.endswith(".w"))
    if h.dim() != 5 or h.shape[1] != params["s1.w"].shape[1]:
        raise ShapeError(f"mask {tuple(h.shape)} does not fit the prompt encoder")
    for i in range(1, n + 1):
        w = params[f"s{i}.w"]
        h = conv3d(h, w, params[f"s{i}.b"], 2, w.shape[-1] // 2)
        if i < n:
            h = leaky_relu(h)
    return h


def student_bottleneck_adapted(bundle: ModelBundle, feats) -> torch.Tensor:
    a = bundle.adapter
    if feats[-1].shape[1] != a["w"].shape[1]:
        raise ShapeError(f"bottleneck has {feats[-1].shape[1]} channels, adapter expects {a['w'].shape[1]}")
    return conv3d(feats[-1], a["w"], a["b"])


@torch.no_grad()
def ema_update(target: ParamSet, source: ParamSet, alpha: float) -> ParamSet:
    """target <- alpha * target + (1 - alpha) * source, in place."""
    if signature(target) != signature(source):
        raise ShapeError("EMA between param sets with different signatures")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return target
    for k, t in target.items():
        if alpha == 0.0:
            t.copy_(source[k])
        else:
            t.mul_(alpha).add_(source[k], alpha=1.0 - alpha)
    return target


# ---------------------------------------------------------------- RRLC files

CKPT_MAGIC = b"RRLC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2: off + 2 + nlen].decode()
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            dims = struct.unpack_from(f"<{ndim}I", raw, off + 1)
            off += 1 + 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if off + 4 * n > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
            out[name] = torch.from_numpy(arr.astype(np.float32))
            off += 4 * n
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated file") from e
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def infer_model_config(tensors: dict) -> ModelConfig:
    """Recover the architecture from stored tensor shapes."""
    def enc(prefix):
        chans, i = [], 1
        while f"{prefix}.s{i}.down.w" in tensors:
            w = tensors[f"{prefix}.s{i}.down.w"]
            chans.append(int(w.shape[0]))
            i += 1
        if not chans:
            raise CheckpointError(f"no encoder tensors under {prefix!r}")
        first = tensors[f"{prefix}.s1.down.w"]
        return EncoderConfig(int(first.shape[1]), tuple(chans), int(first.shape[-1]))

    if "gen_seg.head.w" not in tensors:
        raise CheckpointError("no segmentation head in checkpoint")
    return ModelConfig(enc("gen_enc"), enc("teacher"), int(tensors["gen_seg.head.w"].shape[0]))
