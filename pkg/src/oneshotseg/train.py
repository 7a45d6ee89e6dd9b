"""Two-phase training: distillation + joint registration/segmentation
pretraining, then mutual-EMA fine-tuning with auto-prompting."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from . import nets
from .diffops import NumericalError, ShapeError, channel_softmax, check_finite
from .losses import LossWeights, NccConfig, loss_rec, loss_reg, loss_seg
from .nets import ModelBundle, ModelConfig
from .volume import AtlasPair, Volume
from .warp import grid_sample_trilinear, warp_labels

log = logging.getLogger(__name__)

EMA_MODES = ("mutual", "s2t", "t2s", "none")
LOG_FIELDS = ("step", "l_rec", "l_smooth", "l_sim", "l_dice_reg", "l_seg_m", "l_seg_g", "wall_ms")

# optimizer groups: which roles each Adam instance updates
GROUPS = {
    "pre_gen": ("gen_enc", "adapter"),
    "pre_med": ("med_enc", "reg_dec", "med_seg"),
    "ft_med": ("med_enc", "reg_dec", "med_seg", "prompt"),
    "ft_gen": ("gen_enc", "gen_seg"),
}


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 1
    alpha: float = 0.99
    weights: LossWeights = field(default_factory=LossWeights)
    ncc: NccConfig = field(default_factory=NccConfig)
    smooth_reduction: str = "mean"
    ema: str = "mutual"
    prompt: bool = True
    seed: int = 0
    log_interval: int = 50

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.ncc, dict):
            self.ncc = NccConfig(**self.ncc)
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch != 1:
            raise ValueError("only batch=1 is supported")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ema not in EMA_MODES:
            raise ValueError(f"ema must be one of {EMA_MODES}, got {self.ema!r}")
        if self.smooth_reduction not in ("mean", "sum"):
            raise ValueError("smooth_reduction must be mean or sum")
        if self.log_interval < 1:
            raise ValueError("log_interval must be >= 1")


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = torch.zeros_like(p)
            state.v[k] = torch.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


def group_params(bundle: ModelBundle, group: str) -> dict:
    return {f"{r}.{k}": t for r in GROUPS[group] for k, t in bundle.role(r).items()}


def _optimize(loss: torch.Tensor, bundle: ModelBundle, group: str, state: AdamState,
              cfg: TrainConfig) -> None:
    params = group_params(bundle, group)
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    grads = {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)}
    adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ---------------------------------------------------------------- run log

@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def add(self, step: int, wall_ms: float, **values) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("run log steps must increase")
        rec = dict.fromkeys(LOG_FIELDS)
        rec.update(values, step=step, wall_ms=wall_ms)
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def l_med(self, weights: LossWeights) -> list[float]:
        return [weights.smooth * r["l_smooth"] + weights.sim * r["l_sim"]
                + weights.dice * r["l_dice_reg"] + r["l_seg_m"] for r in self.records]

    def write_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        write_header = not (append and path.exists())
        with path.open("a" if append else "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if write_header:
                w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow(["" if r[f] is None else (f"{r[f]:.9g}" if isinstance(r[f], float) else r[f])
                            for f in LOG_FIELDS])


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, bundle: ModelBundle, opt_states: dict | None = None) -> None:
    tensors = bundle.flat()
    for group, st in (opt_states or {}).items():
        if st.t == 0:
            continue
        tensors[f"opt.{group}.t"] = torch.tensor(float(st.t))
        for k in st.m:
            tensors[f"opt.{group}.m.{k}"] = st.m[k]
            tensors[f"opt.{group}.v.{k}"] = st.v[k]
    nets.write_tensors(path, tensors)


def load_checkpoint(path, cfg: ModelConfig) -> tuple[ModelBundle, dict]:
    stored = nets.read_tensors(path)
    sets = {}
    for role, shapes in nets.bundle_shapes(cfg).items():
        params = {}
        for name, shp in shapes.items():
            key = f"{role}.{name}"
            if key not in stored:
                raise nets.CheckpointError(f"{path}: missing tensor {key}")
            t = stored.pop(key)
            if tuple(t.shape) != tuple(shp):
                raise ShapeError(f"{path}: signature mismatch for {key}: "
                                 f"{tuple(t.shape)} vs expected {tuple(shp)}")
            params[name] = t.requires_grad_(role != "teacher")
        sets[role] = params
    bundle = ModelBundle(cfg, *(sets[r] for r in nets.ROLES))

    opt_states = {}
    for group in GROUPS:
        tkey = f"opt.{group}.t"
        if tkey not in stored:
            continue
        st = AdamState(t=int(stored.pop(tkey).item()))
        for name in group_params(bundle, group):
            for which in ("m", "v"):
                key = f"opt.{group}.{which}.{name}"
                if key not in stored:
                    raise nets.CheckpointError(f"{path}: missing tensor {key}")
                getattr(st, which)[name] = stored.pop(key)
        opt_states[group] = st
    if stored:
        raise nets.CheckpointError(f"{path}: unexpected tensors {sorted(stored)[:5]}")
    return bundle, opt_states


# ---------------------------------------------------------------- steps

def as_tensor(v: Volume) -> torch.Tensor:
    return torch.from_numpy(v.data.copy()).view(1, 1, *v.dims)


def _check_dims(atlas: AtlasPair, volumes: Sequence[Volume]) -> None:
    if not volumes:
        raise ValueError("no training volumes")
    for v in volumes:
        if v.dims != atlas.image.dims:
            raise ShapeError(f"volume dims {v.dims} differ from atlas {atlas.image.dims}")


def medical_forward(bundle: ModelBundle, atlas: AtlasPair, xa: torch.Tensor, xu: torch.Tensor,
                    prompt: torch.Tensor | None = None):
    """Shared-encoder registration + segmentation; returns (field, seg_probs, warped_img, warped_soft)."""
    fa = nets.encode(bundle.med_encoder, xa)
    fu = nets.encode(bundle.med_encoder, xu)
    phi = nets.reg_forward(bundle.reg_decoder, fa, fu, (xa, xu))
    seg = channel_softmax(nets.seg_forward(bundle.med_seg_decoder, fu, xu, prompt))
    warped_img = grid_sample_trilinear(xa, phi)
    warped_soft = warp_labels(atlas.labels, phi, "soft")
    return phi, seg, warped_img, warped_soft


def general_probs(bundle: ModelBundle, xu: torch.Tensor) -> torch.Tensor:
    feats = nets.encode(bundle.gen_encoder, xu)
    return channel_softmax(nets.seg_forward(bundle.gen_seg_decoder, feats, xu))


def _medical_loss(bundle, atlas, xa, xu, cfg, prompt, parts):
    phi, seg, warped_img, warped_soft = medical_forward(bundle, atlas, xa, xu, prompt)
    l_reg = loss_reg(warped_img, xu, phi, warped_soft, seg, cfg.weights, cfg.ncc,
                     cfg.smooth_reduction, parts)
    l_seg = loss_seg(seg, warped_soft)
    parts["l_seg_m"] = l_seg.item()
    return l_reg + l_seg


def _progress(stage, step, steps, cfg, rec):
    if (step + 1) % cfg.log_interval == 0 or step + 1 == steps:
        shown = ", ".join(f"{k}={v:.4f}" for k, v in rec.items() if isinstance(v, float))
        log.info("%s step %d/%d: %s", stage, step + 1, steps, shown)


def pretrain_stage1(cfg: TrainConfig, model_cfg: ModelConfig, atlas: AtlasPair,
                    volumes: Sequence[Volume], bundle: ModelBundle | None = None,
                    opt_states: dict | None = None) -> tuple[ModelBundle, dict, RunLog]:
    """Distil the teacher into the general encoder while the medical branch learns JRS.

    Passing ``bundle`` and ``opt_states`` from a stage-1 checkpoint resumes the
    run at ``opt_states['pre_gen'].t``.
    """
    _check_dims(atlas, volumes)
    bundle = bundle or nets.init_bundle(model_cfg, cfg.seed)
    opt_states = dict(opt_states or {})
    gen_state = opt_states.setdefault("pre_gen", AdamState())
    med_state = opt_states.setdefault("pre_med", AdamState())
    if gen_state.t != med_state.t:
        raise ValueError("inconsistent optimizer step counters")
    xa = as_tensor(atlas.image)
    runlog = RunLog()
    for step in range(gen_state.t, cfg.steps):
        t0 = time.perf_counter()
        x = as_tensor(volumes[step % len(volumes)])

        feats = nets.encode(bundle.gen_encoder, x)
        with torch.no_grad():
            target = nets.encode(bundle.teacher, x)[-1]
        l_rec = check_finite(loss_rec(nets.student_bottleneck_adapted(bundle, feats), target),
                             "l_rec", step)
        _optimize(l_rec, bundle, "pre_gen", gen_state, cfg)

        parts = {}
        l_med = check_finite(_medical_loss(bundle, atlas, xa, x, cfg, None, parts), "l_med", step)
        _optimize(l_med, bundle, "pre_med", med_state, cfg)

        runlog.add(step, (time.perf_counter() - t0) * 1e3, l_rec=l_rec.item(), **parts)
        _progress("pretrain", step, cfg.steps, cfg, runlog.records[-1])
    return bundle, opt_states, runlog


def finetune_stage2(cfg: TrainConfig, atlas: AtlasPair, volumes: Sequence[Volume],
                    bundle: ModelBundle, opt_states: dict | None = None
                    ) -> tuple[ModelBundle, dict, RunLog]:
    """Mutual-EMA fine-tuning. Per iteration: medical step, EMA G<-M, general
    step, EMA M<-G; ``cfg.ema`` and ``cfg.prompt`` switch the ablation variants."""
    _check_dims(atlas, volumes)
    if nets.signature(bundle.gen_encoder) != nets.signature(bundle.med_encoder):
        raise ShapeError("general and medical encoders have different signatures")
    opt_states = dict(opt_states or {})
    med_state = opt_states.setdefault("ft_med", AdamState())
    gen_state = opt_states.setdefault("ft_gen", AdamState())
    if gen_state.t != med_state.t:
        raise ValueError("inconsistent optimizer step counters")
    xa = as_tensor(atlas.image)
    runlog = RunLog()
    for step in range(med_state.t, cfg.steps):
        t0 = time.perf_counter()
        xu = as_tensor(volumes[step % len(volumes)])

        prompt = None
        if cfg.prompt:
            with torch.no_grad():
                coarse = general_probs(bundle, xu)
            prompt = nets.prompt_encode(bundle.prompt_encoder, coarse)

        parts = {}
        l_med = check_finite(_medical_loss(bundle, atlas, xa, xu, cfg, prompt, parts), "l_med", step)
        _optimize(l_med, bundle, "ft_med", med_state, cfg)

        if cfg.ema in ("mutual", "s2t"):
            nets.ema_update(bundle.gen_encoder, bundle.med_encoder, cfg.alpha)

        with torch.no_grad():
            fa = nets.encode(bundle.med_encoder, xa)
            fu = nets.encode(bundle.med_encoder, xu)
            pseudo = warp_labels(atlas.labels, nets.reg_forward(bundle.reg_decoder, fa, fu, (xa, xu)), "soft")
        l_gen = check_finite(loss_seg(general_probs(bundle, xu), pseudo), "l_gen", step)
        _optimize(l_gen, bundle, "ft_gen", gen_state, cfg)

        if cfg.ema in ("mutual", "t2s"):
            nets.ema_update(bundle.med_encoder, bundle.gen_encoder, cfg.alpha)

        runlog.add(step, (time.perf_counter() - t0) * 1e3, l_seg_g=l_gen.item(), **parts)
        _progress("finetune", step, cfg.steps, cfg, runlog.records[-1])
    return bundle, opt_states, runlog
