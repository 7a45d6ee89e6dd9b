"""End-to-end one-shot runs on synthetic data, including the ablation table."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import nets
from .metrics import EvalReport, dice_hard, evaluate
from .synth import SyntheticCase, SyntheticSpec, deform_sample, generate_phantom
from .train import TrainConfig, finetune_stage2, pretrain_stage1
from .volume import AtlasPair

# case_seed offsets keep the three splits disjoint
PRE_OFFSET, FIN_OFFSET, TEST_OFFSET = 10_000, 20_000, 30_000

# ablation variants: name -> (ema mode, prompt)
ABLATIONS = {
    "baseline": ("none", False),
    "s2t+prompt": ("s2t", True),
    "t2s+prompt": ("t2s", True),
    "dual": ("mutual", False),
    "dual+prompt": ("mutual", True),
}


@dataclass
class Dataset:
    atlas: AtlasPair
    pre: list
    fin: list
    test: list


def make_dataset(spec: SyntheticSpec, n_pre: int, n_fin: int, n_test: int) -> Dataset:
    atlas = generate_phantom(spec)
    return Dataset(
        atlas,
        [deform_sample(atlas, spec, PRE_OFFSET + i) for i in range(n_pre)],
        [deform_sample(atlas, spec, FIN_OFFSET + i) for i in range(n_fin)],
        [deform_sample(atlas, spec, TEST_OFFSET + i) for i in range(n_test)],
    )


def identity_dice(data: Dataset) -> float:
    """R-Dice of the identity transform, the untrained baseline."""
    return float(np.mean([dice_hard(data.atlas.labels, c.hidden_gt)[1] for c in data.test]))


@dataclass
class RunResult:
    bundle: nets.ModelBundle
    pre_log: object
    ft_log: object
    report: EvalReport


def run_pipeline(data: Dataset, model_cfg: nets.ModelConfig, pre_cfg: TrainConfig,
                 ft_cfg: TrainConfig, pretrained: nets.ModelBundle | None = None,
                 pre_log=None) -> RunResult:
    if pretrained is None:
        bundle, _, pre_log = pretrain_stage1(pre_cfg, model_cfg, data.atlas,
                                             [c.image for c in data.pre])
    else:
        bundle = copy.deepcopy(pretrained)
    bundle, _, ft_log = finetune_stage2(ft_cfg, data.atlas, [c.image for c in data.fin], bundle)
    report = evaluate(bundle, data.test, data.atlas, use_prompt=ft_cfg.prompt)
    return RunResult(bundle, pre_log, ft_log, report)


def run_ablation(spec: SyntheticSpec, model_cfg: nets.ModelConfig, pre_cfg: TrainConfig,
                 ft_cfg: TrainConfig, seeds, counts=(8, 16, 8), variants=None) -> list[dict]:
    """Every variant shares one stage-1 model per seed; rows are per (variant, seed)."""
    rows = []
    for seed in seeds:
        data = make_dataset(replace(spec, seed=seed), *counts)
        base = identity_dice(data)
        pre_bundle, _, pre_log = pretrain_stage1(replace(pre_cfg, seed=seed), model_cfg,
                                                 data.atlas, [c.image for c in data.pre])
        for name in variants or ABLATIONS:
            ema, prompt = ABLATIONS[name]
            res = run_pipeline(data, model_cfg, pre_cfg,
                               replace(ft_cfg, ema=ema, prompt=prompt, seed=seed),
                               pretrained=pre_bundle, pre_log=pre_log)
            rows.append(dict(variant=name, seed=seed, s_dice=res.report.s_dice[0],
                             r_dice=res.report.r_dice[0], ncc=res.report.ncc[0],
                             identity_dice=base))
    return rows


def summarize_ablation(rows: list[dict]) -> list[dict]:
    out = []
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        entry = dict(variant=name, n=len(sel))
        for key in ("s_dice", "r_dice", "ncc"):
            vals = np.array([r[key] for r in sel])
            entry[f"{key}_mean"] = float(vals.mean())
            entry[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(entry)
    return out


def write_ablation_csv(path, rows: list[dict]) -> list[dict]:
    summary = summarize_ablation(rows)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "s_dice", "r_dice", "ncc"])
        for r in rows:
            w.writerow([r["variant"], r["seed"], f"{r['s_dice']:.6f}", f"{r['r_dice']:.6f}",
                        f"{r['ncc']:.6f}"])
        for s in summary:
            w.writerow([s["variant"], "mean", f"{s['s_dice_mean']:.6f}",
                        f"{s['r_dice_mean']:.6f}", f"{s['ncc_mean']:.6f}"])
    return summary
