"""Multi-run experiments: the variant ablation grid, the temperature sweep,
and the few-shot scarce-modality comparison. Each run trains from scratch on
an existing dataset and reports test-split Dice."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

from .backbone import BackboneConfig
from .losses import LossWeights
from .train import TrainConfig, evaluate, train

log = logging.getLogger("xmodseg")

# settings sized for the desk-scale benchmark: enough steps to separate the
# variants, small enough to keep the whole grid under the runtime budget
BENCH_STEPS = 600
BENCH_BATCH = 2
BENCH_CHANNELS = 8
BENCH_LR = 3e-3


@dataclass
class RunScore:
    variant: str
    seed: int
    dice_by_modality: dict
    overall: float


def bench_backbone(base_channels: int = BENCH_CHANNELS) -> BackboneConfig:
    return BackboneConfig(base_channels=base_channels, dtype="float32")


def run_one(data_dir, out_dir, variant: str, seed: int, steps: int,
            batch_size: int, backbone: BackboneConfig,
            weights: LossWeights | None = None,
            few_shot: dict | None = None,
            baseline_modality: str = "m1",
            lr: float | None = None) -> RunScore:
    config = TrainConfig(
        data_dir=data_dir,
        out_dir=out_dir,
        variant=variant,
        steps=steps,
        batch_size=batch_size,
        seed=seed,
        lr=lr if lr is not None else BENCH_LR,
        weights=weights if weights is not None else LossWeights(),
        backbone=backbone,
        few_shot=few_shot,
        baseline_modality=baseline_modality,
    )
    result = train(config)
    report = evaluate(result.checkpoint_path, data_dir, split="test")
    log.info("run %s seed %d: dice %s", variant, seed,
             {m: round(v, 2) for m, v in report.dice_mean.items()})
    return RunScore(variant=variant, seed=seed,
                    dice_by_modality=dict(report.dice_mean),
                    overall=report.overall_dice)


def run_ablation(data_dir, out_dir, variants, seeds, steps: int = BENCH_STEPS,
                 batch_size: int = BENCH_BATCH,
                 backbone: BackboneConfig | None = None,
                 weights: LossWeights | None = None) -> list:
    """Train every (variant, seed) pair and score it on the test split."""
    backbone = backbone if backbone is not None else bench_backbone()
    scores = []
    for variant in variants:
        for seed in seeds:
            run_dir = os.path.join(out_dir, f"{variant}_seed{seed}")
            scores.append(run_one(data_dir, run_dir, variant, seed, steps,
                                  batch_size, backbone, weights))
    return scores


def mean_dice(scores, variant: str, modality: str | None = None) -> float:
    vals = []
    for s in scores:
        if s.variant != variant:
            continue
        vals.append(s.overall if modality is None else s.dice_by_modality[modality])
    return sum(vals) / len(vals)


def ablation_table(scores, modalities) -> str:
    variants = []
    for s in scores:
        if s.variant not in variants:
            variants.append(s.variant)
    lines = ["variant".ljust(26) + "".join(f"{m:>10}" for m in modalities) + f"{'overall':>10}"]
    for v in variants:
        row = v.ljust(26)
        for m in modalities:
            row += f"{mean_dice(scores, v, m):>10.2f}"
        row += f"{mean_dice(scores, v):>10.2f}"
        lines.append(row)
    return "\n".join(lines)


def run_tau_sweep(data_dir, out_dir, taus, seed: int = 0, steps: int = BENCH_STEPS,
                  batch_size: int = BENCH_BATCH,
                  backbone: BackboneConfig | None = None) -> list:
    """Image-level consistency only (mcr weight zero) at several temperatures."""
    backbone = backbone if backbone is not None else bench_backbone()
    rows = []
    for tau in taus:
        weights = LossWeights(mcr=0.0, icr=1.0, temperature=float(tau))
        score = run_one(data_dir, os.path.join(out_dir, f"tau{tau}"),
                        "joint-v3-cr", seed, steps, batch_size, backbone, weights)
        rows.append((float(tau), score.overall, dict(score.dice_by_modality)))
    return rows


def run_few_shot(data_dir, out_dir, scarce_modality: str, scarce_count: int,
                 seeds, steps: int = BENCH_STEPS, batch_size: int = BENCH_BATCH,
                 backbone: BackboneConfig | None = None) -> list:
    """Joint training with a scarce modality vs a baseline trained on it alone.

    Returns (seed, joint dice, baseline dice) rows for the scarce modality.
    """
    backbone = backbone if backbone is not None else bench_backbone()
    rows = []
    for seed in seeds:
        joint = run_one(
            data_dir, os.path.join(out_dir, f"joint_seed{seed}"),
            "joint-v3-cr", seed, steps, batch_size, backbone,
            few_shot={scarce_modality: scarce_count})
        baseline = run_one(
            data_dir, os.path.join(out_dir, f"baseline_seed{seed}"),
            "baseline-single-modality", seed, steps, batch_size, backbone,
            few_shot={scarce_modality: scarce_count},
            baseline_modality=scarce_modality)
        rows.append((seed,
                     joint.dice_by_modality[scarce_modality],
                     baseline.dice_by_modality[scarce_modality]))
    return rows
