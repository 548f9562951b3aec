"""Evaluation metrics: per-class overlap (Dice, %) and average symmetric
surface distance, with per-modality mean/std aggregation.

Works on integer label maps. Boundaries use 4-connectivity; pixels on the
image border count as boundary. Undefined cases (both masks empty for Dice,
either empty for ASD) are flagged and excluded from aggregates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np


def round_half_up(value: float, decimals: int = 1) -> float:
    """Decimal-string rounding with ties away from zero (table formatting)."""
    quantum = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def _check_pair(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"label map extents differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice_coefficient(pred: np.ndarray, truth: np.ndarray, class_id: int):
    """Overlap percentage 200*|P&T|/(|P|+|T|); None when both masks are empty."""
    pred, truth = _check_pair(pred, truth)
    p = pred == class_id
    t = truth == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return None
    return 200.0 * int((p & t).sum()) / denom


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with a 4-neighbour outside the mask.

    Out-of-image neighbours count as outside, so border pixels are boundary.
    """
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def average_symmetric_surface_distance(pred: np.ndarray, truth: np.ndarray,
                                       class_id: int, spacing=(1.0, 1.0)):
    """Mean boundary-to-boundary distance, symmetric; None if a mask is empty."""
    pred, truth = _check_pair(pred, truth)
    p = pred == class_id
    t = truth == class_id
    if not p.any() or not t.any():
        return None
    bp = boundary_points(p).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    bt = boundary_points(t).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    d2 = ((bp[:, None, :] - bt[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(d2)
    total = dist.min(axis=1).sum() + dist.min(axis=0).sum()
    return float(total / (len(bp) + len(bt)))


@dataclass
class ClassStats:
    mean: float
    std: float
    defined: int
    undefined: int


@dataclass
class MetricReport:
    """Per-class and per-modality aggregates for Dice and ASD."""

    class_names: list
    modalities: list
    dice: dict = field(default_factory=dict)   # (modality, class) -> ClassStats
    asd: dict = field(default_factory=dict)
    dice_mean: dict = field(default_factory=dict)   # modality -> float
    asd_mean: dict = field(default_factory=dict)
    overall_dice: float = float("nan")
    overall_asd: float = float("nan")

    def to_text(self) -> str:
        lines = []
        for title, per_class, per_mod, overall in (
                ("Dice (%)", self.dice, self.dice_mean, self.overall_dice),
                ("ASD", self.asd, self.asd_mean, self.overall_asd)):
            lines.append(title)
            header = ["class"] + list(self.modalities)
            lines.append("  " + " | ".join(f"{h:>16}" for h in header))
            for ci, cname in enumerate(self.class_names):
                row = [cname]
                for m in self.modalities:
                    st = per_class[(m, ci)]
                    if st.defined:
                        row.append(f"{round_half_up(st.mean):.1f}+-{round_half_up(st.std):.1f}")
                    else:
                        row.append("undefined")
                lines.append("  " + " | ".join(f"{v:>16}" for v in row))
            mean_row = ["mean"] + [f"{round_half_up(per_mod[m]):.1f}" for m in self.modalities]
            lines.append("  " + " | ".join(f"{v:>16}" for v in mean_row))
            lines.append(f"  overall mean: {round_half_up(overall):.1f}")
            lines.append("")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "modality", "class", "mean", "std",
                             "defined", "undefined"])
            for name, table in (("dice", self.dice), ("asd", self.asd)):
                for (m, ci), st in table.items():
                    writer.writerow([name, m, self.class_names[ci],
                                     f"{st.mean:.6f}", f"{st.std:.6f}",
                                     st.defined, st.undefined])
            for m in self.modalities:
                writer.writerow(["dice_mean", m, "", f"{self.dice_mean[m]:.6f}", "", "", ""])
                writer.writerow(["asd_mean", m, "", f"{self.asd_mean[m]:.6f}", "", "", ""])
            writer.writerow(["dice_overall", "", "", f"{self.overall_dice:.6f}", "", "", ""])
            writer.writerow(["asd_overall", "", "", f"{self.overall_asd:.6f}", "", "", ""])


def _aggregate(values) -> ClassStats:
    defined = [v for v in values if v is not None]
    undefined = len(values) - len(defined)
    if not defined:
        return ClassStats(float("nan"), float("nan"), 0, undefined)
    arr = np.asarray(defined, dtype=np.float64)
    return ClassStats(float(arr.mean()), float(arr.std()), len(defined), undefined)


def report(samples, class_count: int, spacing=(1.0, 1.0), class_names=None,
           include_background: bool = False) -> MetricReport:
    """Aggregate (pred, truth, modality) triples.

    Per-class stats are mean/std over samples where the metric is defined.
    Modality means average the per-class means (background excluded unless
    requested); the overall mean averages the modality means.
    """
    if not samples:
        raise ValueError("report needs at least one sample")
    if class_names is None:
        class_names = [f"class{i}" for i in range(class_count)]
    modalities = []
    for _, _, m in samples:
        if m not in modalities:
            modalities.append(m)
    rep = MetricReport(class_names=list(class_names), modalities=modalities)
    mean_classes = range(class_count) if include_background else range(1, class_count)
    for m in modalities:
        subset = [(p, t) for p, t, sm in samples if sm == m]
        for ci in range(class_count):
            rep.dice[(m, ci)] = _aggregate([dice_coefficient(p, t, ci) for p, t in subset])
            rep.asd[(m, ci)] = _aggregate(
                [average_symmetric_surface_distance(p, t, ci, spacing) for p, t in subset])
        dice_means = [rep.dice[(m, ci)].mean for ci in mean_classes if rep.dice[(m, ci)].defined]
        asd_means = [rep.asd[(m, ci)].mean for ci in mean_classes if rep.asd[(m, ci)].defined]
        rep.dice_mean[m] = float(np.mean(dice_means)) if dice_means else float("nan")
        rep.asd_mean[m] = float(np.mean(asd_means)) if asd_means else float("nan")
    rep.overall_dice = float(np.mean([rep.dice_mean[m] for m in modalities]))
    rep.overall_asd = float(np.mean([rep.asd_mean[m] for m in modalities]))
    return rep
