"""Training objectives: segmentation loss, multi-scale auxiliary supervision,
and the two cross-modality consistency regularizers.

All losses are scalar Tensors built from tape primitives so one backward pass
covers the whole objective. Label maps are plain integer arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    add,
    cosine_similarity,
    div,
    exp,
    gather,
    log,
    mean,
    mul,
    reduce_sum,
    scale,
    softmax,
    sub,
)

DICE_SMOOTHING = 1e-5


class LabelError(ValueError):
    pass


@dataclass
class LossWeights:
    aux: float = 0.3           # weight on the auxiliary scale losses
    mcr: float = 1.0           # modality-level consistency
    icr: float = 1.0           # image-level consistency
    temperature: float = 4.0   # correlation softmax temperature

    def validate(self) -> "LossWeights":
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if min(self.aux, self.mcr, self.icr) < 0:
            raise ValueError("loss weights must be nonnegative")
        return self


@dataclass
class LossBreakdown:
    seg: dict = field(default_factory=dict)   # modality -> scalar Tensor
    aux: dict = field(default_factory=dict)
    mcr: Tensor | None = None
    icr: Tensor | None = None
    total: Tensor | None = None

    def scalars(self) -> dict:
        out = {}
        for m, t in self.seg.items():
            out[f"seg_{m}"] = t.item()
        for m, t in self.aux.items():
            out[f"aux_{m}"] = t.item()
        out["mcr"] = self.mcr.item() if self.mcr is not None else 0.0
        out["icr"] = self.icr.item() if self.icr is not None else 0.0
        out["total"] = self.total.item()
        return out


def _check_labels(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= class_count:
        raise LabelError(
            f"labels out of range [0, {class_count}): min {labels.min()}, max {labels.max()}")
    return labels


def log_softmax(x: Tensor, axis: int) -> Tensor:
    """Stable log-softmax; the max shift is treated as a constant."""
    shifted = sub(x, Tensor(x.data.max(axis=axis, keepdims=True)))
    return sub(shifted, log(reduce_sum(exp(shifted), axes=axis, keepdims=True)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy; logits [Z, H, W], labels [H, W] ints."""
    z = logits.shape[0]
    labels = _check_labels(labels, z)
    logp = log_softmax(logits, axis=0)
    picked = gather(logp, 0, labels[None, :, :])
    return scale(mean(picked), -1.0)


def soft_dice(logits: Tensor, labels: np.ndarray,
              smoothing: float = DICE_SMOOTHING) -> Tensor:
    """1 - soft Dice averaged over classes present in the labels."""
    z = logits.shape[0]
    labels = _check_labels(labels, z)
    probs = softmax(logits, axis=0)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, labels[None, :, :], 1.0, axis=0)
    onehot_t = Tensor(onehot)
    inter = reduce_sum(mul(probs, onehot_t), axes=(1, 2))
    psum = reduce_sum(probs, axes=(1, 2))
    tsum = Tensor(onehot.sum(axis=(1, 2)))
    smooth = Tensor(np.full(z, smoothing, dtype=logits.dtype))
    dice = div(add(scale(inter, 2.0), smooth), add(add(psum, tsum), smooth))
    present = np.zeros(z, dtype=logits.dtype)
    present[np.unique(labels)] = 1.0
    per_class = mul(sub(Tensor(np.ones(z, dtype=logits.dtype)), dice), Tensor(present))
    return scale(reduce_sum(per_class), 1.0 / present.sum())


def seg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel cross-entropy plus soft Dice."""
    return add(cross_entropy(logits, labels), soft_dice(logits, labels))


def downsample_labels(labels: np.ndarray, target_shape) -> np.ndarray:
    """Nearest-neighbour label reduction, center-anchored strides."""
    h, w = labels.shape
    th, tw = target_shape
    ky, kx = h // th, w // tw
    if ky * th != h or kx * tw != w:
        raise LabelError(f"label extents {labels.shape} not divisible down to {target_shape}")
    return labels[ky // 2::ky, kx // 2::kx]


def aux_loss(aux_logits, labels: np.ndarray) -> Tensor:
    """Sum of per-scale CE + Dice on nearest-downsampled labels."""
    total = None
    for logits in aux_logits:
        scaled = downsample_labels(labels, logits.shape[1:])
        term = seg_loss(logits, scaled)
        total = term if total is None else add(total, term)
    return total


def mcr_loss(q_a: Tensor, q_b: Tensor) -> Tensor:
    """Row-wise cosine misalignment between the two modality embeddings."""
    if q_a.shape != q_b.shape:
        raise ValueError(f"class embedding shapes differ: {q_a.shape} vs {q_b.shape}")
    cos = cosine_similarity(q_a, q_b)
    z = q_a.shape[0]
    return reduce_sum(sub(Tensor(np.ones(z, dtype=q_a.dtype)), cos))


def _symmetric_kl(e_a: Tensor, e_b: Tensor, temperature: float) -> Tensor:
    pa = softmax(scale(e_a, 1.0 / temperature), axis=1)
    pb = softmax(scale(e_b, 1.0 / temperature), axis=1)
    la = log_softmax(scale(e_a, 1.0 / temperature), axis=1)
    lb = log_softmax(scale(e_b, 1.0 / temperature), axis=1)
    kl_ab = reduce_sum(mul(pa, sub(la, lb)))
    kl_ba = reduce_sum(mul(pb, sub(lb, la)))
    return add(kl_ab, kl_ba)


def icr_loss(correlations_a, correlations_b, temperature: float = 4.0) -> Tensor:
    """Symmetric KL between per-class correlation rows, summed over scales.

    Each argument lists one [Z, Z] matrix per scale; the softmax runs along
    the class axis of every row. No temperature-squared rescaling is applied.
    """
    if len(correlations_a) != len(correlations_b):
        raise ValueError("correlation lists must cover the same scales")
    total = None
    for e_a, e_b in zip(correlations_a, correlations_b):
        term = _symmetric_kl(e_a, e_b, temperature)
        total = term if total is None else add(total, term)
    return total


def total_loss(seg: dict, aux: dict, weights: LossWeights,
               mcr: Tensor | None = None, icr: Tensor | None = None) -> LossBreakdown:
    """Weighted objective: sum(seg) + aux_w * sum(aux) + mcr_w * mcr + icr_w * icr."""
    weights.validate()
    total = None
    for m in seg:
        total = seg[m] if total is None else add(total, seg[m])
    aux_sum = None
    for m in aux:
        aux_sum = aux[m] if aux_sum is None else add(aux_sum, aux[m])
    if aux_sum is not None and weights.aux != 0.0:
        total = add(total, scale(aux_sum, weights.aux))
    if mcr is not None and weights.mcr != 0.0:
        total = add(total, scale(mcr, weights.mcr))
    if icr is not None and weights.icr != 0.0:
        total = add(total, scale(icr, weights.icr))
    return LossBreakdown(seg=dict(seg), aux=dict(aux), mcr=mcr, icr=icr, total=total)
