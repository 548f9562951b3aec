"""External attention cascade: class-embedding refinement and inter-class
correlation extraction at three decoder scales.

Each scale cross-attends the incoming class embeddings against one decoder
tap, keeps the per-head score maps, and distills a ZxZ correlation matrix by
filtering the maps with class-specific kernels, softmax-gating across classes
at every position, and normalised aggregation. The whole branch is separate
from the backbone parameters and is dropped for inference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, MultiScaleFeatures
from .blocks import (
    ConfigError,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    MultiHeadCrossAttention,
    tokens_from_grid,
)
from .tensor import (
    Tensor,
    add,
    batched_matmul,
    div,
    matmul,
    mul,
    permute,
    reduce_sum,
    reshape,
    softmax,
)

# guards the aggregation denominator when a class draws almost no gate mass
CORRELATION_EPS = 1e-8


def semantic_filtering(class_embed: Tensor, maps: Tensor, kernels: Tensor) -> Tensor:
    """Similarity maps S[i, j] between class-i kernels and class-j score maps.

    class_embed: [Z, D]; maps: [Z, N, H, W]; kernels: [Z, D, N].
    Returns [Z, Z, H, W]: K_i = Q_i @ W_i filtered (1x1) over the j-th group.
    """
    z, d = class_embed.shape
    zj, n, h, w = maps.shape
    if kernels.shape != (z, d, n):
        raise ConfigError(f"kernels shape {kernels.shape} != {(z, d, n)}")
    k = reshape(batched_matmul(reshape(class_embed, (z, 1, d)), kernels), (z, n))
    flat = reshape(permute(maps, (1, 0, 2, 3)), (n, zj * h * w))
    return reshape(matmul(k, flat), (z, zj, h, w))


def semantic_reweighting(maps: Tensor, similarity: Tensor) -> Tensor:
    """Gate all score maps by the class-softmax of one class's similarity maps.

    maps: [Z, N, H, W]; similarity (one row of S): [Z, H, W].
    The gate normalises over the class axis at every spatial position and is
    broadcast over heads.
    """
    z, h, w = similarity.shape
    gate = softmax(similarity, axis=0)
    return mul(maps, reshape(gate, (z, 1, h, w)))


def semantic_aggregation(reweighted: Tensor, similarity: Tensor,
                         eps: float = CORRELATION_EPS) -> Tensor:
    """Normalised summation of gated maps into one correlation row [Z]."""
    gate = softmax(similarity, axis=0)
    numerator = reduce_sum(reweighted, axes=(1, 2, 3))
    denominator = add(reduce_sum(gate, axes=(1, 2)), Tensor(np.full(1, eps)))
    return div(numerator, denominator)


def semantic_correlations(class_embed: Tensor, maps: Tensor, kernels: Tensor,
                          eps: float = CORRELATION_EPS) -> Tensor:
    """Vectorised filtering -> re-weighting -> aggregation; returns E [Z, Z]."""
    z, n, h, w = maps.shape
    sim = reshape(semantic_filtering(class_embed, maps, kernels), (z, z, h * w))
    gate = softmax(sim, axis=1)
    head_sums = reshape(reduce_sum(maps, axes=1), (1, z, h * w))
    numerator = reduce_sum(mul(gate, head_sums), axes=2)
    denominator = add(reduce_sum(gate, axes=2), Tensor(np.full((1, 1), eps)))
    return div(numerator, denominator)


class EamStage(Module):
    """One scale of the cascade at embedding width ``dim``."""

    def __init__(self, dim: int, heads: int, class_count: int, rng,
                 dtype=np.float64, map_style: str = "scaled",
                 reduce_to: int | None = None):
        bound = 1.0 / np.sqrt(dim)
        self.norm_q = LayerNorm(dim, dtype)
        self.norm_f = LayerNorm(dim, dtype)
        self.mca = MultiHeadCrossAttention(dim, heads, rng, dtype, map_style=map_style)
        self.norm_mlp = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, rng, dtype)
        self.kernels = Tensor(
            rng.uniform(-bound, bound, size=(class_count, dim, heads)).astype(dtype),
            requires_grad=True)
        self.aux = Linear(class_count * heads, class_count, rng, dtype)
        self.reduce = None if reduce_to is None else Linear(dim, reduce_to, rng, dtype)

    def update(self, q_in: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Residual cross-attention + MLP refinement of the class embeddings.

        q_in: [Z, D]; feats: channel-last grid [H, W, D].
        Returns (refined embeddings [Z, D], score maps [Z, N, H, W]).
        """
        h, w, d = feats.shape
        if q_in.shape[1] != d:
            raise ConfigError(f"class embeddings width {q_in.shape[1]} != tap width {d}")
        tokens = tokens_from_grid(feats)
        attended, maps = self.mca(self.norm_q(q_in), self.norm_f(tokens))
        q_hat = add(attended, q_in)
        q_out = add(self.mlp(self.norm_mlp(q_hat)), q_hat)
        z = q_in.shape[0]
        return q_out, reshape(maps, (z, self.mca.head_count, h, w))

    def aux_logits(self, maps: Tensor) -> Tensor:
        """Collapse the class/head map axes to per-pixel class logits [Z, H, W]."""
        z, n, h, w = maps.shape
        stacked = reshape(permute(maps, (2, 3, 0, 1)), (h, w, z * n))
        return permute(self.aux(stacked), (2, 0, 1))


@dataclass
class EamOutputs:
    semantic_maps: list      # A per scale: [Z, N, H', W']
    correlations: list       # E per scale: [Z, Z]
    aux_logits: list         # [Z, H', W'] per scale
    refined_q1: Tensor       # [Z, 2C]
    refined_q2: Tensor       # [Z, 2C]


class EamCascade(Module):
    """Per-modality branch: learnable class embeddings plus three stages.

    Scale 1 reads the stage-3 tap at width 4C with the modality embeddings;
    its refined output is reduced to 2C and walks down scales 2 and 3 over
    the stage-2 and stage-1 taps.
    """

    def __init__(self, config: BackboneConfig, rng, class_embed_init=None):
        c = config.base_channels
        z = config.class_count
        dtype = config.np_dtype
        style = config.attention_map_style
        bound = 1.0 / np.sqrt(4 * c)
        if class_embed_init is None:
            class_embed_init = rng.uniform(-bound, bound, size=(z, 4 * c))
        self.class_embed = Tensor(class_embed_init.astype(dtype), requires_grad=True)
        self.scale1 = EamStage(4 * c, config.heads, z, rng, dtype, style, reduce_to=2 * c)
        self.scale2 = EamStage(2 * c, config.heads, z, rng, dtype, style)
        self.scale3 = EamStage(2 * c, config.heads, z, rng, dtype, style)

    def __call__(self, taps: MultiScaleFeatures) -> EamOutputs:
        if taps is None:
            raise ConfigError("EAM cascade needs decoder feature taps")
        q = self.class_embed
        refined, a1 = self.scale1.update(q, taps.stage3)
        e1 = semantic_correlations(q, a1, self.scale1.kernels)
        q1 = self.scale1.reduce(refined)

        q2, a2 = self.scale2.update(q1, taps.stage2)
        e2 = semantic_correlations(q1, a2, self.scale2.kernels)

        _, a3 = self.scale3.update(q2, taps.stage1)
        e3 = semantic_correlations(q2, a3, self.scale3.kernels)

        return EamOutputs(
            semantic_maps=[a1, a2, a3],
            correlations=[e1, e2, e3],
            aux_logits=[self.scale1.aux_logits(a1),
                        self.scale2.aux_logits(a2),
                        self.scale3.aux_logits(a3)],
            refined_q1=q1,
            refined_q2=q2,
        )


def dump_correlations(path, correlations, class_names) -> None:
    """Write the per-scale correlation matrices of one image as CSV rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "class"] + list(class_names))
        for scale, matrix in enumerate(correlations, start=1):
            data = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
            for i, row in enumerate(data):
                writer.writerow([scale, class_names[i]] + [f"{v:.10g}" for v in row])
