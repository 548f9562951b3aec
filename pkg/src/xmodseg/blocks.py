"""Attention building blocks.

Single- and multi-head cross-attention between class embeddings and flattened
feature maps, pre-norm transformer blocks with optional per-modality channel
calibration of the residual branches, and patch merge/expand resampling.
Spatial feature tensors are channel-last: [H, W, D] (token form [S, D]).
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    add,
    batched_matmul,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    permute,
    pointwise_linear,
    reshape,
    scale,
    softmax,
)


class ConfigError(ValueError):
    pass


def fan_in_uniform(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Scaled-uniform init, bound 1/sqrt(fan_in); fan_in = first extent."""
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base with recursive parameter discovery in attribute insertion order."""

    def named_params(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                for sub, t in value.named_params():
                    yield f"{name}.{sub}", t
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, t in item.named_params():
                            yield f"{name}.{i}.{sub}", t
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        for sub, t in item.named_params():
                            yield f"{name}.{key}.{sub}", t
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{key}", item

    def params(self):
        return [t for _, t in self.named_params()]


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float64, bias: bool = True):
        self.weight = Tensor(fan_in_uniform(rng, (d_in, d_out), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return pointwise_linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Mlp(Module):
    """Two-layer feed-forward with gelu, hidden width ratio*dim."""

    def __init__(self, dim: int, rng, dtype=np.float64, ratio: int = 4):
        self.fc1 = Linear(dim, ratio * dim, rng, dtype)
        self.fc2 = Linear(ratio * dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def cross_attention(q_src: Tensor, feats: Tensor, w_q: Tensor, w_k: Tensor,
                    w_v: Tensor) -> tuple[Tensor, Tensor]:
    """One attention head between class rows [Z, D] and tokens [S, D].

    Returns (attended values [Z, D'], scaled pre-softmax scores [Z, S]);
    attention normalises over the spatial axis.
    """
    if q_src.shape[1] != w_q.shape[0] or feats.shape[1] != w_k.shape[0]:
        raise ConfigError(
            f"cross_attention dims: q {q_src.shape}, f {feats.shape}, w_q {w_q.shape}")
    q = matmul(q_src, w_q)
    k = matmul(feats, w_k)
    v = matmul(feats, w_v)
    scores = scale(matmul(q, permute(k, (1, 0))), 1.0 / np.sqrt(w_q.shape[1]))
    out = matmul(softmax(scores, axis=1), v)
    return out, scores


class AttentionHead(Module):
    def __init__(self, dim: int, head_dim: int, rng, dtype=np.float64):
        self.w_q = Tensor(fan_in_uniform(rng, (dim, head_dim), dtype), requires_grad=True)
        self.w_k = Tensor(fan_in_uniform(rng, (dim, head_dim), dtype), requires_grad=True)
        self.w_v = Tensor(fan_in_uniform(rng, (dim, head_dim), dtype), requires_grad=True)


class MultiHeadCrossAttention(Module):
    """N independent heads, concatenated then projected back to dim.

    ``map_style`` picks what the per-head score maps [Z, N, S] hold: the
    scaled pre-softmax scores ("scaled", default) or the post-softmax
    attention weights ("softmax").
    """

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64,
                 map_style: str = "scaled"):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by head count {heads}")
        if map_style not in ("scaled", "softmax"):
            raise ConfigError(f"unknown map_style {map_style!r}")
        self.head_modules = [AttentionHead(dim, dim // heads, rng, dtype) for _ in range(heads)]
        self.w_o = Tensor(fan_in_uniform(rng, (dim, dim), dtype), requires_grad=True)
        self._map_style = map_style

    @property
    def head_count(self) -> int:
        return len(self.head_modules)

    def __call__(self, q_src: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
        outs, maps = [], []
        z = q_src.shape[0]
        for head in self.head_modules:
            out, scores = cross_attention(q_src, feats, head.w_q, head.w_k, head.w_v)
            outs.append(out)
            kept = softmax(scores, axis=1) if self._map_style == "softmax" else scores
            maps.append(reshape(kept, (z, 1, feats.shape[0])))
        merged = matmul(concat(outs, axis=1), self.w_o)
        return merged, concat(maps, axis=1)


class TransformerBlock(Module):
    """Pre-norm residual block: x + MSA branch, then x + FFN branch.

    With calibration enabled the two branch outputs are scaled channel-wise
    by gains derived from the modality's class embeddings (omega = w1 @ Q,
    gain_i = omega @ W_i); gains can also be supplied as folded constants.
    """

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64,
                 calibrated: bool = False, class_count: int | None = None,
                 embed_dim: int | None = None):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadCrossAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, rng, dtype)
        if calibrated:
            if class_count is None or embed_dim is None:
                raise ConfigError("calibrated block needs class_count and embed_dim")
            self.cal_w1 = Tensor(fan_in_uniform(rng, (class_count,), dtype), requires_grad=True)
            self.cal_w2 = Tensor(fan_in_uniform(rng, (embed_dim, dim), dtype), requires_grad=True)
            self.cal_w3 = Tensor(fan_in_uniform(rng, (embed_dim, dim), dtype), requires_grad=True)
        else:
            self.cal_w1 = None
            self.cal_w2 = None
            self.cal_w3 = None

    @property
    def calibrated(self) -> bool:
        return self.cal_w1 is not None

    def channel_gains(self, class_embed: Tensor) -> tuple[Tensor, Tensor]:
        """Per-channel branch gains for one modality: (msa gain, ffn gain)."""
        if not self.calibrated:
            raise ConfigError("channel calibration requested on an uncalibrated block")
        z = class_embed.shape[0]
        omega = matmul(reshape(self.cal_w1, (1, z)), class_embed)  # [1, embed_dim]
        gain1 = reshape(matmul(omega, self.cal_w2), (self.cal_w2.shape[1],))
        gain2 = reshape(matmul(omega, self.cal_w3), (self.cal_w3.shape[1],))
        return gain1, gain2

    def __call__(self, x: Tensor, class_embed: Tensor | None = None,
                 gains: tuple[Tensor, Tensor] | None = None) -> Tensor:
        if gains is None and class_embed is not None:
            gains = self.channel_gains(class_embed)
        normed = self.norm1(x)
        branch = self.attn(normed, normed)[0]
        if gains is not None:
            branch = mul(branch, gains[0])
        x = add(x, branch)
        branch = self.mlp(self.norm2(x))
        if gains is not None:
            branch = mul(branch, gains[1])
        return add(x, branch)


class PatchMerge(Module):
    """Halve spatial extents by grouping 2x2 neighborhoods, then project.

    Neighborhood channel order is (dy=0,dx=0), (0,1), (1,0), (1,1). Output
    channels default to 2*d_in.
    """

    def __init__(self, d_in: int, rng, dtype=np.float64, d_out: int | None = None):
        self.proj = Linear(4 * d_in, d_out if d_out is not None else 2 * d_in, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h, w, d = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"patch merge needs even extents, got {h}x{w}")
        grouped = reshape(x, (h // 2, 2, w // 2, 2, d))
        grouped = permute(grouped, (0, 2, 1, 3, 4))
        return self.proj(reshape(grouped, (h // 2, w // 2, 4 * d)))


class PatchExpand(Module):
    """Double spatial extents: project to 2*d_in, spread over 2x2 sub-blocks."""

    def __init__(self, d_in: int, rng, dtype=np.float64):
        if d_in % 2:
            raise ConfigError(f"patch expand needs even channel count, got {d_in}")
        self.proj = Linear(d_in, 2 * d_in, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h, w, d = x.shape
        expanded = self.proj(x)
        spread = reshape(expanded, (h, w, 2, 2, d // 2))
        spread = permute(spread, (0, 2, 1, 3, 4))
        return reshape(spread, (2 * h, 2 * w, d // 2))


def tokens_from_grid(x: Tensor) -> Tensor:
    """[H, W, D] -> [H*W, D]."""
    h, w, d = x.shape
    return reshape(x, (h * w, d))


def grid_from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """[H*W, D] -> [H, W, D]."""
    return reshape(x, (h, w, x.shape[1]))
