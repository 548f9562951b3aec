"""U-shaped encoder/decoder over patch tokens.

Per-modality image embedding, patch embedding with learned positions, four
encoder stages with patch merging, a mirrored decoder with patch expansion and
skip fusion, and a full-resolution segmentation head. The decoder exposes the
four per-stage feature taps consumed by the external attention cascade.

Stage widths follow [2C, 2C, 4C, 8C] at token grids H/P, H/2P, H/4P, H/8P.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .blocks import (
    ConfigError,
    Linear,
    Module,
    PatchExpand,
    PatchMerge,
    TransformerBlock,
    grid_from_tokens,
    tokens_from_grid,
)
from .tensor import Tensor, add, concat, permute, reshape  # noqa: F401

VARIANTS = ("v1", "v2", "v3")


@dataclass
class BackboneConfig:
    base_channels: int = 4                      # C
    patch_size: int = 4                         # P
    height: int = 64
    width: int = 64
    class_count: int = 4                        # Z
    heads: int = 4                              # N
    encoder_depths: tuple = (2, 2, 2, 2)
    decoder_depths: tuple = (2, 2, 2, 2)
    variant: str = "v2"
    modalities: tuple = ("m1", "m2")
    shared_head: bool = True
    dtype: str = "float64"
    attention_map_style: str = "scaled"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def embed_dim(self) -> int:
        """Class-embedding width (4C)."""
        return 4 * self.base_channels

    def stage_widths(self) -> tuple:
        c = self.base_channels
        return (2 * c, 2 * c, 4 * c, 8 * c)

    def stage_grids(self) -> tuple:
        hp, wp = self.height // self.patch_size, self.width // self.patch_size
        return tuple((hp >> i, wp >> i) for i in range(4))

    def validate(self) -> "BackboneConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        p8 = 8 * self.patch_size
        if self.height % p8 or self.width % p8:
            raise ConfigError(
                f"extents {self.height}x{self.width} must be divisible by 8*patch_size={p8}")
        if self.base_channels % 2:
            raise ConfigError("base channel count must be even (head upsampling halves it)")
        for width in self.stage_widths():
            if width % self.heads:
                raise ConfigError(f"stage width {width} not divisible by {self.heads} heads")
        if len(self.encoder_depths) != 4 or len(self.decoder_depths) != 4:
            raise ConfigError("encoder/decoder depths must list four stages")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        return self

    def with_variant(self, variant: str) -> "BackboneConfig":
        return replace(self, variant=variant).validate()


@dataclass
class MultiScaleFeatures:
    """Decoder taps, channel-last grids; extents asserted against the config."""

    stage1: Tensor  # [H/P,  W/P,  2C]
    stage2: Tensor  # [H/2P, W/2P, 2C]
    stage3: Tensor  # [H/4P, W/4P, 4C]
    stage4: Tensor  # [H/8P, W/8P, 8C]

    def validate(self, config: BackboneConfig) -> "MultiScaleFeatures":
        widths = config.stage_widths()
        grids = config.stage_grids()
        for i, tap in enumerate((self.stage1, self.stage2, self.stage3, self.stage4)):
            expected = (*grids[i], widths[i])
            if tap.shape != expected:
                raise AssertionError(f"stage{i + 1} tap shape {tap.shape} != {expected}")
        return self


class ImageEmbed(Module):
    """Two consecutive pointwise layers on the 3 input channels."""

    def __init__(self, rng, dtype):
        self.fc1 = Linear(3, 3, rng, dtype)
        self.fc2 = Linear(3, 3, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] != 3:
            raise ConfigError(f"image must be [3, H, W], got {x.shape}")
        y = permute(x, (1, 2, 0))
        y = self.fc2(self.fc1(y))
        return permute(y, (2, 0, 1))


def _make_block(config: BackboneConfig, dim: int, rng, calibrated: bool) -> TransformerBlock:
    return TransformerBlock(
        dim, config.heads, rng, config.np_dtype,
        calibrated=calibrated,
        class_count=config.class_count if calibrated else None,
        embed_dim=config.embed_dim if calibrated else None,
    )


class EncoderStage(Module):
    def __init__(self, config, dim, depth, rng, calibrated, merge_to=None):
        self.blocks = [_make_block(config, dim, rng, calibrated) for _ in range(depth)]
        self.merge = None if merge_to is None else PatchMerge(dim, rng, config.np_dtype, d_out=merge_to)


class Encoder(Module):
    """Patch embedding plus four block stages with merging between them."""

    def __init__(self, config: BackboneConfig, rng, calibrated: bool):
        p = config.patch_size
        widths = config.stage_widths()
        grids = config.stage_grids()
        self.patch_proj = Linear(3 * p * p, widths[0], rng, config.np_dtype)
        self.pos = Tensor(
            np.zeros((grids[0][0] * grids[0][1], widths[0]), dtype=config.np_dtype),
            requires_grad=True)
        self.stages = [
            EncoderStage(config, widths[0], config.encoder_depths[0], rng, calibrated, merge_to=widths[1]),
            EncoderStage(config, widths[1], config.encoder_depths[1], rng, calibrated, merge_to=widths[2]),
            EncoderStage(config, widths[2], config.encoder_depths[2], rng, calibrated, merge_to=widths[3]),
            EncoderStage(config, widths[3], config.encoder_depths[3], rng, calibrated),
        ]
        self._patch = p

    def patch_embed(self, x: Tensor) -> Tensor:
        """[3, H, W] -> token grid [H/P, W/P, 2C] with positions added."""
        _, h, w = x.shape
        p = self._patch
        hp, wp = h // p, w // p
        patches = reshape(permute(x, (1, 2, 0)), (hp, p, wp, p, 3))
        patches = reshape(permute(patches, (0, 2, 1, 3, 4)), (hp, wp, 3 * p * p))
        tokens = self.patch_proj(patches)
        tokens = add(tokens_from_grid(tokens), self.pos)
        return grid_from_tokens(tokens, hp, wp)

    def __call__(self, x: Tensor, class_embed=None, gain_lookup=None):
        """Returns the four per-stage outputs (channel-last grids)."""
        grid = self.patch_embed(x)
        outputs = []
        for si, stage in enumerate(self.stages):
            h, w, _ = grid.shape
            tokens = tokens_from_grid(grid)
            for bi, block in enumerate(stage.blocks):
                gains = None if gain_lookup is None else gain_lookup(f"enc.s{si}.b{bi}")
                tokens = block(tokens, class_embed=None if gains else class_embed, gains=gains)
            grid = grid_from_tokens(tokens, h, w)
            outputs.append(grid)
            if stage.merge is not None:
                grid = stage.merge(grid)
        return outputs


class DecoderStage(Module):
    def __init__(self, config, dim, depth, rng, calibrated, expand_from=None, fuse_from=None):
        self.expand = None if expand_from is None else PatchExpand(expand_from, rng, config.np_dtype)
        self.fuse = None if fuse_from is None else Linear(fuse_from, dim, rng, config.np_dtype)
        self.blocks = [_make_block(config, dim, rng, calibrated) for _ in range(depth)]


class Decoder(Module):
    """Mirror path from the bottleneck back to stage 1, exposing all taps."""

    def __init__(self, config: BackboneConfig, rng, calibrated: bool):
        widths = config.stage_widths()
        depths = config.decoder_depths
        self.stage4 = DecoderStage(config, widths[3], depths[3], rng, calibrated)
        self.stage3 = DecoderStage(config, widths[2], depths[2], rng, calibrated,
                                   expand_from=widths[3], fuse_from=widths[3] // 2 + widths[2])
        self.stage2 = DecoderStage(config, widths[1], depths[1], rng, calibrated,
                                   expand_from=widths[2], fuse_from=widths[2] // 2 + widths[1])
        self.stage1 = DecoderStage(config, widths[0], depths[0], rng, calibrated,
                                   expand_from=widths[1], fuse_from=widths[1] // 2 + widths[0])

    def _run_stage(self, stage, si, grid, skip, class_embed, gain_lookup):
        if stage.expand is not None:
            grid = stage.expand(grid)
            grid = stage.fuse(concat([grid, skip], axis=2))
        h, w, _ = grid.shape
        tokens = tokens_from_grid(grid)
        for bi, block in enumerate(stage.blocks):
            gains = None if gain_lookup is None else gain_lookup(f"dec.s{si}.b{bi}")
            tokens = block(tokens, class_embed=None if gains else class_embed, gains=gains)
        return grid_from_tokens(tokens, h, w)

    def __call__(self, encoded, class_embed=None, gain_lookup=None) -> MultiScaleFeatures:
        s1, s2, s3, s4 = encoded
        d4 = self._run_stage(self.stage4, 4, s4, None, class_embed, gain_lookup)
        d3 = self._run_stage(self.stage3, 3, d4, s3, class_embed, gain_lookup)
        d2 = self._run_stage(self.stage2, 2, d3, s2, class_embed, gain_lookup)
        d1 = self._run_stage(self.stage1, 1, d2, s1, class_embed, gain_lookup)
        return MultiScaleFeatures(stage1=d1, stage2=d2, stage3=d3, stage4=d4)


class SegHead(Module):
    """Two patch expansions back to full resolution, then project to classes."""

    def __init__(self, config: BackboneConfig, rng):
        c = config.base_channels
        self.up1 = PatchExpand(2 * c, rng, config.np_dtype)
        self.up2 = PatchExpand(c, rng, config.np_dtype)
        self.out = Linear(c // 2, config.class_count, rng, config.np_dtype)

    def __call__(self, stage1: Tensor) -> Tensor:
        full = self.out(self.up2(self.up1(stage1)))
        return permute(full, (2, 0, 1))  # [Z, H, W]


class Backbone(Module):
    """Complete segmentation trunk for all registered modalities.

    V1 keeps one encoder per modality; V2/V3 share encoder and decoder. V3
    blocks calibrate their residual branches from the modality's class
    embeddings, passed per call.
    """

    def __init__(self, config: BackboneConfig, rng):
        config.validate()
        self.config = config
        dtype = config.np_dtype
        calibrated = config.variant == "v3"
        self.embed = {m: ImageEmbed(rng, dtype) for m in config.modalities}
        if config.variant == "v1":
            self.enc = {m: Encoder(config, rng, calibrated=False) for m in config.modalities}
        else:
            self.enc = {"shared": Encoder(config, rng, calibrated=calibrated)}
        self.dec = Decoder(config, rng, calibrated=calibrated)
        if config.shared_head:
            self.head = {"shared": SegHead(config, rng)}
        else:
            self.head = {m: SegHead(config, rng) for m in config.modalities}

    def _check_modality(self, modality: str):
        if modality not in self.config.modalities:
            raise ConfigError(
                f"unknown modality {modality!r}; registered: {self.config.modalities}")

    def encoder_for(self, modality: str) -> Encoder:
        return self.enc[modality] if self.config.variant == "v1" else self.enc["shared"]

    def head_for(self, modality: str) -> SegHead:
        return self.head.get("shared") or self.head[modality]

    def encode(self, x: Tensor, modality: str, class_embed=None, gain_lookup=None):
        self._check_modality(modality)
        embedded = self.embed[modality](x)
        return self.encoder_for(modality)(embedded, class_embed=class_embed,
                                          gain_lookup=gain_lookup)

    def decode(self, encoded, modality: str, class_embed=None,
               gain_lookup=None) -> MultiScaleFeatures:
        self._check_modality(modality)
        taps = self.dec(encoded, class_embed=class_embed, gain_lookup=gain_lookup)
        return taps.validate(self.config)

    def features(self, x: Tensor, modality: str, class_embed=None,
                 gain_lookup=None) -> MultiScaleFeatures:
        encoded = self.encode(x, modality, class_embed, gain_lookup)
        return self.decode(encoded, modality, class_embed, gain_lookup)

    def segment(self, x: Tensor, modality: str, class_embed=None, gain_lookup=None) -> Tensor:
        """Pixel logits [Z, H, W] for one image."""
        taps = self.features(x, modality, class_embed, gain_lookup)
        return self.head_for(modality)(taps.stage1)

    def calibrated_blocks(self):
        """(path, block) pairs for every calibrated block, in forward order."""
        if self.config.variant != "v3":
            return []
        pairs = []
        enc = self.enc["shared"]
        for si, stage in enumerate(enc.stages):
            for bi, block in enumerate(stage.blocks):
                pairs.append((f"enc.s{si}.b{bi}", block))
        for si, stage in ((4, self.dec.stage4), (3, self.dec.stage3),
                          (2, self.dec.stage2), (1, self.dec.stage1)):
            for bi, block in enumerate(stage.blocks):
                pairs.append((f"dec.s{si}.b{bi}", block))
        return pairs
