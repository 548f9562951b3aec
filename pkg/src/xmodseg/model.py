"""Full training-time system: segmentation backbone plus one external
attention cascade per modality, with name-based parameter bookkeeping."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, BackboneConfig
from .blocks import Module
from .eam import EamCascade
from .tensor import Tensor

CATEGORIES = ("modality_embedding", "shared_trunk", "modality_encoder",
              "eam", "calibration")


def categorize(name: str) -> str:
    """Assign one parameter name to exactly one census category."""
    if name.startswith("eam."):
        return "eam"
    if ".cal_w" in name:
        return "calibration"
    if name.startswith("backbone.embed."):
        return "modality_embedding"
    if name.startswith("backbone.enc.") and not name.startswith("backbone.enc.shared."):
        return "modality_encoder"
    return "shared_trunk"


class SegmentationSystem(Module):
    """Backbone plus per-modality EAM branches (each owning its class embeddings)."""

    def __init__(self, config: BackboneConfig, rng):
        self.backbone = Backbone(config, rng)
        # both modalities start from the same embedding values and drift apart
        # through their own gradients
        bound = 1.0 / np.sqrt(config.embed_dim)
        q0 = rng.uniform(-bound, bound, size=(config.class_count, config.embed_dim))
        self.eam = {m: EamCascade(config, rng, class_embed_init=q0.copy())
                    for m in config.modalities}
        if config.variant == "v3":
            self._init_identity_calibration(q0)

    def _init_identity_calibration(self, q0: np.ndarray) -> None:
        """Start every block's channel gains at one, so the calibrated model
        is the shared model at initialization and learns per-modality
        deviations from there."""
        for _, block in self.backbone.calibrated_blocks():
            omega = block.cal_w1.data @ q0
            pseudo = omega / (omega @ omega)
            dim = block.cal_w2.shape[1]
            gain_one = np.tile(pseudo[:, None], (1, dim))
            block.cal_w2.assign(gain_one)
            block.cal_w3.assign(gain_one)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def class_embed(self, modality: str) -> Tensor:
        return self.eam[modality].class_embed

    def _calibration_embed(self, modality: str):
        return self.class_embed(modality) if self.config.variant == "v3" else None

    def forward_modality(self, x: Tensor, modality: str):
        """(pixel logits [Z, H, W], EamOutputs) for one training image."""
        q = self._calibration_embed(modality)
        taps = self.backbone.features(x, modality, class_embed=q)
        logits = self.backbone.head_for(modality)(taps.stage1)
        return logits, self.eam[modality](taps)

    def segment(self, x: Tensor, modality: str) -> Tensor:
        """Inference-path logits; never touches the EAM branches."""
        q = self._calibration_embed(modality)
        return self.backbone.segment(x, modality, class_embed=q)

    def state(self) -> dict:
        return {name: t.data for name, t in self.named_params()}

    def load_state(self, arrays: dict) -> None:
        own = dict(self.named_params())
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))[:3]
            extra = sorted(set(arrays) - set(own))[:3]
            raise ValueError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, t in own.items():
            t.assign(arrays[name].astype(t.dtype))

    def census(self) -> dict:
        counts = {c: 0 for c in CATEGORIES}
        for name, t in self.named_params():
            counts[categorize(name)] += t.data.size
        return counts
