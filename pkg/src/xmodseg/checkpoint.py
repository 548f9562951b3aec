"""Checkpoint container and EAM stripping.

A checkpoint file is a JSON manifest (config echo, ordered tensor names,
optimizer/sampler state) followed by the named tensors in the shared binary
format. ``strip_eam`` rewrites a trained checkpoint into a smaller pure
inference model: all external-attention parameters (class embeddings
included) are dropped, and for the calibrated variant the per-block channel
gains are folded into per-modality constants first so predictions stay
bit-identical.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .backbone import BackboneConfig
from .model import SegmentationSystem, categorize
from .tensor import Tensor
from .tensorio import FormatError, read_array, write_array

MAGIC = b"XMCK"
VERSION = 1


def save_checkpoint(path, manifest: dict, arrays: dict) -> None:
    manifest = dict(manifest)
    manifest["tensor_names"] = list(arrays.keys())
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in manifest["tensor_names"]:
            write_array(fh, arrays[name])


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        arrays = {name: read_array(fh) for name in manifest["tensor_names"]}
    return manifest, arrays


def backbone_config_from_dict(d: dict) -> BackboneConfig:
    d = dict(d)
    for key in ("encoder_depths", "decoder_depths", "modalities"):
        d[key] = tuple(d[key])
    return BackboneConfig(**d)


def rebuild_system(manifest: dict, arrays: dict) -> SegmentationSystem:
    config = backbone_config_from_dict(manifest["backbone_config"])
    system = SegmentationSystem(config, np.random.default_rng(0))
    system.load_state({n: a for n, a in arrays.items() if not n.startswith("opt.")})
    return system


@dataclass
class StripResult:
    out_path: str
    full_params: int
    stripped_params: int
    removed_eam: int
    removed_calibration: int
    added_folded: int

    @property
    def removed_total(self) -> int:
        return self.removed_eam + self.removed_calibration


def strip_eam(checkpoint_path, out_path) -> StripResult:
    """Rewrite a trained checkpoint as an EAM-free inference model."""
    manifest, arrays = load_checkpoint(checkpoint_path)
    if manifest.get("kind") != "train":
        raise ValueError(f"{checkpoint_path} is not a training checkpoint")
    system = rebuild_system(manifest, arrays)
    config = system.config

    kept = {}
    removed_eam = removed_cal = 0
    for name, t in system.named_params():
        cat = categorize(name)
        if cat == "eam":
            removed_eam += t.data.size
        elif cat == "calibration":
            removed_cal += t.data.size
        else:
            kept[name] = t.data
    folded = {}
    if config.variant == "v3":
        for modality in config.modalities:
            q = system.class_embed(modality)
            for path, block in system.backbone.calibrated_blocks():
                gain1, gain2 = block.channel_gains(q)
                folded[f"folded.{modality}.{path}.phi1"] = gain1.data
                folded[f"folded.{modality}.{path}.phi2"] = gain2.data

    out_arrays = dict(kept)
    out_arrays.update(folded)
    out_manifest = {
        "kind": "inference",
        "backbone_config": manifest["backbone_config"],
        "source_step": manifest.get("step"),
    }
    save_checkpoint(out_path, out_manifest, out_arrays)
    if os.path.getsize(out_path) >= os.path.getsize(checkpoint_path):
        raise RuntimeError("stripped model is not smaller than the checkpoint")
    full = sum(t.data.size for _, t in system.named_params())
    return StripResult(
        out_path=str(out_path),
        full_params=full,
        stripped_params=sum(a.size for a in out_arrays.values()),
        removed_eam=removed_eam,
        removed_calibration=removed_cal,
        added_folded=sum(a.size for a in folded.values()),
    )


class InferenceModel:
    """Backbone-only predictor reconstructed from either checkpoint kind."""

    def __init__(self, config: BackboneConfig, backbone_arrays: dict, folded: dict):
        from .backbone import Backbone

        build_cfg = replace(config, variant="v2") if config.variant == "v3" else config
        self.config = config
        self.backbone = Backbone(build_cfg, np.random.default_rng(0))
        own = dict(self.backbone.named_params())
        expected = {f"backbone.{n}" for n in own}
        if expected != set(backbone_arrays):
            missing = sorted(expected - set(backbone_arrays))[:3]
            raise ValueError(f"inference model state mismatch, e.g. missing {missing}")
        for name, t in own.items():
            t.assign(backbone_arrays[f"backbone.{name}"].astype(t.dtype))
        self._gains = {}
        for name, arr in folded.items():
            _, modality, rest = name.split(".", 2)
            path, which = rest.rsplit(".", 1)
            self._gains.setdefault((modality, path), {})[which] = Tensor(arr)

    @classmethod
    def load(cls, path) -> "InferenceModel":
        manifest, arrays = load_checkpoint(path)
        if manifest.get("kind") != "inference":
            raise ValueError(f"{path} is not an inference model file")
        config = backbone_config_from_dict(manifest["backbone_config"])
        backbone_arrays = {n: a for n, a in arrays.items() if n.startswith("backbone.")}
        folded = {n: a for n, a in arrays.items() if n.startswith("folded.")}
        return cls(config, backbone_arrays, folded)

    def _gain_lookup(self, modality: str):
        if self.config.variant != "v3":
            return None

        def lookup(path):
            entry = self._gains.get((modality, path))
            return (entry["phi1"], entry["phi2"]) if entry else None

        return lookup

    def logits(self, x: Tensor, modality: str) -> Tensor:
        return self.backbone.segment(x, modality, gain_lookup=self._gain_lookup(modality))

    def predict(self, x: Tensor, modality: str) -> np.ndarray:
        return np.argmax(self.logits(x, modality).data, axis=0).astype(np.int64)
