"""Training orchestration: variants, the unpaired two-modality loop,
checkpointing, and evaluation."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbone import BackboneConfig
from .blocks import ConfigError
from .checkpoint import (
    InferenceModel,
    backbone_config_from_dict,
    load_checkpoint,
    rebuild_system,
    save_checkpoint,
)
from .eam import dump_correlations
from .losses import LossBreakdown, LossWeights, aux_loss, icr_loss, mcr_loss, seg_loss, total_loss
from .metrics import MetricReport, report
from .model import SegmentationSystem
from .optim import Adam
from .synthdata import load_manifest, load_sample
from .tensor import Tape, Tensor, backward, scale

log = logging.getLogger("xmodseg")

# variant -> (backbone variant, consistency terms on, single modality)
VARIANTS = {
    "baseline-single-modality": ("v2", False, True),
    "joint-v1": ("v1", False, False),
    "joint-v2": ("v2", False, False),
    "joint-v3": ("v3", False, False),
    "v1-cr": ("v1", True, False),
    "v2-cr": ("v2", True, False),
    "joint-v3-cr": ("v3", True, False),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    variant: str = "joint-v3-cr"
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    baseline_modality: str = "m1"
    few_shot: dict | None = None        # modality -> training sample count
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; options: {sorted(VARIANTS)}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        self.weights.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    d["backbone"] = backbone_config_from_dict(d["backbone"])
    return TrainConfig(**d)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps_run: int
    final: dict
    few_shot_selection: dict


class UnpairedData:
    """Dataset wrapper over the generator's manifest; caches loaded samples."""

    def __init__(self, data_dir):
        info = load_manifest(data_dir)
        self.dir = data_dir
        self.class_count = int(info["header"]["classes"])
        extents = info["header"]["extents"].split()
        self.height, self.width = int(extents[0]), int(extents[1])
        self.modalities = []
        self._records = {}
        for rec in info["records"]:
            m = rec["modality"]
            if m not in self.modalities:
                self.modalities.append(m)
            self._records.setdefault((m, rec["split"]), []).append(rec)
        self._cache = {}

    def records_for(self, modality: str, split: str) -> list:
        return self._records.get((modality, split), [])

    def load(self, record):
        key = record["sample"]
        if key not in self._cache:
            self._cache[key] = load_sample(self.dir, record)
        return self._cache[key]


def resolve_backbone_config(config: TrainConfig, data: UnpairedData) -> BackboneConfig:
    bb_variant, _, _ = VARIANTS[config.variant]
    return replace(
        config.backbone,
        variant=bb_variant,
        height=data.height,
        width=data.width,
        class_count=data.class_count,
        modalities=tuple(data.modalities),
    ).validate()


def _mean_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return scale(total, 1.0 / len(terms))


def _select_few_shot(records: list, count: int, seed: int) -> list:
    if count > len(records):
        raise ConfigError(f"few-shot count {count} exceeds {len(records)} training samples")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(records), size=count, replace=False).tolist())
    return [records[i] for i in chosen]


def train(config: TrainConfig, resume_from: str | None = None) -> TrainResult:
    config.validate()
    data = UnpairedData(config.data_dir)
    bb_config = resolve_backbone_config(config, data)
    _, use_cr, single = VARIANTS[config.variant]
    active = (config.baseline_modality,) if single else tuple(data.modalities)
    for m in active:
        if m not in data.modalities:
            raise ConfigError(f"modality {m!r} not present in dataset {config.data_dir}")

    system = SegmentationSystem(bb_config, np.random.default_rng(config.seed))
    optimizer = Adam(system.named_params(), lr=config.lr, beta1=config.beta1,
                     beta2=config.beta2, eps=config.adam_eps)
    sampler = np.random.default_rng(config.seed + 1)

    train_records = {m: data.records_for(m, "train") for m in active}
    few_shot_selection = {}
    if config.few_shot:
        for m, count in config.few_shot.items():
            if m in train_records:
                train_records[m] = _select_few_shot(train_records[m], count,
                                                    config.seed + 13)
                assert len(train_records[m]) == count
                few_shot_selection[m] = [r["sample"] for r in train_records[m]]
    for m in active:
        if not train_records[m]:
            raise TrainingError(f"no training samples for modality {m!r}")

    start_step = 0
    if resume_from is not None:
        manifest, arrays = load_checkpoint(resume_from)
        system.load_state({n: a for n, a in arrays.items() if not n.startswith("opt.")})
        optimizer.load_state_arrays(arrays, manifest["step"])
        sampler.bit_generator.state = manifest["sampler_state"]
        start_step = manifest["step"]

    os.makedirs(config.out_dir, exist_ok=True)
    log_path = os.path.join(config.out_dir, "training_log.csv")
    checkpoint_path = os.path.join(config.out_dir, "checkpoint.bin")
    columns = (["step"] + [f"seg_{m}" for m in data.modalities]
               + [f"aux_{m}" for m in data.modalities] + ["mcr", "icr", "total"])

    mode = "a" if resume_from is not None else "w"
    final_scalars = {}
    with open(log_path, mode, newline="") as log_fh:
        writer = csv.writer(log_fh)
        if mode == "w":
            writer.writerow(columns)
        for step in range(start_step, start_step + config.steps):
            batches = {
                m: [train_records[m][i] for i in
                    sampler.integers(0, len(train_records[m]), size=config.batch_size)]
                for m in active
            }
            with Tape():
                seg_terms, aux_terms, correlations = {}, {}, {}
                for m in active:
                    segs, auxs, corrs = [], [], []
                    for rec in batches[m]:
                        sample = data.load(rec)
                        x = Tensor(sample.image, dtype=bb_config.np_dtype)
                        logits, eam_out = system.forward_modality(x, m)
                        segs.append(seg_loss(logits, sample.label))
                        auxs.append(aux_loss(eam_out.aux_logits, sample.label))
                        corrs.append(eam_out.correlations)
                    seg_terms[m] = _mean_terms(segs)
                    aux_terms[m] = _mean_terms(auxs)
                    correlations[m] = corrs
                mcr = icr = None
                if use_cr and len(active) == 2:
                    m_a, m_b = active
                    mcr = mcr_loss(system.class_embed(m_a), system.class_embed(m_b))
                    icr = _mean_terms([
                        icr_loss(correlations[m_a][i], correlations[m_b][i],
                                 config.weights.temperature)
                        for i in range(config.batch_size)
                    ])
                breakdown = total_loss(seg_terms, aux_terms, config.weights,
                                       mcr=mcr, icr=icr)
                scalars = breakdown.scalars()
                if not np.isfinite(scalars["total"]):
                    raise TrainingError(
                        f"non-finite loss at step {step}: {scalars}")
                grads = backward(breakdown.total)
            optimizer.step(grads)
            row = [step] + [f"{scalars.get(f'seg_{m}', 0.0):.6f}" for m in data.modalities] \
                + [f"{scalars.get(f'aux_{m}', 0.0):.6f}" for m in data.modalities] \
                + [f"{scalars['mcr']:.6f}", f"{scalars['icr']:.6f}", f"{scalars['total']:.6f}"]
            writer.writerow(row)
            final_scalars = scalars
            if step % 50 == 0:
                log.info("step %d: total %.4f", step, scalars["total"])

    config_echo = config.to_dict()
    config_echo["out_dir"] = ""  # checkpoint bytes must not depend on where they land
    manifest = {
        "kind": "train",
        "train_config": config_echo,
        "backbone_config": asdict(bb_config),
        "step": start_step + config.steps,
        "sampler_state": sampler.bit_generator.state,
        "census": system.census(),
        "few_shot_selection": few_shot_selection,
    }
    arrays = system.state()
    arrays.update(optimizer.state_arrays())
    save_checkpoint(checkpoint_path, manifest, arrays)
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        steps_run=config.steps,
        final=final_scalars,
        few_shot_selection=few_shot_selection,
    )


def _load_predictor(model_path):
    manifest, arrays = load_checkpoint(model_path)
    if manifest.get("kind") == "inference":
        model = InferenceModel.load(model_path)
        return model, manifest, None
    system = rebuild_system(manifest, arrays)
    return system, manifest, system


def evaluate(model_path, data_dir, split: str = "test", out_csv=None,
             out_text=None, correlations_dir=None) -> MetricReport:
    """Run the segmentation path over one split and aggregate metrics."""
    predictor, manifest, system = _load_predictor(model_path)
    config = backbone_config_from_dict(manifest["backbone_config"])
    data = UnpairedData(data_dir)
    if (data.height, data.width) != (config.height, config.width) \
            or data.class_count != config.class_count:
        raise ConfigError(
            f"model was trained for {config.class_count} classes at "
            f"{config.height}x{config.width}; dataset has {data.class_count} at "
            f"{data.height}x{data.width}")
    samples = []
    for m in data.modalities:
        for rec in data.records_for(m, split):
            sample = data.load(rec)
            x = Tensor(sample.image, dtype=config.np_dtype)
            if isinstance(predictor, InferenceModel):
                pred = predictor.predict(x, m)
            else:
                pred = np.argmax(predictor.segment(x, m).data, axis=0).astype(np.int64)
            samples.append((pred, sample.label, m))
            if correlations_dir is not None and system is not None:
                os.makedirs(correlations_dir, exist_ok=True)
                taps = system.backbone.features(
                    x, m, class_embed=system._calibration_embed(m))
                outs = system.eam[m](taps)
                stem = os.path.basename(rec["sample"]).replace(".bin", "")
                dump_correlations(
                    os.path.join(correlations_dir, f"{m}_{stem}_correlations.csv"),
                    outs.correlations,
                    [f"class{i}" for i in range(config.class_count)])
    rep = report(samples, data.class_count)
    if out_csv:
        rep.to_csv(out_csv)
    if out_text:
        with open(out_text, "w") as fh:
            fh.write(rep.to_text())
    return rep
