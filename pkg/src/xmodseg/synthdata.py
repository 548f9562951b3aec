"""Procedural unpaired bimodal segmentation data.

One scene generator lays out anatomy-like class geometry (ellipse, rounded
rectangle, annulus) with a fixed adjacency constraint so inter-class structure
is real; two appearance profiles render the same label semantics with very
different intensity statistics. Scene seeds are disjoint across modalities, so
no image is shared.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorio


class GenerationError(RuntimeError):
    pass


@dataclass
class ShapeSpec:
    family: str                  # ellipse | rounded_rect | annulus
    size_range: tuple            # (min, max) primary radius, pixels
    anchor: tuple                # nominal center in unit coordinates
    jitter: float = 0.08         # center jitter, fraction of extent


@dataclass
class SceneSpec:
    class_count: int = 4
    height: int = 64
    width: int = 64
    shapes: dict = field(default_factory=dict)      # class id -> ShapeSpec
    adjacency: tuple = ((2, 1),)                     # (class a touches class b)
    min_class_fraction: float = 0.01
    min_presence_rate: float = 0.9
    max_retries: int = 80

    def __post_init__(self):
        if not self.shapes:
            self.shapes = default_shapes(self.class_count, self.height, self.width)
        self.adjacency = tuple(
            (a, b) for a, b in self.adjacency
            if a < self.class_count and b < self.class_count)


def default_shapes(class_count: int, height: int, width: int) -> dict:
    """Ellipse / rounded-rect / annulus cycle, anchored around the image."""
    families = ("ellipse", "rounded_rect", "annulus")
    anchors = ((0.34, 0.32), (0.42, 0.62), (0.70, 0.45), (0.28, 0.72), (0.72, 0.75))
    base = min(height, width)
    shapes = {}
    for cid in range(1, class_count):
        shapes[cid] = ShapeSpec(
            family=families[(cid - 1) % len(families)],
            size_range=(0.11 * base, 0.16 * base),
            anchor=anchors[(cid - 1) % len(anchors)],
        )
    return shapes


def _mask_for(family: str, cy, cx, r, aspect, rng, height, width) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dy = yy - cy
    dx = xx - cx
    if family == "ellipse":
        ry, rx = r, r * aspect
        return (dy / ry) ** 2 + (dx / rx) ** 2 <= 1.0
    if family == "rounded_rect":
        hy, hx = r, r * aspect
        corner = 0.4 * min(hy, hx)
        oy = np.maximum(np.abs(dy) - (hy - corner), 0.0)
        ox = np.maximum(np.abs(dx) - (hx - corner), 0.0)
        inside_core = (np.abs(dy) <= hy) & (np.abs(dx) <= hx)
        return inside_core & (oy ** 2 + ox ** 2 <= corner ** 2)
    if family == "annulus":
        outer = r
        inner = 0.45 * r
        dist = np.sqrt(dy ** 2 + dx ** 2)
        return (dist <= outer) & (dist >= inner)
    raise GenerationError(f"unknown shape family {family!r}")


def _touches(labels: np.ndarray, a: int, b: int) -> bool:
    ma = labels == a
    mb = labels == b
    if not ma.any() or not mb.any():
        return False
    grown = np.zeros_like(ma)
    grown[1:, :] |= ma[:-1, :]
    grown[:-1, :] |= ma[1:, :]
    grown[:, 1:] |= ma[:, :-1]
    grown[:, :-1] |= ma[:, 1:]
    return bool((grown & mb).any())


def _attempt_scene(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int64)
    adjacency_targets = {a: b for a, b in spec.adjacency}
    centers = {}
    for cid in range(1, spec.class_count):
        shape = spec.shapes[cid]
        r = rng.uniform(*shape.size_range)
        aspect = rng.uniform(0.75, 1.3)
        if cid in adjacency_targets and adjacency_targets[cid] in centers:
            # drop next to the partner so the masks overlap by a strip;
            # later classes win ties, which leaves them 4-adjacent
            oy, ox, orad = centers[adjacency_targets[cid]]
            theta = rng.uniform(0, 2 * np.pi)
            gap = orad + r - rng.uniform(1.5, 3.0)
            cy = oy + gap * np.sin(theta)
            cx = ox + gap * np.cos(theta)
        else:
            cy = shape.anchor[0] * h + rng.normal(0, shape.jitter * h)
            cx = shape.anchor[1] * w + rng.normal(0, shape.jitter * w)
        cy = float(np.clip(cy, r + 1, h - r - 2))
        cx = float(np.clip(cx, r + 1, w - r - 2))
        mask = _mask_for(shape.family, cy, cx, r, aspect, rng, h, w)
        labels[mask] = cid
        centers[cid] = (cy, cx, r)
    return labels


def _scene_ok(spec: SceneSpec, labels: np.ndarray) -> bool:
    total = labels.size
    for cid in range(spec.class_count):
        if (labels == cid).sum() < spec.min_class_fraction * total:
            return False
    for a, b in spec.adjacency:
        if not _touches(labels, a, b):
            return False
    return True


def generate_scene(spec: SceneSpec, seed: int) -> np.ndarray:
    """Deterministic label map for one scene seed; retries until constraints hold."""
    rng = np.random.default_rng(seed)
    for _ in range(spec.max_retries):
        labels = _attempt_scene(spec, rng)
        if _scene_ok(spec, labels):
            return labels
    raise GenerationError(f"could not satisfy scene constraints for seed {seed}")


@dataclass
class AppearanceProfile:
    name: str
    class_intensity: tuple
    noise_sigma: float = 0.05
    bias_amplitude: float = 0.1
    invert: bool = False
    slice_jitter: int = 1     # max per-axis shift of the companion slices


def default_profiles(class_count: int = 4) -> dict:
    """Two renderers with opposing intensity order; the second one is noisier."""
    ramp_a = tuple(np.linspace(0.1, 0.9, class_count))
    ramp_b = tuple(np.linspace(0.85, 0.2, class_count))
    return {
        "m1": AppearanceProfile("m1", ramp_a, noise_sigma=0.04, bias_amplitude=0.08),
        "m2": AppearanceProfile("m2", ramp_b, noise_sigma=0.12, bias_amplitude=0.22,
                                invert=False),
    }


@dataclass
class Sample:
    image: np.ndarray     # [3, H, W] float64, normalised
    label: np.ndarray     # [H, W] int64
    modality: str


def _render_slice(labels, profile, rng, h, w):
    base = np.asarray(profile.class_intensity, dtype=np.float64)[labels]
    yy, xx = np.mgrid[0:h, 0:w]
    gy, gx = rng.uniform(-1, 1, size=2)
    by, bx = rng.uniform(0.2, 0.8, size=2)
    sigma = 0.35 * min(h, w)
    bump = np.exp(-(((yy - by * h) ** 2 + (xx - bx * w) ** 2) / (2 * sigma ** 2)))
    bias = profile.bias_amplitude * (gy * (yy / h - 0.5) + gx * (xx / w - 0.5) + bump - 0.5)
    noise = rng.normal(0.0, profile.noise_sigma, size=(h, w)) if profile.noise_sigma else 0.0
    img = base + bias + noise
    return -img if profile.invert else img


def render_modality(labels: np.ndarray, profile: AppearanceProfile, seed: int) -> Sample:
    """Three-channel rendering: base slice plus two jittered companions.

    The whole stack is normalised to zero mean / unit variance per sample.
    """
    if len(profile.class_intensity) <= labels.max():
        raise GenerationError(
            f"profile {profile.name!r} covers {len(profile.class_intensity)} classes, "
            f"label map needs {labels.max() + 1}")
    rng = np.random.default_rng(seed)
    h, w = labels.shape
    channels = [_render_slice(labels, profile, rng, h, w)]
    for _ in range(2):
        if profile.slice_jitter:
            shift_y = int(rng.integers(-profile.slice_jitter, profile.slice_jitter + 1))
            shift_x = int(rng.integers(-profile.slice_jitter, profile.slice_jitter + 1))
            shifted = np.roll(labels, (shift_y, shift_x), axis=(0, 1))
        else:
            shifted = labels
        channels.append(_render_slice(shifted, profile, rng, h, w))
    image = np.stack(channels, axis=0)
    std = image.std()
    if std < 1e-12:
        std = 1.0
    image = (image - image.mean()) / std
    return Sample(image=image, label=labels.copy(), modality=profile.name)


def _split_counts(n: int) -> tuple:
    train = int(n * 0.7)
    val = int(n * 0.1)
    return train, val, max(n - train - val, 0)


def split_of(index: int, n: int) -> str:
    train, val, _ = _split_counts(n)
    if index < train:
        return "train"
    if index < train + val:
        return "val"
    return "test"


def make_unpaired_dataset(spec: SceneSpec, counts: dict, seed: int, out_dir,
                          profiles: dict | None = None) -> str:
    """Generate per-modality sample files plus a manifest; returns manifest path.

    Scene seeds for the two modalities come from disjoint ranges, and each
    modality splits 70/10/20 in seed order. Output bytes are a pure function
    of (spec, counts, seed).
    """
    profiles = profiles if profiles is not None else default_profiles(spec.class_count)
    os.makedirs(out_dir, exist_ok=True)
    records = []
    label_hashes = {m: set() for m in counts}
    presence_ok = 0
    total = 0
    for mi, (modality, count) in enumerate(sorted(counts.items())):
        profile = profiles[modality]
        for i in range(count):
            scene_seed = seed * 1_000_003 + mi * 500_000 + i
            labels = generate_scene(spec, scene_seed)
            sample = render_modality(labels, profile, scene_seed + 250_000)
            split = split_of(i, count)
            rel = os.path.join(modality, split, f"sample_{i:04d}.bin")
            path = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            tensorio.save_arrays(path, [sample.image, sample.label])
            digest = hashlib.sha256(labels.tobytes()).hexdigest()
            label_hashes[modality].add(digest)
            fractions = [(labels == c).mean() for c in range(spec.class_count)]
            if min(fractions) >= spec.min_class_fraction:
                presence_ok += 1
            total += 1
            records.append({
                "sample": rel.replace(os.sep, "/"),
                "modality": modality,
                "split": split,
                "scene_seed": scene_seed,
                "label_sha256": digest,
                "class_fractions": " ".join(f"{f:.6f}" for f in fractions),
            })
    for m_a in counts:
        for m_b in counts:
            if m_a < m_b and label_hashes[m_a] & label_hashes[m_b]:
                raise GenerationError("label map shared across modalities")
    if presence_ok < spec.min_presence_rate * total:
        raise GenerationError(
            f"class balance violated: {presence_ok}/{total} samples meet "
            f"the {spec.min_class_fraction:.2%} floor")

    manifest_path = os.path.join(out_dir, "manifest.txt")
    with open(manifest_path, "w") as fh:
        fh.write(f"classes: {spec.class_count}\n")
        fh.write(f"extents: {spec.height} {spec.width}\n")
        fh.write(f"master_seed: {seed}\n")
        for modality in sorted(counts):
            profile = profiles[modality]
            fh.write(f"profile_{modality}: intensity="
                     f"{' '.join(f'{v:.4f}' for v in profile.class_intensity)}"
                     f" noise={profile.noise_sigma} bias={profile.bias_amplitude}"
                     f" invert={profile.invert}\n")
        fh.write("\n")
        for rec in records:
            for key, value in rec.items():
                fh.write(f"{key}: {value}\n")
            fh.write("\n")
    return manifest_path


def load_manifest(data_dir) -> dict:
    """Parse the dataset manifest into header fields plus sample records."""
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    header = {}
    records = []
    current = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                if current:
                    records.append(current)
                    current = None
                continue
            key, _, value = line.partition(": ")
            if key == "sample":
                current = {key: value}
            elif current is not None:
                current[key] = value
            else:
                header[key] = value
    if current:
        records.append(current)
    return {"header": header, "records": records}


def load_sample(data_dir, record) -> Sample:
    image, label = tensorio.load_arrays(os.path.join(data_dir, record["sample"]))
    return Sample(image=image, label=label, modality=record["modality"])
