import hashlib
import os

import numpy as np
import pytest

from xmodseg.synthdata import (
    AppearanceProfile,
    GenerationError,
    SceneSpec,
    default_profiles,
    generate_scene,
    load_manifest,
    load_sample,
    make_unpaired_dataset,
    render_modality,
    split_of,
)


class TestSceneGeneration:
    def test_same_seed_identical(self):
        spec = SceneSpec()
        a = generate_scene(spec, 123)
        b = generate_scene(spec, 123)
        np.testing.assert_array_equal(a, b)

    def test_label_values_in_range(self):
        spec = SceneSpec(class_count=4)
        for seed in range(20):
            labels = generate_scene(spec, seed)
            assert set(np.unique(labels)) <= {0, 1, 2, 3}

    def test_adjacency_constraint_holds(self):
        spec = SceneSpec()
        touching = 0
        for seed in range(100):
            labels = generate_scene(spec, seed)
            a = labels == 2
            grown = np.zeros_like(a)
            grown[1:, :] |= a[:-1, :]
            grown[:-1, :] |= a[1:, :]
            grown[:, 1:] |= a[:, :-1]
            grown[:, :-1] |= a[:, 1:]
            touching += bool((grown & (labels == 1)).any())
        assert touching >= 99

    def test_class_fractions_respected(self):
        spec = SceneSpec()
        for seed in range(50):
            labels = generate_scene(spec, seed)
            for c in range(4):
                assert (labels == c).mean() >= spec.min_class_fraction

    def test_unsatisfiable_constraints_raise(self):
        spec = SceneSpec(min_class_fraction=0.5, max_retries=5)
        with pytest.raises(GenerationError):
            generate_scene(spec, 0)


class TestRendering:
    def test_normalised_and_shaped(self):
        labels = generate_scene(SceneSpec(), 7)
        sample = render_modality(labels, default_profiles()["m1"], 42)
        assert sample.image.shape == (3, 64, 64)
        assert abs(sample.image.mean()) < 1e-12
        assert abs(sample.image.std() - 1.0) < 1e-12

    def test_modalities_have_distinct_appearance(self):
        labels = generate_scene(SceneSpec(), 8)
        profiles = default_profiles()
        s1 = render_modality(labels, profiles["m1"], 42)
        s2 = render_modality(labels, profiles["m2"], 42)
        for c in range(4):
            mask = labels == c
            assert abs(s1.image[0][mask].mean() - s2.image[0][mask].mean()) > 0.2

    def test_noise_free_flat_render_matches_profile_exactly(self):
        labels = generate_scene(SceneSpec(), 9)
        profile = AppearanceProfile("flat", (0.1, 0.4, 0.7, 1.0), noise_sigma=0.0,
                                    bias_amplitude=0.0, slice_jitter=0)
        sample = render_modality(labels, profile, 0)
        base = np.asarray(profile.class_intensity)[labels]
        stack = np.stack([base] * 3)
        expected = (stack - stack.mean()) / stack.std()
        np.testing.assert_allclose(sample.image, expected, atol=1e-12)
        # piecewise constant: every pixel of one class has one value
        for c in range(4):
            vals = sample.image[0][labels == c]
            assert np.ptp(vals) == 0.0

    def test_same_label_different_seeds_changes_noise_only(self):
        labels = generate_scene(SceneSpec(), 10)
        profile = default_profiles()["m1"]
        s1 = render_modality(labels, profile, 1)
        s2 = render_modality(labels, profile, 2)
        assert np.abs(s1.image - s2.image).max() > 1e-3
        np.testing.assert_array_equal(s1.label, s2.label)

    def test_profile_must_cover_classes(self):
        labels = generate_scene(SceneSpec(), 11)
        with pytest.raises(GenerationError):
            render_modality(labels, AppearanceProfile("tiny", (0.1, 0.2)), 0)


class TestDataset:
    def test_split_ratios(self):
        assert [split_of(i, 20) for i in range(20)].count("train") == 14
        assert [split_of(i, 20) for i in range(20)].count("val") == 2
        assert [split_of(i, 20) for i in range(20)].count("test") == 4

    def test_dataset_layout_and_unpairedness(self, small_dataset):
        info = load_manifest(small_dataset)
        assert info["header"]["classes"] == "4"
        by_mod = {}
        for rec in info["records"]:
            by_mod.setdefault(rec["modality"], set()).add(rec["label_sha256"])
        assert set(by_mod) == {"m1", "m2"}
        assert not (by_mod["m1"] & by_mod["m2"])

    def test_sample_files_load(self, small_dataset):
        info = load_manifest(small_dataset)
        sample = load_sample(small_dataset, info["records"][0])
        assert sample.image.shape == (3, 64, 64)
        assert sample.label.shape == (64, 64)
        assert sample.label.dtype == np.int64

    def test_regeneration_byte_identical(self, tmp_path):
        spec = SceneSpec()
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        make_unpaired_dataset(spec, {"m1": 6, "m2": 6}, 3, out1)
        make_unpaired_dataset(spec, {"m1": 6, "m2": 6}, 3, out2)

        def digest(root):
            entries = []
            for dirpath, _, files in os.walk(root):
                for name in sorted(files):
                    path = os.path.join(dirpath, name)
                    rel = os.path.relpath(path, root)
                    entries.append((rel, hashlib.sha256(open(path, "rb").read()).hexdigest()))
            return sorted(entries)

        assert digest(out1) == digest(out2)

    def test_different_seed_changes_bytes(self, tmp_path):
        spec = SceneSpec()
        make_unpaired_dataset(spec, {"m1": 4, "m2": 4}, 1, tmp_path / "a")
        make_unpaired_dataset(spec, {"m1": 4, "m2": 4}, 2, tmp_path / "b")
        a = open(tmp_path / "a" / "m1" / "train" / "sample_0000.bin", "rb").read()
        b = open(tmp_path / "b" / "m1" / "train" / "sample_0000.bin", "rb").read()
        assert a != b

    def test_manifest_echoes_profiles(self, small_dataset):
        header = load_manifest(small_dataset)["header"]
        assert "profile_m1" in header and "profile_m2" in header
        assert "intensity=" in header["profile_m1"]
