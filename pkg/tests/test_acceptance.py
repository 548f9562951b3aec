"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see every line. The two
training-based criteria (variant ordering, few-shot trend) dominate the
runtime; everything else finishes in seconds.
"""

import functools
import hashlib
import os
import time

import numpy as np
import pytest

from xmodseg.backbone import BackboneConfig
from xmodseg.checkpoint import InferenceModel, load_checkpoint, rebuild_system, strip_eam
from xmodseg.eam import semantic_correlations
from xmodseg.losses import icr_loss, mcr_loss
from xmodseg.metrics import (
    average_symmetric_surface_distance,
    dice_coefficient,
    round_half_up,
)
from xmodseg.model import SegmentationSystem
from xmodseg.synthdata import SceneSpec, make_unpaired_dataset
from xmodseg.tensor import Tensor
from xmodseg.train import TrainConfig, UnpairedData, evaluate, train

from test_eam import loop_correlations
from test_metrics import brute_force_asd


def criterion(name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"\n[ACCEPTANCE] {name}: FAIL")
                raise
            print(f"\n[ACCEPTANCE] {name}: PASS")
            return result
        return run
    return wrap


@criterion("gradient suite (primitives >=100 trials, composites >=5, rel err < 1e-4)")
def test_gradient_suite():
    from xmodseg.gradsuite import run_suite

    start = time.time()
    entries = run_suite(primitive_trials=100, composite_trials=5, tol=1e-4)
    elapsed = time.time() - start
    for entry in entries:
        print(entry.line())
    failed = [e.name for e in entries if not e.passed]
    assert not failed, f"gradient checks failed: {failed}"
    assert max(e.max_rel_err for e in entries) < 1e-4
    assert elapsed < 300, f"suite took {elapsed:.0f}s, budget is 5 min"


@criterion("EAM oracle suite (vectorized == nested loops within 1e-10, 200 instances)")
def test_eam_oracle_suite():
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(200):
        z = int(rng.integers(2, 5))
        n = int(rng.integers(1, 5))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        d = int(rng.integers(2, 9))
        q = rng.standard_normal((z, d))
        maps = rng.standard_normal((z, n, h, w))
        kernels = rng.standard_normal((z, d, n))
        vec = semantic_correlations(Tensor(q), Tensor(maps), Tensor(kernels)).data
        ref = loop_correlations(q, maps, kernels)
        worst = max(worst, float(np.abs(vec - ref).max()))
    print(f"worst vectorized-vs-loop deviation: {worst:.3e}")
    assert worst < 1e-10


@criterion("loss identities (icr exact zero/symmetry, mcr invariances, tau trend)")
def test_loss_identities():
    rng = np.random.default_rng(21)
    es_a = [Tensor(rng.standard_normal((4, 4))) for _ in range(3)]
    es_b = [Tensor(rng.standard_normal((4, 4))) for _ in range(3)]
    assert icr_loss(es_a, es_a, 4.0).item() == 0.0
    assert icr_loss(es_a, es_b, 4.0).item() == icr_loss(es_b, es_a, 4.0).item()

    q_a = rng.standard_normal((4, 16))
    q_b = rng.standard_normal((4, 16))
    assert abs(mcr_loss(Tensor(q_a), Tensor(q_a)).item()) < 1e-9
    base = mcr_loss(Tensor(q_a), Tensor(q_b)).item()
    for c in (0.1, 2.0, 517.0):
        assert abs(mcr_loss(Tensor(c * q_a), Tensor(q_b)).item() - base) < 1e-9

    shift = rng.standard_normal((4, 1))
    shifted = [Tensor(es_a[0].data + shift)] + [Tensor(e.data) for e in es_a[1:]]
    assert abs(icr_loss(shifted, es_b, 4.0).item()
               - icr_loss(es_a, es_b, 4.0).item()) < 1e-9

    values = [icr_loss(es_a, es_b, tau).item() for tau in (1, 2, 4, 8, 16)]
    print("icr by temperature:", [f"{v:.5f}" for v in values])
    assert all(hi > lo for hi, lo in zip(values, values[1:]))


@pytest.fixture(scope="module")
def trained_v2_v3(bench_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_strip")
    out = {}
    for variant in ("joint-v2", "joint-v3-cr"):
        config = TrainConfig(
            data_dir=bench_dataset, out_dir=str(root / variant), variant=variant,
            steps=2, batch_size=1, seed=0, backbone=BackboneConfig(dtype="float32"))
        out[variant] = train(config).checkpoint_path
    return bench_dataset, root, out


@criterion("plug-and-play strip (bit-identical predictions, exact parameter census)")
def test_plug_and_play(trained_v2_v3):
    data_dir, root, checkpoints = trained_v2_v3
    data = UnpairedData(data_dir)
    held_out = [(m, rec) for m in data.modalities for rec in data.records_for(m, "test")]
    assert len(held_out) == 8
    for variant, ckpt in checkpoints.items():
        stripped_path = str(root / f"{variant}_inference.bin")
        result = strip_eam(ckpt, stripped_path)
        manifest, arrays = load_checkpoint(ckpt)
        system = rebuild_system(manifest, arrays)
        stripped = InferenceModel.load(stripped_path)
        for m, rec in held_out:
            sample = data.load(rec)
            x = Tensor(sample.image, dtype=np.float32)
            full_logits = system.segment(x, m).data
            np.testing.assert_array_equal(full_logits, stripped.logits(x, m).data)
        census = manifest["census"]
        if variant == "joint-v2":
            assert result.full_params - result.stripped_params == census["eam"]
        else:
            assert result.removed_eam == census["eam"]
            assert result.removed_calibration == census["calibration"]
            assert result.stripped_params == (result.full_params - census["eam"]
                                              - census["calibration"]
                                              + result.added_folded)
        assert os.path.getsize(stripped_path) < os.path.getsize(ckpt)
        print(f"{variant}: {result.full_params} -> {result.stripped_params} params, "
              f"8/8 held-out predictions bit-identical")


@criterion("calibration identity (unit gains reproduce the uncalibrated block bit-exactly)")
def test_calibration_identity():
    from xmodseg.blocks import TransformerBlock

    rng = np.random.default_rng(22)
    block = TransformerBlock(8, 2, rng, calibrated=True, class_count=4, embed_dim=16)
    embed = rng.standard_normal((4, 16))
    embed[0] = 1.0
    w1 = np.zeros(4)
    w1[0] = 1.0
    w23 = np.zeros((16, 8))
    w23[0, :] = 1.0
    block.cal_w1.assign(w1)
    block.cal_w2.assign(w23)
    block.cal_w3.assign(w23)
    gains = block.channel_gains(Tensor(embed))
    np.testing.assert_array_equal(gains[0].data, np.ones(8))
    x = Tensor(rng.standard_normal((6, 8)))
    np.testing.assert_array_equal(block(x, class_embed=Tensor(embed)).data,
                                  block(x).data)


@criterion("metrics oracles (50 random pairs: Dice exact, ASD within 1e-9; table rounding)")
def test_metrics_against_oracles():
    rng = np.random.default_rng(23)
    checked_dice = checked_asd = 0
    for _ in range(50):
        h = int(rng.integers(4, 17))
        w = int(rng.integers(4, 17))
        pred = rng.integers(0, 4, size=(h, w))
        truth = rng.integers(0, 4, size=(h, w))
        for c in range(4):
            p_count = int((pred == c).sum())
            t_count = int((truth == c).sum())
            dice = dice_coefficient(pred, truth, c)
            if p_count + t_count == 0:
                assert dice is None
            else:
                inter = int(((pred == c) & (truth == c)).sum())
                assert dice == 200.0 * inter / (p_count + t_count)
                checked_dice += 1
            asd = average_symmetric_surface_distance(pred, truth, c)
            ref = brute_force_asd(pred, truth, c)
            if ref is None:
                assert asd is None
            else:
                assert abs(asd - ref) < 1e-9
                checked_asd += 1
    print(f"checked {checked_dice} dice and {checked_asd} asd values")
    overall = (94.0 + 88.7) / 2.0
    assert overall == pytest.approx(91.35)
    assert round_half_up(overall, 1) == 91.4


@criterion("toy benchmark ordering (V3+CR >= V3 >= V2; V3+CR - V2 >= 1 on the noisy modality)")
def test_toy_benchmark_ordering(bench_dataset, tmp_path_factory):
    from xmodseg.experiments import ablation_table, mean_dice, run_ablation

    root = tmp_path_factory.mktemp("acc_bench")
    start = time.time()
    scores = run_ablation(bench_dataset, str(root),
                          ["joint-v2", "joint-v3", "joint-v3-cr"],
                          seeds=[0, 1, 2, 3, 4])
    elapsed = time.time() - start
    print(ablation_table(scores, ["m1", "m2"]))
    print(f"benchmark wall time: {elapsed:.0f}s")
    v2 = mean_dice(scores, "joint-v2")
    v3 = mean_dice(scores, "joint-v3")
    v3cr = mean_dice(scores, "joint-v3-cr")
    assert v3cr >= v3 >= v2, f"ordering violated: {v3cr:.2f}, {v3:.2f}, {v2:.2f}"
    gap = mean_dice(scores, "joint-v3-cr", "m2") - mean_dice(scores, "joint-v2", "m2")
    assert gap >= 1.0, f"noisy-modality gap {gap:.2f} < 1.0"
    assert elapsed < 1800, f"benchmark took {elapsed:.0f}s, budget is 30 min"


@criterion("few-shot trend (joint training with 1 scarce sample beats its baseline by >= 5)")
def test_few_shot_trend(bench_dataset, tmp_path_factory):
    from xmodseg.experiments import run_few_shot

    root = tmp_path_factory.mktemp("acc_fewshot")
    rows = run_few_shot(bench_dataset, str(root), scarce_modality="m2",
                        scarce_count=1, seeds=[0, 1, 2, 3, 4])
    for seed, joint, baseline in rows:
        print(f"seed {seed}: joint {joint:.2f} vs single-modality baseline {baseline:.2f}")
    joint_mean = np.mean([r[1] for r in rows])
    base_mean = np.mean([r[2] for r in rows])
    print(f"means: joint {joint_mean:.2f}, baseline {base_mean:.2f}")
    assert joint_mean - base_mean >= 5.0


@criterion("determinism (datasets, checkpoints, and reports reproduce bit-identically)")
def test_determinism(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_determinism")

    def dataset_digest(path):
        entries = []
        for dirpath, _, files in os.walk(path):
            for name in sorted(files):
                full = os.path.join(dirpath, name)
                rel = os.path.relpath(full, path)
                entries.append((rel, hashlib.sha256(open(full, "rb").read()).hexdigest()))
        return sorted(entries)

    spec = SceneSpec()
    make_unpaired_dataset(spec, {"m1": 8, "m2": 8}, 9, root / "data_a")
    make_unpaired_dataset(spec, {"m1": 8, "m2": 8}, 9, root / "data_b")
    assert dataset_digest(root / "data_a") == dataset_digest(root / "data_b")

    results = []
    for tag in ("run_a", "run_b"):
        config = TrainConfig(
            data_dir=str(root / "data_a"), out_dir=str(root / tag),
            variant="joint-v3-cr", steps=3, batch_size=1, seed=4,
            backbone=BackboneConfig(dtype="float32"))
        result = train(config)
        csv_path = str(root / f"{tag}.csv")
        evaluate(result.checkpoint_path, str(root / "data_a"), out_csv=csv_path)
        results.append((result.checkpoint_path, csv_path))
    ckpt_a, csv_a = results[0]
    ckpt_b, csv_b = results[1]
    assert hashlib.sha256(open(ckpt_a, "rb").read()).digest() \
        == hashlib.sha256(open(ckpt_b, "rb").read()).digest()
    assert open(csv_a).read() == open(csv_b).read()
