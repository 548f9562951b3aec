import hashlib
import os

import numpy as np
import pytest
import yaml

from xmodseg import cli
from xmodseg.backbone import BackboneConfig
from xmodseg.checkpoint import (
    InferenceModel,
    load_checkpoint,
    rebuild_system,
    save_checkpoint,
    strip_eam,
)
from xmodseg.losses import LossWeights
from xmodseg.model import SegmentationSystem, categorize
from xmodseg.tensor import Tensor
from xmodseg.train import (
    TrainConfig,
    TrainingError,
    UnpairedData,
    evaluate,
    resolve_backbone_config,
    train,
    train_config_from_dict,
)


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def quick_config(data_dir, out_dir, **kw):
    defaults = dict(
        data_dir=str(data_dir), out_dir=str(out_dir), variant="joint-v3-cr",
        steps=2, batch_size=1, seed=0,
        backbone=BackboneConfig(dtype="float32"),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestTrainLoop:
    def test_zero_steps_checkpoint_equals_initialization(self, small_dataset, tmp_path):
        config = quick_config(small_dataset, tmp_path / "run", steps=0)
        result = train(config)
        _, arrays = load_checkpoint(result.checkpoint_path)
        data = UnpairedData(small_dataset)
        fresh = SegmentationSystem(resolve_backbone_config(config, data),
                                   np.random.default_rng(config.seed))
        for name, t in fresh.named_params():
            np.testing.assert_array_equal(arrays[name], t.data)

    def test_same_seed_bit_identical_checkpoints(self, small_dataset, tmp_path):
        r1 = train(quick_config(small_dataset, tmp_path / "a", steps=3))
        r2 = train(quick_config(small_dataset, tmp_path / "b", steps=3))
        assert _sha(r1.checkpoint_path) == _sha(r2.checkpoint_path)
        assert open(r1.log_path).read() == open(r2.log_path).read()

    def test_different_seed_changes_checkpoint(self, small_dataset, tmp_path):
        r1 = train(quick_config(small_dataset, tmp_path / "a", steps=2, seed=0))
        r2 = train(quick_config(small_dataset, tmp_path / "b", steps=2, seed=1))
        assert _sha(r1.checkpoint_path) != _sha(r2.checkpoint_path)

    def test_resume_matches_single_run_state(self, small_dataset, tmp_path):
        full = train(quick_config(small_dataset, tmp_path / "full", steps=4))
        part = train(quick_config(small_dataset, tmp_path / "part", steps=2))
        resumed = train(quick_config(small_dataset, tmp_path / "part", steps=2),
                        resume_from=part.checkpoint_path)
        m_full, a_full = load_checkpoint(full.checkpoint_path)
        m_res, a_res = load_checkpoint(resumed.checkpoint_path)
        assert m_full["step"] == m_res["step"] == 4
        assert m_full["sampler_state"] == m_res["sampler_state"]
        for name in a_full:
            np.testing.assert_array_equal(a_full[name], a_res[name])

    def test_loss_decreases_on_toy_run(self, small_dataset, tmp_path):
        config = quick_config(small_dataset, tmp_path / "run", steps=200,
                              batch_size=1, variant="joint-v2", lr=1e-3)
        result = train(config)
        rows = open(result.log_path).read().splitlines()
        first = float(rows[1].split(",")[-1])
        last = float(rows[-1].split(",")[-1])
        assert last < first

    def test_training_log_columns(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=1))
        header = open(result.log_path).read().splitlines()[0]
        assert header == "step,seg_m1,seg_m2,aux_m1,aux_m2,mcr,icr,total"

    def test_cr_terms_only_for_cr_variants(self, small_dataset, tmp_path):
        r_plain = train(quick_config(small_dataset, tmp_path / "a", steps=1,
                                     variant="joint-v3"))
        assert r_plain.final["mcr"] == 0.0 and r_plain.final["icr"] == 0.0
        r_cr = train(quick_config(small_dataset, tmp_path / "b", steps=1,
                                  variant="joint-v3-cr"))
        assert r_cr.final["mcr"] > 0.0 and r_cr.final["icr"] > 0.0

    def test_baseline_trains_single_modality(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=1,
                                    variant="baseline-single-modality",
                                    baseline_modality="m2"))
        assert result.final["seg_m2"] > 0.0
        assert result.final.get("seg_m1", 0.0) == 0.0

    def test_nonfinite_loss_aborts_with_diagnostic(self, small_dataset, tmp_path,
                                                   monkeypatch):
        import xmodseg.train as train_mod

        def poisoned(logits, labels):
            return Tensor(np.array(np.nan))

        monkeypatch.setattr(train_mod, "seg_loss", poisoned)
        with pytest.raises(TrainingError) as err:
            train(quick_config(small_dataset, tmp_path / "run", steps=1))
        assert "step 0" in str(err.value)

    def test_unknown_variant_rejected(self, small_dataset, tmp_path):
        with pytest.raises(Exception):
            train(quick_config(small_dataset, tmp_path / "run", variant="magic"))

    def test_config_roundtrip_through_dict(self, small_dataset):
        config = quick_config(small_dataset, "out", few_shot={"m2": 1})
        back = train_config_from_dict(config.to_dict())
        assert back.to_dict() == config.to_dict()


class TestFewShot:
    def test_exact_sample_counts_used(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=1,
                                    few_shot={"m2": 1}))
        assert len(result.few_shot_selection["m2"]) == 1
        manifest, _ = load_checkpoint(result.checkpoint_path)
        assert len(manifest["few_shot_selection"]["m2"]) == 1
        listed = {r["sample"] for r in
                  UnpairedData(small_dataset).records_for("m2", "train")}
        assert set(result.few_shot_selection["m2"]) <= listed

    def test_count_above_available_rejected(self, small_dataset, tmp_path):
        with pytest.raises(Exception):
            train(quick_config(small_dataset, tmp_path / "run", steps=0,
                               few_shot={"m2": 99}))


class TestStrip:
    @pytest.fixture(scope="class")
    def trained(self, small_dataset, tmp_path_factory):
        root = tmp_path_factory.mktemp("strips")
        paths = {}
        for variant in ("joint-v2", "joint-v3-cr"):
            result = train(quick_config(small_dataset, root / variant, steps=2,
                                        variant=variant))
            paths[variant] = result.checkpoint_path
        return small_dataset, paths

    def test_stripped_file_smaller_and_eam_free(self, trained, tmp_path):
        data_dir, paths = trained
        for variant, ckpt in paths.items():
            out = tmp_path / f"{variant}.bin"
            result = strip_eam(ckpt, out)
            assert os.path.getsize(out) < os.path.getsize(ckpt)
            manifest, arrays = load_checkpoint(out)
            assert manifest["kind"] == "inference"
            assert not any(n.startswith("eam.") for n in arrays)
            assert not any(".cal_w" in n for n in arrays)

    def test_v2_parameter_delta_equals_eam_census(self, trained, tmp_path):
        data_dir, paths = trained
        manifest, _ = load_checkpoint(paths["joint-v2"])
        result = strip_eam(paths["joint-v2"], tmp_path / "v2.bin")
        assert result.removed_calibration == 0 and result.added_folded == 0
        assert result.full_params - result.stripped_params == manifest["census"]["eam"]

    def test_v3_accounting_identity(self, trained, tmp_path):
        data_dir, paths = trained
        manifest, _ = load_checkpoint(paths["joint-v3-cr"])
        result = strip_eam(paths["joint-v3-cr"], tmp_path / "v3.bin")
        assert result.removed_eam == manifest["census"]["eam"]
        assert result.removed_calibration == manifest["census"]["calibration"]
        assert result.stripped_params == (result.full_params - result.removed_eam
                                          - result.removed_calibration
                                          + result.added_folded)

    def test_predictions_bit_identical_after_strip(self, trained, tmp_path):
        data_dir, paths = trained
        data = UnpairedData(data_dir)
        for variant, ckpt in paths.items():
            out = tmp_path / f"{variant}_pred.bin"
            strip_eam(ckpt, out)
            manifest, arrays = load_checkpoint(ckpt)
            system = rebuild_system(manifest, arrays)
            stripped = InferenceModel.load(out)
            for m in data.modalities:
                for rec in data.records_for(m, "test"):
                    sample = data.load(rec)
                    x = Tensor(sample.image, dtype=np.float32)
                    np.testing.assert_array_equal(
                        system.segment(x, m).data, stripped.logits(x, m).data)

    def test_strip_rejects_inference_input(self, trained, tmp_path):
        data_dir, paths = trained
        out = tmp_path / "once.bin"
        strip_eam(paths["joint-v2"], out)
        with pytest.raises(ValueError):
            strip_eam(out, tmp_path / "twice.bin")


class TestEvaluate:
    def test_report_reproducible(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=1))
        csv1 = tmp_path / "a.csv"
        csv2 = tmp_path / "b.csv"
        evaluate(result.checkpoint_path, small_dataset, out_csv=csv1)
        evaluate(result.checkpoint_path, small_dataset, out_csv=csv2)
        assert open(csv1).read() == open(csv2).read()

    def test_eval_works_on_stripped_model(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=1,
                                    variant="joint-v3-cr"))
        out = tmp_path / "inference.bin"
        strip_eam(result.checkpoint_path, out)
        rep_full = evaluate(result.checkpoint_path, small_dataset)
        rep_stripped = evaluate(out, small_dataset)
        assert rep_full.dice_mean == rep_stripped.dice_mean

    def test_correlation_dumps_written(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=1))
        dump_dir = tmp_path / "dumps"
        evaluate(result.checkpoint_path, small_dataset, split="test",
                 correlations_dir=dump_dir)
        files = os.listdir(dump_dir)
        assert files and all(f.endswith("_correlations.csv") for f in files)

    def test_checkpoint_roundtrip_bytes(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=1))
        manifest, arrays = load_checkpoint(result.checkpoint_path)
        copy_path = tmp_path / "copy.bin"
        save_checkpoint(copy_path, manifest, arrays)
        assert _sha(copy_path) == _sha(result.checkpoint_path)


class TestVariantWiring:
    def test_v1_has_per_modality_encoders(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=0,
                                    variant="joint-v1"))
        _, arrays = load_checkpoint(result.checkpoint_path)
        assert any(n.startswith("backbone.enc.m1.") for n in arrays)
        assert any(n.startswith("backbone.enc.m2.") for n in arrays)

    def test_v3_has_calibration_everywhere(self, small_dataset, tmp_path):
        result = train(quick_config(small_dataset, tmp_path / "run", steps=0,
                                    variant="joint-v3"))
        manifest, arrays = load_checkpoint(result.checkpoint_path)
        assert manifest["census"]["calibration"] > 0
        cal_names = [n for n in arrays
                     if not n.startswith("opt.") and categorize(n) == "calibration"]
        # every encoder and decoder block carries w1, W2, W3
        blocks = 16  # depths (2,2,2,2) encoder + decoder
        assert len(cal_names) == 3 * blocks


class TestCli:
    def test_help_exits_zero(self, capsys):
        assert cli.cli_main(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_unknown_flag_nonzero(self):
        assert cli.cli_main(["train", "--bogus"]) != 0

    def test_missing_data_path_clear_error(self, capsys, tmp_path):
        code = cli.cli_main(["train", "--data", str(tmp_path / "nope"), "--steps", "1",
                             "--out", str(tmp_path / "run")])
        assert code != 0
        assert "manifest" in capsys.readouterr().err

    def test_gen_train_eval_strip_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        run = tmp_path / "run"
        assert cli.cli_main(["gen-data", "--out", str(data), "--count-m1", "6",
                             "--count-m2", "6", "--seed", "2"]) == 0
        assert cli.cli_main(["train", "--data", str(data), "--out", str(run),
                             "--steps", "1", "--batch-size", "1",
                             "--variant", "joint-v3-cr"]) == 0
        ckpt = run / "checkpoint.bin"
        assert cli.cli_main(["eval", "--model", str(ckpt), "--data", str(data),
                             "--split", "test", "--csv", str(tmp_path / "m.csv")]) == 0
        assert (tmp_path / "m.csv").exists()
        assert cli.cli_main(["strip", "--checkpoint", str(ckpt), "--out",
                             str(tmp_path / "inf.bin")]) == 0
        capsys.readouterr()

    def test_config_file_overrides_defaults(self, small_dataset, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        yaml.safe_dump({"steps": 1, "variant": "joint-v2", "batch_size": 1},
                       open(cfg, "w"))
        assert cli.cli_main(["train", "--data", small_dataset, "--out",
                             str(tmp_path / "run"), "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "trained 1 steps" in out

    def test_config_file_rejects_unknown_keys(self, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        yaml.safe_dump({"not_a_flag": 1}, open(cfg, "w"))
        with pytest.raises(SystemExit):
            cli.cli_main(["train", "--data", "x", "--config", str(cfg)])

    def test_grad_check_command(self, capsys):
        assert cli.cli_main(["grad-check", "--primitive-trials", "2",
                             "--composite-trials", "1"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
