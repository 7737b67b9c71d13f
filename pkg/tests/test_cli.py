"""End-to-end command-line tests: every subcommand, exit codes, seeding."""

import csv
import json
import os

import numpy as np
import pytest

from memwarp import io as volio
from memwarp.cli import main
from memwarp.fieldops import warp

from conftest import TINY_SPEC


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Dataset + a short training run shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(
        "synth", "--out", data,
        "--set", "subjects=6", "--set", "shape=[24,24,8]",
        "--set", "split_ratios=[0.5,0.25,0.25]", "--set", "seed=21",
    ) == 0
    rundir = root / "run"
    assert run(
        "train", "--data", data, "--out", rundir,
        "--set", "steps=25", "--set", "batch_size=2", "--set", "levels=2",
        "--set", "encoder_channels=[4,8]", "--set", "val_interval=10",
    ) == 0
    return {"root": root, "data": data, "ckpt": rundir / "checkpoint.zip"}


class TestSynth:
    def test_dataset_layout(self, cli_workspace):
        data = cli_workspace["data"]
        manifest = json.loads((data / "manifest.json").read_text())
        assert len(manifest["subjects"]) == 6
        subj = manifest["subjects"][0]["id"]
        for name in ("ed_img", "es_img", "ed_seg", "es_seg"):
            assert (data / subj / f"{name}.nii.gz").exists()

    def test_seed_env_var_overrides(self, tmp_path):
        env_backup = os.environ.get("MEMWARP_SEED")
        os.environ["MEMWARP_SEED"] = "21"
        try:
            assert run(
                "synth", "--out", tmp_path / "env",
                "--set", "subjects=6", "--set", "shape=[24,24,8]",
                "--set", "split_ratios=[0.5,0.25,0.25]", "--set", "seed=999",
            ) == 0
        finally:
            if env_backup is None:
                os.environ.pop("MEMWARP_SEED")
            else:
                os.environ["MEMWARP_SEED"] = env_backup
        manifest = json.loads((tmp_path / "env" / "manifest.json").read_text())
        assert manifest["seed"] == 21

    def test_regeneration_bit_identical(self, cli_workspace, tmp_path):
        assert run(
            "synth", "--out", tmp_path / "again",
            "--set", "subjects=6", "--set", "shape=[24,24,8]",
            "--set", "split_ratios=[0.5,0.25,0.25]", "--set", "seed=21",
        ) == 0
        a = cli_workspace["data"]
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert (a / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes(), rel

    def test_bad_spec_values_fail_cleanly(self, tmp_path):
        # unknown key and out-of-range value both violate the spec contract
        assert run("synth", "--out", tmp_path / "x", "--set", "bogus_key=1") == 1
        assert run("synth", "--out", tmp_path / "y", "--set", "d_max=99") == 1


class TestTrain:
    def test_logs_written(self, cli_workspace):
        rundir = cli_workspace["root"] / "run"
        assert (rundir / "train_log.csv").exists()
        assert (rundir / "val_log.csv").exists()
        assert cli_workspace["ckpt"].exists()

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 3

    def test_bad_config_key_is_config_error(self, cli_workspace, tmp_path):
        code = run(
            "train", "--data", cli_workspace["data"], "--out", tmp_path / "o",
            "--set", "not_a_knob=3",
        )
        assert code == 2


class TestRegister:
    def test_outputs_and_field_round_trip(self, cli_workspace, tmp_path):
        data = cli_workspace["data"]
        manifest = json.loads((data / "manifest.json").read_text())
        subj = manifest["splits"]["test"][0]
        out = tmp_path / "reg"
        volio.reset_read_counts()
        assert run(
            "register", "--checkpoint", cli_workspace["ckpt"],
            "--moving", data / subj / "ed_img.nii.gz",
            "--fixed", data / subj / "es_img.nii.gz",
            "--out", out,
        ) == 0
        # no segmentation inputs were given and none were read
        assert volio.read_counts()["label"] == 0
        for name in ("disp.nii.gz", "warped_img.nii.gz"):
            assert (out / name).exists()

        # reapplying the stored field to the stored moving image reproduces
        # the stored warped image bitwise
        moving = volio.read_volume(data / subj / "ed_img.nii.gz")
        disp = volio.read_field(out / "disp.nii.gz")
        warped = volio.read_volume(out / "warped_img.nii.gz")
        redone = warp(moving, disp, interp="trilinear")
        assert np.array_equal(redone.data, warped.data)

    def test_optional_mask_warping(self, cli_workspace, tmp_path):
        data = cli_workspace["data"]
        manifest = json.loads((data / "manifest.json").read_text())
        subj = manifest["splits"]["test"][0]
        out = tmp_path / "regseg"
        assert run(
            "register", "--checkpoint", cli_workspace["ckpt"],
            "--moving", data / subj / "ed_img.nii.gz",
            "--fixed", data / subj / "es_img.nii.gz",
            "--moving-seg", data / subj / "ed_seg.nii.gz",
            "--out", out,
        ) == 0
        seg = volio.read_volume(out / "warped_seg.nii.gz", num_classes=4)
        assert seg.data.shape == (24, 24, 8)

    def test_missing_input_is_data_error(self, cli_workspace, tmp_path):
        assert run(
            "register", "--checkpoint", cli_workspace["ckpt"],
            "--moving", tmp_path / "missing.nii.gz",
            "--fixed", tmp_path / "missing2.nii.gz",
            "--out", tmp_path / "o",
        ) == 3


class TestEvaluate:
    def test_report_files(self, cli_workspace, tmp_path):
        out_csv = tmp_path / "report.csv"
        assert run(
            "evaluate", "--checkpoint", cli_workspace["ckpt"],
            "--data", cli_workspace["data"], "--split", "test", "--out", out_csv,
        ) == 0
        with open(out_csv) as fh:
            rows = list(csv.DictReader(fh))
        assert rows[-1]["pair_id"] == "mean"
        assert set(rows[0]) == {
            "pair_id", "dice_avg", "dice_c1", "dice_c2", "dice_c3",
            "hd95_mm", "sdlogj", "nonpos_jac_frac",
        }
        payload = json.loads(out_csv.with_suffix(".json").read_text())
        assert payload["split"] == "test"

    def test_deterministic_reports(self, cli_workspace, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run(
                "evaluate", "--checkpoint", cli_workspace["ckpt"],
                "--data", cli_workspace["data"], "--split", "val", "--out", out,
            ) == 0
        assert a.read_bytes() == b.read_bytes()


class TestSegment:
    def test_probabilities_and_argmax(self, cli_workspace, tmp_path):
        data = cli_workspace["data"]
        manifest = json.loads((data / "manifest.json").read_text())
        subj = manifest["splits"]["test"][0]
        out = tmp_path / "seg.nii.gz"
        assert run(
            "segment", "--checkpoint", cli_workspace["ckpt"],
            "--fixed", data / subj / "es_img.nii.gz", "--out", out,
        ) == 0
        hard = volio.read_volume(out, num_classes=4)
        from memwarp.io import _read_nifti

        soft, _ = _read_nifti(tmp_path / "seg_prob.nii.gz")
        assert soft.shape == (24, 24, 8, 4)
        np.testing.assert_allclose(soft.sum(axis=-1), 1.0, atol=1e-5)
        assert np.array_equal(np.argmax(soft, axis=-1).astype(hard.data.dtype), hard.data)

    def test_reference_dice_logged(self, cli_workspace, tmp_path, caplog):
        data = cli_workspace["data"]
        manifest = json.loads((data / "manifest.json").read_text())
        subj = manifest["splits"]["test"][0]
        import logging

        with caplog.at_level(logging.INFO, logger="memwarp"):
            assert run(
                "segment", "--checkpoint", cli_workspace["ckpt"],
                "--fixed", data / subj / "es_img.nii.gz",
                "--reference-seg", data / subj / "es_seg.nii.gz",
                "--out", tmp_path / "seg.nii.gz",
            ) == 0
        assert any("segmentation dice vs reference" in r.message for r in caplog.records)

    def test_memoryless_checkpoint_rejected(self, cli_workspace, tmp_path):
        rundir = tmp_path / "nomem"
        assert run(
            "train", "--data", cli_workspace["data"], "--out", rundir,
            "--set", "steps=4", "--set", "batch_size=2", "--set", "levels=2",
            "--set", "encoder_channels=[4,8]", "--set", "ablation=2",
        ) == 0
        code = run(
            "segment", "--checkpoint", rundir / "checkpoint.zip",
            "--fixed", cli_workspace["data"] / "subj_000" / "es_img.nii.gz",
            "--out", tmp_path / "seg.nii.gz",
        )
        assert code == 2
