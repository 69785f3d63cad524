import csv
import math

import numpy as np
import pytest

from conftest import structured_image
from diffrestore import dataio
from diffrestore.cli import main

TINY_TRAIN = [
    "--batch-size", "2", "--patch-size", "32", "--T", "10",
    "--base-channels", "8", "--blocks", "1,1,1,1",
    "--prompt-components", "2", "--prompt-spatial", "8,8,8",
    "--timestep-dim", "16", "--checkpoint-every", "0",
]


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_pairs(root, n=2, identical=False):
    clean = root / "clean"
    degraded = root / "degraded"
    clean.mkdir(parents=True)
    degraded.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        img = structured_image(i)
        dataio.save_image(img, clean / f"im{i}.png")
        if identical:
            dataio.save_image(img, degraded / f"im{i}.png")
        else:
            noisy = np.clip(img + 0.1 * rng.standard_normal(img.shape), 0, 1)
            dataio.save_image(noisy, degraded / f"im{i}.png")
    return root


class TestScheduleCommand:
    def test_csv_matches_hand_product(self, tmp_path):
        out = tmp_path / "s.csv"
        code = main(["schedule", "--T", "3", "--beta-start", "0.1",
                     "--beta-end", "0.3", "--out", str(out)])
        assert code == 0
        rows = read_csv(out)
        assert [r["t"] for r in rows] == ["1", "2", "3"]
        expected = [0.9, 0.72, 0.504]
        for row, want in zip(rows, expected):
            assert float(row["alpha_bar"]) == pytest.approx(want, abs=1e-12)
        for row in rows:
            total = float(row["sqrt_alpha_bar"]) ** 2 + \
                float(row["sqrt_one_minus_alpha_bar"]) ** 2
            assert total == pytest.approx(1.0, abs=1e-12)
        assert out.with_suffix(".png").exists()

    def test_no_figure(self, tmp_path):
        out = tmp_path / "s.csv"
        main(["schedule", "--T", "4", "--out", str(out), "--no-figure"])
        assert not out.with_suffix(".png").exists()

    def test_bad_beta_range_is_usage_error(self, tmp_path):
        code = main(["schedule", "--T", "3", "--beta-start", "0.5",
                     "--beta-end", "0.2", "--out", str(tmp_path / "s.csv")])
        assert code == 2


class TestDegradeCommand:
    def test_noise_task_writes_pairs(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        for i in range(2):
            dataio.save_image(structured_image(i), src / f"x{i}.png")
        out = tmp_path / "out"
        code = main(["degrade", "--input", str(src), "--out", str(out),
                     "--task", "noise", "--sigma", "25", "--seed", "1"])
        assert code == 0
        assert sorted(p.name for p in (out / "clean").iterdir()) == \
            sorted(p.name for p in (out / "degraded").iterdir())

    def test_missing_input_is_io_error(self, tmp_path):
        code = main(["degrade", "--input", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o"), "--task", "noise"])
        assert code == 3

    def test_unknown_task_is_usage_error(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        dataio.save_image(structured_image(0), src / "x.png")
        code = main(["degrade", "--input", str(src), "--out",
                     str(tmp_path / "o"), "--task", "blur"])
        assert code == 2


class TestTrainCommand:
    def test_zero_steps_writes_initial_checkpoint(self, tmp_path):
        data = write_pairs(tmp_path / "data")
        out = tmp_path / "run"
        code = main(["train", "--data", str(data), "--out", str(out),
                     "--steps", "0", *TINY_TRAIN])
        assert code == 0
        ckpt = dataio.load_checkpoint(out / "final.tdir")
        assert ckpt.step == 0 and ckpt.adam_step == 0
        assert (out / "log.csv").exists()

    def test_short_run_writes_log_and_figure(self, tmp_path):
        data = write_pairs(tmp_path / "data")
        out = tmp_path / "run"
        code = main(["train", "--data", str(data), "--out", str(out),
                     "--steps", "2", "--seed", "5", *TINY_TRAIN])
        assert code == 0
        rows = read_csv(out / "log.csv")
        assert [r["step"] for r in rows] == ["1", "2"]
        assert all(float(r["loss"]) > 0 for r in rows)
        assert (out / "loss_curve.png").exists()

    def test_missing_data_is_io_error(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o"), "--steps", "0", *TINY_TRAIN])
        assert code == 3


class TestRestoreCommand:
    def test_restore_roundtrip(self, tmp_path):
        data = write_pairs(tmp_path / "data")
        run = tmp_path / "run"
        main(["train", "--data", str(data), "--out", str(run),
              "--steps", "1", *TINY_TRAIN])
        out = tmp_path / "restored"
        code = main(["restore", "--ckpt", str(run / "final.tdir"),
                     "--input", str(data / "degraded"), "--out", str(out),
                     "--tile", "32", "--overlap", "0", "--seed", "2"])
        assert code == 0
        assert sorted(p.name for p in out.iterdir()) == ["im0.png", "im1.png"]

    def test_bad_checkpoint_is_io_error(self, tmp_path):
        bad = tmp_path / "bad.tdir"
        bad.write_bytes(b"garbage that is long enough to read")
        code = main(["restore", "--ckpt", str(bad),
                     "--input", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code == 3


class TestEvalCommand:
    def test_identical_pairs_give_inf_psnr_and_unit_ssim(self, tmp_path):
        data = write_pairs(tmp_path / "data", identical=True)
        out = tmp_path / "m.csv"
        code = main(["eval", "--pairs", str(data), "--out", str(out)])
        assert code == 0
        rows = read_csv(out)
        per_image = [r for r in rows if r["filename"] != "mean"]
        assert len(per_image) == 2
        for row in per_image:
            assert row["psnr"] == "inf"
            assert float(row["ssim"]) == pytest.approx(1.0, abs=1e-9)
        mean_row = rows[-1]
        assert mean_row["filename"] == "mean"
        assert mean_row["psnr"] == "inf"
        assert out.with_suffix(".png").exists()

    def test_separate_dirs(self, tmp_path):
        data = write_pairs(tmp_path / "data")
        out = tmp_path / "m.csv"
        code = main(["eval", "--clean", str(data / "clean"),
                     "--degraded", str(data / "degraded"), "--out", str(out),
                     "--no-figure"])
        assert code == 0
        rows = read_csv(out)
        assert all(math.isfinite(float(r["uiqm"])) for r in rows)

    def test_missing_arguments_usage_error(self, tmp_path):
        code = main(["eval", "--out", str(tmp_path / "m.csv")])
        assert code == 2


class TestCliBasics:
    def test_version_and_help(self, capsys):
        assert main(["--version"]) == 0
        assert "diffrestore" in capsys.readouterr().out
        assert main(["schedule", "--help"]) == 0

    def test_unknown_flag_exits_2(self):
        assert main(["schedule", "--bogus", "1"]) == 2

    def test_unknown_command_exits_2(self):
        assert main(["frobnicate"]) == 2

    def test_config_file_layering(self, tmp_path):
        cfg = tmp_path / "exp.ini"
        cfg.write_text("[schedule]\nT = 4\nbeta_start = 0.2\nbeta_end = 0.2\n")
        out = tmp_path / "s.csv"
        # flag overrides config; config overrides default
        code = main(["schedule", "--config", str(cfg), "--T", "2",
                     "--out", str(out), "--no-figure"])
        assert code == 0
        rows = read_csv(out)
        assert len(rows) == 2
        assert float(rows[0]["beta"]) == pytest.approx(0.2)

    def test_config_parse_failure(self, tmp_path):
        cfg = tmp_path / "broken.ini"
        cfg.write_text("not an ini file [[[")
        code = main(["schedule", "--config", str(cfg),
                     "--out", str(tmp_path / "s.csv")])
        assert code == 2

    def test_missing_config_is_io_error(self, tmp_path):
        code = main(["schedule", "--config", str(tmp_path / "none.ini"),
                     "--out", str(tmp_path / "s.csv")])
        assert code == 3

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "exp.ini"
        cfg.write_text("[schedule]\nbogus = 1\n")
        code = main(["schedule", "--config", str(cfg),
                     "--out", str(tmp_path / "s.csv")])
        assert code == 2
