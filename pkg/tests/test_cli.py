import csv
import re

import numpy as np
import pytest

from blurdm import cli, persist, train, verify
from blurdm.io import read_bdm1

TINY_CFG = """\
epochs1 = 3
epochs2 = 3
epochs3 = 3
batch_size = 8
n_train = 24
n_test = 8
signal_len = 16
bump_width = 3.0
velocity_min = 1.0
velocity_max = 3.0
latent_dim = 8
hidden = 12
T = 3
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_files_and_identity(tmp_path, cfg_file, capsys):
    out = tmp_path / "synth"
    code, stdout, _ = run(capsys, "synth", "--config", cfg_file, "--out", out)
    assert code == 0
    err = float(re.search(r"error: (\S+)", stdout).group(1))
    assert err <= 1e-12
    rows = list(csv.DictReader(open(out / "index.csv")))
    assert len(rows) == 12 + 2 + 3
    for row in rows:
        assert (out / row["pgm"]).exists() and (out / row["bdm"]).exists()
    first = read_bdm1(out / "blur.bdm")
    run(capsys, "synth", "--config", cfg_file, "--out", out)
    assert read_bdm1(out / "blur.bdm").tobytes() == first.tobytes()
    run(capsys, "synth", "--config", cfg_file, "--out", out, "--seed", 5)
    assert read_bdm1(out / "blur.bdm").tobytes() != first.tobytes()


def test_synth_static_scene_blur_equals_sharp(tmp_path, capsys):
    cfg = tmp_path / "static.cfg"
    cfg.write_text(TINY_CFG.replace("velocity_min = 1.0", "velocity_min = 0")
                   .replace("velocity_max = 3.0", "velocity_max = 0"))
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path)[0] == 0
    # equal up to summation order (12-frame versus 2-frame average)
    np.testing.assert_allclose(read_bdm1(tmp_path / "blur.bdm"), read_bdm1(tmp_path / "sharp.bdm"),
                               rtol=0, atol=1e-15)


def test_forward_writes_T_steps(tmp_path, cfg_file, capsys):
    code, _, _ = run(capsys, "forward", "--config", cfg_file, "--out", tmp_path)
    assert code == 0
    assert len(list(tmp_path.glob("forward_*.pgm"))) == 3
    assert len((tmp_path / "forward_norms.csv").read_text().splitlines()) == 1 + 4


@pytest.mark.parametrize("eta", ["0", "0.5", "1"])
def test_reverse_oracle_exact(tmp_path, cfg_file, capsys, eta):
    code, stdout, _ = run(capsys, "reverse", "--config", cfg_file, "--out", tmp_path, "--eta", eta)
    assert code == 0
    err = float(re.search(r"I0: (\S+)", stdout).group(1))
    if eta == "0":
        assert err <= 1e-10
    assert len(list(tmp_path.glob("reverse_*.pgm"))) == 4


def test_usage_errors(tmp_path, cfg_file, capsys):
    assert run(capsys, "reverse", "--config", cfg_file, "--out", tmp_path, "--eta", "1.5")[0] == 1
    assert run(capsys, "reverse", "--out", tmp_path, "--estimator", "ckpt")[0] == 1
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "synth", "--nope")[0] == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    code, _, err = run(capsys, "synth", "--config", bad)
    assert code == 1 and "unknown key" in err
    assert run(capsys, "synth", "--config", tmp_path / "missing.cfg")[0] == 1
    t0 = tmp_path / "t0.cfg"
    t0.write_text("T = 0\n")
    assert run(capsys, "forward", "--config", t0, "--out", tmp_path)[0] == 1


def test_config_subcommand_round_trip(tmp_path, cfg_file, capsys):
    code, stdout, _ = run(capsys, "config", "--config", cfg_file, "--seed", 9, "--out", "x")
    assert code == 0
    cfg, extra = persist.parse_config(stdout)
    assert cfg.seed == 9 and cfg.T == 3 and extra["out_dir"] == "x"


def test_train_requires_previous_stage(tmp_path, cfg_file, capsys):
    code, _, err = run(capsys, "train", "3", "--config", cfg_file, "--out", tmp_path)
    assert code == 1 and "stage-2" in err


def test_train_divergence_exit_code(tmp_path, cfg_file, capsys, monkeypatch):
    def boom(cfg, data):
        raise train.TrainingDiverged("loss became nan")
    monkeypatch.setattr(train, "stage1", boom)
    assert run(capsys, "train", "1", "--config", cfg_file, "--out", tmp_path)[0] == 3


def test_train_all_resume_eval(tmp_path, cfg_file, capsys):
    full, split = tmp_path / "full", tmp_path / "split"
    assert run(capsys, "train", "all", "--config", cfg_file, "--out", full)[0] == 0
    for n in (1, 2, 3):
        assert (full / f"ckpt_stage{n}.bdmckpt").exists()
        assert (full / f"loss_stage{n}.csv").exists()
    # stage-by-stage with checkpoints on disk continues identically
    assert run(capsys, "train", "1", "--config", cfg_file, "--out", split)[0] == 0
    assert run(capsys, "train", "2", "--config", cfg_file, "--out", split)[0] == 0
    assert run(capsys, "train", "3", "--config", cfg_file, "--out", tmp_path / "other",
               "--from", split / "ckpt_stage2.bdmckpt")[0] == 0
    assert ((tmp_path / "other" / "ckpt_stage3.bdmckpt").read_bytes()
            == (full / "ckpt_stage3.bdmckpt").read_bytes())
    assert run(capsys, "train", "3", "--config", cfg_file, "--out", split,
               "--from", split / "ckpt_stage1.bdmckpt")[0] == 1

    ckpt = full / "ckpt_stage3.bdmckpt"
    code, stdout, _ = run(capsys, "eval", "--ckpt", ckpt, "--out", tmp_path / "ev")
    assert code == 0 and "psnr_blurdm" in stdout
    rows = list(csv.reader(open(tmp_path / "ev" / "metrics.csv")))
    assert len(rows) == 1 + 8 + 1 and rows[-1][0] == "mean"
    per = np.array([[float(v) for v in r[1:]] for r in rows[1:-1]])
    np.testing.assert_allclose(per[:, 3:], 10 * np.log10(1 / per[:, :3]), rtol=1e-12)
    first = (tmp_path / "ev" / "metrics.csv").read_bytes()
    run(capsys, "eval", "--ckpt", ckpt, "--out", tmp_path / "ev")
    assert (tmp_path / "ev" / "metrics.csv").read_bytes() == first
    assert run(capsys, "eval", "--ckpt", full / "ckpt_stage1.bdmckpt", "--out", tmp_path)[0] == 1

    code, _, _ = run(capsys, "reverse", "--estimator", "ckpt", "--ckpt", ckpt,
                     "--out", tmp_path / "rev")
    assert code == 0
    assert (tmp_path / "rev" / "output.pgm").exists()
    assert len(list((tmp_path / "rev").glob("reverse_*.pgm"))) == 4


def test_verify_exit_codes(tmp_path, capsys):
    code, stdout, _ = run(capsys, "verify", "--out", tmp_path)
    assert code == 0 and "FAIL" not in stdout
    rows = (tmp_path / "verify.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + len(verify.CHECKS)
    code, stdout, _ = run(capsys, "verify", "--out", tmp_path, "--negative-controls")
    assert code == 2 and "PASS" not in stdout
