import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from blurdm import persist
from blurdm.io import read_bdm1, read_pgm, write_bdm1, write_pgm
from blurdm.nets import Params
from blurdm.schedule import build_schedule
from blurdm.train import Checkpoint, TrainConfig

finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=9), elements=finite))
def test_bdm1_round_trip_bit_exact(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("bdm") / "x.bdm"
    write_bdm1(path, x)
    y = read_bdm1(path)
    assert y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_bdm1_header_layout(tmp_path):
    path = tmp_path / "a.bdm"
    write_bdm1(path, np.arange(6.0).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:4] == b"BDM1"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [2, 2, 3]
    assert len(raw) == 16 + 48
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_bdm1(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_bdm1(path)


def test_pgm_round_trip_within_quantization(tmp_path):
    x = np.random.default_rng(0).uniform(-0.3, 1.7, (5, 7))
    write_pgm(tmp_path / "a.pgm", x)
    y = read_pgm(tmp_path / "a.pgm")
    assert y.shape == x.shape
    assert np.max(np.abs(x - y)) <= 2.0 / 65535 / 2 + 1e-12
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n# range ")


def test_pgm_constant_and_1d(tmp_path):
    write_pgm(tmp_path / "c.pgm", np.full(4, 0.5))
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), np.full((1, 4), 0.5))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "d.pgm", np.zeros((2, 2, 2)))


# ----------------------------------------------------------------------------- config

def test_config_defaults_round_trip():
    cfg = TrainConfig()
    text = persist.format_config(cfg)
    cfg2, extra = persist.parse_config(text)
    assert cfg2 == cfg
    assert extra == {"out_dir": "out"}
    assert persist.format_config(cfg2) == text


def test_config_parse_comments_and_overrides():
    cfg, extra = persist.parse_config(
        "# toy\n\nT = 2\nlr = 3e-4   # slower\naux_losses = true\ngenerator = texture2d\n"
        "out_dir = runs/a\n")
    assert cfg.T == 2 and cfg.lr == 3e-4 and cfg.aux_losses and cfg.generator == "texture2d"
    assert extra["out_dir"] == "runs/a"


@pytest.mark.parametrize("text, match", [
    ("bogus = 1\n", "unknown key"),
    ("T 5\n", "key = value"),
    ("T = five\n", "cannot parse"),
    ("T = 1\nT = 2\n", "duplicate"),
    ("lr = -1\n", "lr"),
    ("aux_losses = maybe\n", "cannot parse"),
])
def test_config_rejects(text, match):
    with pytest.raises(persist.ConfigError, match=match):
        persist.parse_config(text)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(0, 9), lr=st.floats(1e-6, 1.0), seed=st.integers(0, 2 ** 31),
       beta=st.floats(0, 1), aux=st.booleans(), out=st.sampled_from(["out", "a/b", "x y"]))
def test_config_round_trip_idempotent(T, lr, seed, beta, aux, out):
    cfg = TrainConfig(T=T, lr=lr, seed=seed, beta_max=beta, aux_losses=aux)
    text = persist.format_config(cfg, {"out_dir": out})
    cfg2, extra = persist.parse_config(text)
    assert cfg2 == cfg and extra["out_dir"] == out
    assert persist.format_config(cfg2, extra) == text


# ----------------------------------------------------------------------------- checkpoint

def _checkpoint(T=3):
    rng = np.random.default_rng(0)
    blocks = {"se": Params({"se_W0": rng.standard_normal((4, 6)), "se_b0": rng.standard_normal(4)}),
              "est": Params({"e_W0": rng.standard_normal((2, 3))})}
    history = [(1, 0, "prior", 0.1 / 3), (1, 0, "baseline", np.pi), (2, 0, "prior", 1e-300)]
    s = build_schedule(T, 0.0123) if T else None
    return Checkpoint(TrainConfig(T=T, epochs1=7), 2, blocks, s, history, rng.standard_normal((5, 4)))


@pytest.mark.parametrize("T", [0, 1, 3])
def test_checkpoint_round_trip_bit_exact(tmp_path, T):
    ckpt = _checkpoint(T)
    path = tmp_path / "c.bdmckpt"
    persist.save_checkpoint(path, ckpt)
    back = persist.load_checkpoint(path)
    assert back.config == ckpt.config and back.stage == 2
    assert back.history == ckpt.history
    assert back.zs_targets.tobytes() == ckpt.zs_targets.tobytes()
    assert set(back.blocks) == set(ckpt.blocks)
    for name, block in ckpt.blocks.items():
        for k, v in block.items():
            assert back.blocks[name][k].tobytes() == v.tobytes()
            assert back.blocks[name][k].shape == v.shape
    if T:
        for attr in ("alpha", "beta", "beta_bar"):
            assert getattr(back.schedule, attr).tobytes() == getattr(ckpt.schedule, attr).tobytes()
    else:
        assert back.schedule is None
    # saving the loaded checkpoint reproduces the file byte for byte
    persist.save_checkpoint(tmp_path / "d.bdmckpt", back)
    assert (tmp_path / "d.bdmckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "c.bdmckpt"
    persist.save_checkpoint(path, _checkpoint())
    raw = bytearray(path.read_bytes())
    assert raw[:8] == b"BDMCKPT1" and raw[8] == persist.CKPT_VERSION
    bad = bytearray(raw)
    bad[8] = 99
    path.write_bytes(bytes(bad))
    with pytest.raises(ValueError, match="version"):
        persist.load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(ValueError, match="magic"):
        persist.load_checkpoint(path)
    path.write_bytes(bytes(raw) + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        persist.load_checkpoint(path)


def test_history_csv_round_trip():
    rows = [(3, 12, "blurdm", 0.1 + 0.2), (1, 0, "prior", 5e-324)]
    assert persist.parse_history(persist.history_csv(rows)) == rows
