import numpy as np
import pytest

from blurdm import autodiff as ad
from blurdm import nets


ARCH = nets.Architecture(signal_len=10, latent_dim=6, hidden=12, estimator_hidden=9)


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        nets.MlpSpec((4,), ())
    with pytest.raises(ValueError):
        nets.MlpSpec((4, 3), ("relu", "relu"))
    with pytest.raises(ValueError):
        nets.MlpSpec((4, 3), ("softmax",))
    spec = nets.MlpSpec.uniform(5, 7, 2, 3, act="tanh")
    assert spec.widths == (5, 7, 7, 2)
    assert spec.activations == ("tanh", "tanh", "linear")


def test_init_params_glorot_and_deterministic():
    spec = nets.MlpSpec.uniform(20, 30, 10, 2)
    p = nets.init_params(spec, 3, "x_")
    assert set(p) == {"x_W0", "x_b0", "x_W1", "x_b1"}
    assert p["x_W0"].shape == (30, 20)
    assert np.all(np.abs(p["x_W0"]) <= np.sqrt(6 / 50))
    assert np.all(p["x_b0"] == 0)
    q = nets.init_params(spec, 3, "x_")
    assert all(np.array_equal(p[k], q[k]) for k in p)
    assert not np.array_equal(p["x_W0"], nets.init_params(spec, 4, "x_")["x_W0"])
    assert p.num_params == 30 * 20 + 30 + 10 * 30 + 10


def test_params_copy_is_deep():
    p = nets.init_encoder(ARCH, 0, "se")
    q = p.copy()
    q["se_W0"][0, 0] += 1.0
    assert p["se_W0"][0, 0] != q["se_W0"][0, 0]


def test_encoder_zero_inputs_give_bias_constant():
    p = nets.init_encoder(ARCH, 1, "be")
    p["be_b2"][:] = 0.25
    z = nets.encode(p.consts(), ARCH, np.zeros((3, 10)), name="be").value
    np.testing.assert_array_equal(z, 0.25)


def test_encoder_modes_share_layout():
    p = nets.init_encoder(ARCH, 2, "se")
    B = np.random.default_rng(0).uniform(size=(4, 10))
    nodes = p.consts()
    # blur mode is sharp mode with S := B
    np.testing.assert_array_equal(nets.encode(nodes, ARCH, B, name="se").value,
                                  nets.encode(nodes, ARCH, B, B, name="se").value)
    with pytest.raises(ValueError):
        nets.encode(nodes, ARCH, B, B, B, name="se")


def test_pfm_identity_at_init_bias():
    p = nets.init_pfm(ARCH, 0)
    for k in p:
        if k.startswith("pfm_W"):
            p[k][:] = 0.0
    F = np.random.default_rng(1).standard_normal((2, ARCH.hidden))
    out = nets.pfm_modulate(p.consts(), np.ones((2, ARCH.latent_dim)), F, 0).value
    np.testing.assert_array_equal(out, F)


def test_pfm_affine_per_channel():
    rng = np.random.default_rng(2)
    p = nets.init_pfm(ARCH, 0)
    Z = rng.standard_normal(ARCH.latent_dim)
    F = rng.standard_normal(ARCH.hidden)
    ab = p["pfm_W0"] @ Z + p["pfm_b0"]
    c = ARCH.hidden
    expected = ab[:c] * F + ab[c:]
    np.testing.assert_allclose(nets.pfm_modulate(p.consts(), Z, F, 0).value, expected,
                               rtol=1e-14)
    with pytest.raises(ValueError, match="channels"):
        nets.pfm_modulate(p.consts(), Z, F[:3], 0)


def test_deblur_net_global_skip():
    p = nets.init_deblur(ARCH, 0)
    last = ARCH.deblur_decoder_spec().num_layers - 1
    p[f"net_dec_W{last}"][:] = 0.0
    B = np.random.default_rng(3).uniform(size=(5, 10))
    np.testing.assert_array_equal(nets.deblur_net_forward(p.consts(), ARCH, B).value, B)
    with pytest.raises(ValueError):
        nets.deblur_net_forward(p.consts(), ARCH, B[:, :4])


def test_deblur_net_with_prior_uses_pfm():
    p = nets.Params({**nets.init_deblur(ARCH, 0), **nets.init_pfm(ARCH, 1)})
    B = np.random.default_rng(4).uniform(size=(2, 10))
    Z1 = np.zeros((2, ARCH.latent_dim))
    Z2 = np.ones((2, ARCH.latent_dim))
    o1 = nets.deblur_net_forward(p.consts(), ARCH, B, Z1).value
    o2 = nets.deblur_net_forward(p.consts(), ARCH, B, Z2).value
    assert not np.allclose(o1, o2)


def test_estimators_start_as_zero_maps_and_are_separate():
    p = nets.init_estimators(ARCH, 0)
    Z = np.random.default_rng(5).standard_normal((3, ARCH.latent_dim))
    e, n = nets.estimator_forward(p.consts(), ARCH, Z, 2, Z)
    np.testing.assert_array_equal(e.value, 0)
    np.testing.assert_array_equal(n.value, 0)
    assert {k[:2] for k in p} == {"e_", "n_"}
    assert not np.array_equal(p["e_W0"], p["n_W0"])
    assert ARCH.estimator_spec().num_layers == 6


def test_estimator_depends_on_t():
    rng = np.random.default_rng(6)
    p = nets.init_estimators(ARCH, 0)
    for k in p:
        p[k] = rng.standard_normal(p[k].shape) * 0.3
    Z = rng.standard_normal((3, ARCH.latent_dim))
    e1, _ = nets.estimator_forward(p.consts(), ARCH, Z, 1, Z)
    e2, _ = nets.estimator_forward(p.consts(), ARCH, Z, 2, Z)
    assert not np.allclose(e1.value, e2.value)
    with pytest.raises(ValueError):
        nets.estimator_forward(p.consts(), ARCH, Z, 1, Z[:, :3])


def test_time_embedding():
    emb = nets.time_embedding(0)
    assert emb.shape == (8,)
    np.testing.assert_array_equal(emb, [0, 0, 0, 0, 1, 1, 1, 1])
    assert not np.allclose(nets.time_embedding(1), nets.time_embedding(2))


def test_net_estimator_adapter_matches_nodes():
    rng = np.random.default_rng(7)
    p = nets.init_estimators(ARCH, 1)
    for k in p:
        p[k] = rng.standard_normal(p[k].shape) * 0.2
    Z = rng.standard_normal((2, ARCH.latent_dim))
    e, n = nets.NetEstimator(p, ARCH).estimate(Z, 3, Z * 0.5)
    e2, n2 = nets.estimator_forward(p.consts(), ARCH, ad.const(Z), 3, ad.const(Z * 0.5))
    np.testing.assert_array_equal(e, e2.value)
    np.testing.assert_array_equal(n, n2.value)


def test_end_to_end_net_grad_check():
    arch = nets.Architecture(signal_len=5, latent_dim=3, hidden=4, estimator_hidden=4)
    rng = np.random.default_rng(8)
    B = rng.uniform(size=(2, 5))
    S = rng.uniform(size=(2, 5))
    theta = {**nets.init_deblur(arch, 0), **nets.init_pfm(arch, 1), **nets.init_encoder(arch, 2, "se")}
    theta = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in theta.items()}

    def f(p):
        Z = nets.encode(p, arch, B, S, name="se")
        O = nets.deblur_net_forward(p, arch, B, Z)
        return ad.l2(ad.sub(O, ad.const(S)))

    assert ad.grad_check(f, theta, tol=1e-5).passed
