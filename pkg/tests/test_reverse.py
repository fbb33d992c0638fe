import numpy as np
import pytest

from blurdm.exposure import blur_image, blur_residuals, exposure_trajectory, make_bump_stack, \
    make_texture_stack_2d, sharp_image, uniform_stack
from blurdm.forward import marginal_mean, posterior_params
from blurdm.reverse import (OracleEstimator, ZeroEstimator, init_terminal, manifold_residual,
                            predict_x0, q_sigma_params, reverse_step, sample_chain, sigma_t)
from blurdm.rng import Rng
from blurdm.schedule import build_schedule

SCHEDULES = [build_schedule(5, 0.02), build_schedule(1, 0.05), build_schedule(3, 0.0),
             build_schedule(4, 0.5)]
STACKS = [
    make_bump_stack(64, 12, 8, 0.0, seed=1),
    make_bump_stack(64, 12, 8, 7.5, seed=2),
    make_texture_stack_2d(10, 12, 12, (5.0, 2.0), seed=3),
    uniform_stack(np.full((12, 6), 0.25)),
]


def test_init_terminal():
    B = np.linspace(0, 1, 9)
    out, _ = init_terminal(B, build_schedule(3, 0.0), Rng(0))
    np.testing.assert_array_equal(out, B)
    s = build_schedule(5, 0.02)
    a, _ = init_terminal(B, s, Rng(4))
    b, _ = init_terminal(B, s, Rng(4))
    np.testing.assert_array_equal(a, b)


def test_init_terminal_moments_mc():
    N = 100_000
    s = build_schedule(5, 0.3)
    x, _ = init_terminal(np.full(N, 0.4), s, Rng(9))
    bb = s.beta_bar[-1]
    assert abs(x.mean() - 0.4) <= 4 * bb / np.sqrt(N)
    assert abs(x.var() - bb ** 2) <= 4 * np.sqrt(2 / N) * bb ** 2


@pytest.mark.parametrize("s", SCHEDULES[:2])
def test_predict_x0_inverts_noise_free_marginal(s):
    stack = STACKS[1]
    I0 = sharp_image(stack, s.alpha[0])
    e = blur_residuals(stack, s)
    for t in range(1, s.T + 1):
        I_t = marginal_mean(I0, e, s, t)
        out = predict_x0(I_t, sum(e[:t]), np.zeros_like(I0), s, t)
        np.testing.assert_allclose(out, I0, rtol=0, atol=1e-12)


def test_predict_x0_trivial_cases():
    s = build_schedule(3, 0.0)
    I_t, cum = np.array([0.3, 0.6]), np.array([0.1, 0.2])
    np.testing.assert_allclose(predict_x0(I_t, cum, np.ones(2), s, 2),
                               s.alpha[2] / s.alpha[0] * I_t - cum / s.alpha[0])
    z = np.zeros(4)
    np.testing.assert_array_equal(predict_x0(z, z, z, build_schedule(3, 0.02), 1), 0)


def test_zero_estimator_rescales():
    s = build_schedule(5, 0.02)
    I = np.linspace(-1, 1, 5)
    out, _, _ = reverse_step(I, ZeroEstimator(), I, s, 3, 0.0)
    np.testing.assert_allclose(out, s.alpha[3] / s.alpha[2] * I, rtol=1e-15)


def test_reverse_step_rejects_bad_args():
    s = build_schedule(2, 0.02)
    with pytest.raises(ValueError):
        reverse_step(np.zeros(3), ZeroEstimator(), np.zeros(3), s, 1, eta=1.5)
    with pytest.raises(ValueError):
        reverse_step(np.zeros(3), ZeroEstimator(), np.zeros(3), s, 3, eta=0.0)


@pytest.mark.parametrize("s", SCHEDULES)
@pytest.mark.parametrize("stack", STACKS)
def test_oracle_chain_recovers_sharp_image(s, stack):
    B = blur_image(stack)
    eps = Rng(11).normal(B.shape)
    trace = sample_chain(B, OracleEstimator(stack, s, eps), s, eta=0.0, eps=eps)
    I0 = sharp_image(stack, s.alpha[0])
    e = blur_residuals(stack, s)
    assert np.max(np.abs(trace.final - I0)) <= 1e-10
    # every intermediate state stays on the forward manifold
    for k, state in enumerate(trace.states):
        t = s.T - k
        assert manifold_residual(state, I0, e, eps, s, t) <= 1e-10
    assert len(trace.states) == s.T + 1
    assert len(trace.e_hats) == len(trace.eps_hats) == s.T


def test_oracle_zero_noise_chain_is_reversed_exposure_trajectory():
    s = build_schedule(5, 0.0)
    stack = STACKS[1]
    eps = np.zeros(stack.shape)
    trace = sample_chain(blur_image(stack), OracleEstimator(stack, s, eps), s, eps=eps)
    J = exposure_trajectory(stack, s)
    for k, state in enumerate(trace.states):
        np.testing.assert_allclose(state, J[s.T - k], rtol=0, atol=1e-12)


def test_oracle_estimator_constant_stack():
    s = build_schedule(5, 0.02)
    stack = uniform_stack(np.full((12, 3), 0.5))
    est = OracleEstimator(stack, s, np.zeros(3))
    for t in range(1, 6):
        e, n = est.estimate(None, t, None)
        np.testing.assert_allclose(e, (s.alpha[t] - s.alpha[t - 1]) * 0.5, rtol=1e-13)
        np.testing.assert_array_equal(n, 0)
    with pytest.raises(ValueError):
        OracleEstimator(stack, s, np.zeros(4))


def test_sigma_interpolation():
    s = build_schedule(5, 0.3)
    for t in range(1, 6):
        assert sigma_t(s, t, 0.0) == 0.0
        if t > 1:
            assert sigma_t(s, t, 1.0) ** 2 == pytest.approx(posterior_params(0, 0, [0] * 5, s, t)[1],
                                                            rel=1e-14)
        assert sigma_t(s, 1, 1.0) == 0.0


def test_q_sigma_eta0_mean_identity_is_exact():
    s = build_schedule(4, 0.3)
    I0, e = 0.4, [0.1, 0.3, 0.05, 0.2]
    for t in range(1, 5):
        I_t = marginal_mean(np.array(I0), e, s, t)
        mean, sig = q_sigma_params(I_t, I0, e, s, t, 0.0)
        assert sig == 0.0
        assert mean == pytest.approx(marginal_mean(np.array(I0), e, s, t - 1), abs=1e-14)


@pytest.mark.parametrize("eta", [0.0, 0.5, 1.0])
def test_reverse_step_with_true_quantities_preserves_marginal_mc(eta):
    """Generic reverse_step fed the true residual and true noise preserves the t-1 marginal."""
    N = 100_000
    s = build_schedule(4, 0.3)
    I0, e = 0.4, [0.1, 0.3, 0.05, 0.2]
    rng = Rng(21)
    for t in range(1, 5):
        eps = rng.split(("eps", t)).normal(N)
        I_t = marginal_mean(np.full(N, I0), e, s, t) + s.beta_bar[t] * eps

        class TrueEstimator:
            def estimate(self, I, tt, B):
                return np.full(N, e[tt - 1]), eps

        out, _, _ = reverse_step(I_t, TrueEstimator(), None, s, t, eta, rng.split(("z", t)))
        m = float(marginal_mean(np.array(I0), e, s, t - 1))
        v = s.beta_bar[t - 1] ** 2
        if v == 0:
            assert np.max(np.abs(out - m)) <= 1e-12
            continue
        assert abs(out.mean() - m) <= 4 * np.sqrt(v / N)
        assert abs(out.var() - v) <= 4 * np.sqrt(2 / N) * v


def test_reverse_step_eta1_matches_q_sigma_direct():
    s = build_schedule(3, 0.2)
    I0, e = np.array([0.3, 0.7]), [np.array([0.1, 0.0]), np.array([0.2, 0.1]), np.array([0.0, 0.3])]
    eps = np.array([0.5, -1.2])
    t = 2
    I_t = marginal_mean(I0, e, s, t) + s.beta_bar[t] * eps

    class TrueEstimator:
        def estimate(self, I, tt, B):
            return e[tt - 1], eps

    out, _, _ = reverse_step(I_t, TrueEstimator(), None, s, t, 1.0, Rng(3))
    mean, sig = q_sigma_params(I_t, I0, e, s, t, 1.0)
    z = Rng(3).normal(2)
    np.testing.assert_allclose(out, mean + sig * z, rtol=0, atol=1e-13)
