"""Reverse dual denoising-and-deblurring process."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .exposure import FrameStack, blur_residuals
from .forward import marginal_mean
from .rng import Rng
from .schedule import Schedule, reverse_coefficients


class ResidualEstimator(Protocol):
    def estimate(self, I_t: np.ndarray, t: int, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(e_hat, eps_hat)``: the step-``t`` blur residual and the noise."""
        ...


@dataclass
class ReverseTrace:
    states: list = field(default_factory=list)  # I_T, I_{T-1}, ..., I_0
    e_hats: list = field(default_factory=list)  # per step, in visiting order t = T..1
    eps_hats: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def init_terminal(B, s: Schedule, rng: Rng | None = None, eps=None):
    """``I_T = B + beta_bar_T * eps``. Returns ``(I_T, eps)``."""
    B = np.asarray(B, dtype=np.float64)
    if eps is None:
        eps = rng.normal(B.shape)
    return B + s.beta_bar[s.T] * eps, eps


def predict_x0(I_t, cum_e_hat, eps_hat, s: Schedule, t: int):
    """Sharp-image estimate from a state, its cumulative residual and its noise."""
    if not 1 <= t <= s.T:
        raise ValueError(f"t must lie in 1..{s.T}, got {t}")
    a0, at = s.alpha[0], s.alpha[t]
    return (at / a0) * I_t - cum_e_hat / a0 - (at / a0) * s.beta_bar[t] * eps_hat


def sigma_t(s: Schedule, t: int, eta: float) -> float:
    """Implicit-sampler noise std: ``sqrt(eta * beta_t^2 beta_bar_{t-1}^2 / beta_bar_t^2)``."""
    if s.beta_bar[t] == 0:
        return 0.0
    return float(np.sqrt(eta * s.beta_at(t) ** 2 * s.beta_bar[t - 1] ** 2 / s.beta_bar[t] ** 2))


def q_sigma_params(I_t, I0, e, s: Schedule, t: int, eta: float):
    """Mean and std of the implicit transition given a sharp image and residuals ``e_{1:t}``.

    This is the generic form, used with ground-truth ``I_0`` and ``e`` to check
    that the sampler preserves the forward marginals.
    """
    sig = sigma_t(s, t, eta)
    prev = marginal_mean(I0, e, s, t - 1)
    if s.beta_bar[t] == 0:
        return prev, sig
    direction = (np.asarray(I_t) - marginal_mean(I0, e, s, t)) / s.beta_bar[t]
    coef = np.sqrt(max(s.beta_bar[t - 1] ** 2 - sig ** 2, 0.0))
    return prev + coef * direction, sig


def _check_eta(eta: float) -> None:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")


def reverse_step(I_t, est: ResidualEstimator, B, s: Schedule, t: int, eta: float = 0.0,
                 rng: Rng | None = None):
    """One reverse step. Returns ``(I_{t-1}, e_hat, eps_hat)``.

    Substituting the sharp-image estimate into the implicit transition, the
    cumulative residuals cancel and only the step-``t`` residual survives:

        I_{t-1} = (a_t/a_{t-1}) I_t - e_hat/a_{t-1}
                  - (a_t bb_t / a_{t-1} - sqrt(bb_{t-1}^2 - sigma_t^2)) eps_hat + sigma_t z
    """
    _check_eta(eta)
    c_img, c_blur, c_noise = reverse_coefficients(s, t)
    e_hat, eps_hat = est.estimate(I_t, t, B)
    if eta == 0.0:
        return c_img * I_t - c_blur * e_hat - c_noise * eps_hat, e_hat, eps_hat
    sig = sigma_t(s, t, eta)
    direction = np.sqrt(max(s.beta_bar[t - 1] ** 2 - sig ** 2, 0.0))
    c_noise = s.alpha[t] * s.beta_bar[t] / s.alpha[t - 1] - direction
    out = c_img * I_t - c_blur * e_hat - c_noise * eps_hat
    if sig > 0:
        out = out + sig * rng.normal(np.shape(I_t))
    return out, e_hat, eps_hat


def sample_chain(B, est: ResidualEstimator, s: Schedule, eta: float = 0.0,
                 rng: Rng | None = None, eps=None) -> ReverseTrace:
    """Draw ``I_T`` around ``B`` and run reverse steps t = T..1."""
    _check_eta(eta)
    rng = rng if rng is not None else Rng(0)
    I, _ = init_terminal(B, s, rng.split("terminal"), eps=eps)
    trace = ReverseTrace(states=[I])
    step_rng = rng.split("steps")
    for t in range(s.T, 0, -1):
        I, e_hat, eps_hat = reverse_step(I, est, B, s, t, eta, step_rng)
        trace.states.append(I)
        trace.e_hats.append(e_hat)
        trace.eps_hats.append(eps_hat)
    return trace


class OracleEstimator:
    """Returns the true residual ``e_t`` of a frame stack and a fixed noise, ignoring ``I_t``."""

    def __init__(self, stack: FrameStack, s: Schedule, fixed_eps):
        self.residuals = blur_residuals(stack, s)
        self.fixed_eps = np.asarray(fixed_eps, dtype=np.float64)
        if self.fixed_eps.shape != stack.shape:
            raise ValueError("fixed_eps must match the stack signal shape")

    def estimate(self, I_t, t, B):
        return self.residuals[t - 1], self.fixed_eps


def oracle_estimator(stack: FrameStack, s: Schedule, fixed_eps) -> OracleEstimator:
    return OracleEstimator(stack, s, fixed_eps)


class ZeroEstimator:
    def estimate(self, I_t, t, B):
        z = np.zeros(np.shape(I_t))
        return z, z


def manifold_residual(I_t, I0, e, eps, s: Schedule, t: int) -> float:
    """Max-abs distance of ``I_t`` from ``marginal_mean + beta_bar_t * eps``."""
    target = marginal_mean(I0, e, s, t) + s.beta_bar[t] * eps
    return float(np.max(np.abs(np.asarray(I_t) - target)))
