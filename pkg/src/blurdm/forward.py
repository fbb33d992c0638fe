"""Forward dual noise-and-blur diffusion.

Marginals use the ``(alpha_0 / alpha_t) I_0`` weighting on the sharp image
throughout; with it the terminal mean is exactly the blurred image ``B``.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .schedule import Schedule


def _check_t(s: Schedule, t: int, lo: int = 1) -> None:
    if not lo <= t <= s.T:
        raise ValueError(f"t must lie in {lo}..{s.T}, got {t}")


def _check_shapes(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def transition_mean(I_prev, e_t, s: Schedule, t: int):
    return (s.alpha[t - 1] / s.alpha[t]) * I_prev + e_t / s.alpha[t]


def forward_step(I_prev, e_t, s: Schedule, t: int, rng: Rng | None = None, eps=None):
    """One forward transition. Returns ``(I_t, eps)`` so callers can reuse the drawn noise."""
    _check_t(s, t)
    I_prev = np.asarray(I_prev, dtype=np.float64)
    e_t = np.asarray(e_t, dtype=np.float64)
    _check_shapes(I_prev, e_t)
    if eps is None:
        eps = rng.normal(I_prev.shape)
    _check_shapes(I_prev, eps)
    return transition_mean(I_prev, e_t, s, t) + s.beta_at(t) * eps, eps


def marginal_mean(I0, e, s: Schedule, t: int):
    """``(alpha_0 / alpha_t) I_0 + (1 / alpha_t) sum_{i<=t} e_i``."""
    I0 = np.asarray(I0, dtype=np.float64)
    total = np.zeros_like(I0)
    for i in range(t):
        total = total + e[i]
    return (s.alpha[0] / s.alpha[t]) * I0 + total / s.alpha[t]


def forward_marginal(I0, e, s: Schedule, t: int, rng: Rng | None = None, eps=None):
    """Sample ``I_t`` in one shot from ``N(marginal_mean, beta_bar_t^2)``. Returns ``(I_t, eps)``."""
    _check_t(s, t, lo=0)
    if len(e) < t:
        raise ValueError(f"need at least {t} residuals, got {len(e)}")
    I0 = np.asarray(I0, dtype=np.float64)
    _check_shapes(I0, *e[:t])
    if eps is None:
        eps = rng.normal(I0.shape)
    return marginal_mean(I0, e, s, t) + s.beta_bar[t] * eps, eps


def forward_chain(I0, e, s: Schedule, rng: Rng | None = None, eps_list=None):
    """Compose ``forward_step`` for t = 1..T. Returns states I_0..I_T and the per-step noises."""
    states = [np.asarray(I0, dtype=np.float64)]
    noises = []
    for t in range(1, s.T + 1):
        eps = None if eps_list is None else eps_list[t - 1]
        I_t, eps = forward_step(states[-1], e[t - 1], s, t, rng, eps=eps)
        states.append(I_t)
        noises.append(eps)
    return states, noises


def posterior_variance(s: Schedule, t: int) -> float:
    _check_t(s, t)
    if s.beta_bar[t] == 0:
        raise ValueError("degenerate posterior: beta_bar_t = 0")
    return float(s.beta_at(t) ** 2 * s.beta_bar[t - 1] ** 2 / s.beta_bar[t] ** 2)


def posterior_params(I_t, I0, e, s: Schedule, t: int):
    """Mean and variance of ``q(I_{t-1} | I_t, I_0, e_{1:t})``.

    Precision-weighted combination of the transition at ``t`` (viewed as a
    likelihood in ``I_{t-1}``) and the marginal at ``t - 1``.
    """
    var = posterior_variance(s, t)
    prior_mean = marginal_mean(I0, e, s, t - 1)
    if s.beta_bar[t - 1] == 0:
        return prior_mean, 0.0
    if s.beta_at(t) == 0:
        # Noise-free transition: I_{t-1} is pinned by inverting it.
        a = s.alpha[t - 1] / s.alpha[t]
        return (np.asarray(I_t) - e[t - 1] / s.alpha[t]) / a, 0.0
    a = s.alpha[t - 1] / s.alpha[t]
    b2 = s.beta_at(t) ** 2
    bb2 = s.beta_bar[t - 1] ** 2
    weighted = a * (np.asarray(I_t) - e[t - 1] / s.alpha[t]) / b2 + prior_mean / bb2
    return var * weighted, var
