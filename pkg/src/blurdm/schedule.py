"""Exposure/noise schedule for the dual blur-and-noise diffusion.

A schedule holds the exposure fractions ``alpha[0..T]``, the per-step noise
scales ``beta[1..T]`` (stored zero-based as ``beta[t - 1]``) and the
accumulated noise scales ``beta_bar[0..T]`` of the one-step marginal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    T: int
    alpha: np.ndarray
    beta: np.ndarray
    beta_bar: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "beta_bar"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def beta_at(self, t: int) -> float:
        """Noise scale of forward step ``t`` (1-based)."""
        return float(self.beta[t - 1])

    def with_beta_bar(self, beta_bar) -> "Schedule":
        return Schedule(self.T, self.alpha, self.beta, np.asarray(beta_bar, dtype=np.float64))


def accumulated_beta(alpha, beta) -> np.ndarray:
    """beta_bar_t = sqrt(sum_{i<=t} (alpha_i / alpha_t)^2 beta_i^2), evaluated as a direct sum."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    T = len(beta)
    out = np.zeros(T + 1)
    for t in range(1, T + 1):
        ratios = alpha[1 : t + 1] / alpha[t]
        out[t] = np.sqrt(np.sum((ratios * beta[:t]) ** 2))
    return out


def build_schedule(T: int, beta_max: float = 0.02, alpha_min: float | None = None,
                   alpha_max: float = 1.0) -> Schedule:
    """Linear ramps: ``beta_t = beta_max * t / T`` and alpha uniform on [alpha_min, alpha_max].

    ``alpha_min`` defaults to ``1 / (T + 1)`` so that ``alpha_t = (t + 1) / (T + 1)``
    when ``alpha_max = 1``; it must be strictly positive because ``alpha_0``
    appears in denominators of the reverse process.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if alpha_min is None:
        alpha_min = 1.0 / (T + 1)
    if alpha_min <= 0:
        raise ValueError("alpha_min must be > 0 (alpha_0 divides the reverse step)")
    if alpha_min >= alpha_max:
        raise ValueError("alpha_min must be < alpha_max")
    if beta_max < 0:
        raise ValueError("beta_max must be >= 0")
    steps = np.arange(T + 1, dtype=np.float64)
    alpha = alpha_min + (alpha_max - alpha_min) * steps / T
    beta = beta_max * steps[1:] / T
    return Schedule(T, alpha, beta, accumulated_beta(alpha, beta))


def reverse_coefficients(s: Schedule, t: int) -> tuple[float, float, float]:
    """Coefficients of the deterministic reverse step.

    ``I_{t-1} = c_img * I_t - c_blur * e_hat - c_noise * eps_hat``.
    """
    if not 1 <= t <= s.T:
        raise ValueError(f"t must lie in 1..{s.T}, got {t}")
    a_t, a_prev = s.alpha[t], s.alpha[t - 1]
    c_img = a_t / a_prev
    c_blur = 1.0 / a_prev
    c_noise = a_t * s.beta_bar[t] / a_prev - s.beta_bar[t - 1]
    return float(c_img), float(c_blur), float(c_noise)


def validate(s: Schedule, rtol: float = 1e-12) -> str | None:
    """Return the name of the first violated invariant, or ``None`` when valid."""
    a, b, bb = s.alpha, s.beta, s.beta_bar
    if s.T < 1 or a.shape != (s.T + 1,) or b.shape != (s.T,) or bb.shape != (s.T + 1,):
        return "array lengths"
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(bb))):
        return "finite values"
    if a[0] <= 0:
        return "alpha strictly positive"
    if np.any(np.diff(a) <= 0):
        return "alpha strictly increasing"
    if np.any(b < 0):
        return "beta nonnegative"
    if bb[0] != 0:
        return "beta_bar zero at t=0"
    for t in range(1, s.T + 1):
        rec = (a[t - 1] / a[t]) ** 2 * bb[t - 1] ** 2 + b[t - 1] ** 2
        lhs = bb[t] ** 2
        if abs(lhs - rec) > rtol * max(abs(rec), np.finfo(float).tiny):
            return "beta_bar recursion"
    return None
