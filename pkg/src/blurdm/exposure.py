"""Blur synthesis by exposure integration of sharp-frame stacks.

A :class:`FrameStack` samples the instantaneous radiance ``H(tau)`` at the
left endpoints of a partition of ``[0, total_exposure]``; every integral is
the piecewise-constant quadrature of that partition. With this rule the
decomposition ``B = (alpha_0 / alpha_T) I_0 + (1 / alpha_T) sum_t e_t``
holds to rounding error rather than only in the continuum limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .schedule import Schedule


def check_signal(x, name: str = "signal") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.size == 0:
        raise ValueError(f"{name} must be a non-empty 1D or 2D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


@dataclass(frozen=True)
class FrameStack:
    frames: np.ndarray  # (K, *signal_shape)
    tau_grid: np.ndarray  # (K,) left endpoints, tau_grid[0] == 0
    total_exposure: float

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        tau = np.array(self.tau_grid, dtype=np.float64)
        if frames.ndim not in (2, 3):
            raise ValueError("frames must have shape (K, length) or (K, height, width)")
        K = frames.shape[0]
        if K < 2:
            raise ValueError("a frame stack needs at least 2 frames")
        if tau.shape != (K,):
            raise ValueError(f"tau_grid must have {K} entries, got {tau.shape}")
        if tau[0] != 0.0 or np.any(np.diff(tau) <= 0):
            raise ValueError("tau_grid must start at 0 and be strictly increasing")
        if not tau[-1] < self.total_exposure:
            raise ValueError("last tau must lie below total_exposure")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        frames.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "tau_grid", tau)
        object.__setattr__(self, "total_exposure", float(self.total_exposure))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple:
        return self.frames.shape[1:]

    @property
    def edges(self) -> np.ndarray:
        return np.append(self.tau_grid, self.total_exposure)


def uniform_stack(frames, total_exposure: float = 1.0) -> FrameStack:
    frames = np.asarray(frames, dtype=np.float64)
    K = frames.shape[0]
    return FrameStack(frames, np.arange(K) * (total_exposure / K), total_exposure)


def integrate(stack: FrameStack, tau0: float, tau1: float) -> np.ndarray:
    """Integral of ``H`` over ``[tau0, tau1]`` under the left-endpoint rule."""
    if not 0.0 <= tau0 <= tau1 <= stack.total_exposure * (1 + 1e-12):
        raise ValueError(
            f"bounds [{tau0}, {tau1}] must satisfy 0 <= tau0 <= tau1 <= {stack.total_exposure}")
    edges = stack.edges
    lo = np.maximum(edges[:-1], tau0)
    hi = np.minimum(edges[1:], tau1)
    weights = np.clip(hi - lo, 0.0, None)
    return np.tensordot(weights, stack.frames, axes=(0, 0))


def blur_image(stack: FrameStack) -> np.ndarray:
    return integrate(stack, 0.0, stack.total_exposure) / stack.total_exposure


def sharp_image(stack: FrameStack, alpha0: float) -> np.ndarray:
    if alpha0 <= 0:
        raise ValueError("alpha0 must be > 0")
    if alpha0 > stack.total_exposure * (1 + 1e-12):
        raise ValueError("alpha0 exceeds the total exposure")
    return integrate(stack, 0.0, alpha0) / alpha0


def blur_residuals(stack: FrameStack, s: Schedule) -> list[np.ndarray]:
    """Unnormalized residual integrals ``e_t`` over ``[alpha_{t-1}, alpha_t]``, t = 1..T."""
    if not np.isclose(s.alpha[-1], stack.total_exposure, rtol=1e-12, atol=0.0):
        raise ValueError(
            f"schedule alpha_T={s.alpha[-1]} does not match total exposure {stack.total_exposure}")
    return [integrate(stack, s.alpha[t - 1], min(s.alpha[t], stack.total_exposure))
            for t in range(1, s.T + 1)]


def exposure_trajectory(stack: FrameStack, s: Schedule) -> list[np.ndarray]:
    """Noise-free states ``J_t = (1 / alpha_t) int_0^{alpha_t} H`` for t = 0..T."""
    return [integrate(stack, 0.0, min(a, stack.total_exposure)) / a for a in s.alpha]


def exposure_identity_error(stack: FrameStack, s: Schedule) -> float:
    """Max-abs of ``B - [(alpha_0/alpha_T) I_0 + (1/alpha_T) sum_t e_t]``."""
    B = blur_image(stack)
    I0 = sharp_image(stack, s.alpha[0])
    e = blur_residuals(stack, s)
    aT = s.alpha[-1]
    recon = (s.alpha[0] / aT) * I0 + sum(e) / aT
    return float(np.max(np.abs(B - recon)))


def make_bump_stack(length: int, num_frames: int, bump_width: float, velocity: float,
                    seed: int) -> FrameStack:
    """Gaussian bump translating at ``velocity`` samples per unit exposure, wrapping circularly.

    ``bump_width`` is the full width at half maximum. Position and amplitude
    are drawn from ``seed``; the total exposure is 1.
    """
    if length < 2 or num_frames < 2:
        raise ValueError("length and num_frames must be >= 2")
    if not 0 < bump_width < length:
        raise ValueError("bump_width must lie in (0, length)")
    rng = Rng(seed).split("bump")
    x0 = rng.uniform(0.0, length)
    amp = rng.uniform(0.5, 1.0)
    sigma = bump_width / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    tau = np.arange(num_frames) / num_frames
    xs = np.arange(length, dtype=np.float64)
    frames = np.empty((num_frames, length))
    for k, tk in enumerate(tau):
        centre = (x0 + velocity * tk) % length
        d = (xs - centre + length / 2.0) % length - length / 2.0
        frames[k] = amp * np.exp(-0.5 * (d / sigma) ** 2)
    return FrameStack(frames, tau, 1.0)


def _band_limited_texture(h: int, w: int, rng: Rng, cutoff: float = 0.15) -> np.ndarray:
    noise = rng.normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    mask = np.exp(-0.5 * (fx ** 2 + fy ** 2) / cutoff ** 2)
    tex = np.real(np.fft.ifft2(np.fft.fft2(noise) * mask))
    tex -= tex.min()
    peak = tex.max()
    return tex / peak if peak > 0 else tex


def _bilinear_shift(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Sample ``img`` at ``(y - dy, x - dx)`` with bilinear interpolation and periodic wrap."""
    h, w = img.shape
    ys = np.arange(h)[:, None] - dy
    xs = np.arange(w)[None, :] - dx
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(int) % h
    x0 = x0.astype(int) % w
    y1 = (y0 + 1) % h
    x1 = (x0 + 1) % w
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def make_texture_stack_2d(h: int, w: int, num_frames: int, motion=(0.0, 0.0),
                          seed: int = 0) -> FrameStack:
    """Band-limited noise texture translated by ``motion * tau`` (motion = (dx, dy))."""
    if h < 2 or w < 2 or num_frames < 2:
        raise ValueError("h, w and num_frames must be >= 2")
    dx, dy = motion
    tex = _band_limited_texture(h, w, Rng(seed).split("texture"))
    tau = np.arange(num_frames) / num_frames
    frames = np.stack([_bilinear_shift(tex, dy * tk, dx * tk) for tk in tau])
    return FrameStack(frames, tau, 1.0)
