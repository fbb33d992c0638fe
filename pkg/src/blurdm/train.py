"""Three-stage latent-prior training on synthetic exposure data.

Stage 1 pretrains the sharp encoder, PFM and deblurring net with the sharp
prior ``Z^S = SE(B || S)``. Stage 2 trains the blur encoder and the residual
estimators so that the latent reverse chain started at ``BE(B) + bb_T eps``
lands on ``Z^S``. Stage 3 fine-tunes everything except the sharp encoder
end to end on the reconstruction loss.

A baseline deblurring net without prior is trained alongside stage 1 on
identical batches, for paired comparisons.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import nets
from .exposure import blur_image, make_bump_stack, make_texture_stack_2d, sharp_image
from .rng import Rng
from .schedule import Schedule, build_schedule, reverse_coefficients

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs1: int = 400
    epochs2: int = 200
    epochs3: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    lr_finetune: float = 1e-4  # stage 3 (joint fine-tuning)
    b1: float = 0.9
    b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    T: int = 5
    beta_max: float = 0.02
    alpha_min: float = 0.0  # 0 selects the default 1 / (T + 1)
    alpha_max: float = 1.0
    latent_dim: int = 64
    hidden: int = 128
    aux_losses: bool = False
    lambda_e: float = 1.0
    lambda_eps: float = 1.0
    generator: str = "bump"
    n_train: int = 512
    n_test: int = 64
    signal_len: int = 64
    height: int = 8
    width: int = 8
    num_frames: int = 12
    bump_width: float = 8.0
    velocity_min: float = 4.0
    velocity_max: float = 12.0
    sharp_exposure: float = 1.0 / 6.0

    def __post_init__(self):
        for name in ("epochs1", "epochs2", "epochs3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "latent_dim", "hidden", "n_train", "n_test", "num_frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_finetune <= 0:
            raise ValueError("lr and lr_finetune must be > 0")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.generator not in ("bump", "texture2d"):
            raise ValueError(f"unknown generator {self.generator!r}")

    @property
    def epochs(self) -> tuple:
        return (self.epochs1, self.epochs2, self.epochs3)

    @property
    def input_len(self) -> int:
        return self.signal_len if self.generator == "bump" else self.height * self.width

    def schedule(self) -> Schedule | None:
        """The latent diffusion schedule; ``None`` when ``T = 0`` (no diffusion)."""
        if self.T == 0:
            return None
        return build_schedule(self.T, self.beta_max, self.alpha_min or None, self.alpha_max)

    def architecture(self) -> nets.Architecture:
        return nets.Architecture(signal_len=self.input_len, latent_dim=self.latent_dim,
                                 hidden=self.hidden, estimator_hidden=self.hidden)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ----------------------------------------------------------------------------- data

@dataclass
class Dataset:
    B: np.ndarray  # (N, L) blurred, flattened
    S: np.ndarray  # (N, L) sharp targets, flattened
    frames: np.ndarray  # (N, K, L) flattened frame stacks, uniform tau grid, exposure 1
    shape: tuple  # per-sample signal shape before flattening

    def __len__(self):
        return self.B.shape[0]


def make_stack(cfg: TrainConfig, seed: int, velocity):
    if cfg.generator == "bump":
        return make_bump_stack(cfg.signal_len, cfg.num_frames, cfg.bump_width, velocity, seed)
    return make_texture_stack_2d(cfg.height, cfg.width, cfg.num_frames, velocity, seed)


def make_dataset(cfg: TrainConfig, split: str) -> Dataset:
    """Seeded toy set: each sample is a moving bump (or texture) with a random velocity."""
    n = cfg.n_train if split == "train" else cfg.n_test
    rng = Rng(cfg.seed).split(("dataset", split))
    Bs, Ss, frames = [], [], []
    shape = None
    for i in range(n):
        speed = rng.uniform(cfg.velocity_min, cfg.velocity_max)
        if cfg.generator == "bump":
            velocity = speed
        else:
            # One fixed direction: with both signs the sharp target is ambiguous given B.
            velocity = (speed, 0.0)
        sample_seed = int(rng.integers(0, 2 ** 31 - 1))
        stack = make_stack(cfg, sample_seed, velocity)
        shape = stack.shape
        Bs.append(blur_image(stack).reshape(-1))
        Ss.append(sharp_image(stack, cfg.sharp_exposure).reshape(-1))
        frames.append(stack.frames.reshape(stack.num_frames, -1))
    return Dataset(np.array(Bs), np.array(Ss), np.array(frames), shape)


def batch_integrate(frames: np.ndarray, tau0: float, tau1: float) -> np.ndarray:
    """Left-endpoint integral over ``[tau0, tau1]`` for a batch of uniform-grid stacks."""
    K = frames.shape[1]
    edges = np.arange(K + 1) / K
    w = np.clip(np.minimum(edges[1:], tau1) - np.maximum(edges[:-1], tau0), 0.0, None)
    return np.einsum("k,nkl->nl", w, frames)


# ----------------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(p: dict, grads: dict, state: AdamState, lr: float, b1: float = 0.9,
              b2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update of ``p`` in place. Missing grads count as zero."""
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, value in p.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ValueError(f"adam: grad for {k} has shape {g.shape}, param {value.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(value)
            state.v[k] = np.zeros_like(value)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return p, state


# ----------------------------------------------------------------------------- losses

def _diff(a, b, name: str) -> ad.Node:
    a, b = ad._lift(a), ad._lift(b)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return ad.sub(a, b)


def l_prior(Z0, ZS) -> ad.Node:
    return ad.l1(_diff(Z0, ZS, "l_prior"))


def l_rec(O, S) -> ad.Node:
    return ad.l1(_diff(O, S, "l_rec"))


def l_e(e_hat, e_true, weight: float = 1.0) -> ad.Node:
    return ad.scale(ad.l2(_diff(e_hat, e_true, "l_e")), weight)


def l_eps(eps_hat, eps_true, weight: float = 1.0) -> ad.Node:
    return ad.scale(ad.l2(_diff(eps_hat, eps_true, "l_eps")), weight)


# ----------------------------------------------------------------------------- latent chain

def latent_chain(nodes, arch: nets.Architecture, ZB: ad.Node, s: Schedule | None, eps,
                 step_nodes: dict | None = None) -> ad.Node:
    """Deterministic reverse chain in latent space, from ``Z_T = Z^B + bb_T eps`` to ``Z_0``.

    ``step_nodes`` optionally maps a step ``t`` to its own estimator nodes
    (used to measure per-step gradient flow); otherwise ``nodes`` serves every step.
    """
    if s is None:
        return ZB
    Z = ad.add(ZB, ad.const(s.beta_bar[s.T] * np.asarray(eps)))
    for t in range(s.T, 0, -1):
        c_img, c_blur, c_noise = reverse_coefficients(s, t)
        est = nodes if step_nodes is None else step_nodes[t]
        e_hat, eps_hat = nets.estimator_forward(est, arch, Z, t, ZB)
        Z = ad.sub(ad.sub(ad.scale(Z, c_img), ad.scale(e_hat, c_blur)),
                   ad.scale(eps_hat, c_noise))
    return Z


# ----------------------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: TrainConfig
    stage: int
    blocks: dict = field(default_factory=dict)  # name -> Params
    schedule: Schedule | None = None
    history: list = field(default_factory=list)  # rows: (stage, epoch, name, value)
    zs_targets: np.ndarray | None = None

    def params(self, *names) -> nets.Params:
        merged = nets.Params()
        for n in names:
            merged.update(self.blocks[n])
        return merged


def _check_finite(loss: float, stage: int, epoch: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"stage {stage}: loss became {loss} at epoch {epoch}")


def _batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train_loop(stage: int, cfg: TrainConfig, data: Dataset, epochs: int, groups: dict,
                loss_fn, history: list, lr: float | None = None):
    """Generic epoch loop. ``groups`` maps a label to (Params, trainable block names)."""
    lr = cfg.lr if lr is None else lr
    states = {label: AdamState() for label in groups}
    rng = Rng(cfg.seed).split(("stage", stage))
    for epoch in range(epochs):
        sums: dict[str, float] = {}
        count = 0
        for b, idx in enumerate(_batches(len(data), cfg.batch_size, rng.split(("epoch", epoch)))):
            batch_rng = rng.split(("batch", epoch, b))
            losses = loss_fn(idx, batch_rng)
            for label, (params, _) in groups.items():
                node_map, loss = losses[label]
                ad.backward(loss)
                grads = {k: n.grad for k, n in node_map.items() if n.grad is not None}
                adam_step(params, grads, states[label], lr, cfg.b1, cfg.b2, cfg.adam_eps)
                value = float(loss.value)
                _check_finite(value, stage, epoch)
                sums[label] = sums.get(label, 0.0) + value * len(idx)
            count += len(idx)
        for label, total in sums.items():
            history.append((stage, epoch, label, total / count))
        if epoch % 50 == 0 or epoch == epochs - 1:
            log.info("stage %d epoch %d %s", stage, epoch,
                     " ".join(f"{k}={v / count:.5f}" for k, v in sums.items()))


def stage1(cfg: TrainConfig, data: Dataset) -> Checkpoint:
    arch = cfg.architecture()
    s = cfg.schedule()
    ckpt = Checkpoint(cfg, 1, schedule=s)
    ckpt.blocks["se"] = nets.init_encoder(arch, cfg.seed * 7 + 1, "se")
    ckpt.blocks["pfm"] = nets.init_pfm(arch, cfg.seed * 7 + 2)
    ckpt.blocks["net"] = nets.init_deblur(arch, cfg.seed * 7 + 3)
    ckpt.blocks["baseline"] = nets.init_deblur(arch, cfg.seed * 7 + 3)
    prior = nets.Params({**ckpt.blocks["se"], **ckpt.blocks["pfm"], **ckpt.blocks["net"]})
    base = ckpt.blocks["baseline"]

    def loss_fn(idx, _rng):
        B, S = data.B[idx], data.S[idx]
        pn = prior.leaves()
        ZS = nets.encode(pn, arch, B, S, name="se")
        O = nets.deblur_net_forward(pn, arch, B, ZS)
        bn = base.leaves()
        Ob = nets.deblur_net_forward(bn, arch, B, None)
        return {"prior": (pn, l_rec(O, S)), "baseline": (bn, l_rec(Ob, S))}

    _train_loop(1, cfg, data, cfg.epochs1, {"prior": (prior, None), "baseline": (base, None)},
                loss_fn, ckpt.history)
    for name in ("se", "pfm", "net"):
        for k in ckpt.blocks[name]:
            ckpt.blocks[name][k] = prior[k]
    ckpt.zs_targets = sharp_prior(ckpt, data)
    return ckpt


def sharp_prior(ckpt: Checkpoint, data: Dataset) -> np.ndarray:
    arch = ckpt.config.architecture()
    return nets.encode(ckpt.blocks["se"].consts(), arch, data.B, data.S, name="se").value


def _image_space_aux(cfg, arch, s, data, idx, nodes, rng):
    """Per-step supervised residual/noise losses on exposure-synthesized image states."""
    if arch.latent_dim != arch.signal_len:
        raise ValueError("auxiliary losses need latent_dim == signal length "
                         "(estimators are shared between latent and image space)")
    frames = data.frames[idx]
    t = int(rng.integers(1, s.T + 1))
    I0 = batch_integrate(frames, 0.0, s.alpha[0]) / s.alpha[0]
    cum = batch_integrate(frames, s.alpha[0], s.alpha[t])
    e_t = batch_integrate(frames, s.alpha[t - 1], s.alpha[t])
    eps = rng.normal(I0.shape)
    I_t = (s.alpha[0] / s.alpha[t]) * I0 + cum / s.alpha[t] + s.beta_bar[t] * eps
    e_hat, eps_hat = nets.estimator_forward(nodes, arch, ad.const(I_t), t, ad.const(data.B[idx]))
    return ad.add(l_e(e_hat, e_t, cfg.lambda_e), l_eps(eps_hat, eps, cfg.lambda_eps))


def stage2(cfg: TrainConfig, data: Dataset, ckpt1: Checkpoint | None) -> Checkpoint:
    if ckpt1 is None or "se" not in ckpt1.blocks:
        raise ValueError("stage 2 needs the stage-1 checkpoint")
    arch = cfg.architecture()
    s = cfg.schedule()
    ckpt = Checkpoint(cfg, 2, dict(ckpt1.blocks), s, list(ckpt1.history), ckpt1.zs_targets)
    ZS_all = sharp_prior(ckpt1, data)
    ckpt.zs_targets = ZS_all
    ckpt.blocks["be"] = nets.init_encoder(arch, cfg.seed * 7 + 4, "be")
    ckpt.blocks["est"] = nets.init_estimators(arch, cfg.seed * 7 + 5)
    params = nets.Params({**ckpt.blocks["be"], **ckpt.blocks["est"]})

    def loss_fn(idx, rng):
        nodes = params.leaves()
        ZB = nets.encode(nodes, arch, data.B[idx], name="be")
        eps = rng.normal(ZB.shape)
        Z0 = latent_chain(nodes, arch, ZB, s, eps)
        loss = l_prior(Z0, ZS_all[idx])
        if cfg.aux_losses and s is not None:
            loss = ad.add(loss, _image_space_aux(cfg, arch, s, data, idx, nodes, rng.split("aux")))
        return {"prior": (nodes, loss)}

    _train_loop(2, cfg, data, cfg.epochs2, {"prior": (params, None)}, loss_fn, ckpt.history)
    for name in ("be", "est"):
        for k in ckpt.blocks[name]:
            ckpt.blocks[name][k] = params[k]
    return ckpt


def stage3(cfg: TrainConfig, data: Dataset, ckpt2: Checkpoint | None) -> Checkpoint:
    if ckpt2 is None or "be" not in ckpt2.blocks or "est" not in ckpt2.blocks:
        raise ValueError("stage 3 needs the stage-2 checkpoint")
    arch = cfg.architecture()
    s = cfg.schedule()
    blocks = {k: v.copy() for k, v in ckpt2.blocks.items()}
    ckpt = Checkpoint(cfg, 3, blocks, s, list(ckpt2.history), ckpt2.zs_targets)
    names = ("be", "est", "pfm", "net")
    params = ckpt.params(*names)

    def loss_fn(idx, rng):
        nodes = params.leaves()
        O = blurdm_forward(nodes, arch, s, data.B[idx], rng.normal((len(idx), arch.latent_dim)))
        return {"blurdm": (nodes, l_rec(O, data.S[idx]))}

    _train_loop(3, cfg, data, cfg.epochs3, {"blurdm": (params, None)}, loss_fn, ckpt.history,
                lr=cfg.lr_finetune)
    for name in names:
        for k in ckpt.blocks[name]:
            ckpt.blocks[name][k] = params[k]
    return ckpt


def blurdm_forward(nodes, arch, s, B, eps) -> ad.Node:
    """Inference path: blur encoder, latent reverse chain, prior-modulated deblur net."""
    ZB = nets.encode(nodes, arch, B, name="be")
    Z0 = latent_chain(nodes, arch, ZB, s, eps)
    return nets.deblur_net_forward(nodes, arch, B, Z0)


def train_all(cfg: TrainConfig, data: Dataset | None = None) -> Checkpoint:
    data = data if data is not None else make_dataset(cfg, "train")
    t0 = time.perf_counter()
    c1 = stage1(cfg, data)
    c2 = stage2(cfg, data, c1)
    c3 = stage3(cfg, data, c2)
    log.info("trained all stages in %.1fs", time.perf_counter() - t0)
    return c3


# ----------------------------------------------------------------------------- evaluation

def mse_rows(O: np.ndarray, S: np.ndarray) -> np.ndarray:
    return np.mean((O - S) ** 2, axis=-1)


def psnr(mse, peak: float = 1.0):
    return 10.0 * np.log10(peak ** 2 / np.asarray(mse))


@dataclass
class EvalResult:
    mse_blur: np.ndarray
    mse_baseline: np.ndarray
    mse_blurdm: np.ndarray

    @property
    def psnr_blur(self):
        return psnr(self.mse_blur)

    @property
    def psnr_baseline(self):
        return psnr(self.mse_baseline)

    @property
    def psnr_blurdm(self):
        return psnr(self.mse_blurdm)

    def summary(self) -> dict:
        return {
            "mse_blur": float(self.mse_blur.mean()),
            "mse_baseline": float(self.mse_baseline.mean()),
            "mse_blurdm": float(self.mse_blurdm.mean()),
            "psnr_blur": float(self.psnr_blur.mean()),
            "psnr_baseline": float(self.psnr_baseline.mean()),
            "psnr_blurdm": float(self.psnr_blurdm.mean()),
        }


def predict(ckpt: Checkpoint, B: np.ndarray, seed: int | None = None) -> np.ndarray:
    cfg = ckpt.config
    arch = cfg.architecture()
    rng = Rng(cfg.seed if seed is None else seed).split("eval")
    eps = rng.normal((B.shape[0], arch.latent_dim))
    nodes = ckpt.params("be", "est", "pfm", "net").consts()
    return blurdm_forward(nodes, arch, ckpt.schedule, B, eps).value


def predict_baseline(ckpt: Checkpoint, B: np.ndarray) -> np.ndarray:
    arch = ckpt.config.architecture()
    return nets.deblur_net_forward(ckpt.blocks["baseline"].consts(), arch, B, None).value


def evaluate(ckpt: Checkpoint, data: Dataset) -> EvalResult:
    return EvalResult(mse_rows(data.B, data.S),
                      mse_rows(predict_baseline(ckpt, data.B), data.S),
                      mse_rows(predict(ckpt, data.B), data.S))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
