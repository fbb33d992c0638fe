"""Trainable components built on :mod:`blurdm.autodiff`.

Parameters live in flat ``Params`` dicts of numpy arrays; forward functions
take a mapping from the same names to Nodes (either trainable leaves or
constants), so the same code serves training, inference and gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import Rng

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "linear": ad.identity}
TIME_EMBED_DIM = 8


class Params(dict):
    """Named parameter arrays. Names are unique by construction; shapes fixed at init."""

    @property
    def num_params(self) -> int:
        return int(np.sum([v.size for v in self.values()]))

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.items()})

    def leaves(self) -> dict:
        return {k: ad.leaf(v, name=k) for k, v in self.items()}

    def consts(self) -> dict:
        return {k: ad.const(v) for k, v in self.items()}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple  # input width followed by each layer's output width
    activations: tuple  # one tag per layer

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per layer")
        unknown = set(self.activations) - set(ACTIVATIONS)
        if unknown:
            raise ValueError(f"unknown activations {sorted(unknown)}")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def uniform(cls, n_in, hidden, n_out, layers, act="relu", out_act="linear"):
        widths = (n_in,) + (hidden,) * (layers - 1) + (n_out,)
        return cls(widths, (act,) * (layers - 1) + (out_act,))


def init_params(spec: MlpSpec, seed: int, prefix: str = "") -> Params:
    """Glorot-uniform weights, zero biases."""
    rng = Rng(seed).split(("mlp", prefix))
    p = Params()
    for i, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = np.sqrt(6.0 / (n_in + n_out))
        p[f"{prefix}W{i}"] = rng.uniform(-bound, bound, (n_out, n_in))
        p[f"{prefix}b{i}"] = np.zeros(n_out)
    return p


def mlp_forward(nodes: dict, spec: MlpSpec, x: ad.Node, prefix: str = "",
                hook=None) -> ad.Node:
    """Run an MLP; ``hook(i, h)`` may transform each layer's activated output."""
    h = x
    for i, act in enumerate(spec.activations):
        h = ACTIVATIONS[act](ad.affine(nodes[f"{prefix}W{i}"], h, nodes[f"{prefix}b{i}"]))
        if hook is not None:
            h = hook(i, h)
    return h


def time_embedding(t: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(100.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


@dataclass(frozen=True)
class Architecture:
    """Widths of every component for signals of ``signal_len`` samples and latents of ``latent_dim``."""

    signal_len: int = 64
    latent_dim: int = 64
    hidden: int = 128
    estimator_hidden: int = 128
    estimator_layers: int = 6
    estimator_act: str = "tanh"
    encoder_layers: int = 3

    def encoder_spec(self) -> MlpSpec:
        return MlpSpec.uniform(2 * self.signal_len, self.hidden, self.latent_dim,
                               self.encoder_layers)

    def estimator_spec(self, width: int | None = None) -> MlpSpec:
        width = self.latent_dim if width is None else width
        return MlpSpec.uniform(2 * width + TIME_EMBED_DIM, self.estimator_hidden, width,
                               self.estimator_layers, act=self.estimator_act)

    def deblur_encoder_spec(self) -> MlpSpec:
        return MlpSpec.uniform(self.signal_len, self.hidden, self.hidden, 3, out_act="relu")

    def deblur_decoder_spec(self) -> MlpSpec:
        return MlpSpec.uniform(self.hidden, self.hidden, self.signal_len, 3)

    def decoder_channels(self) -> tuple:
        return self.deblur_decoder_spec().widths[1:]


# ----------------------------------------------------------------------------- estimators

def init_estimators(arch: Architecture, seed: int) -> Params:
    """Two fully separate 6-layer MLPs: blur-residual head ``e_`` and noise head ``n_``.

    Output layers start at zero, so the untrained chain is a pure rescaling of
    ``Z_T``; random output weights make the unrolled chain unstable early on.
    """
    spec = arch.estimator_spec()
    p = init_params(spec, seed, "e_")
    p.update(init_params(spec, seed, "n_"))
    last = len(spec.activations) - 1
    for head in ("e_", "n_"):
        p[f"{head}W{last}"][:] = 0.0
    return p


def estimator_forward(nodes: dict, arch: Architecture, I_t, t: int, B):
    """``(e_hat, eps_hat)`` for a state ``I_t`` conditioned on ``t`` and ``B``.

    ``I_t`` and ``B`` are Nodes of shape (..., width); ``width`` is inferred
    from the first layer so the same heads can run on latents or flat signals.
    """
    I_t, B = ad._lift(I_t), ad._lift(B)
    if I_t.shape != B.shape:
        raise ValueError(f"estimator: I_t{I_t.shape} and B{B.shape} differ")
    width = nodes["e_W0"].shape[1] - TIME_EMBED_DIM
    if 2 * I_t.shape[-1] != width:
        raise ValueError(f"estimator expects signals of width {width // 2}, got {I_t.shape[-1]}")
    emb = np.broadcast_to(time_embedding(t), I_t.shape[:-1] + (TIME_EMBED_DIM,))
    x = ad.concat([I_t, B, ad.const(emb)], axis=-1)
    spec = arch.estimator_spec(I_t.shape[-1])
    return mlp_forward(nodes, spec, x, "e_"), mlp_forward(nodes, spec, x, "n_")


class NetEstimator:
    """Adapter exposing trained estimator params through the ``estimate`` protocol."""

    def __init__(self, params: Params, arch: Architecture):
        self.nodes = params.consts()
        self.arch = arch

    def estimate(self, I_t, t, B):
        e, n = estimator_forward(self.nodes, self.arch, ad.const(I_t), t, ad.const(B))
        return e.value, n.value


# ----------------------------------------------------------------------------- encoders

def init_encoder(arch: Architecture, seed: int, name: str = "enc") -> Params:
    return init_params(arch.encoder_spec(), seed, f"{name}_")


def encode(nodes: dict, arch: Architecture, *inputs, name: str = "enc") -> ad.Node:
    """Sharp-encoder mode with ``(B, S)``; blur-encoder mode with ``(B,)``, fed as ``B || B``.

    Both modes share one MLP layout so the two encoders differ only in weights.
    """
    if len(inputs) == 1:
        inputs = (inputs[0], inputs[0])
    elif len(inputs) != 2:
        raise ValueError(f"encode takes one or two signals, got {len(inputs)}")
    a, b = (ad._lift(v) for v in inputs)
    return mlp_forward(nodes, arch.encoder_spec(), ad.concat([a, b], axis=-1), f"{name}_")


# ----------------------------------------------------------------------------- PFM

def init_pfm(arch: Architecture, seed: int) -> Params:
    """One linear map per decoder layer, ``C -> 2 c_i``.

    The scale half of each bias starts at 1 so an untrained prior leaves
    decoder features roughly unchanged.
    """
    rng = Rng(seed).split("pfm")
    p = Params()
    C = arch.latent_dim
    for i, c in enumerate(arch.decoder_channels()):
        bound = np.sqrt(6.0 / (C + 2 * c))
        p[f"pfm_W{i}"] = rng.uniform(-bound, bound, (2 * c, C))
        p[f"pfm_b{i}"] = np.concatenate([np.ones(c), np.zeros(c)])
    return p


def pfm_modulate(nodes: dict, Z, F, i: int = 0) -> ad.Node:
    """``F' = Z_alpha * F + Z_beta`` with ``(Z_alpha, Z_beta) = Linear_i(Z)``, per channel."""
    Z, F = ad._lift(Z), ad._lift(F)
    W = nodes[f"pfm_W{i}"]
    c = W.shape[0] // 2
    if F.shape[-1] != c:
        raise ValueError(f"pfm: layer {i} expects {c} channels, got {F.shape[-1]}")
    ab = ad.affine(W, Z, nodes[f"pfm_b{i}"])
    return ad.add(ad.mul(ad.slice_last(ab, 0, c), F), ad.slice_last(ab, c, 2 * c))


# ----------------------------------------------------------------------------- deblur net

def init_deblur(arch: Architecture, seed: int, name: str = "net") -> Params:
    p = init_params(arch.deblur_encoder_spec(), seed, f"{name}_enc_")
    p.update(init_params(arch.deblur_decoder_spec(), seed, f"{name}_dec_"))
    return p


def deblur_net_forward(nodes: dict, arch: Architecture, B, Z=None, name: str = "net") -> ad.Node:
    """Toy encoder-decoder MLP with a global skip: ``O = B + dec(enc(B))``.

    When ``Z`` is given every decoder layer output is PFM-modulated; ``nodes``
    must then also hold the ``pfm_*`` entries.
    """
    B = ad._lift(B)
    if B.shape[-1] != arch.signal_len:
        raise ValueError(f"deblur net expects width {arch.signal_len}, got {B.shape[-1]}")
    h = mlp_forward(nodes, arch.deblur_encoder_spec(), B, f"{name}_enc_")
    hook = None if Z is None else (lambda i, f: pfm_modulate(nodes, Z, f, i))
    out = mlp_forward(nodes, arch.deblur_decoder_spec(), h, f"{name}_dec_", hook=hook)
    return ad.add(B, out)
