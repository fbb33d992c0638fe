"""Executable certification of the forward/reverse derivations.

Each check returns a :class:`CheckResult`. Statistical checks compare sample
moments with their targets in units of standard errors (tolerance 4); exact
checks compare max-abs errors. Every check accepts a ``control`` flag that
injects a known bug, which must make it fail.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .exposure import (FrameStack, blur_image, blur_residuals, exposure_identity_error,
                       make_bump_stack, make_texture_stack_2d, sharp_image, uniform_stack)
from .forward import forward_chain, forward_marginal, marginal_mean, posterior_params
from .reverse import OracleEstimator, q_sigma_params, sample_chain
from .rng import Rng
from .schedule import Schedule, build_schedule

Z_TOL = 4.0
MC_SAMPLES = 100_000


@dataclass
class CheckResult:
    name: str
    passed: bool
    statistic: float
    tolerance: float
    elapsed: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} stat={self.statistic:.3e} tol={self.tolerance:.1e} "
                f"({self.elapsed:.2f}s) {self.detail}")


def default_schedules() -> list[Schedule]:
    """Default five-step schedule plus the single-step and zero-noise edge cases."""
    return [build_schedule(5, 0.02), build_schedule(1, 0.02), build_schedule(3, 0.0)]


def default_stacks() -> list[FrameStack]:
    """Nine 12-frame stacks; every default schedule's alphas land on frame boundaries."""
    rng = Rng(2024).split("grid")
    return [
        make_bump_stack(64, 12, 8, 0.0, seed=1),
        make_bump_stack(64, 12, 8, 5.0, seed=2),
        make_bump_stack(64, 12, 6, 11.5, seed=3),
        make_texture_stack_2d(16, 16, 12, (0.0, 0.0), seed=4),
        make_texture_stack_2d(16, 16, 12, (3.0, 1.0), seed=5),
        make_texture_stack_2d(12, 20, 12, (6.0, -4.0), seed=6),
        uniform_stack(np.full((12, 32), 0.5)),
        uniform_stack(np.zeros((12, 32))),
        uniform_stack(rng.uniform(0.0, 1.0, (12, 24))),
    ]


def _timed(name, tol, fn):
    t0 = time.perf_counter()
    passed, stat, detail = fn()
    return CheckResult(name, bool(passed), float(stat), tol, time.perf_counter() - t0, detail)


def _mean_z(x: np.ndarray, mean: float, var: float) -> float:
    if var == 0:
        return 0.0 if np.max(np.abs(x - mean)) <= 1e-12 else np.inf
    return abs(x.mean() - mean) / np.sqrt(var / x.size)


def _var_z(x: np.ndarray, var: float) -> float:
    if var == 0:
        return 0.0 if x.var() <= 1e-24 else np.inf
    return abs(x.var() - var) / (np.sqrt(2.0 / x.size) * var)


def _scalar_instance(stack: FrameStack, s: Schedule):
    """Pixel values (I_0, e_1..e_T) taken from the middle of a stack."""
    I0 = sharp_image(stack, s.alpha[0]).reshape(-1)
    e = [r.reshape(-1) for r in blur_residuals(stack, s)]
    k = I0.size // 2
    return float(I0[k]), [float(r[k]) for r in e]


# ----------------------------------------------------------------------------- checks

def check_exposure_identity(schedules=None, stacks=None, control=False) -> CheckResult:
    schedules = schedules or default_schedules()
    stacks = stacks or default_stacks()

    def run():
        worst = 0.0
        for s in schedules:
            for st in stacks:
                err = exposure_identity_error(st, s)
                if control:
                    # drop the alpha_0 weighting on I_0
                    I0 = sharp_image(st, s.alpha[0])
                    err = float(np.max(np.abs(
                        blur_image(st) - (I0 + sum(blur_residuals(st, s))) / s.alpha[-1])))
                worst = max(worst, err)
        return worst <= 1e-12, worst, f"{len(schedules)}x{len(stacks)} pairs"

    return _timed("exposure_identity", 1e-12, run)


def check_one_step_equivalence(schedules=None, stacks=None, N=MC_SAMPLES, rng=None,
                               control=False) -> CheckResult:
    """Composed forward steps versus the one-shot marginal at t = T."""
    schedules = schedules or default_schedules()
    stacks = stacks or default_stacks()
    rng = rng or Rng(0)

    def run():
        worst_exact, worst_z = 0.0, 0.0
        for si, s in enumerate(schedules):
            s_marg = s.with_beta_bar(s.beta_bar * 1.1) if control else s
            # noise-free means must agree exactly on full signals
            for st in stacks:
                I0 = sharp_image(st, s.alpha[0])
                e = blur_residuals(st, s)
                zeros = [np.zeros_like(I0)] * s.T
                states, _ = forward_chain(I0, e, s, eps_list=zeros)
                one, _ = forward_marginal(I0, e, s, s.T, eps=np.zeros_like(I0))
                worst_exact = max(worst_exact, float(np.max(np.abs(states[-1] - one))))
            if s.beta_bar[-1] == 0:
                continue
            I0, e = _scalar_instance(stacks[1], s)
            I0v = np.full(N, I0)
            ev = [np.full(N, v) for v in e]
            r = rng.split(("one_step", si))
            chain, _ = forward_chain(I0v, ev, s, r.split("chain"))
            one, _ = forward_marginal(I0v, ev, s_marg, s.T, r.split("marginal"))
            a, b = chain[-1], one
            z_mean = abs(a.mean() - b.mean()) / np.sqrt(a.var() / N + b.var() / N)
            z_var = abs(a.var() - b.var()) / np.sqrt(2 * (a.var() ** 2 + b.var() ** 2) / N)
            worst_z = max(worst_z, z_mean, z_var)
        ok = worst_exact <= 1e-12 and worst_z <= Z_TOL
        return ok, worst_z, f"noise-free max-abs={worst_exact:.1e}"

    return _timed("one_step_equivalence", Z_TOL, run)


def grid_posterior(I_t, I0, e, s: Schedule, t: int, n: int = 400_001):
    """Posterior mean/variance by normalizing the product of two Gaussian densities on a grid."""
    a = s.alpha[t - 1] / s.alpha[t]
    beta, bb_prev = s.beta[t - 1], s.beta_bar[t - 1]
    prior_mean = s.alpha[0] / s.alpha[t - 1] * I0 + np.sum(e[:t - 1]) / s.alpha[t - 1]
    lik_peak = (I_t - e[t - 1] / s.alpha[t]) / a
    pad = 12 * max(bb_prev, beta / a)
    x = np.linspace(min(prior_mean, lik_peak) - pad, max(prior_mean, lik_peak) + pad, n)
    logp = (-(I_t - a * x - e[t - 1] / s.alpha[t]) ** 2 / (2 * beta ** 2)
            - (x - prior_mean) ** 2 / (2 * bb_prev ** 2))
    w = np.exp(logp - logp.max())
    z = np.trapezoid(w, x)
    m = np.trapezoid(w * x, x) / z
    return m, np.trapezoid(w * (x - m) ** 2, x) / z


def check_posterior(n_instances: int = 50, rng=None, control=False) -> CheckResult:
    rng = rng or Rng(0)

    def run():
        worst = 0.0
        for k in range(n_instances):
            r = rng.split(("posterior", k))
            T = int(r.integers(2, 7))
            s = build_schedule(T, float(r.uniform(0.01, 0.5)))
            t = int(r.integers(2, T + 1))
            I0 = float(r.uniform(0, 1))
            e = [float(v) for v in r.uniform(0, 0.3, T)]
            I_t = float(marginal_mean(np.array(I0), e, s, t) + s.beta_bar[t] * r.normal())
            mean, var = posterior_params(I_t, I0, e, s, t)
            if control:
                var = var * (1 + 1e-3)
            gm, gv = grid_posterior(I_t, I0, e, s, t)
            worst = max(worst, abs(mean - gm), abs(var - gv) / gv)
        # t = 1 is degenerate: variance 0, mean pinned to the t = 0 marginal
        s = build_schedule(3, 0.1)
        m1, v1 = posterior_params(0.4, 0.3, [0.1, 0.2, 0.3], s, 1)
        ok = worst <= 1e-6 and v1 == 0.0 and abs(m1 - 0.3) <= 1e-15
        return ok, worst, f"{n_instances} scalar instances (mean abs / var rel)"

    return _timed("posterior_closed_form", 1e-6, run)


def check_implicit_sampling(schedules=None, stacks=None, N=MC_SAMPLES, rng=None,
                            etas=(0.0, 0.5, 1.0), control=False) -> CheckResult:
    """Sampling I_t from its marginal, then I_{t-1} from the implicit transition, must
    reproduce the t-1 marginal; eta = 0 and eta = 1 also get exact algebraic checks."""
    schedules = schedules or default_schedules()
    stacks = stacks or default_stacks()
    rng = rng or Rng(0)

    def run():
        worst_z, worst_exact = 0.0, 0.0
        for si, s in enumerate(schedules):
            I0, e = _scalar_instance(stacks[1], s)
            for t in range(1, s.T + 1):
                m_prev = float(marginal_mean(np.array(I0), e, s, t - 1))
                v_prev = s.beta_bar[t - 1] ** 2
                m_t = float(marginal_mean(np.array(I0), e, s, t))
                # exact: noise-free I_t maps onto the previous mean at eta = 0
                mean0, _ = q_sigma_params(m_t, I0, e, s, t, 0.0)
                worst_exact = max(worst_exact, abs(float(mean0) - m_prev))
                if s.beta_bar[t] > 0 and s.beta_bar[t - 1] > 0:
                    probe = m_t + 0.7 * s.beta_bar[t]
                    mq, sq = q_sigma_params(probe, I0, e, s, t, 1.0)
                    mp, vp = posterior_params(probe, I0, e, s, t)
                    worst_exact = max(worst_exact, abs(float(mq) - float(mp)),
                                      abs(sq ** 2 - vp) / vp)
                for ei, eta in enumerate(etas):
                    r = rng.split(("implicit", si, t, ei))
                    I_t = m_t + s.beta_bar[t] * r.normal(N)
                    mean, sig = q_sigma_params(I_t, I0, e, s, t, eta)
                    if control and s.beta_bar[t] > 0:
                        mean = m_prev + s.beta_bar[t - 1] * (I_t - m_t) / s.beta_bar[t]
                    x = mean + sig * r.normal(N)
                    worst_z = max(worst_z, _mean_z(x, m_prev, v_prev), _var_z(x, v_prev))
        ok = worst_z <= Z_TOL and worst_exact <= 1e-12
        return ok, worst_z, f"exact max={worst_exact:.1e}"

    return _timed("implicit_sampling", Z_TOL, run)


def check_oracle_reverse_exactness(schedules=None, stacks=None, rng=None,
                                   control=False) -> CheckResult:
    schedules = schedules or default_schedules()
    stacks = stacks or default_stacks()
    rng = rng or Rng(0)

    def run():
        worst = 0.0
        for si, s in enumerate(schedules):
            for ki, st in enumerate(stacks):
                r = rng.split(("oracle", si, ki))
                eps = r.normal(st.shape)
                est_eps = r.normal(st.shape) if control else eps
                trace = sample_chain(blur_image(st), OracleEstimator(st, s, est_eps), s,
                                     eta=0.0, eps=eps)
                I0 = sharp_image(st, s.alpha[0])
                err = float(np.max(np.abs(trace.final - I0)))
                worst = max(worst, err)
        return worst <= 1e-10, worst, f"{len(schedules)}x{len(stacks)} chains"

    return _timed("oracle_reverse_exactness", 1e-10, run)


def check_linear_latent(n_encoders: int = 20, rng=None, control=False) -> CheckResult:
    """For a linear encoder ``z = W I`` the latent recursion is exact."""
    rng = rng or Rng(0)
    s = build_schedule(5, 0.02)

    def run():
        worst = 0.0
        stack = make_bump_stack(32, 12, 6, 9.0, seed=7)
        I0 = sharp_image(stack, s.alpha[0])
        e = blur_residuals(stack, s)
        L = I0.size
        for k in range(n_encoders + 2):
            r = rng.split(("linear", k))
            C = int(r.integers(4, 24))
            if k == n_encoders:
                W, C = np.eye(L), L
            elif k == n_encoders + 1:
                W = np.zeros((C, L))
            else:
                W = r.normal((C, L)) / np.sqrt(L)
            spec = nets.MlpSpec((L, C), ("linear",))
            nodes = {"W0": ad.const(W), "b0": ad.const(np.zeros(C))}

            def enc(x):
                return nets.mlp_forward(nodes, spec, ad.const(x)).value

            noises = [r.normal(L) for _ in range(s.T)]
            states, _ = forward_chain(I0, e, s, eps_list=noises)
            z = enc(states[0])
            for t in range(1, s.T + 1):
                a = s.alpha[t - 1] / s.alpha[t]
                if control:
                    a = 1.0 / a
                z = a * z + enc(e[t - 1]) / s.alpha[t] + s.beta[t - 1] * enc(noises[t - 1])
                worst = max(worst, float(np.max(np.abs(z - enc(states[t])))))
        return worst <= 1e-12, worst, f"{n_encoders} random + identity + zero encoders"

    return _timed("linear_latent", 1e-12, run)


# ----------------------------------------------------------------------------- gradients

def primitive_cases(seed: int):
    """(name, loss builder, params) covering every registered autodiff primitive."""
    rng = np.random.default_rng(seed)
    n, m, b = (int(v) for v in rng.integers(2, 6, 3))
    proj = rng.standard_normal((b, m))

    def rand(*shape):
        return rng.standard_normal(shape)

    def reduce(node):
        w = np.linspace(0.5, 1.5, node.value.size).reshape(node.shape)
        return ad.sum(ad.mul(node, ad.const(w)))

    return [
        ("add", lambda p: reduce(ad.add(p["a"], p["b"])), {"a": rand(b, m), "b": rand(m)}),
        ("sub", lambda p: reduce(ad.sub(p["a"], p["b"])), {"a": rand(b, m), "b": rand(b, 1)}),
        ("scale", lambda p: reduce(ad.scale(p["a"], proj)), {"a": rand(b, m)}),
        ("mul", lambda p: reduce(ad.mul(p["a"], p["b"])), {"a": rand(b, m), "b": rand(1, m)}),
        ("matvec", lambda p: reduce(ad.matvec(p["W"], p["x"])), {"W": rand(n, m), "x": rand(b, m)}),
        ("matmul", lambda p: reduce(ad.matmul(p["A"], p["B"])), {"A": rand(n, m), "B": rand(m, b)}),
        ("affine", lambda p: reduce(ad.affine(p["W"], p["x"], p["c"])),
         {"W": rand(n, m), "x": rand(b, m), "c": rand(n)}),
        ("relu", lambda p: reduce(ad.relu(p["a"])), {"a": rand(b, m)}),
        ("tanh", lambda p: reduce(ad.tanh(p["a"])), {"a": rand(b, m)}),
        ("concat", lambda p: reduce(ad.concat([p["a"], p["b"]], axis=-1)),
         {"a": rand(b, m), "b": rand(b, n)}),
        ("sum", lambda p: reduce(ad.sum(p["a"], axis=0)), {"a": rand(b, m)}),
        ("mean", lambda p: reduce(ad.mean(p["a"], axis=-1)), {"a": rand(b, m)}),
        ("l1", lambda p: ad.l1(p["a"]), {"a": rand(b, m)}),
        ("l2", lambda p: ad.l2(ad.sub(ad.matvec(p["W"], ad.const(proj)), p["y"])),
         {"W": rand(n, m), "y": rand(b, n)}),
    ]


def unrolled_chain_case(T: int = 3, seed: int = 0):
    """Loss builder and params for the blur encoder + T-step latent chain + prior loss."""
    from .train import l_prior, latent_chain

    arch = nets.Architecture(signal_len=8, latent_dim=6, hidden=10, estimator_hidden=10)
    s = build_schedule(T, 0.2)
    rng = Rng(seed).split("unrolled")
    B = rng.uniform(0, 1, (3, arch.signal_len))
    ZS = rng.normal((3, arch.latent_dim))
    eps = rng.normal((3, arch.latent_dim))
    theta = nets.Params(nets.init_encoder(arch, seed, "be"))
    theta.update(nets.init_estimators(arch, seed + 1))
    for k in theta:
        if "_b" in k:  # nonzero biases so every parameter has a generic gradient
            theta[k] = rng.normal(theta[k].shape) * 0.1
    last = arch.estimator_layers - 1
    for head in ("e_", "n_"):  # output layers start at zero; randomize so all layers get gradient
        theta[f"{head}W{last}"] = rng.normal(theta[f"{head}W{last}"].shape) * 0.3

    def f(p):
        ZB = nets.encode(p, arch, B, name="be")
        return l_prior(latent_chain(p, arch, ZB, s, eps), ZS)

    return f, theta


def check_gradients(seeds=(0, 1, 2), control=False) -> CheckResult:
    def run():
        worst_prim, worst_chain = 0.0, 0.0
        for seed in seeds:
            for name, f, theta in primitive_cases(seed):
                if control and name == "tanh":
                    def f(p):  # noqa: E731 - broken derivative of tanh
                        a = p["a"]
                        y = np.tanh(a.value)
                        return ad.sum(ad.custom_op(y, (a,), lambda g: (g * (1.0 - y),), "tanh"))
                worst_prim = max(worst_prim, ad.grad_check(f, theta, tol=1e-5).max_rel_error)
        f, theta = unrolled_chain_case(3)
        worst_chain = ad.grad_check(f, theta, tol=1e-4).max_rel_error
        ok = worst_prim <= 1e-5 and worst_chain <= 1e-4
        return ok, worst_prim, f"unrolled T=3 chain rel={worst_chain:.1e} (tol 1e-4)"

    return _timed("gradients", 1e-5, run)


CHECKS = {
    "exposure_identity": check_exposure_identity,
    "one_step_equivalence": check_one_step_equivalence,
    "posterior_closed_form": check_posterior,
    "implicit_sampling": check_implicit_sampling,
    "oracle_reverse_exactness": check_oracle_reverse_exactness,
    "linear_latent": check_linear_latent,
    "gradients": check_gradients,
}


def run_check(name: str, seed: int = 0, control: bool = False) -> CheckResult:
    fn = CHECKS[name]
    kwargs = {"control": control}
    if "rng" in fn.__code__.co_varnames:
        kwargs["rng"] = Rng(seed).split(name)
    return fn(**kwargs)


def run_all(seed: int = 0, negative_controls: bool = False) -> list[CheckResult]:
    return [run_check(name, seed, negative_controls) for name in CHECKS]


def write_report(results: list[CheckResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "passed", "statistic", "tolerance", "elapsed_s", "detail"])
        for r in results:
            w.writerow([r.name, int(r.passed), repr(r.statistic), r.tolerance,
                        f"{r.elapsed:.3f}", r.detail])
