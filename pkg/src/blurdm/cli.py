"""``blurdm`` command line.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import train, verify
from .exposure import (blur_image, blur_residuals, exposure_identity_error, exposure_trajectory,
                       sharp_image)
from .forward import forward_chain
from .io import write_bdm1, write_pgm
from .nets import NetEstimator
from .persist import ConfigError, format_config, load_checkpoint, load_config, save_checkpoint
from .reverse import OracleEstimator, sample_chain
from .rng import Rng
from .train import TrainConfig, TrainingDiverged

log = logging.getLogger("blurdm")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _norm_rows(path: Path, header: str, states) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([header, "l2_norm", "max_abs"])
        for t, x in states:
            w.writerow([t, repr(float(np.linalg.norm(x))), repr(float(np.max(np.abs(x))))])


def demo_stack(cfg: TrainConfig):
    """One stack drawn like a dataset sample, keyed by the config seed."""
    rng = Rng(cfg.seed).split("demo")
    speed = rng.uniform(cfg.velocity_min, cfg.velocity_max)
    velocity = speed if cfg.generator == "bump" else (speed, 0.0)
    return train.make_stack(cfg, int(rng.integers(0, 2 ** 31 - 1)), velocity)


def _image_schedule(cfg: TrainConfig):
    s = cfg.schedule()
    if s is None:
        raise UsageError("T = 0 has no diffusion process")
    return s


# ----------------------------------------------------------------------------- commands

def cmd_synth(cfg: TrainConfig, out: Path) -> dict:
    s = _image_schedule(cfg)
    stack = demo_stack(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def emit(name, kind, x):
        write_pgm(out / f"{name}.pgm", x)
        write_bdm1(out / f"{name}.bdm", x)
        rows.append((name, kind))

    for k, frame in enumerate(stack.frames):
        emit(f"frame_{k:02d}", "frame", frame)
    B = blur_image(stack)
    I0 = sharp_image(stack, s.alpha[0])
    emit("blur", "B", B)
    emit("sharp", "I0", I0)
    for t, e in enumerate(blur_residuals(stack, s), 1):
        emit(f"residual_{t:02d}", f"e_{t}", e)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "kind", "pgm", "bdm"])
        for name, kind in rows:
            w.writerow([name, kind, f"{name}.pgm", f"{name}.bdm"])
    err = exposure_identity_error(stack, s)
    print(f"exposure identity max-abs error: {err:.3e}")
    return {"identity_error": err, "B": B, "I0": I0}


def cmd_forward(cfg: TrainConfig, out: Path) -> list:
    s = _image_schedule(cfg)
    stack = demo_stack(cfg)
    I0 = sharp_image(stack, s.alpha[0])
    states, _ = forward_chain(I0, blur_residuals(stack, s), s, Rng(cfg.seed).split("forward"))
    out.mkdir(parents=True, exist_ok=True)
    for t in range(1, s.T + 1):
        write_pgm(out / f"forward_{t:02d}.pgm", states[t])
    _norm_rows(out / "forward_norms.csv", "t", list(enumerate(states)))
    J = exposure_trajectory(stack, s)
    dev = max(float(np.max(np.abs(states[t] - J[t]))) for t in range(s.T + 1))
    print(f"forward: {s.T} steps, max deviation from noise-free trajectory {dev:.3e}")
    return states


def cmd_reverse(cfg: TrainConfig, out: Path, estimator: str, eta: float, ckpt_path=None):
    if not 0.0 <= eta <= 1.0:
        raise UsageError(f"--eta must lie in [0, 1], got {eta}")
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed).split("reverse")
    if estimator == "oracle":
        s = _image_schedule(cfg)
        stack = demo_stack(cfg)
        B = blur_image(stack)
        eps = rng.split("terminal").normal(B.shape)
        trace = sample_chain(B, OracleEstimator(stack, s, eps), s, eta, rng.split("steps"), eps)
        target = sharp_image(stack, s.alpha[0])
        label = "oracle reverse final max-abs error vs I0"
    else:
        if ckpt_path is None:
            raise UsageError("--estimator ckpt needs --ckpt")
        ckpt = load_checkpoint(ckpt_path)
        if "be" not in ckpt.blocks or "est" not in ckpt.blocks or ckpt.schedule is None:
            raise UsageError(f"{ckpt_path}: needs a stage-2 or later checkpoint with T > 0")
        c = ckpt.config
        data = train.make_dataset(c, "test")
        arch = c.architecture()
        ZB = train.nets.encode(ckpt.blocks["be"].consts(), arch, data.B[:1], name="be").value
        eps = rng.split("terminal").normal(ZB.shape)
        est = NetEstimator(ckpt.params("est"), arch)
        trace = sample_chain(ZB, est, ckpt.schedule, eta, rng.split("steps"), eps)
        nodes = ckpt.params("pfm", "net").consts()
        O = train.nets.deblur_net_forward(nodes, arch, data.B[:1], train.ad.const(trace.final))
        write_pgm(out / "blur.pgm", data.B[0].reshape(data.shape))
        write_pgm(out / "output.pgm", O.value[0].reshape(data.shape))
        target, label = None, None
    for k, state in enumerate(trace.states):
        t = len(trace.states) - 1 - k
        write_pgm(out / f"reverse_{t:02d}.pgm", state)
    _norm_rows(out / "reverse_norms.csv", "t",
               [(len(trace.states) - 1 - k, x) for k, x in enumerate(trace.states)])
    if target is not None:
        err = float(np.max(np.abs(trace.final - target)))
        print(f"{label}: {err:.3e}")
    return trace


def _ckpt_path(out: Path, stage: int) -> Path:
    return out / f"ckpt_stage{stage}.bdmckpt"


def cmd_train(cfg: TrainConfig, out: Path, stage: str, from_path=None):
    stages = [1, 2, 3] if stage == "all" else [int(stage)]
    prev = None
    if stages[0] > 1:
        path = Path(from_path) if from_path else _ckpt_path(out, stages[0] - 1)
        if not path.exists():
            raise UsageError(f"stage {stages[0]} needs the stage-{stages[0] - 1} checkpoint "
                             f"({path} not found; pass --from)")
        prev = load_checkpoint(path)
        if prev.stage != stages[0] - 1:
            raise UsageError(f"{path} is a stage-{prev.stage} checkpoint, "
                             f"stage {stages[0]} needs stage {stages[0] - 1}")
        if prev.config != cfg:
            log.warning("config differs from the one stored in %s; using the current config", path)
    out.mkdir(parents=True, exist_ok=True)
    data = train.make_dataset(cfg, "train")
    fns = {1: lambda c: train.stage1(cfg, data), 2: lambda c: train.stage2(cfg, data, c),
           3: lambda c: train.stage3(cfg, data, c)}
    for n in stages:
        prev = fns[n](prev)
        save_checkpoint(_ckpt_path(out, n), prev)
        with open(out / f"loss_stage{n}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "stage", "term", "value"])
            for st, epoch, term, value in prev.history:
                if st == n:
                    w.writerow([epoch, st, term, repr(value)])
        print(f"stage {n}: wrote {_ckpt_path(out, n)}")
    return prev


def cmd_eval(ckpt_path, out: Path, seed: int | None = None) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.stage != 3:
        raise UsageError(f"{ckpt_path}: eval needs a stage-3 checkpoint, got stage {ckpt.stage}")
    data = train.make_dataset(ckpt.config, "test")
    O = train.predict(ckpt, data.B, seed)
    res = train.EvalResult(train.mse_rows(data.B, data.S),
                           train.mse_rows(train.predict_baseline(ckpt, data.B), data.S),
                           train.mse_rows(O, data.S))
    out.mkdir(parents=True, exist_ok=True)
    cols = ("mse_blur", "mse_baseline", "mse_blurdm", "psnr_blur", "psnr_baseline", "psnr_blurdm")
    per = np.stack([res.mse_blur, res.mse_baseline, res.mse_blurdm,
                    res.psnr_blur, res.psnr_baseline, res.psnr_blurdm], axis=1)
    summary = res.summary()
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", *cols])
        for i, row in enumerate(per):
            w.writerow([i, *(repr(float(v)) for v in row)])
        w.writerow(["mean", *(repr(summary[c]) for c in cols)])
    print(" ".join(f"{k}={summary[k]:.4f}" for k in cols))
    return summary


def cmd_verify(seed: int, out: Path, negative_controls: bool = False) -> int:
    results = verify.run_all(seed, negative_controls)
    out.mkdir(parents=True, exist_ok=True)
    verify.write_report(results, out / "verify.csv")
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# ----------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="blurdm", description="Blur diffusion toy pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a frame stack, B, I0 and residuals")
    sub.add_parser("forward", parents=[common], help="dump a forward diffusion trajectory")
    rev = sub.add_parser("reverse", parents=[common], help="dump a reverse chain")
    rev.add_argument("--estimator", choices=("oracle", "ckpt"), default="oracle")
    rev.add_argument("--eta", type=float, default=0.0)
    rev.add_argument("--ckpt")
    tr = sub.add_parser("train", parents=[common], help="run training stages")
    tr.add_argument("stage", choices=("1", "2", "3", "all"))
    tr.add_argument("--from", dest="from_path", help="checkpoint of the previous stage")
    ev = sub.add_parser("eval", parents=[common], help="held-out metrics CSV")
    ev.add_argument("--ckpt", required=True)
    ve = sub.add_parser("verify", parents=[common], help="run the derivation checks")
    ve.add_argument("--negative-controls", action="store_true")
    sub.add_parser("config", parents=[common], help="print the effective config")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, extra = load_config(args.config) if args.config else (TrainConfig(), {"out_dir": "out"})
        if args.seed is not None:
            cfg = train.with_overrides(cfg, seed=args.seed)
        out = Path(args.out or extra["out_dir"])
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "forward":
            cmd_forward(cfg, out)
        elif args.command == "reverse":
            cmd_reverse(cfg, out, args.estimator, args.eta, args.ckpt)
        elif args.command == "train":
            cmd_train(cfg, out, args.stage, args.from_path)
        elif args.command == "eval":
            cmd_eval(args.ckpt, out, args.seed)
        elif args.command == "verify":
            return cmd_verify(cfg.seed, out, args.negative_controls)
        elif args.command == "config":
            sys.stdout.write(format_config(cfg, {"out_dir": str(out)}))
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"blurdm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"blurdm: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
