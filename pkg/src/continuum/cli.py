"""Command-line experiment driver.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import io
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


from . import gradcheck
from ._validation import parse_list
from .data import SegSample, load_image_dir, split, synth_blobs
from .metrics import mean_report, reports_to_csv
from .solvers import CANONICAL_PROBLEMS, DivergenceError, SolverKind, estimate_convergence_order
from .unet import (BLOCK_KINDS, ContinuousUNet, TrainConfig, UNetConfig, build, evaluate_net,
                   load_json_config, noise_sweep, train)

DEFAULT_H = tuple(2.0 ** -k for k in range(3, 10))
DEFAULT_SIGMAS = (0.0, 0.2, 0.4, 0.5)
TAU = 0.85


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    command: str
    config: Path | None
    out: Path
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        if not self.seeds:
            raise UsageError("seed list must be nonempty")
        self.out.mkdir(parents=True, exist_ok=True)
        probe = self.out / ".write_probe"
        try:
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise UsageError(f"output directory {self.out} is not writable: {exc}") from exc


def _write(path: Path, text: str) -> None:
    path.write_bytes(text.encode("utf-8"))


def _suffix(seeds: Sequence[int], seed: int) -> str:
    return "" if len(seeds) == 1 else f"_seed{seed}"


def load_dataset(data_cfg: dict) -> list[SegSample]:
    """``{"source": "blobs", "n", "size", "seed"}`` or ``{"source": "dir", "images", "masks", "size"}``."""
    cfg = dict(data_cfg)
    source = cfg.pop("source", "blobs")
    if source == "blobs":
        allowed = {"n", "size", "seed", "blob_count_range"}
        if set(cfg) - allowed:
            raise UsageError(f"unknown data keys {sorted(set(cfg) - allowed)}")
        return synth_blobs(int(cfg.get("n", 250)), int(cfg.get("size", 64)),
                           tuple(cfg.get("blob_count_range", (1, 3))), int(cfg.get("seed", 0)))
    if source == "dir":
        try:
            return load_image_dir(cfg["images"], cfg["masks"], int(cfg.get("size", 64)))
        except KeyError as exc:
            raise UsageError(f"data source 'dir' needs key {exc}") from exc
    raise UsageError(f"unknown data source {source!r}")


def _load_config(path: Path | None):
    if path is None:
        return UNetConfig(), TrainConfig(), {}
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return load_json_config(path)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def _held_out(samples, tcfg: TrainConfig):
    return split(samples, tcfg.val_fraction, tcfg.seed)[1]


def _with_seed(model: UNetConfig, tcfg: TrainConfig, seed: int):
    return model, TrainConfig.from_dict({**tcfg.__dict__, "seed": seed})


def _load_checkpoint(path: Path | None, model: UNetConfig) -> ContinuousUNet:
    if path is None or not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        net = ContinuousUNet.load(path)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"unreadable checkpoint {path}: {exc}") from exc
    if net.config.to_dict() != model.to_dict():
        raise UsageError(f"checkpoint {path} was built with a different model config")
    return net


# commands ------------------------------------------------------------------

def cmd_solver_bench(spec: ExperimentSpec, args) -> int:
    buf = io.StringIO()
    buf.write("solver,problem,fitted_order\n")
    for kind in SolverKind:
        for name, make in CANONICAL_PROBLEMS.items():
            rep = estimate_convergence_order(make(), kind, DEFAULT_H)
            buf.write(f"{kind.value},{name},{rep.fitted_order!r}\n")
    _write(spec.out / "solver_bench.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_train(spec: ExperimentSpec, args) -> int:
    model, tcfg, data_cfg = _load_config(spec.config)
    samples = load_dataset(data_cfg)
    for seed in spec.seeds:
        m, t = _with_seed(model, tcfg, seed)
        net = build(m, seed)
        log = train(net, samples, t, progress=lambda r: print(
            f"epoch {r.epoch} loss={r.loss:.5f} val_dice={r.val_dice:.4f} lr={r.lr:.3e}", file=sys.stderr))
        sfx = _suffix(spec.seeds, seed)
        net.save(spec.out / f"checkpoint{sfx}.cntm")
        _write(spec.out / f"train_log{sfx}.csv", log.to_csv())
    return 0


def cmd_eval(spec: ExperimentSpec, args) -> int:
    model, tcfg, data_cfg = _load_config(spec.config)
    net = _load_checkpoint(args.checkpoint, model)
    reports = evaluate_net(net, _held_out(load_dataset(data_cfg), tcfg))
    _write(spec.out / "eval.csv", reports_to_csv(reports))
    m = mean_report(reports)
    print(f"dice={m.dice:.4f} accuracy={m.accuracy:.4f} ahd={m.ahd:.4f}")
    return 0


def cmd_noise_bench(spec: ExperimentSpec, args) -> int:
    model, tcfg, data_cfg = _load_config(spec.config)
    net = _load_checkpoint(args.checkpoint, model)
    sigmas = parse_list(args.sigmas) if args.sigmas else list(DEFAULT_SIGMAS)
    if any(s < 0 for s in sigmas):
        raise UsageError("sigmas must be non-negative")
    buf = io.StringIO()
    buf.write("sigma,dice,accuracy,ahd\n")
    for sigma, reports in noise_sweep(net, _held_out(load_dataset(data_cfg), tcfg), sigmas, seed=tcfg.seed):
        m = mean_report(reports)
        buf.write(f"{sigma!r},{m.dice!r},{m.accuracy!r},{m.ahd!r}\n")
    _write(spec.out / "noise_bench.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_block_compare(spec: ExperimentSpec, args) -> int:
    model, tcfg, data_cfg = _load_config(spec.config)
    kinds = [k.upper() for k in parse_list(args.kinds, str)] if args.kinds else list(BLOCK_KINDS)
    bad = [k for k in kinds if k not in BLOCK_KINDS]
    if bad:
        raise UsageError(f"unknown block kinds {bad}; choose from {BLOCK_KINDS}")
    samples = load_dataset(data_cfg)
    for seed in spec.seeds:
        m, t = _with_seed(model, tcfg, seed)
        buf = io.StringIO()
        buf.write("kind,dice,acc,ahd,epochs_to_tau\n")
        curves = io.StringIO()
        curves.write("kind,epoch,loss,val_dice\n")
        for kind in kinds:
            net = build(UNetConfig.from_dict({**m.to_dict(), "block_kind": kind}), seed)
            log = train(net, samples, t)
            r = mean_report(evaluate_net(net, _held_out(samples, t)))
            hit = log.epochs_to(TAU)
            buf.write(f"{kind},{r.dice!r},{r.accuracy!r},{r.ahd!r},{'' if hit is None else hit}\n")
            for rec in log.records:
                curves.write(f"{kind},{rec.epoch},{rec.loss!r},{rec.val_dice!r}\n")
        sfx = _suffix(spec.seeds, seed)
        _write(spec.out / f"block_compare{sfx}.csv", buf.getvalue())
        _write(spec.out / f"block_curves{sfx}.csv", curves.getvalue())
        print(buf.getvalue(), end="")
    return 0


def cmd_gradcheck(spec: ExperimentSpec, args, adjoint=None) -> int:
    results = gradcheck.run_all(**({"adjoint": adjoint} if adjoint is not None else {}))
    buf = io.StringIO()
    buf.write("check,max_rel_error,tolerance,passed\n")
    for r in results:
        print(r.line())
        buf.write(f"{r.name},{r.max_rel_error!r},{r.tolerance!r},{int(r.passed)}\n")
    _write(spec.out / "gradcheck.csv", buf.getvalue())
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"gradcheck failed: {r.name} max_rel_error={r.max_rel_error:.3e}", file=sys.stderr)
    return 1 if failed else 0


COMMANDS = {
    "solver-bench": cmd_solver_bench,
    "train": cmd_train,
    "eval": cmd_eval,
    "noise-bench": cmd_noise_bench,
    "block-compare": cmd_block_compare,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="continuum", description="Continuous U-Net experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON config with model/train/data sections")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--sigmas", help="comma-separated noise levels for noise-bench")
    p.add_argument("--kinds", help="comma-separated block kinds for block-compare")
    p.add_argument("--checkpoint", type=Path, help="trained checkpoint for eval/noise-bench")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seeds = parse_list(args.seeds, int) if args.seeds else None
        if seeds is None:
            seeds = [_load_config(args.config)[1].seed] if args.config else [0]
        spec = ExperimentSpec(args.command, args.config, args.out, seeds)
        return COMMANDS[args.command](spec, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
