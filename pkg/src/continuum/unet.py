"""Continuous U-Net: a 4-level encoder-decoder whose blocks are ODE flows.

Each level runs ``1x1 channel adaptation -> block``; the encoder downsamples
after every level, the decoder upsamples, concatenates the skip connection
and adapts the channel count back before its block.  Blocks are one of

* ``DB``  - second-order dynamic block (adjoint gradients),
* ``FO``  - first-order ODE block (adjoint gradients),
* ``PLN`` - plain ``conv3x3 -> relu -> conv3x3`` box.
"""
from __future__ import annotations

import io
import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import node
from . import tensor as T
from .data import SegSample, noisy_copy, split, stack
from .metrics import MetricReport, binarize, dice, evaluate
from .solvers import DivergenceError, IntegrationConfig, SolverKind
from .tensor import Tensor

BLOCK_KINDS = ("DB", "FO", "PLN")
THREADS_ENV = "CONTINUUM_THREADS"


@dataclass
class UNetConfig:
    levels: int = 4
    filters: tuple[int, ...] = (3, 6, 12, 24)
    block_kind: str = "DB"
    solver: str = "rk4"
    steps_per_block: int = 1
    in_channels: int = 1
    out_channels: int = 1
    activation: str = "softplus"
    velocity: str = "conv"
    pln_init: str = "he"

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.block_kind = str(self.block_kind).upper()
        self.solver = SolverKind.parse(self.solver).value
        if self.levels < 1 or len(self.filters) != self.levels:
            raise ValueError(f"need one filter count per level: levels={self.levels}, filters={self.filters}")
        if any(f < 1 for f in self.filters) or any(b <= a for a, b in zip(self.filters, self.filters[1:])):
            raise ValueError(f"filters must be positive and strictly increasing, got {self.filters}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.steps_per_block < 1:
            raise ValueError("steps_per_block must be positive")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.pln_init not in ("he", "identity"):
            raise ValueError(f"pln_init must be 'he' or 'identity', got {self.pln_init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "UNetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def t_span(self) -> IntegrationConfig:
        return IntegrationConfig(0.0, 1.0, self.steps_per_block)


@dataclass(eq=False)
class ContinuousUNet:
    config: UNetConfig
    params: dict[str, np.ndarray]
    seed: int = 0

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def predict_proba(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [forward(self, images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.out_channels, *images.shape[2:]))

    def save(self, path: str | Path) -> None:
        node.save_params(path, self.params, {"config": self.config.to_dict(), "seed": self.seed})

    @classmethod
    def load(cls, path: str | Path) -> "ContinuousUNet":
        arrays, meta = node.load_params(path)
        net = cls(UNetConfig.from_dict(meta["config"]), arrays, int(meta.get("seed", 0)))
        expected = build(net.config, net.seed).params
        mismatch = {k: v.shape for k, v in expected.items()} != {k: v.shape for k, v in arrays.items()}
        if mismatch:
            raise ValueError(f"{path}: parameters do not match the stored model config")
        return net


# construction ------------------------------------------------------------

def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by layer name so shared layers match across block kinds
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _conv1x1(params: dict, name: str, c_in: int, c_out: int, seed: int) -> None:
    params[f"{name}.w"] = node.he_normal(_layer_rng(seed, name), (c_out, c_in, 1, 1))
    params[f"{name}.b"] = np.zeros(c_out)


def _identity_kernel(c: int) -> np.ndarray:
    w = np.zeros((c, c, 3, 3))
    w[np.arange(c), np.arange(c), 1, 1] = 1.0
    return w


def _block_params(params: dict, name: str, c: int, config: UNetConfig, seed: int) -> None:
    rng = _layer_rng(seed, name)
    if config.block_kind == "DB":
        blk = node.make_dynamic_block(c, rng, activation=config.activation, velocity=config.velocity)
        params.update({f"{name}.accel.{k}": v for k, v in blk.accel_params.items()})
        params.update({f"{name}.velocity.{k}": v for k, v in blk.velocity_params.items()})
    elif config.block_kind == "FO":
        blk = node.make_first_order_block(c, rng, activation=config.activation)
        params.update({f"{name}.deriv.{k}": v for k, v in blk.params.items()})
    elif config.pln_init == "identity":
        # relu(x) - relu(-x) == x, so the box starts as an exact identity
        eye = _identity_kernel(c)
        params[f"{name}.w1"] = np.concatenate([eye, -eye])
        params[f"{name}.b1"] = np.zeros(2 * c)
        params[f"{name}.w2"] = np.concatenate([eye, -eye], axis=1)
        params[f"{name}.b2"] = np.zeros(c)
    else:
        params[f"{name}.w1"] = node.he_normal(rng, (2 * c, c, 3, 3))
        params[f"{name}.b1"] = np.zeros(2 * c)
        params[f"{name}.w2"] = node.he_normal(rng, (c, 2 * c, 3, 3))
        params[f"{name}.b2"] = np.zeros(c)


def build(config: UNetConfig, seed: int = 0) -> ContinuousUNet:
    """Deterministically initialised network.

    Convolutions use He fan-in scaling; the last layer of every ODE field and
    the initial-velocity convolution start at zero, so DB and FO blocks start
    as the identity map.
    """
    params: dict[str, np.ndarray] = {}
    c_prev = config.in_channels
    for i, f in enumerate(config.filters):
        _conv1x1(params, f"enc{i}.adapt", c_prev, f, seed)
        _block_params(params, f"enc{i}.block", f, config, seed)
        c_prev = f
    _block_params(params, "mid.block", c_prev, config, seed)
    for i in reversed(range(config.levels)):
        f = config.filters[i]
        _conv1x1(params, f"dec{i}.adapt", f + c_prev, f, seed)
        _block_params(params, f"dec{i}.block", f, config, seed)
        c_prev = f
    _conv1x1(params, "head", c_prev, config.out_channels, seed)
    return ContinuousUNet(config, params, seed)


# forward -----------------------------------------------------------------

def _sub(P: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in P.items() if k.startswith(prefix)}


def _apply_block(config: UNetConfig, name: str, h: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    kind = config.block_kind
    if kind == "PLN":
        h = T.activation(T.conv2d(h, P[f"{name}.w1"], P[f"{name}.b1"], padding=1), "relu")
        return T.conv2d(h, P[f"{name}.w2"], P[f"{name}.b2"], padding=1)
    solver = SolverKind.parse(config.solver)
    if kind == "DB":
        ap, vp = _sub(P, f"{name}.accel."), _sub(P, f"{name}.velocity.")
        blk = node.DynamicBlock(node.conv_accel(config.activation), {k: t.data for k, t in ap.items()},
                                node.conv_velocity if vp else None, {k: t.data for k, t in vp.items()},
                                config.t_span, solver)
        return node.block_op(blk, h, ap, vp)
    dp = _sub(P, f"{name}.deriv.")
    blk = node.FirstOrderBlock(node.conv_derivative(config.activation), {k: t.data for k, t in dp.items()},
                               config.t_span, solver)
    return node.block_op(blk, h, dp)


def _adapt(h: Tensor, P: Mapping[str, Tensor], name: str) -> Tensor:
    return T.conv2d(h, P[f"{name}.w"], P[f"{name}.b"])


def forward(net: ContinuousUNet, images, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Foreground probabilities ``[N, out_channels, H, W]``.

    ``params`` supplies leaf tensors for the parameters when gradients are
    wanted; otherwise the network's arrays are used without recording.
    """
    cfg = net.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected images [N,{cfg.in_channels},H,W], got {x.shape}")
    div = 2 ** cfg.levels
    if x.shape[2] % div or x.shape[3] % div:
        raise ValueError(f"spatial size {x.shape[2]}x{x.shape[3]} is not divisible by {div}")
    P = params if params is not None else {k: Tensor(v) for k, v in net.params.items()}

    h, skips = x, []
    for i in range(cfg.levels):
        h = _apply_block(cfg, f"enc{i}.block", _adapt(h, P, f"enc{i}.adapt"), P)
        skips.append(h)
        h = T.downsample(h)
    h = _apply_block(cfg, "mid.block", h, P)
    for i in reversed(range(cfg.levels)):
        h = T.concat_channels(skips[i], T.upsample(h))
        h = _apply_block(cfg, f"dec{i}.block", _adapt(h, P, f"dec{i}.adapt"), P)
    return T.activation(_adapt(h, P, "head"), "sigmoid")


# training ----------------------------------------------------------------

class TrainingDiverged(DivergenceError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.999
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.2
    threads: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_dice: float
    lr: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,loss,val_dice,lr\n")
        for r in self.records:
            buf.write(f"{r.epoch},{r.loss!r},{r.val_dice!r},{r.lr!r}\n")
        return buf.getvalue()

    def epochs_to(self, tau: float) -> int | None:
        """First (1-based) epoch whose validation Dice reaches ``tau``."""
        for r in self.records:
            if r.val_dice >= tau:
                return r.epoch
        return None

    @property
    def final_dice(self) -> float:
        return self.records[-1].val_dice if self.records else math.nan


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(threads))


def _chunk_loss(net: ContinuousUNet, X: np.ndarray, Y: np.ndarray):
    P = {k: Tensor(v, requires_grad=True) for k, v in net.params.items()}
    loss = T.bce_loss(forward(net, X, P), Y)
    T.backward(loss)
    return float(loss.data[0]), {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in P.items()}


def loss_and_grads(net: ContinuousUNet, X: np.ndarray, Y: np.ndarray, threads: int = 1):
    """Mean BCE over the batch and its gradient for every parameter.

    With ``threads > 1`` the batch is split into chunks, each with its own
    graph; chunk results are merged in order, weighted by chunk size.
    """
    chunks = [c for c in np.array_split(np.arange(len(X)), min(threads, len(X))) if len(c)]
    if len(chunks) == 1:
        return _chunk_loss(net, X, Y)
    with ThreadPoolExecutor(len(chunks)) as pool:
        parts = list(pool.map(lambda c: _chunk_loss(net, X[c], Y[c]), chunks))
    n = len(X)
    loss = sum(l * len(c) for (l, _), c in zip(parts, chunks)) / n
    grads = {k: sum(g[k] * len(c) for (_, g), c in zip(parts, chunks)) / n for k in net.params}
    return loss, grads


def mean_dice(net: ContinuousUNet, samples: Sequence[SegSample]) -> float:
    if not samples:
        return math.nan
    X, Y = stack(samples)
    pred = binarize(net.predict_proba(X))
    return float(np.mean([dice(p, t) for p, t in zip(pred, Y)]))


def train(net: ContinuousUNet, dataset: Sequence[SegSample], tcfg: TrainConfig,
          val: Sequence[SegSample] | None = None, progress=None) -> TrainLog:
    """Adam on mean BCE with the learning rate multiplied by ``lr_decay`` every epoch.

    Without an explicit ``val`` set the dataset is split by a seeded shuffle.
    The network's parameter arrays are replaced in place of ``net.params``.
    """
    log = TrainLog()
    if tcfg.epochs == 0:
        return log
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if val is None:
        train_set, val = split(dataset, tcfg.val_fraction, tcfg.seed)
    else:
        train_set = list(dataset)
    X, Y = stack(train_set)
    threads = resolve_threads(tcfg.threads)
    names = sorted(net.params)
    state = T.AdamState.zeros_like([net.params[k] for k in names])
    n = len(X)
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            try:
                loss, grads = loss_and_grads(net, X[idx], Y[idx], threads)
            except DivergenceError as exc:
                raise TrainingDiverged(epoch + 1, f"epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch + 1, f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            new, state = T.adam_step([net.params[k] for k in names], [grads[k] for k in names], state,
                                     lr, tcfg.betas, tcfg.eps)
            if not all(np.isfinite(p).all() for p in new):
                raise TrainingDiverged(epoch + 1, f"non-finite parameters at epoch {epoch + 1}, batch {b + 1}")
            net.params = dict(zip(names, new))
            total += loss * len(idx)
        rec = EpochRecord(epoch + 1, total / n, mean_dice(net, val), lr)
        log.records.append(rec)
        if progress is not None:
            progress(rec)
    return log


# evaluation and experiments -------------------------------------------------

def evaluate_net(net: ContinuousUNet, samples: Sequence[SegSample]) -> list[MetricReport]:
    X, Y = stack(samples)
    return evaluate(binarize(net.predict_proba(X)), Y)


def noise_sweep(net: ContinuousUNet, samples: Sequence[SegSample], sigmas: Sequence[float] = (0.0, 0.2, 0.4, 0.5),
                seed: int = 0) -> list[tuple[float, list[MetricReport]]]:
    """Per-sample metrics of a frozen network on noisy copies of ``samples``."""
    return [(float(s), evaluate_net(net, noisy_copy(samples, s, seed=seed))) for s in sigmas]


@dataclass
class ComparisonResult:
    logs: dict[str, TrainLog]
    tau: float

    def epochs_to_tau(self) -> dict[str, int | None]:
        return {k: log.epochs_to(self.tau) for k, log in self.logs.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("kind,epoch,loss,val_dice\n")
        for kind, log in self.logs.items():
            for r in log.records:
                buf.write(f"{kind},{r.epoch},{r.loss!r},{r.val_dice!r}\n")
        return buf.getvalue()


def convergence_compare(block_kinds: Sequence[str], dataset: Sequence[SegSample], tcfg: TrainConfig,
                        config: UNetConfig | None = None, tau: float = 0.85) -> ComparisonResult:
    """Train one network per block kind with identical seeds, data and order."""
    kinds = [str(k).upper() for k in block_kinds]
    if len(kinds) < 2:
        raise ValueError("a comparison needs at least two block kinds")
    base = (config or UNetConfig()).to_dict()
    logs = {}
    for kind in kinds:
        net = build(UNetConfig.from_dict({**base, "block_kind": kind}), tcfg.seed)
        logs[kind] = train(net, dataset, tcfg)
    return ComparisonResult(logs, tau)


def load_json_config(path: str | Path) -> tuple[UNetConfig, TrainConfig, dict]:
    """Read ``{"model": {...}, "train": {...}, "data": {...}}`` from a JSON file."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ValueError(f"{path}: unknown sections {sorted(unknown)}")
    return (UNetConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {})),
            dict(raw.get("data", {})))
