"""Finite-difference and oracle-equivalence checks for every differentiable path."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import node
from . import tensor as T
from .solvers import IntegrationConfig, SolverKind
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.0e}"


def rel_error(a, b, floor: float = 1e-12) -> float:
    """``max|a - b|`` relative to the larger of the two magnitudes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6,
                       indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; only ``indices`` when given."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in (indices if indices is not None else np.ndindex(x.shape)):
        old = x[idx]
        x[idx] = old + step
        fp = f(x)
        x[idx] = old - step
        fm = f(x)
        x[idx] = old
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def check_op(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             tol: float = 1e-4, step: float = 1e-6) -> CheckResult:
    """Gradient of ``<fn(inputs), r>`` for a random ``r`` against central differences."""
    rng = np.random.default_rng(seed)
    out = fn(*[Tensor(a) for a in inputs])
    r = rng.standard_normal(out.shape)
    _, analytic = T.vjp(fn, inputs, r)
    worst = 0.0
    for i, a in enumerate(inputs):
        def f(v, i=i):
            args = [Tensor(v if j == i else b) for j, b in enumerate(inputs)]
            return float(np.vdot(fn(*args).data, r))
        worst = max(worst, rel_error(analytic[i], numerical_gradient(f, a, step)))
    return CheckResult(name, worst, tol)


def _flat_grads(g: node.BlockGrads) -> np.ndarray:
    parts = [g.x0.ravel()] + [v.ravel() for v in g.accel.values()] + [v.ravel() for v in g.velocity.values()]
    return np.concatenate(parts)


def random_block(channels: int, steps: int, solver: SolverKind | str = SolverKind.RK4, seed: int = 0,
                 scale: float = 0.5, order: int = 2):
    """Convolutional block with non-zero random weights scaled by ``scale``."""
    rng = np.random.default_rng(seed)
    span = IntegrationConfig(0.0, 1.0, steps)
    if order == 1:
        blk = node.make_first_order_block(channels, rng, span, solver, zero_init=False)
    else:
        blk = node.make_dynamic_block(channels, rng, span, solver, zero_init=False)
        blk.velocity_params = {k: v * scale for k, v in blk.velocity_params.items()}
    blk.accel_params.update({k: v * scale for k, v in blk.accel_params.items()})
    return blk


def check_adjoint_vs_stored(adjoint=node.adjoint_backward, steps: int = 50, size: int = 8,
                            tol: float = 1e-3, seed: int = 0) -> CheckResult:
    blk = random_block(2, steps, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x0 = rng.standard_normal((2, size, size))
    up = rng.standard_normal((2, size, size))
    err = rel_error(_flat_grads(adjoint(blk, x0, up)), _flat_grads(node.stored_backward(blk, x0, up)))
    return CheckResult("adjoint_backward", err, tol)


def scalar_linear_block(theta: float, steps: int = 50, solver: SolverKind | str = SolverKind.RK4,
                        velocity_gain: float | None = 0.5) -> node.DynamicBlock:
    """``x'' = theta * x`` on 1x1 maps, ``x'(t0) = velocity_gain * x0``."""
    def accel(P, x, v, t):
        return T.conv2d(x, P["theta"])

    def velocity(P, x):
        return T.conv2d(x, P["gain"])

    span = IntegrationConfig(0.0, 1.0, steps)
    if velocity_gain is None:
        return node.DynamicBlock(accel, {"theta": np.full((1, 1, 1, 1), theta)}, None, {}, span,
                                 SolverKind.parse(solver))
    return node.DynamicBlock(accel, {"theta": np.full((1, 1, 1, 1), theta)}, velocity,
                             {"gain": np.full((1, 1, 1, 1), velocity_gain)}, span, SolverKind.parse(solver))


def check_adjoint_vs_fd(adjoint=node.adjoint_backward, tol: float = 1e-3, step: float = 1e-4) -> CheckResult:
    blk = scalar_linear_block(-0.7)
    x0 = np.array([[[0.8]]])
    up = np.array([[[1.3]]])
    g = adjoint(blk, x0, up)

    def loss_x(v):
        return float(np.vdot(node.forward_block(blk, v), up))

    def loss_param(store, key):
        def f(v):
            old = store[key]
            store[key] = v
            try:
                return float(np.vdot(node.forward_block(blk, x0), up))
            finally:
                store[key] = old
        return f

    worst = rel_error(g.x0, numerical_gradient(loss_x, x0, step))
    worst = max(worst, rel_error(g.accel["theta"],
                                 numerical_gradient(loss_param(blk.accel_params, "theta"), blk.accel_params["theta"], step)))
    worst = max(worst, rel_error(g.velocity["gain"],
                                 numerical_gradient(loss_param(blk.velocity_params, "gain"),
                                                    blk.velocity_params["gain"], step)))
    return CheckResult("adjoint_backward_fd", worst, tol)


def check_first_order_fd(adjoint=node.adjoint_backward, tol: float = 1e-3, step: float = 1e-4,
                         seed: int = 0) -> CheckResult:
    blk = random_block(1, 20, order=1, seed=seed)
    rng = np.random.default_rng(seed + 2)
    x0 = rng.standard_normal((1, 4, 4))
    up = rng.standard_normal((1, 4, 4))
    g = adjoint(blk, x0, up)

    def loss_x(v):
        return float(np.vdot(node.forward_first_order(blk, v), up))

    worst = rel_error(g.x0, numerical_gradient(loss_x, x0, step))
    for key, arr in blk.params.items():
        def f(v, key=key):
            old = blk.params[key]
            blk.params[key] = v
            try:
                return float(np.vdot(node.forward_first_order(blk, x0), up))
            finally:
                blk.params[key] = old
        worst = max(worst, rel_error(g.accel[key], numerical_gradient(f, arr, step)))
    return CheckResult("forward_first_order_adjoint", worst, tol)


def perturbed_net(config, seed: int = 0, scale: float = 0.5):
    """Built network with each all-zero parameter replaced by fan-in scaled noise."""
    from .unet import build

    net = build(config, seed)
    rng = np.random.default_rng(seed + 99)
    params = {}
    for k, v in net.params.items():
        if v.any():
            params[k] = v
        elif v.ndim == 4:
            params[k] = scale * rng.standard_normal(v.shape) / np.sqrt(np.prod(v.shape[1:]))
        else:
            params[k] = 0.01 * rng.standard_normal(v.shape)
    net.params = params
    return net


def check_unet(config=None, size: int = 16, per_tensor: int = 2, tol: float = 1e-3, step: float = 1e-5,
               seed: int = 0, name: str = "unet_forward") -> CheckResult:
    """End-to-end BCE gradient of a small batch against central differences on sampled entries."""
    from .unet import UNetConfig, forward

    config = config or UNetConfig(steps_per_block=2)
    net = perturbed_net(config, seed)
    rng = np.random.default_rng(seed + 5)
    X = rng.random((2, config.in_channels, size, size))
    Y = (rng.random((2, config.out_channels, size, size)) > 0.5).astype(np.float64)
    P = {k: Tensor(v, requires_grad=True) for k, v in net.params.items()}
    xt = Tensor(X, requires_grad=True)
    T.backward(T.bce_loss(forward(net, xt, P), Y))

    def loss_with(key, value):
        params = dict(net.params)
        images = X
        if key is None:
            images = value
        else:
            params[key] = value
        saved, net.params = net.params, params
        try:
            return float(T.bce_loss(forward(net, images), Y).data[0])
        finally:
            net.params = saved

    analytic, numeric = [], []
    idx = [tuple(int(rng.integers(s)) for s in X.shape) for _ in range(per_tensor)]
    numeric.append(numerical_gradient(lambda v: loss_with(None, v), X, step, idx)[tuple(zip(*idx))])
    analytic.append(xt.grad[tuple(zip(*idx))])
    for key in sorted(net.params):
        arr = net.params[key]
        idx = [tuple(int(rng.integers(s)) for s in arr.shape) for _ in range(per_tensor)]
        numeric.append(numerical_gradient(lambda v, key=key: loss_with(key, v), arr, step, idx)[tuple(zip(*idx))])
        analytic.append(P[key].grad[tuple(zip(*idx))])
    return CheckResult(name, rel_error(np.concatenate(analytic), np.concatenate(numeric)), tol)


def conv_loop_oracle(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    f, _, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    out = np.zeros((n, f, ho, wo))
    for a in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = bias[o]
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += kernel[o, ch, i, j] * xp[a, ch, r + i, s + j]
                    out[a, o, r, s] = acc
    return out


def run_all(adjoint=node.adjoint_backward, seed: int = 0, include_unet: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    results = [
        CheckResult("conv2d_oracle", float(np.abs(T.conv2d(Tensor(x), Tensor(k), Tensor(b), 1).data
                                                  - conv_loop_oracle(x, k, b, 1)).max()), 1e-12),
        check_op("conv2d", lambda a, w, c: T.conv2d(a, w, c, padding=1), [x, k, b], seed),
    ]
    for kind in T.ACTIVATIONS:
        z = rng.standard_normal((2, 3, 4, 4))
        if kind == "relu":
            z = np.where(np.abs(z) < 0.05, 0.5, z)  # keep clear of the kink
        results.append(check_op(f"activation_{kind}", lambda a, kind=kind: T.activation(a, kind), [z], seed))
    pool_in = rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64)  # distinct values, no ties
    results.append(check_op("downsample", T.downsample, [pool_in], seed))
    results.append(check_op("upsample", T.upsample, [rng.standard_normal((1, 2, 3, 3))], seed))
    results.append(check_op("concat_channels", T.concat_channels,
                            [rng.standard_normal((1, 1, 3, 3)), rng.standard_normal((1, 2, 3, 3))], seed))
    p = rng.uniform(0.05, 0.95, (2, 1, 3, 3))
    t = (rng.random((2, 1, 3, 3)) > 0.5).astype(np.float64)
    results.append(check_op("bce_loss", lambda a: T.bce_loss(a, t), [p], seed, tol=1e-5))

    w1, w2 = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))

    def two_layer(a, u, v):
        return T.conv2d(T.activation(T.conv2d(a, u, padding=1), "softplus"), v, padding=1)

    results.append(check_op("two_layer_conv", two_layer, [x, w1, w2], seed, step=1e-4))
    results.append(check_adjoint_vs_stored(adjoint))
    results.append(check_adjoint_vs_fd(adjoint))
    results.append(check_first_order_fd(adjoint))
    if include_unet:
        results.append(check_unet())
    return results
