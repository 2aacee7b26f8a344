"""Second-order neural ODE blocks.

A :class:`DynamicBlock` maps ``x0`` to ``x(t1)`` where

    x'' = accel(x, x', t),   x(t0) = x0,   x'(t0) = velocity(x0)

The block is integrated as the first-order system ``z' = (v, accel(x, v, t))``
over the augmented state ``z = (x, v)``.  Gradients come from the adjoint
system integrated backward in time, which only ever holds the current
augmented state, adjoint and parameter accumulator.

Network callables receive a ``dict`` of parameter tensors followed by the
state parts and, for the acceleration/derivative networks, the time ``t``.
"""
from __future__ import annotations

import json
import struct
import warnings
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .solvers import IntegrationConfig, SolverKind, integrate, march
from .tensor import Tensor

AccelFn = Callable[..., Tensor]
VelocityFn = Callable[[Mapping[str, Tensor], Tensor], Tensor]

DEFAULT_SPAN = IntegrationConfig(0.0, 1.0, 8)


class AugmentedState:
    """Stacked state ``(x, x', ..., x^(m-1))`` closed under ``+`` and scalar ``*``."""

    __slots__ = ("parts",)

    def __init__(self, *parts):
        self.parts = tuple(parts)

    @property
    def x(self):
        return self.parts[0]

    @property
    def v(self):
        return self.parts[1]

    def __add__(self, other: "AugmentedState") -> "AugmentedState":
        return AugmentedState(*(a + b for a, b in zip(self.parts, other.parts)))

    def __mul__(self, c: float) -> "AugmentedState":
        return AugmentedState(*(c * a for a in self.parts))

    __rmul__ = __mul__

    def all_finite(self) -> bool:
        for p in self.parts:
            d = p.data if isinstance(p, Tensor) else p
            if not np.isfinite(d).all():
                return False
        return True

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(p, p) for p in (_data(q) for q in self.parts))))

    def __repr__(self) -> str:
        return f"AugmentedState({len(self.parts)} parts, shape={np.shape(_data(self.parts[0]))})"


def _data(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def _as_tensors(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


@dataclass(eq=False)
class DynamicBlock:
    accel: AccelFn
    accel_params: dict[str, np.ndarray]
    velocity: VelocityFn | None = None
    velocity_params: dict[str, np.ndarray] = field(default_factory=dict)
    t_span: IntegrationConfig = DEFAULT_SPAN
    solver: SolverKind = SolverKind.RK4

    order = 2

    def initial_state(self, x0: np.ndarray) -> AugmentedState:
        if self.velocity is None:
            return AugmentedState(x0, np.zeros_like(x0))
        v0 = self.velocity(_as_tensors(self.velocity_params), Tensor(x0)).data
        if v0.shape != x0.shape:
            raise ValueError(f"velocity network changed shape {x0.shape} -> {v0.shape}")
        return AugmentedState(x0, v0)


@dataclass(eq=False)
class FirstOrderBlock:
    derivative: AccelFn
    params: dict[str, np.ndarray]
    t_span: IntegrationConfig = DEFAULT_SPAN
    solver: SolverKind = SolverKind.RK4

    order = 1

    @property
    def accel(self) -> AccelFn:
        return self.derivative

    @property
    def accel_params(self) -> dict[str, np.ndarray]:
        return self.params

    def initial_state(self, x0: np.ndarray) -> AugmentedState:
        return AugmentedState(x0)


Block = DynamicBlock | FirstOrderBlock


# reduction and forward ----------------------------------------------------

def reduce_to_first_order(block: Block, params: Mapping | None = None):
    """Field ``(t, z) -> z'`` of the equivalent first-order system.

    For an order-``m`` block, ``z' = (z_2, ..., z_m, accel(z_1, ..., z_m, t))``.
    States made of :class:`Tensor` parts are evaluated on the graph; plain
    arrays are evaluated without recording.
    """
    P = _as_tensors(block.accel_params if params is None else params)
    accel = block.accel

    def field(t, z: AugmentedState) -> AugmentedState:
        parts = z.parts
        if isinstance(parts[0], Tensor):
            top = accel(P, *parts, t)
        else:
            top = accel(P, *(Tensor(p) for p in parts), t).data
        return AugmentedState(*parts[1:], top)

    return field


def _batched(x0) -> tuple[np.ndarray, bool]:
    x = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"block input must be [C,H,W] or [N,C,H,W], got shape {x.shape}")
    return x, False


def flow(block: Block, x0: np.ndarray) -> AugmentedState:
    """Final augmented state for a batched input ``x0[N,C,H,W]``."""
    z0 = block.initial_state(x0)
    return integrate(reduce_to_first_order(block), z0, block.t_span, block.solver)


def forward_block(block: DynamicBlock, x0) -> np.ndarray:
    """Position component of the block flow at ``t1``; no trajectory is kept."""
    x, squeeze = _batched(x0)
    out = flow(block, x).x
    return out[0] if squeeze else out


def forward_first_order(block: FirstOrderBlock, x0) -> np.ndarray:
    x, squeeze = _batched(x0)
    out = flow(block, x).x
    return out[0] if squeeze else out


# adjoint -----------------------------------------------------------------

class RetentionProbe:
    """Counts how many registered state arrays are alive at once.

    Arrays are tracked through weak references, so the peak reflects what the
    caller actually keeps, not what it touched.
    """

    def __init__(self):
        self._refs: list[weakref.ref] = []
        self.peak = 0
        self.steps = 0

    def __call__(self, state: AugmentedState) -> None:
        self.steps += 1
        for p in state.parts:
            self._refs.append(weakref.ref(_data(p)))
        self._refs = [r for r in self._refs if r() is not None]
        self.peak = max(self.peak, len(self._refs))


class BlockGrads(NamedTuple):
    x0: np.ndarray
    accel: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]


def _adjoint_field(block: Block, names: list[str], params: list[np.ndarray]):
    m = block.order
    accel = block.accel

    def field(t, s: AugmentedState) -> AugmentedState:
        z, a = s.parts[:m], s.parts[m:2 * m]

        def fn(*args):
            return accel(dict(zip(names, args[m:])), *args[:m], t)

        value, grads = T.vjp(fn, [*z, *params], a[-1])
        dz = (*z[1:], value)
        da = tuple(-grads[i] if i == 0 else -(grads[i] + a[i - 1]) for i in range(m))
        dacc = tuple(-g for g in grads[m:])
        return AugmentedState(*dz, *da, *dacc)

    return field


def adjoint_backward(block: Block, x0, upstream_grad, z1: AugmentedState | None = None,
                     probe: RetentionProbe | None = None) -> BlockGrads:
    """Gradients of ``<upstream_grad, block(x0)>`` by the adjoint method.

    The augmented system ``(z, a, acc)`` with ``a' = -a df/dz`` and
    ``acc' = -a df/dtheta`` is integrated from ``t1`` back to ``t0`` using the
    block's solver and step count.  ``z1`` may be passed to skip recomputing
    the forward flow.
    """
    x, squeeze = _batched(x0)
    g1 = np.asarray(upstream_grad, dtype=np.float64)
    if squeeze:
        g1 = g1[None]
    if g1.shape != x.shape:
        raise ValueError(f"upstream gradient shape {g1.shape} does not match block output {x.shape}")
    if z1 is None:
        z1 = flow(block, x)
    elif z1.x.shape != x.shape:
        raise ValueError(f"final state shape {z1.x.shape} does not match input {x.shape}")

    m = block.order
    names = list(block.accel_params)
    params = [block.accel_params[k] for k in names]
    a1 = (g1, *(np.zeros_like(g1) for _ in range(m - 1)))
    s = AugmentedState(*z1.parts, *a1, *(np.zeros_like(p) for p in params))
    del z1, a1

    field = _adjoint_field(block, names, params)
    cfg = block.t_span
    s = march(field, s, cfg.t1, -cfg.h, cfg.steps, block.solver, on_step=probe)

    a0 = s.parts[m:2 * m]
    acc = dict(zip(names, s.parts[2 * m:]))
    gx = a0[0]
    gvel: dict[str, np.ndarray] = {}
    if m == 2 and block.velocity is not None:
        vnames = list(block.velocity_params)
        vparams = [block.velocity_params[k] for k in vnames]

        def vel(xx, *ps):
            return block.velocity(dict(zip(vnames, ps)), xx)

        _, vg = T.vjp(vel, [x, *vparams], a0[1])
        gx = gx + vg[0]
        gvel = dict(zip(vnames, vg[1:]))
    return BlockGrads(gx[0] if squeeze else gx, acc, gvel)


def stored_backward(block: Block, x0, upstream_grad) -> BlockGrads:
    """Reference gradients by backpropagating through every recorded solver stage.

    Memory grows with the number of steps; used only to check the adjoint.
    """
    x, squeeze = _batched(x0)
    g1 = np.asarray(upstream_grad, dtype=np.float64)
    if squeeze:
        g1 = g1[None]
    xt = Tensor(x, requires_grad=True)
    P = {k: Tensor(v, requires_grad=True) for k, v in block.accel_params.items()}
    V = {k: Tensor(v, requires_grad=True) for k, v in getattr(block, "velocity_params", {}).items()}
    if block.order == 1:
        z0 = AugmentedState(xt)
    elif block.velocity is None:
        z0 = AugmentedState(xt, Tensor(np.zeros_like(x)))
    else:
        z0 = AugmentedState(xt, block.velocity(V, xt))
    z1 = integrate(reduce_to_first_order(block, P), z0, block.t_span, block.solver)
    T.backward(T.dot(z1.x, g1))

    def grad_of(t: Tensor) -> np.ndarray:
        return t.grad if t.grad is not None else np.zeros(t.shape)

    gx = grad_of(xt)
    return BlockGrads(gx[0] if squeeze else gx, {k: grad_of(t) for k, t in P.items()},
                      {k: grad_of(t) for k, t in V.items()})


def block_op(block: Block, x: Tensor, accel_params: Mapping[str, Tensor],
             velocity_params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Block as a single graph node whose backward pass is the adjoint solve.

    ``accel_params``/``velocity_params`` are the leaf tensors standing for the
    block's parameters in the surrounding graph; their arrays must be the ones
    the block holds.
    """
    velocity_params = velocity_params or {}
    z1 = flow(block, x.data)
    a_names, v_names = list(accel_params), list(velocity_params)

    def vjp(g):
        grads = adjoint_backward(block, x.data, g, z1=z1)
        return (grads.x0, *(grads.accel[k] for k in a_names), *(grads.velocity[k] for k in v_names))

    parents = (x, *(accel_params[k] for k in a_names), *(velocity_params[k] for k in v_names))
    return Tensor.from_op(z1.x, parents, vjp)


# convolutional networks --------------------------------------------------

def he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _smoothness_check(kind: str) -> None:
    if kind not in T.ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    if kind == "relu":
        warnings.warn("relu makes the velocity field non-smooth; prefer softplus or tanh",
                      stacklevel=3)


def conv_accel(activation: str = "softplus"):
    """``x'' = conv(act(conv([x, v, t])))`` with 3x3 kernels."""

    def accel(P, x, v, t):
        h = T.concat_channels(T.concat_channels(x, v), T.constant_channel(x, t))
        h = T.activation(T.conv2d(h, P["w1"], P["b1"], padding=1), activation)
        return T.conv2d(h, P["w2"], P["b2"], padding=1)

    return accel


def conv_derivative(activation: str = "softplus"):
    """``x' = conv(act(conv([x, t])))`` with 3x3 kernels."""

    def deriv(P, x, t):
        h = T.concat_channels(x, T.constant_channel(x, t))
        h = T.activation(T.conv2d(h, P["w1"], P["b1"], padding=1), activation)
        return T.conv2d(h, P["w2"], P["b2"], padding=1)

    return deriv


def conv_velocity(P, x):
    return T.conv2d(x, P["w"], P["b"], padding=1)


def _field_params(rng, c_in: int, c: int, zero_last: bool) -> dict[str, np.ndarray]:
    w2 = np.zeros((c, c, 3, 3)) if zero_last else he_normal(rng, (c, c, 3, 3))
    return {"w1": he_normal(rng, (c, c_in, 3, 3)), "b1": np.zeros(c), "w2": w2, "b2": np.zeros(c)}


def make_dynamic_block(channels: int, rng: np.random.Generator, t_span: IntegrationConfig = DEFAULT_SPAN,
                       solver: SolverKind | str = SolverKind.RK4, activation: str = "softplus",
                       velocity: str = "conv", zero_init: bool = True) -> DynamicBlock:
    """Convolutional second-order block on ``channels`` feature maps.

    ``velocity="zero"`` gives the parameter-free variant with ``x'(t0) = 0``.
    With ``zero_init`` the last acceleration layer and the velocity network
    start at zero, so the block starts as the identity map.
    """
    _smoothness_check(activation)
    accel_params = _field_params(rng, 2 * channels + 1, channels, zero_init)
    if velocity == "zero":
        vel, vparams = None, {}
    elif velocity == "conv":
        w = np.zeros((channels, channels, 3, 3)) if zero_init else he_normal(rng, (channels, channels, 3, 3))
        vel, vparams = conv_velocity, {"w": w, "b": np.zeros(channels)}
    else:
        raise ValueError(f"velocity must be 'conv' or 'zero', got {velocity!r}")
    return DynamicBlock(conv_accel(activation), accel_params, vel, vparams, t_span, SolverKind.parse(solver))


def make_first_order_block(channels: int, rng: np.random.Generator, t_span: IntegrationConfig = DEFAULT_SPAN,
                           solver: SolverKind | str = SolverKind.RK4, activation: str = "softplus",
                           zero_init: bool = True) -> FirstOrderBlock:
    _smoothness_check(activation)
    return FirstOrderBlock(conv_derivative(activation), _field_params(rng, channels + 1, channels, zero_init),
                           t_span, SolverKind.parse(solver))


def array_field(block: Block, t_offset: float = 0.0):
    """Reduced field acting on a stacked array ``[order, ...]``; for diagnostics."""
    reduced = reduce_to_first_order(block)

    def f(t, z):
        z = np.asarray(z, dtype=np.float64)
        parts = [p[None] if p.ndim == 3 else p for p in z]
        out = reduced(t + t_offset, AugmentedState(*parts))
        return np.stack([np.reshape(p, z.shape[1:]) for p in out.parts])

    return f


# parameter container -----------------------------------------------------

_MAGIC = b"CNTMPAR1"


def save_params(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write arrays as little-endian float64 behind a JSON header.

    Layout: 8-byte magic, uint64 header length, UTF-8 JSON header listing
    ``name``, ``shape`` and byte ``offset`` into the payload, then the payload.
    """
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    payload = memoryview(raw)[16 + hlen:]
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"]) \
            .reshape(e["shape"]).astype(np.float64)
    return arrays, header.get("meta", {})
