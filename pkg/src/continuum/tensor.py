"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients records its parents
and a vector-Jacobian product closure on the result.  Creation order is a valid
topological order, so :func:`backward` only has to collect the reachable nodes
and walk them from newest to oldest.

Graphs are plain object references; there is no global tape, so independent
graphs may be built from different threads.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

BCE_EPS = 1e-7
ACTIVATIONS = ("relu", "softplus", "sigmoid", "tanh")

_creation = itertools.count()


class Tensor:
    """N-dimensional float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_order", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._order = next(_creation)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        """Result of an operation.

        ``vjp(g)`` must return one gradient (or ``None``) per parent, each shaped
        like that parent.  The graph edge is only kept when some parent needs it.
        """
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return mul(tensor_sum(self), 1.0 / self.size)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor.from_op(a.data + c, (a,), lambda g: (g,))
    _check_same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return Tensor.from_op(ad * bd, (a, b), vjp)


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor.from_op(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def dot(a: Tensor, b) -> Tensor:
    """Scalar ``sum(a * b)``; ``b`` may be a plain array acting as a constant."""
    if isinstance(b, Tensor):
        return tensor_sum(mul(a, b))
    bd = np.asarray(b, dtype=np.float64)
    if bd.shape != a.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {bd.shape}")
    return Tensor.from_op(np.array([np.vdot(a.data, bd)]), (a,), lambda g: (g[0] * bd,))


def activation(x: Tensor, kind: str = "softplus") -> Tensor:
    """Elementwise nonlinearity.

    ``relu`` is not twice differentiable; use one of the smooth kinds inside an
    ODE velocity field.
    """
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0.0)
        return Tensor.from_op(out, (x,), lambda g: (g * (d > 0),))
    if kind == "softplus":
        out = np.logaddexp(0.0, d)
        return Tensor.from_op(out, (x,), lambda g: (g * expit(d),))
    if kind == "sigmoid":
        out = expit(d)
        return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))
    if kind == "tanh":
        out = np.tanh(d)
        return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# convolution and resampling ---------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,k,k]``, stride 1.

    The padded input is laid out channel-major and flattened, so the window
    tap ``(i, j)`` is a constant offset into that buffer; each tap is then a
    single ``[F,C] @ [C,L]`` product on a strided view.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, k, k2 = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if k != k2:
        raise ValueError(f"conv2d: kernel must be square, got {k}x{k2}")
    if padding < 0:
        raise ValueError("conv2d: padding must be non-negative")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output extent {ho}x{wo} is empty for input {h}x{w}, kernel {k}")

    xc = np.zeros((c, n, hp, wp))
    xc[:, :, padding:padding + h, padding:padding + w] = x.data.transpose(1, 0, 2, 3)
    xf = xc.reshape(c, -1)
    total = xf.shape[1]
    span = total - (k - 1) * (wp + 1)
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
    grid = np.zeros((f, total))
    tmp = np.empty((f, span))
    for i, j, off in offsets:
        np.matmul(np.ascontiguousarray(kernel.data[:, :, i, j]), xf[:, off:off + span], out=tmp)
        grid[:, :span] += tmp
    out = grid.reshape(f, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    out = out + bias.data[None, :, None, None] if bias is not None else np.ascontiguousarray(out)

    def vjp(g):
        gg = np.zeros((f, n, hp, wp))
        gg[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gg = gg.reshape(f, -1)[:, :span]
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.empty(kernel.shape)
            for i, j, off in offsets:
                gk[:, :, i, j] = gg @ xf[:, off:off + span].T
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxf = np.zeros((c, total))
            part = np.empty((c, span))
            for i, j, off in offsets:
                np.matmul(np.ascontiguousarray(kernel.data[:, :, i, j].T), gg, out=part)
                gxf[:, off:off + span] += part
            gx = gxf.reshape(c, n, hp, wp)[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, vjp)


def downsample(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return Tensor.from_op(out, (x,), vjp)


def upsample(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-d tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Tensor.from_op(x.data[:, start:stop].copy(), (x,), vjp)


def constant_channel(x: Tensor, value: float) -> Tensor:
    """A single constant channel shaped like one channel of ``x`` (no gradient)."""
    n, _, h, w = x.shape
    return Tensor(np.full((n, 1, h, w), float(value)))


# loss -------------------------------------------------------------------

def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to ``[eps, 1 - eps]``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.shape} vs {t.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)
    val = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    scale = 1.0 / p.size

    def vjp(g):
        return (g[0] * scale * inside * ((1.0 - t) / (1.0 - p) - t / p),)

    return Tensor.from_op(np.array([val]), (pred,), vjp)


# reverse mode -----------------------------------------------------------

def topological_nodes(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` that require grad, newest first."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._order, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten.  Tensors the loss does not depend on are left untouched.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in topological_nodes(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def vjp(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], cotangent: np.ndarray):
    """Evaluate ``fn`` on fresh leaves and pull ``cotangent`` back to each input.

    Returns ``(value, grads)``; ``grads[i]`` is zeros when the output does not
    depend on input ``i``.
    """
    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    out = fn(*leaves)
    backward(dot(out, cotangent))
    grads = [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]
    return out.data, grads


# optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns new parameter arrays and state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state must have equal length")
    b1, b2 = betas
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape}, {g.shape}, {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)
