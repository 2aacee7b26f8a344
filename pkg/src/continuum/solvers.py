"""Fixed-step initial value problem integrators and global-error measurement.

States may be numpy arrays, :class:`~continuum.tensor.Tensor` objects or any
type closed under ``+`` and multiplication by a Python float (for example
:class:`~continuum.node.AugmentedState`), so the same stepping code drives
plain arrays, recorded tensor graphs and augmented adjoint systems.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

Field = Callable[[float, Any], Any]


class SolverKind(str, Enum):
    EULER = "euler"
    AB2 = "ab2"
    ABM2 = "abm2"
    RK4 = "rk4"

    @property
    def order(self) -> int:
        return {"euler": 1, "ab2": 2, "abm2": 2, "rk4": 4}[self.value]

    @classmethod
    def parse(cls, value: "str | SolverKind") -> "SolverKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown solver {value!r}; expected one of {names}") from None


class DivergenceError(ArithmeticError):
    """A non-finite state appeared during integration."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"integration diverged: non-finite state at step {step}")


@dataclass(frozen=True)
class IntegrationConfig:
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.t1)) or self.t1 <= self.t0:
            raise ValueError(f"need finite t1 > t0, got t0={self.t0}, t1={self.t1}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.steps


def is_finite(state) -> bool:
    if hasattr(state, "all_finite"):
        return state.all_finite()
    if isinstance(state, (tuple, list)):
        return all(is_finite(s) for s in state)
    return bool(np.isfinite(np.asarray(state)).all())


def rk4_step(field: Field, t: float, x, h: float, k1=None):
    if k1 is None:
        k1 = field(t, x)
    half = 0.5 * h
    k2 = field(t + half, x + half * k1)
    k3 = field(t + half, x + half * k2)
    k4 = field(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def march(field: Field, x0, t0: float, h: float, steps: int, kind: SolverKind | str,
          trajectory: bool = False, on_step: Callable[[Any], None] | None = None):
    """Take ``steps`` steps of signed size ``h`` from ``(t0, x0)``.

    A negative ``h`` integrates backward in time.  The two-step Adams methods
    bootstrap their first step with one RK4 step.  ``on_step`` sees the
    initial state and every new state.
    """
    kind = SolverKind.parse(kind)
    x = x0
    states = [x0] if trajectory else None
    if on_step is not None:
        on_step(x0)
    f_prev = None
    f_now = None
    for n in range(steps):
        t = t0 + n * h
        if f_now is None:
            f_now = field(t, x)
        if kind is SolverKind.EULER:
            x_new = x + h * f_now
        elif kind is SolverKind.RK4 or f_prev is None:
            x_new = rk4_step(field, t, x, h, k1=f_now)
        else:
            x_pred = x + (1.5 * h) * f_now + (-0.5 * h) * f_prev
            if kind is SolverKind.AB2:
                x_new = x_pred
            else:
                f_pred = field(t + h, x_pred)
                x_new = x + (0.5 * h) * (f_now + f_pred)
        if not is_finite(x_new):
            raise DivergenceError(n + 1)
        f_prev, f_now, x = f_now, None, x_new
        if states is not None:
            states.append(x)
        if on_step is not None:
            on_step(x)
    return states if trajectory else x


def integrate(field: Field, x0, config: IntegrationConfig, kind: SolverKind | str = SolverKind.RK4,
              trajectory: bool = False):
    """Integrate ``x' = field(t, x)`` over ``[config.t0, config.t1]``.

    Returns the final state, or all ``steps + 1`` states when ``trajectory``.
    """
    if not is_finite(x0):
        raise DivergenceError(0, "initial state contains non-finite values")
    return march(field, x0, config.t0, config.h, config.steps, kind, trajectory=trajectory)


# test problems and global error ------------------------------------------

@dataclass
class TestProblem:
    __test__ = False  # not a pytest class

    name: str
    field: Field
    x0: Any
    t0: float = 0.0
    t1: float = 1.0
    exact: Callable[[float], Any] | None = None
    lam: complex | None = None


def decay_problem() -> TestProblem:
    """``x' = -x``, ``x(0) = 1`` with solution ``exp(-t)``."""
    return TestProblem("decay", lambda t, x: -x, np.array([1.0]),
                       exact=lambda t: np.array([math.exp(-t)]), lam=-1.0)


def forced_linear_problem(lam: float = -0.5, omega: float = 2.0) -> TestProblem:
    """``x' = lam*x + sin(omega*t)``, ``x(0) = 1``.

    The forcing stands in for a time-only velocity field; the exact solution
    is a decaying exponential plus the periodic particular solution.
    """
    denom = omega * omega + lam * lam
    a = -lam / denom
    b = -omega / denom
    c = 1.0 - b

    def exact(t):
        return np.array([a * math.sin(omega * t) + b * math.cos(omega * t) + c * math.exp(lam * t)])

    return TestProblem("forced_linear", lambda t, x: lam * x + math.sin(omega * t), np.array([1.0]),
                       exact=exact, lam=lam)


CANONICAL_PROBLEMS: dict[str, Callable[[], TestProblem]] = {
    "decay": decay_problem,
    "forced_linear": forced_linear_problem,
}


@dataclass
class GlobalErrorReport:
    h_values: list[float]
    errors: list[float]
    fitted_order: float
    solver: str = ""
    problem: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("h,error\n")
        for h, e in zip(self.h_values, self.errors):
            buf.write(f"{h!r},{e!r}\n")
        buf.write(f"# fitted_order={self.fitted_order!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GlobalErrorReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "h,error":
            raise ValueError("missing 'h,error' header")
        hs, errs, order = [], [], math.nan
        for ln in lines[1:]:
            if ln.startswith("# fitted_order="):
                order = float(ln.split("=", 1)[1])
            else:
                h, e = ln.split(",")
                hs.append(float(h))
                errs.append(float(e))
        return cls(hs, errs, order)


def fit_order(h_values: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    slope, _ = np.polyfit(np.log(h_values), np.log(errors), 1)
    return float(slope)


def _error_norm(a, b) -> float:
    return float(np.linalg.norm(np.ravel(np.asarray(a) - np.asarray(b))))


def estimate_convergence_order(problem: TestProblem, kind: SolverKind | str,
                               h_values: Sequence[float]) -> GlobalErrorReport:
    kind = SolverKind.parse(kind)
    if problem.exact is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution to measure against")
    hs = sorted((float(h) for h in h_values), reverse=True)
    if len(hs) < 4 or len(set(hs)) != len(hs):
        raise ValueError("need at least 4 distinct step sizes")
    if hs[0] / hs[-1] < 10.0:
        raise ValueError("step sizes must span at least one decade")
    span = problem.t1 - problem.t0
    target = problem.exact(problem.t1)
    errors = []
    for h in hs:
        steps = round(span / h)
        if steps < 1 or abs(steps * h - span) > 1e-9 * span:
            raise ValueError(f"step size {h} does not divide the interval [{problem.t0}, {problem.t1}]")
        cfg = IntegrationConfig(problem.t0, problem.t1, steps)
        errors.append(_error_norm(target, integrate(problem.field, problem.x0, cfg, kind)))
    if min(errors) <= 0.0:
        raise ValueError("zero global error: order is undefined")
    return GlobalErrorReport(hs, errors, fit_order(hs, errors), kind.value, problem.name)


# diagnostics -------------------------------------------------------------

def estimate_lipschitz(field: Field, region: tuple[Any, Any], samples: int, seed: int = 0,
                       t: float = 0.0, local_scale: float = 1e-3) -> float:
    """Sampled lower bound on the Lipschitz constant of ``field(t, .)``.

    ``region`` is a ``(low, high)`` pair of arrays bounding the states.  Every
    pair of ``samples`` random points is compared, plus one close neighbour of
    each point at relative distance ``local_scale``.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples")
    lo = np.asarray(region[0], dtype=np.float64)
    hi = np.broadcast_to(np.asarray(region[1], dtype=np.float64), lo.shape)
    width = hi - lo
    if np.any(width <= 0):
        raise ValueError("region has zero volume")
    rng = np.random.default_rng(seed)
    pts = lo + width * rng.random((samples, *lo.shape))
    near = np.clip(pts + local_scale * width * rng.standard_normal(pts.shape), lo, hi)
    out = np.stack([np.asarray(field(t, p), dtype=np.float64) for p in pts])
    out_near = np.stack([np.asarray(field(t, p), dtype=np.float64) for p in near])

    din, dout = pdist(pts.reshape(samples, -1)), pdist(out.reshape(samples, -1))
    ratios = [dout[din > 0] / din[din > 0]]
    dn = np.linalg.norm((pts - near).reshape(samples, -1), axis=1)
    dno = np.linalg.norm((out - out_near).reshape(samples, -1), axis=1)
    ratios.append(dno[dn > 0] / dn[dn > 0])
    both = np.concatenate(ratios)
    return float(both.max()) if both.size else 0.0


def growth_envelope(z0_norm: float, lipschitz: float, t: float, f0_norm: float = 0.0) -> float:
    """Gronwall bound on ``|z(t)|`` when ``|f(z)| <= f0_norm + lipschitz*|z|``."""
    if lipschitz == 0.0:
        return z0_norm + f0_norm * t
    growth = math.exp(lipschitz * t)
    return z0_norm * growth + f0_norm / lipschitz * (growth - 1.0)


def roundtrip_error(field: Field, x0, config: IntegrationConfig,
                    kind: SolverKind | str = SolverKind.RK4) -> float:
    """Integrate forward over the span and back again; distance from ``x0``."""
    x1 = integrate(field, x0, config, kind)
    back = march(field, x1, config.t1, -config.h, config.steps, kind)
    return _error_norm(x0, back)


def min_separation(field: Field, xa, xb, config: IntegrationConfig,
                   kind: SolverKind | str = SolverKind.RK4) -> float:
    """Smallest distance between two trajectories over all shared time steps."""
    ta = integrate(field, xa, config, kind, trajectory=True)
    tb = integrate(field, xb, config, kind, trajectory=True)
    return min(_error_norm(a, b) for a, b in zip(ta, tb))
