"""Fixed-step explicit Runge-Kutta integrators that stay differentiable.

Two routes produce the same numbers:

* a plain callable ``field(h: Tensor) -> Tensor`` is unrolled op by op on
  the active tape;
* an :class:`ODEField` (numpy ``f`` plus a hand-written ``vjp``) is solved
  as a single tape node whose backward pass is the discrete adjoint of the
  same Runge-Kutta scheme. The cells use this route because it is much
  cheaper per step.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, custom_op, lincomb

__all__ = ["Method", "SolverConfig", "ODEField", "integrate", "n_substeps"]


class Method(str, enum.Enum):
    EULER = "euler"
    RK4 = "rk4"


# Butcher tableaux: (a, b) with a strictly lower triangular
_TABLEAU = {
    Method.EULER: ((), (1.0,)),
    Method.RK4: (((0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)), (1 / 6, 1 / 3, 1 / 3, 1 / 6)),
}


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.RK4
    step_count: int = 4  # steps per unit of time

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if int(self.step_count) < 1:
            raise ValueError("step_count must be >= 1")


def n_substeps(t0: float, t1: float, cfg: SolverConfig) -> int:
    return max(1, int(round((t1 - t0) * cfg.step_count)))


class ODEField:
    """Vector field with explicit numpy evaluation and vector-Jacobian product.

    Subclasses set ``params`` (a tuple of Tensors the field depends on) and
    implement ``f`` and ``vjp``.
    """

    params: tuple = ()

    def f(self, h: np.ndarray) -> np.ndarray:
        return self.forward(h)[0]

    def forward(self, h: np.ndarray) -> tuple[np.ndarray, object]:
        """Return f(h) and whatever ``vjp`` can reuse."""
        return self.f(h), None

    def vjp(self, h: np.ndarray, g: np.ndarray, cache=None) -> tuple[np.ndarray, list]:
        """Return (dL/dh, [dL/dparam for each param]) given g = dL/df(h)."""
        gh, aux = self.vjp_state(h, g, cache)
        return gh, self.param_grads([(h, g, cache, aux)])

    def vjp_state(self, h, g, cache=None):
        """State part of the VJP plus anything ``param_grads`` needs later."""
        raise NotImplementedError

    def param_grads(self, records) -> list:
        """Parameter gradients summed over ``(h, g, cache, aux)`` records.

        The solver defers this to the end of the backward pass so that many
        small outer products collapse into one matrix product.
        """
        raise NotImplementedError

    def __call__(self, h: Tensor) -> Tensor:
        """Tape-recorded evaluation, so an ODEField also works on the unrolled route."""
        out, cache = self.forward(h.data)

        def vjp(g):
            gh, gps = self.vjp(h.data, g, cache)
            return (gh, *gps)

        return custom_op(out, (h, *self.params), vjp, type(self).__name__)


def _check(h: np.ndarray, step: int) -> None:
    if not np.isfinite(h).all():
        raise NonFiniteError(f"non-finite state at solver step {step}")


def integrate(field, h0: Tensor, t0: float, t1: float, cfg: SolverConfig = SolverConfig()) -> Tensor:
    """Return h(t1) for dh/dt = field(h), h(t0) = h0."""
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    a, b = _TABLEAU[cfg.method]
    n = n_substeps(t0, t1, cfg)
    dt = (t1 - t0) / n
    if isinstance(field, ODEField):
        return _integrate_fused(field, h0, dt, n, a, b)

    h = h0
    for step in range(n):
        ks = []
        for i in range(len(b)):
            if i == 0:
                y = h
            else:
                y = lincomb([h, *ks], [1.0, *(dt * c for c in a[i - 1])])
            ks.append(field(y))
        h = lincomb([h, *ks], [1.0, *(dt * c for c in b)])
        _check(h.data, step)
    return h


def _integrate_fused(field: ODEField, h0: Tensor, dt: float, n: int, a, b) -> Tensor:
    stages = len(b)
    h = h0.data
    trace = []  # per substep: stage inputs and field caches
    with np.errstate(over="ignore", invalid="raise"):
        for step in range(n):
            ys, ks, caches = [], [], []
            for i in range(stages):
                y = h
                if i:
                    y = h.copy()
                    for c, k in zip(a[i - 1], ks):
                        if c:
                            y += (dt * c) * k
                k, cache = field.forward(y)
                ys.append(y)
                ks.append(k)
                caches.append(cache)
            h = h.copy()
            for c, k in zip(b, ks):
                h += (dt * c) * k
            _check(h, step)
            trace.append((ys, caches))

    def vjp(g):
        records = []
        gh = g
        for ys, caches in reversed(trace):
            kbar = [None] * stages
            gy = [None] * stages
            acc = gh.copy()
            for i in reversed(range(stages)):
                kb = (dt * b[i]) * gh
                for j in range(i + 1, stages):
                    c = a[j - 1][i] if i < len(a[j - 1]) else 0.0
                    if c:
                        kb = kb + (dt * c) * gy[j]
                kbar[i] = kb
                gy[i], aux = field.vjp_state(ys[i], kb, caches[i])
                records.append((ys[i], kb, caches[i], aux))
                acc += gy[i]
            gh = acc
        return (gh, *field.param_grads(records))

    return custom_op(h, (h0, *field.params), vjp, "integrate")


def exact_linear_decay(h0: float, dt: float, tau: float = 1.0) -> float:
    """Closed form of dh/dt = -h/tau, used as a reference in checks."""
    return h0 * math.exp(-dt / tau)
