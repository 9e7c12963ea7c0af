"""Shared oracles for the test suite."""
from __future__ import annotations

import math

import numpy as np

from flowcast import autodiff as ad
from flowcast.arima import ArimaModel
from flowcast.cells import CellConfig, CellKind, init_params, sequence_forward
from flowcast.ode import SolverConfig

GRAD_TOL = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_grads(loss_fn, leaves: list[ad.Tensor], h: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences."""
    for p in leaves:
        p.grad = None
    with ad.Tape() as tape:
        loss = loss_fn()
    ad.backward(tape, loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in leaves]
    worst = 0.0
    for p, g in zip(leaves, analytic):
        num = ad.numerical_grad(lambda: loss_fn().item(), p.data, h)
        worst = max(worst, rel_error(g, num))
    return worst


def away_from_zero(rng, shape, margin=0.1):
    """Normal draws pushed at least ``margin`` away from 0 (keeps kinks out of the FD stencil)."""
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def cell_case(kind: CellKind, seed: int, hidden=4, n_in=3, length=5, batch=2, n_out=2):
    """Random cell, irregular timestamps and a mean-squared loss over its output."""
    rng = np.random.default_rng(seed)
    cfg = CellConfig(kind, hidden_size=hidden, input_size=n_in, output_size=n_out,
                     solver=SolverConfig("rk4", 2), tau_range=(1.0, 3.0), r_on=0.5, leak_alpha=0.05)
    params = init_params(cfg, rng)
    X = rng.normal(size=(batch, length, n_in))
    Y = rng.normal(size=(batch, n_out))
    gaps = rng.uniform(0.5, 1.5, size=length)
    ts = np.broadcast_to(np.cumsum(gaps) + rng.uniform(0, 2), (batch, length)).copy()
    aux = None
    if kind is CellKind.GRU_D:
        mask = (rng.random((batch, length, n_in)) < 0.7).astype(float)
        aux = {"mask": mask, "delta": rng.uniform(0.5, 3.0, size=(batch, length, n_in)),
               "x_last": rng.normal(size=(batch, length, n_in)), "x_mean": rng.normal(size=n_in)}

    def loss():
        return ad.compute_loss("mse", sequence_forward(cfg, params, X, ts, aux), Y)

    return loss, list(params.values())


def simulate_arma(phi, theta, n, seed, c=0.0, sigma=1.0, burn=200):
    """Plain-loop ARMA simulation, independent of the library's filters."""
    rng = np.random.default_rng(seed)
    e = rng.normal(scale=sigma, size=n + burn)
    y = np.zeros(n + burn)
    for t in range(n + burn):
        v = c + e[t]
        for i, ph in enumerate(phi, start=1):
            if t - i >= 0:
                v += ph * y[t - i]
        for j, th in enumerate(theta, start=1):
            if t - j >= 0:
                v += th * e[t - j]
        y[t] = v
    return y[burn:]


def brute_force_rolling(model: ArimaModel, history, test):
    """Re-derive the innovation recursion from scratch before every forecast."""
    d = model.order.d
    mu = model.mu if model.include_constant else 0.0
    ys = list(history)
    preds = []
    for y_true in test:
        z = np.diff(np.asarray(ys), n=d) if d else np.asarray(ys)
        w = z - mu
        e = np.zeros(len(w))
        for t in range(len(w)):
            v = w[t]
            for i, ph in enumerate(model.phi, start=1):
                if t - i >= 0:
                    v -= ph * w[t - i]
            for j, th in enumerate(model.theta, start=1):
                if t - j >= 0:
                    v -= th * e[t - j]
            e[t] = v
        zhat = mu
        for i, ph in enumerate(model.phi, start=1):
            if len(w) - i >= 0:
                zhat += ph * w[len(w) - i]
        for j, th in enumerate(model.theta, start=1):
            if len(e) - j >= 0:
                zhat += th * e[len(e) - j]
        yhat = zhat
        for k in range(1, d + 1):
            yhat -= math.comb(d, k) * (-1) ** k * ys[-k]
        preds.append(yhat)
        ys.append(float(y_true))
    return np.array(preds)


# one summary line per acceptance criterion, printed by the conftest terminal hook
ACCEPTANCE: dict = {}


def report(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
