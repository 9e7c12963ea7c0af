"""The seven recurrent cells and the shared sequence-to-prediction driver.

Every cell step is recorded as a single fused node on the autodiff tape
(numpy forward plus an analytic vector-Jacobian product), so backprop
through a 30-step window stays cheap. The state of a cell is packed into
one array, ``[h | c | ...]``, whose leading ``hidden_size`` columns are
always the hidden vector fed to the linear readout.

Input-side projections ``x @ W + b`` do not depend on the recurrence and
are computed once per window before unrolling.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, custom_op, expit
from .ode import ODEField, SolverConfig, integrate

__all__ = [
    "CellKind",
    "CellConfig",
    "init_params",
    "param_count",
    "state_size",
    "initial_state",
    "sequence_forward",
    "vanilla_step",
    "lstm_step",
    "phased_lstm_step",
    "phased_time_gate",
    "time_gate",
    "gru_d_step",
    "gru_d_decay",
    "ct_rnn_step",
    "ct_lstm_step",
    "ct_lstm_decay",
    "ode_rnn_anode_step",
    "CTRNNField",
    "AnodeField",
    "softplus_inv",
    "TAU_FLOOR",
]

TAU_FLOOR = 1e-3
MODEL_SIZES = (32, 64, 128)


class CellKind(str, enum.Enum):
    VANILLA_RNN = "vanilla_rnn"
    LSTM = "lstm"
    PHASED_LSTM = "phased_lstm"
    GRU_D = "gru_d"
    CT_RNN = "ct_rnn"
    CT_LSTM = "ct_lstm"
    ODE_RNN_ANODE = "anode"


# Display order of the comparison table
TABLE_ORDER = (
    CellKind.ODE_RNN_ANODE,
    CellKind.VANILLA_RNN,
    CellKind.LSTM,
    CellKind.PHASED_LSTM,
    CellKind.CT_LSTM,
    CellKind.CT_RNN,
    CellKind.GRU_D,
)

DISPLAY_NAMES = {
    CellKind.ODE_RNN_ANODE: "ANODE",
    CellKind.VANILLA_RNN: "Vanilla RNN",
    CellKind.LSTM: "LSTM",
    CellKind.PHASED_LSTM: "Phased LSTM",
    CellKind.CT_LSTM: "CT-LSTM",
    CellKind.CT_RNN: "CT-RNN",
    CellKind.GRU_D: "GRU-D",
}

# Number of stacked gate blocks in the input/recurrent matrices
_GATES = {
    CellKind.VANILLA_RNN: 1,
    CellKind.LSTM: 4,
    CellKind.PHASED_LSTM: 4,
    CellKind.GRU_D: 3,
    CellKind.CT_RNN: 1,
    CellKind.CT_LSTM: 7,
    CellKind.ODE_RNN_ANODE: 2,
}


@dataclass(frozen=True)
class CellConfig:
    kind: CellKind
    hidden_size: int = 32
    input_size: int = 1
    output_size: int = 1
    augment_dims: int = 4
    tau_range: tuple = (1.0, 168.0)
    r_on: float = 0.1
    leak_alpha: float = 1e-3
    ct_tau_init: float = 1.0
    solver: SolverConfig = SolverConfig()
    strict_size: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", CellKind(self.kind))
        if self.strict_size and self.hidden_size not in MODEL_SIZES:
            raise ValueError(f"hidden_size must be one of {MODEL_SIZES}")
        if self.hidden_size < 1 or self.input_size < 1 or self.output_size < 1:
            raise ValueError("sizes must be positive")
        if self.augment_dims < 0:
            raise ValueError("augment_dims must be >= 0")
        if not 0 < self.r_on <= 1:
            raise ValueError("r_on must lie in (0, 1]")
        if not 0 <= self.leak_alpha < 1:
            raise ValueError("leak_alpha must lie in [0, 1)")

    def with_(self, **kw) -> "CellConfig":
        return replace(self, **kw)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _positive(raw: Tensor) -> Tensor:
    return ad.softplus(raw) + TAU_FLOOR


# --- parameters --------------------------------------------------------------
def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: CellConfig, seed: int | np.random.Generator = 0) -> dict[str, Tensor]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    H, F, P = cfg.hidden_size, cfg.input_size, cfg.output_size
    G = _GATES[cfg.kind] * H
    p = {
        "W": _uniform(rng, (F, G), F),
        "U": _uniform(rng, (H, G), H),
        "b": _uniform(rng, (G,), H),
    }
    if cfg.kind is CellKind.PHASED_LSTM:
        lo, hi = cfg.tau_range
        tau = np.exp(rng.uniform(math.log(lo), math.log(hi), size=H))
        p["tau_raw"] = softplus_inv(tau - TAU_FLOOR)
        p["shift"] = rng.uniform(0.0, tau)
    elif cfg.kind is CellKind.GRU_D:
        p["w_gx"] = _uniform(rng, (F,), 1)
        p["b_gx"] = _uniform(rng, (F,), 1)
        p["W_gh"] = _uniform(rng, (F, H), F)
        p["b_gh"] = _uniform(rng, (H,), F)
    elif cfg.kind is CellKind.CT_RNN:
        p["tau_raw"] = np.full(H, softplus_inv(cfg.ct_tau_init - TAU_FLOOR))
    elif cfg.kind is CellKind.ODE_RNN_ANODE:
        D = H + cfg.augment_dims
        M = _anode_width(cfg)
        p["f_W1"] = _uniform(rng, (D, M), D)
        p["f_b1"] = _uniform(rng, (M,), D)
        p["f_W2"] = _uniform(rng, (M, D), M)
        p["f_b2"] = _uniform(rng, (D,), M)
    p["R"] = _uniform(rng, (H, P), H)
    p["rb"] = _uniform(rng, (P,), H)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _anode_width(cfg: CellConfig) -> int:
    return max(1, cfg.hidden_size // 2)


def param_count(params: dict[str, Tensor] | CellConfig, include_readout: bool = True) -> int:
    if isinstance(params, CellConfig):
        params = init_params(params, 0)
    return sum(t.size for k, t in params.items() if include_readout or k not in ("R", "rb"))


def state_size(cfg: CellConfig) -> int:
    H = cfg.hidden_size
    return {
        CellKind.LSTM: 2 * H,
        CellKind.PHASED_LSTM: 2 * H,
        CellKind.CT_LSTM: 3 * H,
        CellKind.ODE_RNN_ANODE: H + cfg.augment_dims,
    }.get(cfg.kind, H)


def initial_state(cfg: CellConfig, batch: int) -> Tensor:
    return Tensor(np.zeros((batch, state_size(cfg))))


# --- vanilla -----------------------------------------------------------------
def vanilla_step(zx: Tensor, state: Tensor, U: Tensor) -> Tensor:
    """h' = tanh(x W + b + h U); ``zx`` carries the precomputed x W + b."""
    h = state.data
    out = np.tanh(zx.data + h @ U.data)

    def vjp(g):
        gp = g * (1.0 - out * out)
        return gp, gp @ U.data.T, h.T @ gp

    return custom_op(out, (zx, state, U), vjp, "vanilla_step")


# --- LSTM family ---------------------------------------------------------------
def _lstm_fwd(zx, h, c, U):
    H = h.shape[1]
    z = zx + h @ U
    s = expit(z[:, : 3 * H])
    i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
    g = np.tanh(z[:, 3 * H :])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    return h2, c2, (h, c, i, f, o, g, tc)


def _lstm_bwd(cache, U, gh, gc):
    h, c, i, f, o, g, tc = cache
    gct = gc + gh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            gct * g * i * (1.0 - i),
            gct * c * f * (1.0 - f),
            gh * tc * o * (1.0 - o),
            gct * i * (1.0 - g * g),
        ],
        axis=1,
    )
    return dz, dz @ U.T, gct * f, h.T @ dz


def lstm_step(zx: Tensor, state: Tensor, U: Tensor) -> Tensor:
    """Standard gated update; gate order in the stacked matrices is i, f, o, g."""
    H = U.data.shape[0]
    h, c = state.data[:, :H], state.data[:, H:]
    h2, c2, cache = _lstm_fwd(zx.data, h, c, U.data)

    def vjp(gs):
        dz, gh, gcp, gU = _lstm_bwd(cache, U.data, gs[:, :H], gs[:, H:])
        return dz, np.concatenate([gh, gcp], axis=1), gU

    return custom_op(np.concatenate([h2, c2], axis=1), (zx, state, U), vjp, "lstm_step")


def phased_time_gate(t, tau, shift, r_on, alpha):
    """Openness k of the oscillating time gate and the phase it was computed from.

    phase = ((t - shift) mod tau) / tau; k rises linearly to 1 over the first
    half of the open fraction ``r_on``, falls back to 0 over the second half,
    and leaks at ``alpha * phase`` while closed.
    """
    u = (np.asarray(t, dtype=np.float64) - shift) / tau
    phase = u - np.floor(u)
    rising = phase < 0.5 * r_on
    falling = ~rising & (phase < r_on)
    k = np.where(rising, 2.0 * phase / r_on, np.where(falling, 2.0 - 2.0 * phase / r_on, alpha * phase))
    slope = np.where(rising, 2.0 / r_on, np.where(falling, -2.0 / r_on, alpha))
    return k, phase, u, slope


def time_gate(t, tau: Tensor, shift: Tensor, r_on: float = 0.1, alpha: float = 1e-3) -> Tensor:
    """Gate openness for timestamps ``t`` of any shape; output shape t.shape + (H,).

    ``tau`` must already be positive. The gate does not depend on the
    recurrence, so a whole window is computed in one node.
    """
    t = np.asarray(t, dtype=np.float64)[..., None]
    k, _, u, slope = phased_time_gate(t, tau.data, shift.data, r_on, alpha)
    axes = tuple(range(k.ndim - 1))

    def vjp(g):
        gphase = g * slope
        return -(gphase * u).sum(axis=axes) / tau.data, -gphase.sum(axis=axes) / tau.data

    return custom_op(k, (tau, shift), vjp, "time_gate")


def phased_lstm_step(zx: Tensor, k: Tensor, state: Tensor, U: Tensor) -> Tensor:
    """LSTM proposal blended with the previous state by the time gate ``k`` (B, H).

    c' = k c~ + (1 - k) c and h' = k h~ + (1 - k) h, so a closed gate
    (k = 0) leaves the state untouched.
    """
    H = U.data.shape[0]
    h, c = state.data[:, :H], state.data[:, H:]
    kd = k.data
    hp, cp, cache = _lstm_fwd(zx.data, h, c, U.data)
    h2 = h + kd * (hp - h)
    c2 = c + kd * (cp - c)

    def vjp(gs):
        gh, gc = gs[:, :H], gs[:, H:]
        gk = gh * (hp - h) + gc * (cp - c)
        dz, ghp, gcp, gU = _lstm_bwd(cache, U.data, kd * gh, kd * gc)
        gstate = np.concatenate([ghp + (1.0 - kd) * gh, gcp + (1.0 - kd) * gc], axis=1)
        return dz, gk, gstate, gU

    out = np.concatenate([h2, c2], axis=1)
    return custom_op(out, (zx, k, state, U), vjp, "phased_lstm_step")


def ct_lstm_decay(c_fast, c_limit, rate, dt):
    """Cell value after ``dt``: c_limit + (c_fast - c_limit) exp(-rate dt)."""
    return c_limit + (c_fast - c_limit) * np.exp(-rate * dt)


def ct_lstm_step(zx: Tensor, dt: float, state: Tensor, U: Tensor) -> Tensor:
    """Continuous-time LSTM with a fast cell, a limit cell and a learned decay rate.

    Gate blocks: i, f, o, z, i_limit, f_limit, rate. The cell relaxes from
    its post-update value toward the limit cell over the ``dt`` hours until
    the next reading; state is ``[h | c(dt) | c_limit]``.
    """
    H = U.data.shape[0]
    S = state.data
    h, c, cl = S[:, :H], S[:, H : 2 * H], S[:, 2 * H :]
    z = zx.data + h @ U.data
    s = expit(z[:, : 3 * H])
    i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
    cand = np.tanh(z[:, 3 * H : 4 * H])
    sl = expit(z[:, 4 * H : 6 * H])
    il, fl = sl[:, :H], sl[:, H:]
    zd = z[:, 6 * H :]
    rate = np.logaddexp(0.0, zd)
    c_fast = f * c + i * cand
    c_lim = fl * cl + il * cand
    e = np.exp(-rate * dt)
    cd = c_lim + (c_fast - c_lim) * e
    tc = np.tanh(cd)
    h2 = o * tc

    def vjp(gs):
        gh, gcd, gcl = gs[:, :H], gs[:, H : 2 * H], gs[:, 2 * H :]
        gcd = gcd + gh * o * (1.0 - tc * tc)
        gcf = gcd * e
        gcl = gcl + gcd * (1.0 - e)
        grate = -gcd * (c_fast - c_lim) * dt * e
        gcand = gcf * i + gcl * il
        dz = np.concatenate(
            [
                gcf * cand * i * (1.0 - i),
                gcf * c * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                gcand * (1.0 - cand * cand),
                gcl * cand * il * (1.0 - il),
                gcl * cl * fl * (1.0 - fl),
                grate * expit(zd),
            ],
            axis=1,
        )
        gstate = np.concatenate([dz @ U.data.T, gcf * f, gcl * fl], axis=1)
        return dz, gstate, h.T @ dz

    out = np.concatenate([h2, cd, c_lim], axis=1)
    return custom_op(out, (zx, state, U), vjp, "ct_lstm_step")


# --- GRU-D ---------------------------------------------------------------------
def gru_d_decay(delta: Tensor | np.ndarray, W: Tensor, b: Tensor, diagonal: bool = False) -> Tensor:
    """gamma = exp(-max(0, W delta + b)); ``diagonal`` uses elementwise weights."""
    delta = ad.as_tensor(delta)
    if np.any(delta.data < 0):
        raise ValueError("time gaps must be non-negative")
    pre = delta * W + b if diagonal else delta @ W + b
    return ad.exp(-ad.maximum(pre, 0.0))


def gru_d_inputs(x: np.ndarray, mask: np.ndarray, delta: np.ndarray, x_last: np.ndarray,
                 x_mean: np.ndarray, w_gx: Tensor, b_gx: Tensor) -> Tensor:
    """Decayed input: observed values where present, else last value fading to the mean."""
    gx = gru_d_decay(delta, w_gx, b_gx, diagonal=True)
    filled = gx * x_last + (1.0 - gx) * x_mean
    return mask * x + (1.0 - mask) * filled


def gru_d_step(zx: Tensor, gamma_h: Tensor, state: Tensor, U: Tensor) -> Tensor:
    """GRU update on the decayed hidden state gamma_h * h.

    Gate blocks in the stacked matrices: update z, reset r, candidate.
    """
    H = U.data.shape[0]
    h = state.data
    hd = gamma_h.data * h
    Uzr, Uc = U.data[:, : 2 * H], U.data[:, 2 * H :]
    s = expit(zx.data[:, : 2 * H] + hd @ Uzr)
    zg, r = s[:, :H], s[:, H:]
    rh = r * hd
    cand = np.tanh(zx.data[:, 2 * H :] + rh @ Uc)
    h2 = (1.0 - zg) * hd + zg * cand

    def vjp(g):
        dc = g * zg * (1.0 - cand * cand)
        grh = dc @ Uc.T
        dzr = np.concatenate([g * (cand - hd) * zg * (1.0 - zg), grh * hd * r * (1.0 - r)], axis=1)
        ghd = g * (1.0 - zg) + grh * r + dzr @ Uzr.T
        gU = np.concatenate([hd.T @ dzr, rh.T @ dc], axis=1)
        return np.concatenate([dzr, dc], axis=1), ghd * h, ghd * gamma_h.data, gU

    return custom_op(h2, (zx, gamma_h, state, U), vjp, "gru_d_step")


# --- continuous-time RNN ---------------------------------------------------------
class CTRNNField(ODEField):
    """dh/dt = -h / tau + tanh(a + h U) with the input drive ``a`` held fixed."""

    def __init__(self, a: Tensor, U: Tensor, inv_tau: Tensor):
        self.params = (a, U, inv_tau)

    def forward(self, h):
        a, U, inv_tau = self.params
        z = np.tanh(a.data + h @ U.data)
        return z - h * inv_tau.data, z

    def vjp_state(self, h, g, cache=None):
        a, U, inv_tau = self.params
        z = cache if cache is not None else self.forward(h)[1]
        gp = g * (1.0 - z * z)
        return gp @ U.data.T - g * inv_tau.data, gp

    def param_grads(self, records):
        a = self.params[0]
        hs = np.concatenate([r[0] for r in records])
        gs = np.concatenate([r[1] for r in records])
        gps = np.concatenate([r[3] for r in records])
        ga = gps.reshape(len(records), -1, gps.shape[1]).sum(axis=0)
        return [ad._unbroadcast(ga, a.data.shape), hs.T @ gps, -(gs * hs).sum(axis=0)]


def ct_rnn_step(zx: Tensor, dt: float, state: Tensor, U: Tensor, inv_tau: Tensor,
                solver: SolverConfig = SolverConfig()) -> Tensor:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return integrate(CTRNNField(zx, U, inv_tau), state, 0.0, dt, solver)


# --- ODE-RNN with augmented state -------------------------------------------------
class AnodeField(ODEField):
    """Autonomous two-layer tanh network over the augmented state."""

    def __init__(self, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor):
        self.params = (W1, b1, W2, b2)

    def forward(self, y):
        W1, b1, W2, b2 = self.params
        z = np.tanh(y @ W1.data + b1.data)
        return z @ W2.data + b2.data, z

    def vjp_state(self, y, g, cache=None):
        W1, b1, W2, b2 = self.params
        z = cache if cache is not None else self.forward(y)[1]
        gp = (g @ W2.data.T) * (1.0 - z * z)
        return gp @ W1.data.T, (gp, z)

    def param_grads(self, records):
        ys = np.concatenate([r[0] for r in records])
        gs = np.concatenate([r[1] for r in records])
        zs = np.concatenate([r[3][1] for r in records])
        gps = np.concatenate([r[3][0] for r in records])
        return [ys.T @ gps, gps.sum(axis=0), zs.T @ gs, gs.sum(axis=0)]


def anode_observe(zx: Tensor, state: Tensor, U: Tensor) -> Tensor:
    """Gated mix of the observation into the first H state dims; augmented dims pass through."""
    H = U.data.shape[0]
    S = state.data
    h = S[:, :H]
    zg = expit(zx.data[:, :H] + h @ U.data[:, :H])
    cand = np.tanh(zx.data[:, H:] + h @ U.data[:, H:])
    h2 = h + zg * (cand - h)

    def vjp(g):
        gh = g[:, :H]
        dzg = gh * (cand - h) * zg * (1.0 - zg)
        dc = gh * zg * (1.0 - cand * cand)
        dz = np.concatenate([dzg, dc], axis=1)
        gS = g.copy()
        gS[:, :H] = gh * (1.0 - zg) + dz @ U.data.T
        return dz, gS, h.T @ dz

    out = np.concatenate([h2, S[:, H:]], axis=1) if S.shape[1] > H else h2
    return custom_op(out, (zx, state, U), vjp, "anode_observe")


def ode_rnn_anode_step(zx: Tensor, dt: float, state: Tensor, U: Tensor, field: AnodeField,
                       solver: SolverConfig = SolverConfig()) -> Tensor:
    """Evolve the augmented state for ``dt`` hours, then absorb the observation."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    evolved = integrate(field, state, 0.0, dt, solver) if dt > 0 else state
    return anode_observe(zx, evolved, U)


# --- sequence driver ---------------------------------------------------------------
def _gaps(timestamps: np.ndarray) -> np.ndarray:
    """Per-step elapsed hours, common across the batch. The first gap is nominal (1h)."""
    ts = np.asarray(timestamps, dtype=np.float64)
    d = np.diff(ts, axis=1)
    if d.size and not np.allclose(d, d[:1], rtol=0, atol=1e-9):
        raise ValueError("time gaps must be identical across the batch")
    gaps = np.ones(ts.shape[1])
    if d.size:
        gaps[1:] = d[0]
    if np.any(gaps <= 0):
        raise ValueError("timestamps must be strictly increasing")
    return gaps


def sequence_forward(cfg: CellConfig, params: dict[str, Tensor], window, timestamps=None,
                     gru_d_aux: dict | None = None) -> Tensor:
    """Run the cell over an (B, L, F) window and return (B, P) next-step predictions.

    ``timestamps`` are hours, shape (B, L); regular hourly steps are assumed
    when omitted. ``gru_d_aux`` may carry ``mask``, ``delta``, ``x_last``
    (each (B, L, F)) and ``x_mean`` (F,) for GRU-D; the defaults describe
    fully observed hourly input.
    """
    X = np.asarray(window, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    B, L, F = X.shape
    if F != cfg.input_size:
        raise ValueError(f"window has {F} features, cell expects {cfg.input_size}")
    if L < 1:
        raise ValueError("empty window")
    if timestamps is None:
        timestamps = np.broadcast_to(np.arange(L, dtype=np.float64), (B, L))
    timestamps = np.asarray(timestamps, dtype=np.float64).reshape(B, L)
    gaps = _gaps(timestamps)
    H = cfg.hidden_size
    kind = cfg.kind
    W, U, b = params["W"], params["U"], params["b"]

    if kind is CellKind.GRU_D:
        aux = gru_d_aux or {}
        mask = aux.get("mask", np.ones_like(X))
        delta = aux.get("delta", np.ones_like(X))
        x_mean = aux.get("x_mean", np.zeros(F))
        x_last = aux.get("x_last", X)
        Xin = gru_d_inputs(X.reshape(B * L, F), mask.reshape(B * L, F), delta.reshape(B * L, F),
                           x_last.reshape(B * L, F), x_mean, params["w_gx"], params["b_gx"])
        gamma = gru_d_decay(delta.reshape(B * L, F), params["W_gh"], params["b_gh"])
        gammas = ad.unstack(ad.reshape(gamma, (B, L, H)), axis=1)
    else:
        Xin = Tensor(X.reshape(B * L, F))

    zx_all = ad.reshape(Xin @ W + b, (B, L, W.data.shape[1]))
    zxs = ad.unstack(zx_all, axis=1)
    state = initial_state(cfg, B)

    if kind is CellKind.VANILLA_RNN:
        for t in range(L):
            state = vanilla_step(zxs[t], state, U)
    elif kind is CellKind.LSTM:
        for t in range(L):
            state = lstm_step(zxs[t], state, U)
    elif kind is CellKind.PHASED_LSTM:
        gate = time_gate(timestamps, _positive(params["tau_raw"]), params["shift"],
                         cfg.r_on, cfg.leak_alpha)
        ks = ad.unstack(gate, axis=1)
        for t in range(L):
            state = phased_lstm_step(zxs[t], ks[t], state, U)
    elif kind is CellKind.GRU_D:
        for t in range(L):
            state = gru_d_step(zxs[t], gammas[t], state, U)
    elif kind is CellKind.CT_RNN:
        inv_tau = ad.reciprocal(_positive(params["tau_raw"]))
        for t in range(L):
            # the drive of reading t acts until the next reading (the target for the last one)
            dt = gaps[t + 1] if t + 1 < L else gaps[-1]
            state = ct_rnn_step(zxs[t], dt, state, U, inv_tau, cfg.solver)
    elif kind is CellKind.CT_LSTM:
        for t in range(L):
            dt = gaps[t + 1] if t + 1 < L else gaps[-1]
            state = ct_lstm_step(zxs[t], dt, state, U)
    elif kind is CellKind.ODE_RNN_ANODE:
        field = AnodeField(params["f_W1"], params["f_b1"], params["f_W2"], params["f_b2"])
        for t in range(L):
            state = ode_rnn_anode_step(zxs[t], gaps[t], state, U, field, cfg.solver)
    else:  # pragma: no cover
        raise ValueError(kind)

    h = state[:, :H] if state.data.shape[1] != H else state
    return h @ params["R"] + params["rb"]
