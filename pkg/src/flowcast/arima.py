"""Non-seasonal ARIMA(p, d, q): CSS estimation, automatic order search and
rolling one-step-ahead forecasting with observation updates.

Model on the d-times differenced series z:

    z_t = c + sum_i phi_i z_{t-i} + sum_j theta_j e_{t-j} + e_t

The innovation recursion runs over every differenced point with zero
pre-sample values on the mean-adjusted scale (z - mu, with
c = mu (1 - sum phi)), so every order is scored on the same number of
residuals and AIC values are comparable across (p, q).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "ArimaOrder",
    "ArimaModel",
    "FitReport",
    "difference",
    "integrate_forecast",
    "css_residuals",
    "css_fit",
    "kpss_statistic",
    "KPSS_CRIT_5PCT",
    "choose_d",
    "auto_select",
    "forecast_one_step",
    "update_with_observation",
    "rolling_evaluate",
    "ArimaForecaster",
]

KPSS_CRIT_5PCT = 0.463
MAX_P = MAX_Q = 5
MAX_D = 2
_PENALTY = 1e10
# order selection skips fits with an inverse AR/MA root this close to the unit circle
ROOT_MARGIN = 0.99


@dataclass(frozen=True, order=True)
class ArimaOrder:
    p: int
    d: int
    q: int

    def __post_init__(self):
        if not (0 <= self.p <= MAX_P and 0 <= self.d <= MAX_D and 0 <= self.q <= MAX_Q):
            raise ValueError(f"order {tuple(self)} outside search bounds")

    def __iter__(self):
        return iter((self.p, self.d, self.q))

    def __str__(self):
        return f"({self.p},{self.d},{self.q})"


@dataclass
class FitReport:
    loglik: float
    aic: float
    converged: bool
    iterations: int
    n: int = 0


@dataclass
class ArimaModel:
    order: ArimaOrder
    phi: np.ndarray
    theta: np.ndarray
    c: float
    sigma2: float
    history: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    include_constant: bool = True
    # differenced series, kept in step with history
    z: list = field(default_factory=list)

    @property
    def mu(self) -> float:
        s = 1.0 - float(np.sum(self.phi))
        return self.c / s if abs(s) > 1e-12 else 0.0


class SeriesTooShort(ValueError):
    pass


# --- differencing ----------------------------------------------------------------
def difference(series, d: int) -> np.ndarray:
    y = np.asarray(series, dtype=np.float64)
    if d < 0:
        raise ValueError("d must be >= 0")
    if len(y) <= d:
        raise SeriesTooShort(f"need more than {d} points to difference {d} times")
    return np.diff(y, n=d) if d else y.copy()


def integrate_forecast(history, diffed_forecast: float, d: int) -> float:
    """Undo d differences for a one-step forecast using the last d observations."""
    if d == 0:
        return float(diffed_forecast)
    if len(history) < d:
        raise SeriesTooShort(f"need {d} past observations to invert differencing")
    # (1 - B)^d y_{T+1} = z_{T+1}
    y = float(diffed_forecast)
    for k in range(1, d + 1):
        y -= comb(d, k) * (-1) ** k * history[-k]
    return y


# --- estimation -----------------------------------------------------------------------
def css_residuals(z, phi, theta, mu: float) -> np.ndarray:
    """Innovations for every point of z; pre-sample values are zero after removing mu."""
    w = np.asarray(z, dtype=np.float64) - mu
    v = lfilter(np.r_[1.0, -np.asarray(phi, dtype=np.float64)], [1.0], w) if len(phi) else w
    if len(theta):
        v = lfilter([1.0], np.r_[1.0, np.asarray(theta, dtype=np.float64)], v)
    return v


def _max_root_modulus(coefs, sign: float) -> float:
    """Largest |lambda| for z^k + sign*(c_1 z^{k-1} + ... + c_k); < 1 means admissible."""
    if len(coefs) == 0:
        return 0.0
    poly = np.r_[1.0, sign * np.asarray(coefs, dtype=np.float64)]
    if len(poly) == 2:
        return abs(poly[1])
    return float(np.max(np.abs(np.roots(poly))))


def is_stationary(phi) -> bool:
    return _max_root_modulus(phi, -1.0) < 1.0


def is_invertible(theta) -> bool:
    return _max_root_modulus(theta, 1.0) < 1.0


def _loglik(css: float, n: int) -> tuple[float, float]:
    sigma2 = css / n
    if sigma2 <= 0:
        return math.inf, 0.0
    return -0.5 * n * (math.log(2 * math.pi * sigma2) + 1.0), sigma2


def css_fit(series, order: ArimaOrder | tuple, start=None, maxiter: int | None = None,
            check_length: bool = True) -> tuple[ArimaModel, FitReport]:
    """Fit by minimising the conditional sum of squares with Nelder-Mead.

    The optimiser works on the standardised series, starting from zero
    coefficients (or ``start`` = (mu, phi, theta) in original units).
    Parameters outside the stationary/invertible region are rejected
    with a large penalty.
    """
    order = order if isinstance(order, ArimaOrder) else ArimaOrder(*order)
    p, d, q = order
    y = np.asarray(series, dtype=np.float64)
    z = difference(y, d)
    n = len(z)
    include_constant = d == 0
    if check_length and n < 10 * (p + q + 1):
        raise SeriesTooShort(f"{n} differenced points are too few for order {order}")
    k = p + q + int(include_constant) + 1

    loc = float(np.mean(z))
    scale = float(np.std(z))
    if scale == 0.0:
        model = ArimaModel(order, np.zeros(p), np.zeros(q), loc if include_constant else 0.0, 0.0,
                           list(y), list(np.zeros(n)), include_constant, list(z))
        if not include_constant and loc != 0.0:
            model.residuals = list(z - 0.0)
            ll, s2 = _loglik(float(np.sum(z * z)), n)
            model.sigma2 = s2
            return model, FitReport(ll, -2 * ll + 2 * k, True, 0, n)
        return model, FitReport(math.inf, -math.inf, True, 0, n)

    zs = (z - loc) / scale
    off = 0.0 if include_constant else -loc / scale  # zero mean on the original scale
    nmu = int(include_constant)

    def unpack(x):
        m = x[0] if nmu else off
        return m, x[nmu : nmu + p], x[nmu + p :]

    def objective(x):
        m, ph, th = unpack(x)
        if not is_stationary(ph) or not is_invertible(th):
            return _PENALTY
        e = css_residuals(zs, ph, th, m)
        return float(e @ e) / n

    if start is None:
        x0 = np.zeros(nmu + p + q)
    else:
        mu0, ph0, th0 = start
        x0 = np.r_[[(mu0 - loc) / scale] if nmu else [], ph0, th0].astype(np.float64)
        if objective(x0) >= _PENALTY:
            x0 = np.zeros(nmu + p + q)

    dim = len(x0)
    if dim == 0:
        x, nit, ok = x0, 0, True
    else:
        maxiter = maxiter or 400 * dim
        opts = dict(maxiter=maxiter, xatol=1e-7, fatol=1e-10, adaptive=dim > 2)
        init = np.vstack([x0] + [x0 + 0.1 * np.eye(dim)[i] for i in range(dim)])
        res = minimize(objective, x0, method="Nelder-Mead", options={**opts, "initial_simplex": init})
        # restart from the optimum guards against premature simplex collapse
        res2 = minimize(objective, res.x, method="Nelder-Mead", options=opts)
        best = res2 if res2.fun <= res.fun else res
        x, nit, ok = best.x, res.nit + res2.nit, bool(res.success and res2.success)

    m, ph, th = unpack(np.asarray(x, dtype=np.float64))
    mu = loc + scale * m
    phi, theta = np.array(ph, dtype=np.float64), np.array(th, dtype=np.float64)
    e = css_residuals(z, phi, theta, mu)
    ll, sigma2 = _loglik(float(e @ e), n)
    c = mu * (1.0 - phi.sum())
    model = ArimaModel(order, phi, theta, c, sigma2, list(y), list(e), include_constant, list(z))
    return model, FitReport(ll, -2 * ll + 2 * k, ok, int(nit), n)


# --- stationarity test ---------------------------------------------------------------
def kpss_statistic(series, lags: int | None = None) -> float:
    """Level-stationarity KPSS statistic with a Bartlett-window long-run variance."""
    y = np.asarray(series, dtype=np.float64)
    n = len(y)
    if n < 20:
        raise SeriesTooShort("KPSS needs at least 20 points")
    e = y - y.mean()
    gamma0 = float(e @ e) / n
    if gamma0 <= 1e-300:
        return 0.0
    if lags is None:
        lags = int(math.floor(4 * (n / 100) ** 0.25))
    s2 = gamma0
    for lag in range(1, lags + 1):
        s2 += 2.0 * (1.0 - lag / (lags + 1.0)) * float(e[lag:] @ e[:-lag]) / n
    s = np.cumsum(e)
    return float(s @ s) / (n * n * s2)


def choose_d(series, crit: float = KPSS_CRIT_5PCT) -> int:
    y = np.asarray(series, dtype=np.float64)
    for d in range(MAX_D + 1):
        if kpss_statistic(difference(y, d)) < crit:
            return d
    return MAX_D


def _better(a, b) -> bool:
    """Is candidate a = (aic, p, q) preferable to b?"""
    if b is None:
        return True
    if not math.isclose(a[0], b[0], rel_tol=0, abs_tol=1e-9):
        return a[0] < b[0]
    return (a[1] + a[2], a[1]) < (b[1] + b[2], b[1])


def auto_select(series, max_p: int = MAX_P, max_q: int = MAX_Q, return_fits: bool = False):
    """Pick d by repeated KPSS tests, then (p, q) by a stepwise AIC search.

    Candidates with an AR or MA root within 1% of the unit circle are not
    eligible. ``return_fits`` also hands back every fit tried, keyed by (p, q).
    """
    y = np.asarray(series, dtype=np.float64)
    if len(y) < 50:
        raise SeriesTooShort("auto_select needs at least 50 points")
    d = choose_d(y)
    fits: dict[tuple[int, int], tuple[ArimaModel, FitReport]] = {}

    def admissible(model):
        # near-cancelling roots on the unit circle fit a single periodogram spike
        return model is not None and (
            _max_root_modulus(model.phi, -1.0) <= ROOT_MARGIN
            and _max_root_modulus(model.theta, 1.0) <= ROOT_MARGIN)

    def score(p, q):
        if (p, q) not in fits:
            try:
                fits[(p, q)] = css_fit(y, ArimaOrder(p, d, q))
            except SeriesTooShort:
                fits[(p, q)] = (None, FitReport(math.nan, math.inf, False, 0))
        model, report = fits[(p, q)]
        return (report.aic if admissible(model) else math.inf, p, q)

    best = None
    for p, q in ((0, 0), (1, 0), (0, 1), (2, 2)):
        if p <= max_p and q <= max_q:
            cand = score(p, q)
            if _better(cand, best):
                best = cand
    improved = True
    while improved:
        improved = False
        _, bp, bq = best
        for dp in (-1, 0, 1):
            for dq in (-1, 0, 1):
                p, q = bp + dp, bq + dq
                if (dp or dq) and 0 <= p <= max_p and 0 <= q <= max_q:
                    cand = score(p, q)
                    if _better(cand, best):
                        best, improved = cand, True
    order = ArimaOrder(best[1], d, best[2])
    return (order, fits) if return_fits else order


# --- forecasting -------------------------------------------------------------------------
def _forecast_diffed(model: ArimaModel) -> float:
    z, e = model.z, model.residuals
    mu = model.mu if model.include_constant else 0.0
    val = model.c if model.include_constant else 0.0
    for i, ph in enumerate(model.phi, start=1):
        # pre-sample values sit at the mean
        val += ph * (z[-i] if i <= len(z) else mu)
    for j, th in enumerate(model.theta, start=1):
        if j <= len(e):
            val += th * e[-j]
    return val


def forecast_one_step(model: ArimaModel) -> float:
    """Raw next-value forecast on the original scale (no clamping)."""
    if model is None or not model.history:
        raise ValueError("model is not fitted")
    return integrate_forecast(model.history, _forecast_diffed(model), model.order.d)


def update_with_observation(model: ArimaModel, y_true: float) -> ArimaModel:
    """Append an observation and its innovation; coefficients stay fixed."""
    d = model.order.d
    zhat = _forecast_diffed(model)
    model.history.append(float(y_true))
    if len(model.history) > d:
        h = model.history
        z_new = float(y_true) if d == 0 else float(np.diff(h[-(d + 1):], n=d)[0])
        model.z.append(z_new)
        model.residuals.append(z_new - zhat)
    return model


def _refit(model: ArimaModel) -> ArimaModel:
    start = (model.mu, model.phi, model.theta)
    new, _ = css_fit(model.history, model.order, start=start, check_length=False)
    return new


def rolling_evaluate(model: ArimaModel, test_series, refit_every: int | None = 168,
                     clamp: bool = True):
    """Alternate one-step forecasts and observation updates over ``test_series``.

    Returns (predictions, per-step latencies in seconds). Predictions are
    clamped at 0 when ``clamp``; the model itself always sees raw values.
    ``refit_every=1`` refits before every forecast; ``None`` never refits.
    """
    preds = np.empty(len(test_series))
    lat = np.empty(len(test_series))
    for t, y in enumerate(np.asarray(test_series, dtype=np.float64)):
        t0 = time.perf_counter()
        if refit_every and t > 0 and t % refit_every == 0:
            model = _refit(model)
        preds[t] = forecast_one_step(model)
        update_with_observation(model, y)
        lat[t] = time.perf_counter() - t0
    if clamp:
        np.maximum(preds, 0.0, out=preds)
    return preds, lat


class ArimaForecaster(BaseEstimator):
    """Per-series ARIMA with automatic order selection and rolling updates.

    Parameters
    ----------
    order : tuple or None
        Fixed (p, d, q); ``None`` runs :func:`auto_select` on the training series.
    refit_every : int or None
        Refit cadence during rolling prediction (hours).
    clamp : bool
        Clamp negative forecasts to zero.
    """

    def __init__(self, order=None, refit_every=168, clamp=True):
        self.order = order
        self.refit_every = refit_every
        self.clamp = clamp

    def fit(self, y, X=None):
        y = np.asarray(y, dtype=np.float64).ravel()
        if not np.isfinite(y).all():
            raise ValueError("series contains NaN or Inf")
        self.order_ = ArimaOrder(*self.order) if self.order is not None else auto_select(y)
        self.model_, self.report_ = css_fit(y, self.order_)
        return self

    def predict(self, y_future):
        """One-step-ahead predictions over ``y_future``, revealing each value after predicting it."""
        check_is_fitted(self, "model_")
        model = ArimaModel(**{**self.model_.__dict__, "history": list(self.model_.history),
                              "residuals": list(self.model_.residuals), "z": list(self.model_.z)})
        preds, self.latencies_ = rolling_evaluate(model, y_future, self.refit_every, self.clamp)
        return preds
