"""Training loop, grid search, metrics and timing for the recurrent models and ARIMA."""
from __future__ import annotations

import csv
import itertools
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .arima import ArimaForecaster, ArimaOrder, auto_select, css_fit, rolling_evaluate
from .cells import DISPLAY_NAMES, TABLE_ORDER, CellConfig, CellKind, init_params, param_count, sequence_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import HourlyPanel, WindowedDataset, build_features, split_by_year, window
from .ode import SolverConfig

log = logging.getLogger(__name__)

LEDGER_HEADER = ["model", "loss", "hidden", "normalized", "features", "seed",
                 "mae", "rmse", "train_s", "predict_ms", "params", "status"]
METRICS_HEADER = ["model", "cells", "params", "train_min", "predict_ms",
                  "mae_vis", "rmse_vis", "mae_ext", "rmse_ext"]
FEATURE_MODES = ("visitors", "external")


class MissingPrerequisite(RuntimeError):
    """A step needs artifacts that an earlier step has not produced."""


@dataclass(frozen=True)
class TrainConfig:
    sequence_length: int = 30
    batch_size: int = 16
    epochs: int = 300
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss: ad.LossKind = ad.LossKind.MSE
    hidden_size: int = 32
    normalize_visitors: bool = True
    seed: int = 0
    use_external_features: bool = True
    huber_delta: float = 1.0
    clip_norm: float = 100.0
    solver_steps: int = 4  # ODE substeps per hour for CT-RNN and ANODE

    def __post_init__(self):
        object.__setattr__(self, "loss", ad.LossKind(self.loss))
        for name in ("sequence_length", "batch_size", "epochs", "hidden_size", "solver_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")

    @property
    def features(self) -> str:
        return "external" if self.use_external_features else "visitors"


@dataclass
class RunResult:
    kind: CellKind
    config: TrainConfig
    mae: float = float("nan")
    rmse: float = float("nan")
    train_s: float = 0.0
    predict_ms: float = float("nan")
    params: int = 0
    loss_curve: list = field(default_factory=list)
    status: str = "ok"

    @property
    def train_minutes(self) -> float:
        return self.train_s / 60.0

    def ledger_row(self) -> dict:
        c = self.config
        return {
            "model": self.kind.value, "loss": c.loss.value, "hidden": c.hidden_size,
            "normalized": str(c.normalize_visitors).lower(), "features": c.features, "seed": c.seed,
            "mae": repr(self.mae), "rmse": repr(self.rmse), "train_s": f"{self.train_s:.3f}",
            "predict_ms": f"{self.predict_ms:.4f}", "params": self.params, "status": self.status,
        }


# --- data preparation -------------------------------------------------------------------
@dataclass
class SplitData:
    """Train/test windows for one (normalize, features) combination."""

    train: WindowedDataset
    test: WindowedDataset
    count_offset: np.ndarray
    count_scale: np.ndarray
    test_rows: np.ndarray  # panel row index of each test target

    @property
    def n_features(self) -> int:
        return self.train.n_features

    @property
    def n_outputs(self) -> int:
        return self.train.n_outputs

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return y * self.count_scale + self.count_offset


def prepare_split(panel: HourlyPanel, holidays=None, weather=None, train_years=(2017, 2018),
                  test_year=2019, L=30, normalize_visitors=True, use_external=True, raw=None) -> SplitData:
    train_mask = np.isin(panel.index.year, list(train_years))
    with warnings.catch_warnings():
        # the year column is expected to leave its training range on the test split
        warnings.filterwarnings("ignore", message="year column")
        frame, fb = build_features(panel, holidays, weather, train_mask=train_mask,
                                   use_external=use_external, normalize_visitors=normalize_visitors, raw=raw)
    tr, te = split_by_year(frame, train_years, test_year)
    origin = panel.start_hour
    train = window(tr, L, t_origin=origin)
    test = window(te, L, t_origin=origin)
    offset, scale = fb.count_scale()
    rows = panel.index.get_indexer(test.target_index)
    return SplitData(train, test, offset, scale, rows)


# --- estimator -----------------------------------------------------------------------------
def _cell_config(kind, hidden, n_in, n_out, solver_steps) -> CellConfig:
    return CellConfig(kind=CellKind(kind), hidden_size=hidden, input_size=n_in, output_size=n_out,
                      solver=SolverConfig(step_count=solver_steps))


class RNNForecaster(BaseEstimator, RegressorMixin):
    """One-step-ahead recurrent forecaster trained with BPTT and Adam.

    ``fit`` takes windows ``X`` (N, L, F), targets ``y`` (N, P) and optional
    window timestamps in hours (N, L).
    """

    def __init__(self, kind="lstm", hidden_size=32, loss="mse", epochs=300, batch_size=16, lr=1e-3,
                 betas=(0.9, 0.999), eps=1e-8, huber_delta=1.0, clip_norm=100.0, solver_steps=4,
                 seed=0):
        self.kind = kind
        self.hidden_size = hidden_size
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.huber_delta = huber_delta
        self.clip_norm = clip_norm
        self.solver_steps = solver_steps
        self.seed = seed

    @classmethod
    def from_config(cls, kind, cfg: TrainConfig) -> "RNNForecaster":
        return cls(kind=CellKind(kind).value, hidden_size=cfg.hidden_size, loss=cfg.loss.value,
                   epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                   huber_delta=cfg.huber_delta, clip_norm=cfg.clip_norm, solver_steps=cfg.solver_steps,
                   seed=cfg.seed)

    @staticmethod
    def _check_X(X, timestamps):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected windows of shape (N, L, F), got {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("windows contain NaN or Inf")
        if timestamps is not None:
            timestamps = np.asarray(timestamps, dtype=np.float64)
            if timestamps.shape != X.shape[:2]:
                raise ValueError("timestamps must have shape (N, L)")
        return X, timestamps

    def fit(self, X, y, timestamps=None):
        X, timestamps = self._check_X(X, timestamps)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or len(y) != len(X):
            raise ValueError("y must have shape (N, P) matching X")
        if len(X) == 0:
            raise ValueError("empty training set")
        N = len(X)
        self.cell_config_ = _cell_config(self.kind, self.hidden_size, X.shape[2], y.shape[1], self.solver_steps)
        rng = np.random.default_rng(self.seed)
        self.params_ = init_params(self.cell_config_, rng)
        opt = ad.Adam(self.params_.values(), lr=self.lr, betas=self.betas, eps=self.eps)
        self.loss_curve_ = []
        self.status_ = "ok"
        t0 = time.perf_counter()
        try:
            for _ in range(self.epochs):
                order = rng.permutation(N)
                total = 0.0
                for s in range(0, N, self.batch_size):
                    idx = order[s : s + self.batch_size]
                    ts = timestamps[idx] if timestamps is not None else None
                    with ad.Tape() as tape:
                        pred = sequence_forward(self.cell_config_, self.params_, X[idx], ts)
                        loss = ad.compute_loss(self.loss, pred, y[idx], self.huber_delta)
                    ad.backward(tape, loss)
                    grads = opt.grads()
                    norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads))
                    if norm > self.clip_norm:
                        grads = [g * (self.clip_norm / norm) for g in grads]
                    opt.step(grads)
                    opt.zero_grad()
                    total += float(loss.data) * len(idx)
                self.loss_curve_.append(total / N)
        except FloatingPointError as exc:  # NonFiniteError included
            log.warning("training diverged: %s", exc)
            self.status_ = "diverged"
        self.train_s_ = time.perf_counter() - t0
        return self

    def predict(self, X, timestamps=None, batch_size=512):
        """Model-space predictions (N, P)."""
        check_is_fitted(self, "params_")
        X, timestamps = self._check_X(X, timestamps)
        out = []
        for s in range(0, len(X), batch_size):
            ts = timestamps[s : s + batch_size] if timestamps is not None else None
            out.append(sequence_forward(self.cell_config_, self.params_, X[s : s + batch_size], ts).data)
        return np.concatenate(out) if out else np.empty((0, self.cell_config_.output_size))

    def n_params(self) -> int:
        check_is_fitted(self, "params_")
        return param_count(self.params_)

    def save(self, path, extra_meta: dict | None = None) -> None:
        check_is_fitted(self, "params_")
        meta = {k: v for k, v in self.get_params().items() if k != "betas"}
        meta["betas"] = ",".join(map(repr, self.betas))
        meta["input_size"] = self.cell_config_.input_size
        meta["output_size"] = self.cell_config_.output_size
        meta.update(extra_meta or {})
        save_checkpoint(path, {k: t.data for k, t in self.params_.items()}, meta)

    @classmethod
    def load(cls, path) -> "RNNForecaster":
        arrays, meta = load_checkpoint(path)
        casts = {"hidden_size": int, "epochs": int, "batch_size": int, "lr": float, "eps": float,
                 "huber_delta": float, "clip_norm": float, "solver_steps": int, "seed": int}
        kw = {k: casts[k](meta[k]) for k in casts if k in meta}
        kw["kind"], kw["loss"] = meta["kind"], meta["loss"]
        kw["betas"] = tuple(float(b) for b in meta["betas"].split(","))
        est = cls(**kw)
        est.cell_config_ = _cell_config(est.kind, est.hidden_size, int(meta["input_size"]),
                                        int(meta["output_size"]), est.solver_steps)
        est.params_ = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        est.meta_ = meta
        return est


# --- metrics --------------------------------------------------------------------------------
def mae_rmse(y_pred, y_true) -> tuple[float, float]:
    r = np.asarray(y_pred, dtype=np.float64) - np.asarray(y_true, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty test set")
    return float(np.mean(np.abs(r))), float(np.sqrt(np.mean(r * r)))


def single_prediction_ms(est: RNNForecaster, X, timestamps=None, repeats: int = 100) -> float:
    """Median latency of one all-POI prediction (batch of one window)."""
    lat = np.empty(repeats)
    for i in range(repeats):
        j = i % len(X)
        ts = timestamps[j : j + 1] if timestamps is not None else None
        t0 = time.perf_counter()
        sequence_forward(est.cell_config_, est.params_, X[j : j + 1], ts)
        lat[i] = time.perf_counter() - t0
    return float(np.median(lat) * 1e3)


def predict_counts(est: RNNForecaster, split: SplitData) -> np.ndarray:
    """Test predictions in visitor units, clamped at zero like the ARIMA baseline."""
    pred = split.denormalize(est.predict(split.test.sequences, split.test.timestamps))
    return np.maximum(pred, 0.0)


def evaluate(est: RNNForecaster, split: SplitData, repeats: int = 100) -> tuple[float, float, float]:
    if len(split.test) == 0:
        raise ValueError("empty test set")
    mae, rmse = mae_rmse(predict_counts(est, split), split.test.raw_targets)
    ms = single_prediction_ms(est, split.test.sequences, split.test.timestamps, max(100, repeats))
    return mae, rmse, ms


def train(kind, split: SplitData, cfg: TrainConfig, checkpoint=None) -> tuple[RNNForecaster, RunResult]:
    """Fit one model and score it on the test windows."""
    est = RNNForecaster.from_config(kind, cfg)
    with threadpool_limits(1):
        est.fit(split.train.sequences, split.train.targets, split.train.timestamps)
        res = RunResult(CellKind(kind), cfg, train_s=est.train_s_, params=est.n_params(),
                        loss_curve=est.loss_curve_, status=est.status_)
        if est.status_ == "ok":
            res.mae, res.rmse, res.predict_ms = evaluate(est, split)
    if checkpoint is not None and est.status_ == "ok":
        est.save(checkpoint, {"features": cfg.features, "normalized": cfg.normalize_visitors})
    return est, res


# --- baselines -------------------------------------------------------------------------------
def seasonal_naive_predictions(panel: HourlyPanel, rows: np.ndarray, lag: int = 168) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.min() < lag:
        raise ValueError("not enough history for the seasonal lag")
    return panel.counts[rows - lag].astype(np.float64)


def _fit_one_poi(args):
    series, order = args
    with threadpool_limits(1):
        est = ArimaForecaster(order=order).fit(series)
    return est


def fit_arima_panel(train_counts: np.ndarray, workers: int | None = None, orders=None) -> list[ArimaForecaster]:
    """One ARIMA per POI, order chosen automatically unless ``orders`` is given."""
    P = train_counts.shape[1]
    orders = orders or [None] * P
    jobs = [(train_counts[:, p].astype(np.float64), orders[p]) for p in range(P)]
    return list(_pool_map(_fit_one_poi, jobs, workers))


def _roll_one_poi(args):
    est, test_series, refit_every = args
    est.refit_every = refit_every
    with threadpool_limits(1):
        preds = est.predict(test_series)
    return preds, est.latencies_


def arima_rolling(models: list[ArimaForecaster], test_counts: np.ndarray, refit_every=168,
                  workers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rolling one-step predictions (T, P) and per-step latencies (T, P) in seconds."""
    jobs = [(m, test_counts[:, p].astype(np.float64), refit_every) for p, m in enumerate(models)]
    out = list(_pool_map(_roll_one_poi, jobs, workers))
    return np.column_stack([o[0] for o in out]), np.column_stack([o[1] for o in out])


def arima_step_latency(train_counts: np.ndarray, test_counts: np.ndarray, orders, steps: int = 3) -> float:
    """Median wall time (s) of one rolling step for all POIs, refitting before every forecast.

    This is the protocol where each prediction first refits on all data seen so
    far; the POIs are processed one after another, as a single all-POI
    prediction would be.
    """
    P = train_counts.shape[1]
    totals = np.zeros(steps)
    with threadpool_limits(1):
        for p in range(P):
            model, _ = css_fit(train_counts[:, p].astype(np.float64), ArimaOrder(*orders[p]))
            # refit_every=1 refits from the second step on; the first step is warm-up
            _, lat = rolling_evaluate(model, test_counts[: steps + 1, p], refit_every=1)
            totals += lat[1:]
    return float(np.median(totals))


# --- grid search -------------------------------------------------------------------------------
@dataclass(frozen=True)
class GridSpec:
    losses: tuple = (ad.LossKind.MSE, ad.LossKind.MAE, ad.LossKind.HUBER)
    sizes: tuple = (32, 64, 128)
    normalize: tuple = (True, False)
    seeds_per_config: int = 3
    base_seed: int = 0

    def configs(self, base: TrainConfig) -> list[TrainConfig]:
        out = []
        for loss, size, norm in itertools.product(self.losses, self.sizes, self.normalize):
            for s in range(self.seeds_per_config):
                out.append(replace(base, loss=ad.LossKind(loss), hidden_size=int(size),
                                   normalize_visitors=bool(norm), seed=self.base_seed + s))
        return out


def run_key(kind, cfg: TrainConfig) -> tuple:
    return (CellKind(kind).value, cfg.loss.value, str(cfg.hidden_size), str(cfg.normalize_visitors).lower(),
            cfg.features, str(cfg.seed))


def read_ledger(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LEDGER_HEADER:
            raise ValueError(f"{path}: line 1: unexpected ledger header")
        return list(reader)


def _append_ledger(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_HEADER, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)


def workers_from_env(default: int | None = None) -> int:
    raw = os.environ.get("FLOWCAST_WORKERS")
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError("FLOWCAST_WORKERS must be >= 1")
        return n
    return default or os.cpu_count() or 1


def _pool_map(fn, jobs, workers):
    workers = workers or workers_from_env()
    if workers <= 1 or len(jobs) <= 1:
        return map(fn, jobs)
    ex = ProcessPoolExecutor(max_workers=min(workers, len(jobs)))
    try:
        return list(ex.map(fn, jobs))
    finally:
        ex.shutdown()


# Worker-side data cache, filled by the pool initializer
_DATA: dict = {}


def _init_worker(data_args: dict) -> None:
    _DATA.clear()
    _DATA.update(data_args)
    _DATA["splits"] = {}


def _split_for(cfg: TrainConfig) -> SplitData:
    key = (cfg.normalize_visitors, cfg.use_external_features, cfg.sequence_length)
    cache = _DATA["splits"]
    if key not in cache:
        cache[key] = prepare_split(_DATA["panel"], _DATA.get("holidays"), _DATA.get("weather"),
                                   _DATA["train_years"], _DATA["test_year"], cfg.sequence_length,
                                   cfg.normalize_visitors, cfg.use_external_features, raw=_DATA.get("raw"))
    return cache[key]


def _grid_task(args) -> RunResult:
    kind, cfg, ckpt_dir = args
    ckpt = None
    if ckpt_dir is not None:
        ckpt = Path(ckpt_dir) / ("_".join(run_key(kind, cfg)) + ".ckpt")
    _, res = train(kind, _split_for(cfg), cfg, checkpoint=ckpt)
    return res


def run_grid(tasks: list[tuple], data_args: dict, ledger_path, ckpt_dir=None, workers=None):
    """Run (kind, TrainConfig) tasks, skipping those already in the ledger.

    Rows are appended in submission order, by this process only, as each run finishes.
    """
    done = {tuple(r[k] for k in LEDGER_HEADER[:6]) for r in read_ledger(ledger_path)}
    todo = [(CellKind(k), c, ckpt_dir) for k, c in tasks if run_key(k, c) not in done]
    workers = workers or workers_from_env()
    results = []
    if workers <= 1 or len(todo) <= 1:
        _init_worker(data_args)
        for t in todo:
            res = _grid_task(t)
            _append_ledger(ledger_path, res.ledger_row())
            results.append(res)
        return results
    with ProcessPoolExecutor(max_workers=min(workers, len(todo)), initializer=_init_worker,
                             initargs=(data_args,)) as ex:
        futures = [ex.submit(_grid_task, t) for t in todo]
        for fut in futures:
            res = fut.result()
            _append_ledger(ledger_path, res.ledger_row())
            results.append(res)
    return results


def grid_search(kind, data_args: dict, spec: GridSpec = GridSpec(), base: TrainConfig = TrainConfig(),
                ledger_path="ledger.csv", ckpt_dir=None, workers=None) -> dict:
    """Run the full grid for one cell kind and return its best ledger row."""
    tasks = [(kind, c) for c in spec.configs(base)]
    run_grid(tasks, data_args, ledger_path, ckpt_dir, workers)
    return best_run(read_ledger(ledger_path), kind, base.features)


def best_run(rows: list[dict], kind, features: str) -> dict:
    kind = CellKind(kind).value
    ok = [r for r in rows if r["model"] == kind and r["features"] == features and r["status"] == "ok"]
    if not ok:
        raise MissingPrerequisite(f"no successful {features} runs for {kind}")
    return min(ok, key=lambda r: (float(r["rmse"]), float(r["mae"])))


# --- comparison table -------------------------------------------------------------------------
def compare_with_arima(rows: list[dict], arima: dict, kinds=TABLE_ORDER) -> pd.DataFrame:
    """Comparison table with ARIMA first, then the recurrent models in display order.

    ``arima`` holds ``mae``, ``rmse`` and ``predict_ms``. Each recurrent row reports
    the best run per feature mode; size, parameter count and times come from the
    best visitors-only run.
    """
    if not arima:
        raise MissingPrerequisite("ARIMA metrics are missing")
    out = [{"model": "ARIMA", "cells": "", "params": "", "train_min": "",
            "predict_ms": arima["predict_ms"], "mae_vis": arima["mae"], "rmse_vis": arima["rmse"],
            "mae_ext": "", "rmse_ext": ""}]
    present = {r["model"] for r in rows}
    for kind in kinds:
        if CellKind(kind).value not in present:
            continue
        vis = best_run(rows, kind, "visitors")
        ext = best_run(rows, kind, "external")
        out.append({"model": DISPLAY_NAMES[CellKind(kind)], "cells": int(vis["hidden"]), "params": int(vis["params"]),
                    "train_min": float(vis["train_s"]) / 60.0, "predict_ms": float(vis["predict_ms"]),
                    "mae_vis": float(vis["mae"]), "rmse_vis": float(vis["rmse"]),
                    "mae_ext": float(ext["mae"]), "rmse_ext": float(ext["rmse"])})
    if len(out) == 1:
        raise MissingPrerequisite("no recurrent model runs in the ledger")
    return pd.DataFrame(out, columns=METRICS_HEADER)


def normalization_flag(rows: list[dict]) -> dict:
    """Per kind: does the best normalized run beat the best raw-count run?"""
    flags = {}
    for kind in {r["model"] for r in rows}:
        ok = [r for r in rows if r["model"] == kind and r["status"] == "ok"]
        norm = [float(r["rmse"]) for r in ok if r["normalized"] == "true"]
        raw = [float(r["rmse"]) for r in ok if r["normalized"] == "false"]
        if norm and raw:
            flags[kind] = min(norm) < min(raw)
    return flags
