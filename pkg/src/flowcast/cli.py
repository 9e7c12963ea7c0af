"""Command-line front end.

Typical session::

    flowcast synth --seed 7 --years 2017:2019 --pois 32 --out data
    flowcast ingest --data data --workdir run
    flowcast fit-arima --workdir run
    flowcast grid --workdir run --epochs 50
    flowcast compare --workdir run
    flowcast plot --predictions run/predictions.csv --poi 3 --out poi3.svg

Exit codes: 0 success, 2 validation error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as dp
from . import harness as hn
from .arima import ArimaOrder
from .cells import TABLE_ORDER, CellKind
from .plot import EmptySelection, plot_series, read_predictions, write_predictions

log = logging.getLogger("flowcast")

FEATURES_FILE = "features.npz"
LEDGER_FILE = "ledger.csv"
ORDERS_FILE = "arima_orders.csv"
ARIMA_EVAL_FILE = "arima_eval.csv"
ARIMA_PRED_FILE = "predictions_arima.csv"
METRICS_FILE = "metrics.csv"
PRED_FILE = "predictions.csv"


class ValidationError(ValueError):
    """Bad flags, missing inputs or a refused overwrite; exit code 2."""


# --- argument helpers ---------------------------------------------------------------------------
def year_range(text: str) -> tuple[int, int]:
    try:
        a, _, b = text.partition(":")
        lo, hi = int(a), int(b or a)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YEAR or YEAR:YEAR, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError("year range must be increasing")
    return lo, hi


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _positive_int(text) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def read_config(path) -> dict:
    """Flat key=value file; '#' starts a comment. Keys use flag names (dashes or underscores)."""
    out = {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{p}: line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcast", description="Hourly visitor-flow forecasting benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workdir=True):
        p.add_argument("--config", help="key=value file overriding defaults")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        p.add_argument("--seed", type=int, default=0)
        if workdir:
            p.add_argument("--workdir", type=Path, default=Path("flowcast-run"))
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"), workdir=False)
    p.add_argument("--years", type=year_range, default=(2017, 2019))
    p.add_argument("--pois", type=_positive_int, default=32)
    p.add_argument("--out", type=Path, default=Path("flowcast-data"))

    p = common(sub.add_parser("ingest", help="aggregate entries and cache the feature table"))
    p.add_argument("--data", type=Path, required=True, help="directory with entries/weather/holidays CSVs")
    p.add_argument("--years", type=year_range, help="panel range (default: from the entries)")
    p.add_argument("--pois", type=_positive_int, help="POI count (default: max poi_id + 1)")
    p.add_argument("--test-year", type=int, help="default: last year of the range")

    p = common(sub.add_parser("fit-arima", help="per-POI ARIMA orders and rolling evaluation"))
    p.add_argument("--refit-every", type=int, default=168)
    p.add_argument("--eval-hours", type=int, default=0, help="limit the rolling evaluation (0 = whole test year)")
    p.add_argument("--latency-steps", type=_positive_int, default=3)

    for name in ("train", "grid"):
        p = common(sub.add_parser(name, help="train one model" if name == "train" else "grid search"))
        p.add_argument("--epochs", type=_positive_int, default=hn.TrainConfig.epochs)
        p.add_argument("--batch-size", type=_positive_int, default=hn.TrainConfig.batch_size)
        p.add_argument("--lr", type=float, default=hn.TrainConfig.lr)
        p.add_argument("--solver-steps", type=_positive_int, default=hn.TrainConfig.solver_steps)
        p.add_argument("--sequence-length", type=_positive_int, default=hn.TrainConfig.sequence_length)
        if name == "train":
            p.add_argument("--model", required=True, choices=[k.value for k in CellKind])
            p.add_argument("--hidden", type=_positive_int, default=32)
            p.add_argument("--loss", choices=["mse", "mae", "huber"], default="mse")
            p.add_argument("--normalized", type=_bool, default=True)
            p.add_argument("--features", choices=hn.FEATURE_MODES, default="external")
        else:
            p.add_argument("--models", type=_csv_list, default=[k.value for k in TABLE_ORDER])
            p.add_argument("--losses", type=_csv_list, default=["mse", "mae", "huber"])
            p.add_argument("--sizes", type=_csv_list, default=["32", "64", "128"])
            p.add_argument("--normalized", type=_csv_list, default=["true", "false"])
            p.add_argument("--features", type=_csv_list, default=list(hn.FEATURE_MODES))
            p.add_argument("--seeds", type=_positive_int, default=3, help="runs per configuration")

    common(sub.add_parser("compare", help="write the comparison table"))

    p = common(sub.add_parser("plot", help="SVG of predictions for one POI"), workdir=False)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--poi", required=True)
    p.add_argument("--start")
    p.add_argument("--end")
    p.add_argument("--out", type=Path, required=True)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overrides = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(overrides) - known - {"config"})
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        # flags given on the command line win over the config file
        for k in ("force", "verbose"):
            if k in overrides:
                overrides[k] = _bool(overrides[k])
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


# --- artifact helpers -------------------------------------------------------------------------
def announce(path) -> None:
    print(f"wrote {path}")


def guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ValidationError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def require(path, hint: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing {path}; run `{hint}` first")
    return path


def load_workdir(workdir: Path) -> dict:
    """Panel, raw feature table and split years cached by ``ingest``."""
    f = require(workdir / FEATURES_FILE, "flowcast ingest")
    with np.load(f, allow_pickle=False) as z:
        panel = dp.HourlyPanel(pd.Timestamp(str(z["start_hour"])), z["counts"], list(z["poi_names"]))
        raw = pd.DataFrame(z["raw"], index=panel.index, columns=list(z["raw_columns"]))
        train_years = tuple(int(y) for y in z["train_years"])
        test_year = int(z["test_year"])
    return {"panel": panel, "raw": raw, "train_years": train_years, "test_year": test_year}


def _write_csv(rows: list[dict], header: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# --- commands ---------------------------------------------------------------------------------
def cmd_synth(args) -> None:
    cfg = dp.SynthConfig(n_pois=args.pois, years=args.years, seed=args.seed)
    out = args.out
    paths = {k: out / f"{k}.csv" for k in ("entries", "weather", "holidays")}
    manifest = out / "manifest.txt"
    guard([*paths.values(), manifest], args.force)
    out.mkdir(parents=True, exist_ok=True)
    entries, holidays, weather = dp.synth_generate(cfg)
    dp.write_entries(entries, paths["entries"])
    dp.write_weather(weather, paths["weather"])
    dp.write_holidays(holidays, paths["holidays"])
    manifest.write_text(cfg.to_manifest())
    for p in (*paths.values(), manifest):
        announce(p)


def cmd_ingest(args) -> None:
    src = args.data
    entries = dp.read_entries(require(src / "entries.csv", "flowcast synth"))
    weather = dp.read_weather(require(src / "weather.csv", "flowcast synth"))
    holidays = dp.read_holidays(require(src / "holidays.csv", "flowcast synth"))
    if args.years:
        y0, y1 = args.years
    else:
        if entries.empty:
            raise ValidationError("entries file is empty; pass --years")
        y0, y1 = int(entries["timestamp"].min().year), int(entries["timestamp"].max().year)
    if y0 == y1:
        raise ValidationError("need at least two years (train and test)")
    test_year = args.test_year or y1
    if not y0 < test_year <= y1:
        raise ValidationError(f"test year {test_year} outside {y0}+1..{y1}")
    n_pois = args.pois or (int(entries["poi_id"].max()) + 1 if len(entries) else 0)
    if n_pois < 1:
        raise ValidationError("cannot infer the POI count; pass --pois")
    panel = dp.aggregate_hourly(entries, pd.Timestamp(y0, 1, 1), pd.Timestamp(y1 + 1, 1, 1), n_pois)
    raw = dp.raw_features(panel, holidays, weather)
    out = args.workdir / FEATURES_FILE
    guard([out], args.force)
    args.workdir.mkdir(parents=True, exist_ok=True)
    np.savez(out, counts=panel.counts, start_hour=str(panel.start_hour), poi_names=np.array(panel.poi_names, dtype=str),
             raw=raw.to_numpy(dtype=float), raw_columns=np.array(list(raw.columns), dtype=str),
             train_years=np.array([y for y in range(y0, y1 + 1) if y != test_year and y < test_year]),
             test_year=test_year)
    announce(out)


def _train_test_counts(wd: dict):
    panel = wd["panel"]
    years = panel.index.year
    return panel.counts[np.isin(years, wd["train_years"])], panel.counts[years == wd["test_year"]]


def cmd_fit_arima(args) -> None:
    wd = load_workdir(args.workdir)
    outs = [args.workdir / f for f in (ORDERS_FILE, ARIMA_EVAL_FILE, ARIMA_PRED_FILE)]
    guard(outs, args.force)
    train, test = _train_test_counts(wd)
    if args.eval_hours:
        test = test[: args.eval_hours]
    models = hn.fit_arima_panel(train, workers=hn.workers_from_env())
    rows = []
    for p, m in enumerate(models):
        o, r = m.order_, m.report_
        rows.append({"poi": p, "p": o.p, "d": o.d, "q": o.q, "phi": " ".join(f"{v:.6g}" for v in m.model_.phi),
                     "theta": " ".join(f"{v:.6g}" for v in m.model_.theta), "sigma2": f"{m.model_.sigma2:.6g}",
                     "loglik": f"{r.loglik:.6f}", "aic": f"{r.aic:.6f}", "converged": str(r.converged).lower()})
    _write_csv(rows, list(rows[0]), outs[0])
    announce(outs[0])

    preds, _ = hn.arima_rolling(models, test, refit_every=args.refit_every or None, workers=hn.workers_from_env())
    split_rows = _scored_rows(wd, len(test))
    mae, rmse = hn.mae_rmse(preds[split_rows], test[split_rows])
    step_s = hn.arima_step_latency(train, test, [(m.order_.p, m.order_.d, m.order_.q) for m in models],
                                   steps=args.latency_steps)
    _write_csv([{"mae": repr(mae), "rmse": repr(rmse), "predict_ms": f"{step_s * 1e3:.3f}",
                 "refit_every": args.refit_every, "scored_hours": int(split_rows.size)}],
               ["mae", "rmse", "predict_ms", "refit_every", "scored_hours"], outs[1])
    announce(outs[1])
    idx = wd["panel"].index[wd["panel"].index.year == wd["test_year"]][: len(test)]
    write_predictions(_long_predictions("ARIMA", idx[split_rows], test[split_rows], preds[split_rows]), outs[2])
    announce(outs[2])


def _scored_rows(wd: dict, n_test: int, L: int = hn.TrainConfig.sequence_length) -> np.ndarray:
    """Test hours scored for every model: the ones that have a full window inside the test year."""
    return np.arange(L, n_test)


def _long_predictions(model: str, index, y_true: np.ndarray, y_pred: np.ndarray) -> pd.DataFrame:
    T, P = y_true.shape
    return pd.DataFrame({
        "model": model,
        "poi": np.tile(np.arange(P), T),
        "timestamp": np.repeat(np.asarray(index), P),
        "y_true": y_true.reshape(-1).astype(float),
        "y_pred": y_pred.reshape(-1),
    })


def _train_config(args, **kw) -> hn.TrainConfig:
    return hn.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                          solver_steps=args.solver_steps, sequence_length=args.sequence_length,
                          seed=args.seed, **kw)


def _data_args(wd: dict) -> dict:
    return {"panel": wd["panel"], "raw": wd["raw"], "train_years": wd["train_years"], "test_year": wd["test_year"]}


def _checkpoint_path(workdir: Path, kind, cfg: hn.TrainConfig) -> Path:
    return workdir / "checkpoints" / ("_".join(hn.run_key(kind, cfg)) + ".ckpt")


def cmd_train(args) -> None:
    wd = load_workdir(args.workdir)
    cfg = _train_config(args, loss=args.loss, hidden_size=args.hidden, normalize_visitors=args.normalized,
                        use_external_features=args.features == "external")
    kind = CellKind(args.model)
    ckpt = _checkpoint_path(args.workdir, kind, cfg)
    pred_path = args.workdir / f"predictions_{ckpt.stem}.csv"
    ledger = args.workdir / LEDGER_FILE
    guard([ckpt, pred_path], args.force)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    split = hn.prepare_split(wd["panel"], train_years=wd["train_years"], test_year=wd["test_year"],
                             L=cfg.sequence_length, normalize_visitors=cfg.normalize_visitors,
                             use_external=cfg.use_external_features, raw=wd["raw"])
    est, res = hn.train(kind, split, cfg, checkpoint=ckpt)
    if res.status != "ok":
        raise RuntimeError(f"training {kind.value} failed: {res.status}")
    rows = [r for r in hn.read_ledger(ledger) if tuple(r[k] for k in hn.LEDGER_HEADER[:6]) != hn.run_key(kind, cfg)]
    rows.append({k: str(v) for k, v in res.ledger_row().items()})
    _write_csv(rows, hn.LEDGER_HEADER, ledger)
    announce(ckpt)
    announce(ledger)
    write_predictions(_long_predictions(kind.value, split.test.target_index, split.test.raw_targets,
                                        hn.predict_counts(est, split)), pred_path)
    announce(pred_path)
    print(f"{kind.value}: mae={res.mae:.4f} rmse={res.rmse:.4f} train_s={res.train_s:.1f} "
          f"predict_ms={res.predict_ms:.3f}")


def cmd_grid(args) -> None:
    wd = load_workdir(args.workdir)
    try:
        kinds = [CellKind(m) for m in args.models]
        losses = tuple(hn.ad.LossKind(x) for x in args.losses)
        sizes = tuple(int(s) for s in args.sizes)
        norms = tuple(_bool(x) for x in args.normalized)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ValidationError(str(exc)) from None
    if any(f not in hn.FEATURE_MODES for f in args.features):
        raise ValidationError(f"--features must be drawn from {','.join(hn.FEATURE_MODES)}")
    spec = hn.GridSpec(losses=losses, sizes=sizes, normalize=norms, seeds_per_config=args.seeds,
                       base_seed=args.seed)
    tasks = []
    for feat in args.features:
        base = _train_config(args, use_external_features=feat == "external")
        tasks += [(k, c) for k in kinds for c in spec.configs(base)]
    ledger = args.workdir / LEDGER_FILE
    ckpt_dir = args.workdir / "checkpoints"
    if args.force and ledger.exists():
        ledger.unlink()
    done = {tuple(r[k] for k in hn.LEDGER_HEADER[:6]) for r in hn.read_ledger(ledger)}
    if tasks and all(hn.run_key(k, c) in done for k, c in tasks):
        raise ValidationError(f"{ledger} already holds every requested run (use --force to rerun)")
    if done:
        print(f"resuming {ledger}: {len(done)} runs already recorded")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    results = hn.run_grid(tasks, _data_args(wd), ledger, ckpt_dir, workers=hn.workers_from_env())
    failed = [r for r in results if r.status != "ok"]
    announce(ledger)
    announce(ckpt_dir)
    if failed:
        print(f"{len(failed)} runs failed; see the status column")
    rows = hn.read_ledger(ledger)
    for kind in kinds:
        for feat in args.features:
            try:
                b = hn.best_run(rows, kind, feat)
                print(f"best {kind.value} ({feat}): rmse={float(b['rmse']):.4f} loss={b['loss']} "
                      f"hidden={b['hidden']} normalized={b['normalized']} seed={b['seed']}")
            except hn.MissingPrerequisite as exc:
                print(str(exc))
    flags = hn.normalization_flag(rows)
    if flags:
        print("normalized beats raw counts: " + ", ".join(f"{k}={v}" for k, v in sorted(flags.items())))


def cmd_compare(args) -> None:
    ledger = require(args.workdir / LEDGER_FILE, "flowcast grid")
    arima_eval = require(args.workdir / ARIMA_EVAL_FILE, "flowcast fit-arima")
    wd = load_workdir(args.workdir)
    outs = [args.workdir / METRICS_FILE, args.workdir / PRED_FILE]
    guard(outs, args.force)
    rows = hn.read_ledger(ledger)
    with open(arima_eval, newline="") as fh:
        arima = {k: float(v) for k, v in next(csv.DictReader(fh)).items()}
    try:
        table = hn.compare_with_arima(rows, arima)
    except hn.MissingPrerequisite as exc:
        raise ValidationError(f"{exc} in {ledger}") from None
    table.to_csv(outs[0], index=False, lineterminator="\n", float_format="%.6g")
    announce(outs[0])

    frames = []
    arima_pred = args.workdir / ARIMA_PRED_FILE
    if arima_pred.exists():
        frames.append(read_predictions(arima_pred))
    present = {r["model"] for r in rows}
    for kind in TABLE_ORDER:
        if kind.value not in present:
            continue
        best = hn.best_run(rows, kind, "external")
        cfg = hn.TrainConfig(loss=best["loss"], hidden_size=int(best["hidden"]),
                             normalize_visitors=_bool(best["normalized"]), seed=int(best["seed"]),
                             use_external_features=True)
        ckpt = args.workdir / "checkpoints" / ("_".join(hn.run_key(kind, cfg)) + ".ckpt")
        if not ckpt.exists():
            log.warning("no checkpoint for the best %s run; skipped in %s", kind.value, PRED_FILE)
            continue
        est = hn.RNNForecaster.load(ckpt)
        split = hn.prepare_split(wd["panel"], train_years=wd["train_years"], test_year=wd["test_year"],
                                 L=cfg.sequence_length, normalize_visitors=cfg.normalize_visitors,
                                 use_external=True, raw=wd["raw"])
        frames.append(_long_predictions(kind.value, split.test.target_index, split.test.raw_targets,
                                        hn.predict_counts(est, split)))
    write_predictions(pd.concat(frames, ignore_index=True), outs[1])
    announce(outs[1])
    print(table.to_string(index=False))


def cmd_plot(args) -> None:
    preds = read_predictions(require(args.predictions, "flowcast compare"))
    guard([args.out], args.force)
    try:
        svg = plot_series(preds, args.poi, args.start, args.end)
    except EmptySelection as exc:
        raise ValidationError(str(exc)) from None
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(svg)
    announce(args.out)


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "fit-arima": cmd_fit_arima,
    "train": cmd_train,
    "grid": cmd_grid,
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        hn.workers_from_env()
        COMMANDS[args.command](args)
    except (ValidationError, dp.SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
