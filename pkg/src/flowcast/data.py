"""Entry records to model-ready windows, plus a synthetic visitor-flow generator.

Pipeline: entry timestamps -> :func:`aggregate_hourly` (T x P count panel)
-> :func:`raw_features` (calendar, holiday and weather columns) ->
:class:`FeatureBuilder` (min-max scaling fitted on training rows) ->
:func:`split_by_year` -> :func:`window`.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np
import pandas as pd
from dateutil.easter import easter
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

WEATHER_VOCAB = ("Snow", "Rain", "Clouds", "Clear", "Mist", "Fog", "Drizzle", "Thunderstorm")
WEATHER_NUMERIC = ("temp_c", "feels_like_c", "wind_mps", "precip_mm", "clouds_pct")
CALENDAR_COLS = ("year", "month_sin", "month_cos", "day_of_month", "day_of_week", "hour")
HOLIDAY_COLS = ("national_holiday", "school_holiday", "days_to_next_school_day")
MAX_WEATHER_GAP_H = 6

ENTRY_HEADER = ["poi_id", "timestamp"]
WEATHER_HEADER = ["timestamp", *WEATHER_NUMERIC, "description"]
HOLIDAY_HEADER = ["date", "kind"]


class SchemaError(ValueError):
    """Input file does not match the expected layout."""


@dataclass(frozen=True)
class EntryRecord:
    poi_id: int
    timestamp: datetime


@dataclass
class HourlyPanel:
    start_hour: pd.Timestamp
    counts: np.ndarray  # (T, P) non-negative ints
    poi_names: list

    @property
    def index(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start_hour, periods=len(self.counts), freq="h")

    @property
    def n_pois(self) -> int:
        return self.counts.shape[1]


# --- aggregation ---------------------------------------------------------------
def aggregate_hourly(entries: pd.DataFrame, start, end, n_pois: int, poi_names=None) -> HourlyPanel:
    """Count entries per (hour, POI) over [start, end); missing hours are zeros."""
    start = pd.Timestamp(start).floor("h")
    end = pd.Timestamp(end)
    T = int((end - start) // pd.Timedelta(hours=1))
    if T <= 0:
        raise ValueError("empty time range")
    ts = pd.to_datetime(entries["timestamp"]).to_numpy()
    poi = entries["poi_id"].to_numpy()
    if len(ts):
        if ts.min() < start.to_datetime64() or ts.max() >= end.to_datetime64():
            raise ValueError("entry outside the configured range")
        if poi.min() < 0 or poi.max() >= n_pois:
            raise ValueError(f"unknown poi_id (expected 0..{n_pois - 1})")
    hour = ((ts - start.to_datetime64()) // np.timedelta64(1, "h")).astype(np.int64)
    flat = np.bincount(hour * n_pois + poi.astype(np.int64), minlength=T * n_pois)
    names = list(poi_names) if poi_names is not None else [f"poi_{i}" for i in range(n_pois)]
    return HourlyPanel(start, flat.reshape(T, n_pois), names)


# --- holidays / weather helpers ---------------------------------------------------
def days_to_next_school_day(days: pd.DatetimeIndex, school_free: set) -> np.ndarray:
    """Calendar days until the next school day (0 on a school day).

    Weekends and the dates in ``school_free`` are not school days.
    """
    out = np.zeros(len(days), dtype=np.int64)
    nxt = None
    for i in range(len(days) - 1, -1, -1):
        d = days[i].date()
        if d.weekday() < 5 and d not in school_free:
            nxt = d
            out[i] = 0
            continue
        if nxt is None:
            # walk forward past the end of the index
            k, probe = 0, d
            while probe.weekday() >= 5 or probe in school_free:
                probe += timedelta(days=1)
                k += 1
            out[i] = k
        else:
            out[i] = (nxt - d).days
    return out


def _fill_weather(weather: pd.DataFrame, index: pd.DatetimeIndex) -> pd.DataFrame:
    w = weather.copy()
    w["timestamp"] = pd.to_datetime(w["timestamp"]).dt.floor("h")
    w = w.drop_duplicates("timestamp").set_index("timestamp").reindex(index)
    missing = w[list(WEATHER_NUMERIC)].isna().any(axis=1).to_numpy()
    if missing.any():
        # longest run of missing hours
        runs = np.diff(np.flatnonzero(np.diff(np.r_[0, missing.astype(int), 0])))[::2]
        if runs.max() > MAX_WEATHER_GAP_H:
            raise SchemaError(f"weather gap of {runs.max()} hours exceeds {MAX_WEATHER_GAP_H}")
        w = w.ffill().bfill()
    return w


def raw_features(panel: HourlyPanel, holidays: pd.DataFrame | None = None,
                 weather: pd.DataFrame | None = None) -> pd.DataFrame:
    """Unscaled feature table indexed by hour; counts appear as ``count_<p>`` columns."""
    idx = panel.index
    month_angle = 2 * np.pi * (idx.month.to_numpy() - 1) / 12
    df = pd.DataFrame(index=idx)
    df["year"] = idx.year.astype(float)
    df["month_sin"] = np.sin(month_angle)
    df["month_cos"] = np.cos(month_angle)
    df["day_of_month"] = idx.day.astype(float)
    df["day_of_week"] = idx.dayofweek.astype(float)
    df["hour"] = idx.hour.astype(float)

    days = idx.normalize()
    national, school = set(), set()
    if holidays is not None and len(holidays):
        hd = pd.to_datetime(holidays["date"]).dt.date
        national = set(hd[holidays["kind"] == "national"])
        school = set(hd[holidays["kind"] == "school"])
    day_list = pd.DatetimeIndex(days.unique())
    dnext = dict(zip(day_list, days_to_next_school_day(day_list, national | school)))
    dd = days.date
    df["national_holiday"] = np.fromiter((d in national for d in dd), dtype=float, count=len(dd))
    df["school_holiday"] = np.fromiter((d in school for d in dd), dtype=float, count=len(dd))
    df["days_to_next_school_day"] = np.asarray([dnext[d] for d in days], dtype=float)

    if weather is not None:
        w = _fill_weather(weather, idx)
        for col in WEATHER_NUMERIC:
            df[col] = w[col].astype(float).to_numpy()
        desc = w["description"].fillna("OTHER").astype(str).to_numpy()
        unknown = sorted(set(desc) - set(WEATHER_VOCAB) - {"OTHER"})
        if unknown:
            warnings.warn(f"unknown weather descriptions mapped to OTHER: {unknown}", stacklevel=2)
        for v in WEATHER_VOCAB:
            df[f"wx_{v}"] = (desc == v).astype(float)
        df["wx_OTHER"] = (~np.isin(desc, WEATHER_VOCAB)).astype(float)
    else:
        for col in WEATHER_NUMERIC:
            df[col] = 0.0
        for v in (*WEATHER_VOCAB, "OTHER"):
            df[f"wx_{v}"] = 0.0

    for p in range(panel.n_pois):
        df[f"count_{p}"] = panel.counts[:, p].astype(float)
    return df


# --- scaling -------------------------------------------------------------------------
@dataclass
class FeatureFrame:
    values: np.ndarray  # (T, F)
    columns: list
    index: pd.DatetimeIndex
    count_idx: np.ndarray  # column positions of the P count features
    raw_counts: np.ndarray  # (T, P) unscaled counts
    stats: dict = field(default_factory=dict)  # column -> (min, max)

    def __len__(self):
        return len(self.values)

    def rows(self, mask) -> "FeatureFrame":
        return FeatureFrame(self.values[mask], self.columns, self.index[mask], self.count_idx,
                            self.raw_counts[mask], self.stats)


class FeatureBuilder(BaseEstimator, TransformerMixin):
    """Min-max scaling with training-row statistics, plus column selection.

    Parameters
    ----------
    use_external : bool
        Keep calendar, holiday and weather columns. Otherwise only the hour
        of day and the counts are used.
    normalize_visitors : bool
        Scale the count columns too; otherwise they stay in visitor units.
    """

    UNSCALED = ("month_sin", "month_cos")

    def __init__(self, use_external=True, normalize_visitors=True):
        self.use_external = use_external
        self.normalize_visitors = normalize_visitors

    def _select(self, X: pd.DataFrame) -> list:
        counts = [c for c in X.columns if c.startswith("count_")]
        if self.use_external:
            return [c for c in X.columns if not c.startswith("count_")] + counts
        return ["hour"] + counts

    def fit(self, X: pd.DataFrame, y=None):
        cols = self._select(X)
        mins = X[cols].min().to_numpy(dtype=float)
        maxs = X[cols].max().to_numpy(dtype=float)
        self.columns_ = cols
        self.min_ = mins
        self.range_ = np.where(maxs > mins, maxs - mins, 1.0)
        self.scaled_ = np.array([c not in self.UNSCALED and (self.normalize_visitors or not c.startswith("count_"))
                                 for c in cols])
        self.count_idx_ = np.array([i for i, c in enumerate(cols) if c.startswith("count_")])
        if "year" in cols:
            self.year_max_ = float(X["year"].max())
        return self

    def transform(self, X: pd.DataFrame) -> FeatureFrame:
        check_is_fitted(self, "columns_")
        if "year" in self.columns_ and float(X["year"].max()) > self.year_max_:
            warnings.warn("year column exceeds the training range and is not clipped", stacklevel=2)
        vals = X[self.columns_].to_numpy(dtype=float)
        vals = np.where(self.scaled_, (vals - self.min_) / self.range_, vals)
        stats = {c: (float(m), float(m + r)) for c, m, r in zip(self.columns_, self.min_, self.range_)}
        raw = X[[self.columns_[i] for i in self.count_idx_]].to_numpy(dtype=float)
        return FeatureFrame(vals, list(self.columns_), X.index, self.count_idx_, raw, stats)

    def count_scale(self) -> tuple[np.ndarray, np.ndarray]:
        """(offset, scale) mapping model-space counts back to visitor units."""
        check_is_fitted(self, "columns_")
        if not self.normalize_visitors:
            n = len(self.count_idx_)
            return np.zeros(n), np.ones(n)
        return self.min_[self.count_idx_], self.range_[self.count_idx_]


def build_features(panel: HourlyPanel, holidays=None, weather=None, train_mask=None,
                   use_external=True, normalize_visitors=True, raw=None) -> tuple[FeatureFrame, FeatureBuilder]:
    """Scaled features; ``raw`` may carry a cached :func:`raw_features` table."""
    if raw is None:
        raw = raw_features(panel, holidays, weather)
    fb = FeatureBuilder(use_external=use_external, normalize_visitors=normalize_visitors)
    fb.fit(raw if train_mask is None else raw[np.asarray(train_mask)])
    return fb.transform(raw), fb


def split_by_year(frame: FeatureFrame, train_years, test_year) -> tuple[FeatureFrame, FeatureFrame]:
    years = frame.index.year
    tr = np.isin(years, list(train_years))
    te = years == test_year
    if not tr.any() or not te.any():
        raise ValueError("empty split")
    return frame.rows(tr), frame.rows(te)


# --- windowing ---------------------------------------------------------------------------
@dataclass
class WindowedDataset:
    sequences: np.ndarray  # (N, L, F), a read-only view
    targets: np.ndarray  # (N, P) in model units
    raw_targets: np.ndarray  # (N, P) visitor counts
    timestamps: np.ndarray  # (N, L) hours since the frame's first row
    target_index: pd.DatetimeIndex

    def __len__(self):
        return len(self.targets)

    @property
    def n_features(self) -> int:
        return self.sequences.shape[2]

    @property
    def n_outputs(self) -> int:
        return self.targets.shape[1]


def window(frame: FeatureFrame, L: int = 30, stride: int = 1, t_origin=None) -> WindowedDataset:
    """Slide a length-L window; the target is the count row right after it."""
    T = len(frame)
    if T <= L:
        raise ValueError(f"need more than {L} rows, got {T}")
    view = sliding_window_view(frame.values, L, axis=0)  # (T-L+1, F, L)
    seqs = np.swapaxes(view, 1, 2)[: T - L : stride]
    tgt_rows = np.arange(L, T, stride)
    origin = pd.Timestamp(t_origin) if t_origin is not None else frame.index[0]
    hours = ((frame.index - origin) / pd.Timedelta(hours=1)).to_numpy(dtype=float)
    ts = sliding_window_view(hours, L)[: T - L : stride]
    return WindowedDataset(seqs, frame.values[tgt_rows][:, frame.count_idx], frame.raw_counts[tgt_rows],
                           ts, frame.index[tgt_rows])


# --- synthetic generator -----------------------------------------------------------------
_DAILY = np.array([0, 0, 0, 0, 0, 0, 0.1, 0.3, 0.7, 1.0, 1.3, 1.5, 1.4, 1.3, 1.5, 1.6,
                   1.4, 1.1, 0.8, 0.5, 0.3, 0.1, 0, 0], dtype=float)
_WEEKLY = np.array([0.8, 0.85, 0.9, 0.95, 1.1, 1.35, 1.2], dtype=float)
_SEASONAL = np.array([0.55, 0.6, 0.75, 0.9, 1.0, 1.15, 1.45, 1.55, 1.15, 0.9, 0.7, 0.95], dtype=float)


@dataclass
class SynthConfig:
    n_pois: int = 32
    years: tuple = (2017, 2019)  # inclusive
    base_rate: tuple = ()  # per POI; drawn from the seed when empty
    daily_profile: tuple = tuple(_DAILY)
    weekly_profile: tuple = tuple(_WEEKLY)
    seasonal_profile: tuple = tuple(_SEASONAL)
    opening_hours: tuple = ()  # per POI (open, close); drawn when empty
    spikes: tuple = ()  # (poi, iso start, hours, multiplier)
    seed: int = 0

    def __post_init__(self):
        self.years = tuple(int(y) for y in self.years)
        for name in ("base_rate", "daily_profile", "weekly_profile", "seasonal_profile"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.opening_hours = tuple((int(o), int(c)) for o, c in self.opening_hours)
        self.spikes = tuple((int(p), str(t), int(h), float(m)) for p, t, h, m in self.spikes)
        rng = np.random.default_rng([self.seed, 1])
        P = self.n_pois
        if P < 1:
            raise ValueError("n_pois must be positive")
        if not self.base_rate:
            self.base_rate = tuple(float(v) for v in np.round(rng.gamma(4.0, 2.0, size=P), 3))
        if not self.opening_hours:
            opens = rng.integers(8, 11, size=P)
            closes = rng.integers(17, 21, size=P)
            self.opening_hours = tuple((int(o), int(c)) for o, c in zip(opens, closes))
        if not self.spikes:
            n = max(1, P // 4) * (self.years[1] - self.years[0] + 1)
            ev = []
            for _ in range(n):
                y = int(rng.integers(self.years[0], self.years[1] + 1))
                doy = int(rng.integers(0, 360))
                start = datetime(y, 1, 1, 10) + timedelta(days=doy)
                ev.append((int(rng.integers(0, P)), start.isoformat(), int(rng.integers(3, 9)),
                           float(np.round(rng.uniform(1.5, 3.0), 2))))
            self.spikes = tuple(ev)
        self.validate()

    def validate(self) -> None:
        checks = {"daily_profile": 24, "weekly_profile": 7, "seasonal_profile": 12}
        for name, n in checks.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,) or (arr < 0).any():
                raise ValueError(f"{name} must hold {n} non-negative factors")
        if len(self.base_rate) != self.n_pois or min(self.base_rate) < 0:
            raise ValueError("base_rate needs one non-negative rate per POI")
        if len(self.opening_hours) != self.n_pois:
            raise ValueError("opening_hours needs one (open, close) pair per POI")
        for o, c in self.opening_hours:
            if not 0 <= o < c <= 24:
                raise ValueError(f"bad opening hours ({o}, {c})")
        if self.years[0] > self.years[1]:
            raise ValueError("years must be increasing")

    @property
    def start(self) -> pd.Timestamp:
        return pd.Timestamp(self.years[0], 1, 1)

    @property
    def end(self) -> pd.Timestamp:
        return pd.Timestamp(self.years[1] + 1, 1, 1)

    def to_manifest(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "SynthConfig":
        kw = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            kw[k.strip()] = _parse(v.strip())
        kw["years"] = tuple(kw["years"])
        kw["opening_hours"] = tuple(tuple(x) for x in kw["opening_hours"])
        kw["spikes"] = tuple(tuple(x) for x in kw["spikes"])
        return cls(**kw)


def _fmt(v) -> str:
    import json

    return json.dumps(v) if isinstance(v, (tuple, list)) else str(v)


def _parse(s: str):
    import json

    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def rate_matrix(cfg: SynthConfig) -> tuple[pd.DatetimeIndex, np.ndarray]:
    """Hourly Poisson intensity (T, P)."""
    idx = pd.date_range(cfg.start, cfg.end, freq="h", inclusive="left")
    hour = idx.hour.to_numpy()
    lam = (np.asarray(cfg.daily_profile)[hour] * np.asarray(cfg.weekly_profile)[idx.dayofweek.to_numpy()]
           * np.asarray(cfg.seasonal_profile)[idx.month.to_numpy() - 1])
    lam = lam[:, None] * np.asarray(cfg.base_rate, dtype=float)[None, :]
    for p, (o, c) in enumerate(cfg.opening_hours):
        lam[(hour < o) | (hour >= c), p] = 0.0
    for p, start, hours, mult in cfg.spikes:
        i0 = idx.searchsorted(pd.Timestamp(start))
        lam[i0 : i0 + int(hours), int(p)] *= float(mult)
    return idx, lam


def national_holidays(year: int) -> list[date]:
    fixed = [(1, 1), (1, 6), (5, 1), (8, 15), (10, 26), (11, 1), (12, 8), (12, 25), (12, 26)]
    e = easter(year)
    moving = [e + timedelta(days=k) for k in (1, 39, 50, 60)]
    return sorted([date(year, m, d) for m, d in fixed] + moving)


def school_holidays(year: int) -> list[date]:
    spans = [
        (date(year, 1, 1), date(year, 1, 6)),
        (date(year, 2, 11), date(year, 2, 17)),
        (easter(year) - timedelta(days=7), easter(year) + timedelta(days=1)),
        (date(year, 7, 6), date(year, 9, 8)),
        (date(year, 10, 27), date(year, 11, 2)),
        (date(year, 12, 24), date(year, 12, 31)),
    ]
    out = []
    for a, b in spans:
        out.extend(a + timedelta(days=k) for k in range((b - a).days + 1))
    return sorted(set(out))


def synth_weather(idx: pd.DatetimeIndex, rng: np.random.Generator) -> pd.DataFrame:
    """Seasonal temperature with a daily cycle and AR(1) noise; clouds and rain as random walks."""
    T = len(idx)
    doy = idx.dayofyear.to_numpy()
    hour = idx.hour.to_numpy()
    noise = np.empty(T)
    clouds = np.empty(T)
    wind = np.empty(T)
    a, c, w = 0.0, 50.0, 3.0
    shocks = rng.normal(size=(T, 3))
    for t in range(T):
        a = 0.97 * a + 0.5 * shocks[t, 0]
        c = min(100.0, max(0.0, c + 6.0 * shocks[t, 1]))
        w = max(0.0, 0.9 * w + 0.3 + 0.6 * shocks[t, 2])
        noise[t], clouds[t], wind[t] = a, c, w
    temp = 9.0 - 11.0 * np.cos(2 * np.pi * (doy - 15) / 365.25) - 3.0 * np.cos(2 * np.pi * (hour - 3) / 24) + noise
    feels = temp - 0.7 * wind
    rain_p = np.clip((clouds - 70.0) / 30.0, 0.0, 1.0) * 0.6
    wet = rng.random(T) < rain_p
    precip = np.where(wet, rng.gamma(1.2, 1.5, size=T), 0.0)
    desc = np.full(T, "Clear", dtype=object)
    desc[clouds > 55] = "Clouds"
    fog = (clouds > 85) & (wind < 1.0) & (hour < 10)
    desc[fog] = np.where(temp[fog] < 5, "Fog", "Mist")
    desc[wet & (precip < 1.0)] = "Drizzle"
    desc[wet & (precip >= 1.0)] = "Rain"
    desc[wet & (precip >= 6.0) & (temp > 15)] = "Thunderstorm"
    desc[wet & (temp < 0.5)] = "Snow"
    return pd.DataFrame({
        "timestamp": idx,
        "temp_c": np.round(temp, 2),
        "feels_like_c": np.round(feels, 2),
        "wind_mps": np.round(wind, 2),
        "precip_mm": np.round(precip, 2),
        "clouds_pct": np.round(clouds, 1),
        "description": desc.astype(str),
    })


def synth_panel(cfg: SynthConfig) -> tuple[HourlyPanel, pd.DataFrame, pd.DataFrame]:
    """Counts drawn directly per hour, plus holidays and weather (no entry expansion)."""
    rng = np.random.default_rng(cfg.seed)
    idx, lam = rate_matrix(cfg)
    counts = rng.poisson(lam)
    weather = synth_weather(idx, rng)
    rows = []
    for y in range(cfg.years[0], cfg.years[1] + 1):
        rows += [(d.isoformat(), "national") for d in national_holidays(y)]
        rows += [(d.isoformat(), "school") for d in school_holidays(y)]
    holidays = pd.DataFrame(rows, columns=HOLIDAY_HEADER)
    panel = HourlyPanel(cfg.start, counts, [f"poi_{i}" for i in range(cfg.n_pois)])
    return panel, holidays, weather


def synth_generate(cfg: SynthConfig) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Entry records, holidays and weather; entries are spread uniformly inside their hour."""
    panel, holidays, weather = synth_panel(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    t_idx, p_idx = np.nonzero(panel.counts)
    reps = panel.counts[t_idx, p_idx]
    hours = np.repeat(t_idx, reps)
    pois = np.repeat(p_idx, reps)
    secs = rng.integers(0, 3600, size=len(hours))
    ts = cfg.start.to_datetime64() + hours.astype("timedelta64[h]") + secs.astype("timedelta64[s]")
    order = np.lexsort((pois, ts))
    entries = pd.DataFrame({"poi_id": pois[order], "timestamp": ts[order]})
    return entries, holidays, weather


# --- CSV I/O -------------------------------------------------------------------------------
def _check_header(path: Path, expected: list) -> None:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != expected:
        raise SchemaError(f"{path}: line 1: expected header {','.join(expected)}, got {','.join(header)}")


def _read_checked(path, expected: list, parse) -> pd.DataFrame:
    path = Path(path)
    _check_header(path, expected)
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    for col, fn in parse.items():
        try:
            df[col] = fn(df[col])
        except (ValueError, TypeError) as exc:
            bad = _first_bad(df[col], fn)
            raise SchemaError(f"{path}: line {bad + 2}: bad {col} value {df[col].iloc[bad]!r}") from exc
    return df


def _first_bad(series: pd.Series, fn) -> int:
    for i, v in enumerate(series):
        try:
            fn(pd.Series([v]))
        except (ValueError, TypeError):
            return i
    return 0


def _to_int(s):
    return pd.to_numeric(s, errors="raise").astype(np.int64)


def _to_float(s):
    return pd.to_numeric(s, errors="raise").astype(float)


def _to_dt(s):
    return pd.to_datetime(s, format="ISO8601")


def read_entries(path) -> pd.DataFrame:
    return _read_checked(path, ENTRY_HEADER, {"poi_id": _to_int, "timestamp": _to_dt})


def read_weather(path) -> pd.DataFrame:
    return _read_checked(path, WEATHER_HEADER, {"timestamp": _to_dt, **{c: _to_float for c in WEATHER_NUMERIC}})


def read_holidays(path) -> pd.DataFrame:
    df = _read_checked(path, HOLIDAY_HEADER, {"date": lambda s: pd.to_datetime(s, format="%Y-%m-%d")})
    bad = ~df["kind"].isin(["national", "school"])
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(f"{path}: line {i + 2}: kind must be national or school")
    df["date"] = df["date"].dt.strftime("%Y-%m-%d")
    return df


def write_entries(entries: pd.DataFrame, path) -> None:
    out = entries.copy()
    out["timestamp"] = pd.to_datetime(out["timestamp"]).dt.strftime("%Y-%m-%dT%H:%M:%S")
    out.to_csv(path, index=False, columns=ENTRY_HEADER)


def write_weather(weather: pd.DataFrame, path) -> None:
    out = weather.copy()
    out["timestamp"] = pd.to_datetime(out["timestamp"]).dt.strftime("%Y-%m-%dT%H:%M:%S")
    out.to_csv(path, index=False, columns=WEATHER_HEADER)


def write_holidays(holidays: pd.DataFrame, path) -> None:
    holidays.to_csv(path, index=False, columns=HOLIDAY_HEADER)


def seasonal_naive(raw_counts: np.ndarray, target_rows: np.ndarray, lag: int = 168) -> np.ndarray:
    """y_hat(t) = y(t - lag) for each target row index into ``raw_counts``."""
    rows = np.asarray(target_rows)
    if rows.min() < lag:
        raise ValueError("not enough history for the seasonal lag")
    return raw_counts[rows - lag]
