"""Dependency-free SVG line charts of predicted vs true visitor counts."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

PRED_HEADER = ["model", "poi", "timestamp", "y_true", "y_pred"]
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


class EmptySelection(ValueError):
    pass


def read_predictions(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    if list(df.columns) != PRED_HEADER:
        raise ValueError(f"{path}: line 1: expected header {','.join(PRED_HEADER)}")
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    return df


def write_predictions(df: pd.DataFrame, path) -> None:
    out = df[PRED_HEADER].copy()
    out["timestamp"] = pd.to_datetime(out["timestamp"]).dt.strftime("%Y-%m-%dT%H:%M:%S")
    out.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def select(df: pd.DataFrame, poi, start=None, end=None) -> pd.DataFrame:
    if str(poi) not in set(df["poi"].astype(str)):
        raise EmptySelection(f"POI {poi} is not in the predictions")
    sel = df[df["poi"].astype(str) == str(poi)]
    if start is not None:
        sel = sel[sel["timestamp"] >= pd.Timestamp(start)]
    if end is not None:
        sel = sel[sel["timestamp"] < pd.Timestamp(end)]
    if sel.empty:
        raise EmptySelection("no predictions in the requested range")
    return sel


def _polyline(xs, ys, color, label, width=1.5) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
            f'data-series="{escape(label)}" points="{pts}"/>')


def plot_series(df: pd.DataFrame, poi, start=None, end=None, title=None,
                width=900, height=360) -> str:
    """SVG with the ground truth plus one polyline per model; y starts at 0."""
    sel = select(df, poi, start, end)
    truth = sel.groupby("timestamp")["y_true"].first().sort_index()
    models = list(dict.fromkeys(sel["model"]))
    hours = ((truth.index - truth.index[0]) / pd.Timedelta(hours=1)).to_numpy(dtype=float)
    ymax = max(float(sel["y_true"].max()), float(sel["y_pred"].max()), 1.0) * 1.05
    xmax = max(hours[-1], 1.0)
    left, right, top, bottom = 50, 150, 30, 40
    pw, ph = width - left - right, height - top - bottom

    def sx(h):
        return left + pw * np.asarray(h, dtype=float) / xmax

    def sy(v):
        return top + ph * (1.0 - np.asarray(v, dtype=float) / ymax)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{left}" y="18" font-size="13" font-family="sans-serif">'
             f'{escape(title or f"POI {poi}")}</text>']
    # axes and ticks
    x0, y0 = left, top + ph
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{top}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for v in np.linspace(0, ymax, 5):
        y = float(sy(v))
        parts.append(f'<text x="{x0 - 6}" y="{y + 4:.2f}" font-size="10" text-anchor="end" '
                     f'font-family="sans-serif">{v:.0f}</text>')
    step = max(1, int(np.ceil(len(hours) / 8)))
    for i in range(0, len(hours), step):
        x = float(sx(hours[i]))
        label = truth.index[i].strftime("%m-%d %H:00")
        parts.append(f'<text x="{x:.2f}" y="{y0 + 16}" font-size="10" text-anchor="middle" '
                     f'font-family="sans-serif">{label}</text>')

    series = [("truth", truth.to_numpy(dtype=float), "black")]
    for i, m in enumerate(models):
        pred = sel[sel["model"] == m].set_index("timestamp")["y_pred"].reindex(truth.index)
        series.append((str(m), pred.to_numpy(dtype=float), _COLORS[i % len(_COLORS)]))
    for k, (label, ys, color) in enumerate(series):
        ok = np.isfinite(ys)
        parts.append(_polyline(sx(hours[ok]), sy(ys[ok]), color, label, 2.0 if k == 0 else 1.2))
        ly = top + 14 * k + 6
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 34}" y="{ly + 4}" font-size="11" '
                     f'font-family="sans-serif">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
