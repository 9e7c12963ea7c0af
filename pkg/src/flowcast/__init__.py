"""Hourly visitor-flow forecasting: a small autodiff engine, recurrent and
continuous-time cells, an ARIMA baseline, and the data pipeline and harness
that compare them."""

from .arima import ArimaForecaster, ArimaOrder, auto_select, css_fit, rolling_evaluate
from .cells import CellConfig, CellKind, init_params, param_count, sequence_forward
from .data import FeatureBuilder, SynthConfig, aggregate_hourly, build_features, split_by_year, synth_generate, window
from .harness import GridSpec, RNNForecaster, TrainConfig, compare_with_arima, evaluate, grid_search, train

__version__ = "0.1.0"
