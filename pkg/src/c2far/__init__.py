"""Coarse-to-fine autoregressive binned forecasting with Pareto tails."""
from .binning import BinningSpec, Interval, build_spec, child_edges, discretize, interval_of
from .distribution import StepDensity, cdf, log_prob, pdf_grid, sample
from .exceptions import (
    C2farError,
    ConfigurationError,
    DivergenceError,
    InputError,
    MetricError,
    NormalizationError,
    StudyError,
)
from .model import C2farConfig, C2farRnn, GaussianConfig, GaussianRnn, count_parameters
from .windows import ForecastGrid, SeriesWindow

__version__ = "0.1.0"
