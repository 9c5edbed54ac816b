"""Guided diffusion sampling with attractor repulsion."""

import json as _json

from ._core import (
    ConfigError,
    DcrError,
    DimensionError,
    FormatError,
    GuidanceConfig,
    JudgeParseError,
    MetricError,
    ToyModel,
    TrajectoryError,
    ValidationError,
    VerdictError,
    __version__,
    attractor_drift,
    ccs,
    cfg_update,
    collapse_fraction,
    collinearity_residual,
    cvr,
    guided_prediction,
    parse_verdict,
    render_attractor_template,
    sample,
    schedule_alpha,
    variants,
    wilson_interval,
)
from ._core import load_suite as _load_suite


def load_suite(path, canonical=False):
    """Load and validate a bench suite file; returns a list of item dicts."""
    return _json.loads(_load_suite(str(path), canonical))


__all__ = [name for name in dir() if not name.startswith("_")]
