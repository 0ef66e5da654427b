"""Energy-based models for out-of-distribution detection."""

import json

from ._ebmlab import (
    ConfigError,
    DataError,
    NumericError,
    average_precision,
    make_blobs,
    make_constant,
    make_noise,
    make_oodomain,
    make_smoothness,
    make_two_moons,
)
from . import _ebmlab

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "average_precision",
    "make_blobs",
    "make_constant",
    "make_noise",
    "make_oodomain",
    "make_smoothness",
    "make_two_moons",
    "score",
    "train",
]


def train(config):
    """Train one run. `config` is a dict in the run-config JSON format.

    Returns a dict with keys report, checkpoint, losses, steps_run, diverged
    and diagnostic.
    """
    return json.loads(_ebmlab.train(json.dumps(config)))


def score(checkpoint, features):
    """log p~ per row of `features` under a checkpoint dict (as returned by train)."""
    return _ebmlab.score(json.dumps(checkpoint), features)
