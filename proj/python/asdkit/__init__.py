"""Anomalous sound detection with convolutional autoencoders.

The heavy lifting lives in the C++ extension; this package re-exports it.
Train and score with the ``asd`` command line tool, then load the run
directory here with :class:`Detector`.
"""

from ._core import (
    SAMPLE_RATE,
    AsdError,
    ClipTooShortError,
    ConfigError,
    Detector,
    FormatError,
    LineageError,
    MetricError,
    ShapeError,
    auc,
    log_gammatone,
    log_mel,
    pauc,
    read_wav,
    resolve_config,
    run_pipeline,
    selftest,
    synth_clip,
    write_synthetic_corpus,
)

__all__ = [
    "SAMPLE_RATE",
    "AsdError",
    "ClipTooShortError",
    "ConfigError",
    "Detector",
    "FormatError",
    "LineageError",
    "MetricError",
    "ShapeError",
    "auc",
    "log_gammatone",
    "log_mel",
    "pauc",
    "read_wav",
    "resolve_config",
    "run_pipeline",
    "selftest",
    "synth_clip",
    "write_synthetic_corpus",
]
