"""Temporal audio-visual localization toolkit.

Trainable desk-scale pipeline: time-aligned audio and visual encoders, a
factorized audio-spatial-temporal attention stack, a temporal
multiple-instance contrastive objective, audio-driven clip and frame
sampling, a synthetic disc-and-tone benchmark, and a scenario-aware
evaluation harness.
"""

from .errors import (
    ConfigError,
    DataError,
    InvalidInputError,
    NumericalError,
    TavloError,
    TavloWarning,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "InvalidInputError",
    "NumericalError",
    "TavloError",
    "TavloWarning",
    "__version__",
]


def __getattr__(name):
    # Lazy re-exports keep `import tavlo` cheap (no torch import) for
    # pure-numpy users of the ingest/evaluation helpers.
    lazy = {
        "ModelConfig": "model", "TavloModel": "model",
        "RunConfig": "config",
        "make_suite": "synth", "render_scene": "synth",
        "scenario_report": "evaluation", "ThresholdPolicy": "evaluation",
    }
    if name in lazy:
        import importlib

        module = importlib.import_module(f".{lazy[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
