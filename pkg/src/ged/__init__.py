"""Generative ensemble diffusion for hourly precipitation nowcasting.

Submodules: ``schedule`` (diffusion algebra), ``unet`` (networks and
checkpoints), ``data`` (stores, normalisation, sequence selection),
``synth`` (synthetic weather), ``train``, ``ensemble``, ``metrics``,
``evaluation`` and ``pipeline`` (run directories behind the ``ged`` command).
"""

from .errors import ConfigError, DataGapError, DomainError, GedError, OrderingError, ShapeError, TrainingError
from .schedule import NoiseSchedule, ddim_step, estimate_x0, forward_diffuse, noise_loss, signal_rates

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule",
    "signal_rates",
    "forward_diffuse",
    "estimate_x0",
    "ddim_step",
    "noise_loss",
    "GedError",
    "ShapeError",
    "DomainError",
    "OrderingError",
    "ConfigError",
    "DataGapError",
    "TrainingError",
]
