"""Time-delay estimation toolkit: classic GCC with pluggable weightings, a
learned shift-equivariant filter front end with a lag classifier, and an
image-source room simulator for generating labeled training data.
"""

from .gcc import CorrelationWindow, Weighting, estimate_delay, gcc, max_lag
from .model import (
    BackboneConfig,
    ClassifierConfig,
    CorrelationMatrix,
    DelayPosterior,
    ModelConfig,
    TdoaModel,
    ce_loss,
    classify,
    desk_config,
    filter_signals,
    mse_head,
    mse_loss,
    multichannel_gcc_phat,
    paper_config,
    predict,
)
from .room import RoomSpec, Scene, propagate, render_rir, sample_scene, true_delay
from .signal import Frame, Spectrum, circular_shift, dft, fractional_delay_kernel, idft

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ClassifierConfig",
    "CorrelationMatrix",
    "CorrelationWindow",
    "DelayPosterior",
    "Frame",
    "ModelConfig",
    "RoomSpec",
    "Scene",
    "Spectrum",
    "TdoaModel",
    "Weighting",
    "ce_loss",
    "circular_shift",
    "classify",
    "desk_config",
    "dft",
    "estimate_delay",
    "filter_signals",
    "fractional_delay_kernel",
    "gcc",
    "idft",
    "max_lag",
    "mse_head",
    "mse_loss",
    "multichannel_gcc_phat",
    "paper_config",
    "predict",
    "propagate",
    "render_rir",
    "sample_scene",
    "true_delay",
]
