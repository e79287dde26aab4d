"""Built-in models: the 2-D illustration problem and the ground-motion SDOF model."""
from .toy import make_toy_model, toy_oracle
from .gm_model import make_gm_model
from .groundmotion import GroundMotionParams, synthesize_acceleration
from .oscillators import SdofParams, sdof_nonlinear_response, spectral_acceleration

__all__ = [
    "make_toy_model",
    "toy_oracle",
    "make_gm_model",
    "GroundMotionParams",
    "synthesize_acceleration",
    "SdofParams",
    "sdof_nonlinear_response",
    "spectral_acceleration",
]
