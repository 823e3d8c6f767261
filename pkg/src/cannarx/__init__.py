"""Control-affine neural NARX models: identification, stability certificates and control."""

from .model import ModelParameters, init_cannarx, init_nnarx, load_model, save_model
from .stability import certify, diss_residual

__all__ = ["ModelParameters", "init_cannarx", "init_nnarx", "load_model", "save_model",
           "certify", "diss_residual"]
__version__ = "0.1.0"
