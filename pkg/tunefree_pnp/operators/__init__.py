from .base import MeasurementModel, Observation, Problem, check_image, make_problem, to_complex
from .cdp import CdpModel, amplitude_gradient, amplitude_loss, cdp_forward, data_prox_pr, random_patterns
from .csmri import CsmriModel, csmri_adjoint, csmri_forward, data_prox_csmri
from .masks import KSpaceMask, acceleration_to_rate, load_mask, make_mask, save_mask

__all__ = [
    "CdpModel",
    "CsmriModel",
    "KSpaceMask",
    "MeasurementModel",
    "Observation",
    "Problem",
    "acceleration_to_rate",
    "amplitude_gradient",
    "amplitude_loss",
    "cdp_forward",
    "check_image",
    "csmri_adjoint",
    "csmri_forward",
    "data_prox_csmri",
    "data_prox_pr",
    "load_mask",
    "make_mask",
    "make_problem",
    "random_patterns",
    "save_mask",
    "to_complex",
]
