"""Curve models, the damped least-squares solver, spectra and fit wrappers."""

from .fits import (FITTERS, NoDecayError, fit_echo_decay, fit_rabi, fit_ramsey, fit_repolarization,
                   fit_revival_train, fit_t1, initial_guess, linear_fit, locate_extremum)
from .models import MODELS, ModelSpec, get_model
from .solver import FitError, FitReport, nlls_fit
from .spectrum import Spectrum, psd

__all__ = [
    "FITTERS", "MODELS", "FitError", "FitReport", "ModelSpec", "NoDecayError", "Spectrum",
    "fit_echo_decay", "fit_rabi", "fit_ramsey", "fit_repolarization", "fit_revival_train", "fit_t1",
    "get_model", "initial_guess", "linear_fit", "locate_extremum", "nlls_fit", "psd",
]
