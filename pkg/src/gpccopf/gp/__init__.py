"""Gaussian-process regression: kernel, likelihood, fitting and prediction."""
from .core import (FitOptions, GpModel, KernelParams, cholesky_jitter, fit, kernel_eval,
                   kernel_matrix, nll, predict)
from .multi import MultiGpModel, fit_multi, predict_multi
