"""ECG-to-respiratory-rate toolkit.

Curation of paired ECG-minute / RR-label examples, a 1D convolutional
regressor trained from scratch, technical evaluation, pre-event cohort
statistics, and a synthetic generator providing ground truth.
"""

__version__ = "0.1.0"

from .estimator import RespRateRegressor

__all__ = ["RespRateRegressor", "__version__"]
