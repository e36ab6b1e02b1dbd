"""Softmax-gated Gaussian mixture-of-experts toolkit.

Fitting by EM, Voronoi-cell losses between mixing measures, merge
dendrograms over fitted atoms, and sweep-free model-order selection,
plus a reproducible experiment harness and a command line interface.
"""

from .errors import InputError, NumericError
from .model import (
    Dataset,
    ExpertAtom,
    MixingMeasure,
    avg_log_likelihood,
    conditional_density,
    gating_probs,
    normalize_baseline,
    responsibilities,
    translate,
)

__version__ = "0.1.0"

__all__ = [
    "InputError",
    "NumericError",
    "Dataset",
    "ExpertAtom",
    "MixingMeasure",
    "avg_log_likelihood",
    "conditional_density",
    "gating_probs",
    "normalize_baseline",
    "responsibilities",
    "translate",
    "__version__",
]
