"""Frontal vehicle-type classification: a from-scratch CNN and a dense-SIFT/BoW/SVM baseline."""

from .dataset import CLASS_NAMES
from .errors import VtkitError

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "VtkitError", "__version__"]
