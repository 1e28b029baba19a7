"""Multi-view candidate detection in 3D volumes.

Candidate generation with a voxel random forest, 2D HOG views classified by a
linear SVM, and per-candidate aggregation of the view scores by pooling or a
sparse Bayesian logistic fusion.
"""
from .errors import CalibrationError, ConvergenceError, DataError, ViewAggError
from .volume import Volume, load_volume, save_volume

__all__ = ["Volume", "load_volume", "save_volume", "ViewAggError", "DataError", "CalibrationError",
           "ConvergenceError"]
__version__ = "0.1.0"
