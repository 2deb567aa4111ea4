# Core shared settings for the library, pipeline and CLI
from .config import (
    Config,
    setup_logging,
    DEFAULT_K,
    DEFAULT_DIM,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_ITERS,
    DEFAULT_ADAGRAD_EPSILON,
    DEFAULT_TOLERANCE,
    DEFAULT_LEAF_SIZE,
    DEFAULT_CONC_EMPHASIS,
    DEFAULT_SVD_DIM,
    DEFAULT_EIGEN_TOL,
    DEFAULT_CV_FOLDS,
    DEFAULT_REG_GRID,
    MAX_EXACT_NEIGHBOURHOOD,
)

__all__ = [
    # Config
    "Config",
    "setup_logging",
    # Defaults
    "DEFAULT_K",
    "DEFAULT_DIM",
    "DEFAULT_LEARNING_RATE",
    "DEFAULT_MAX_ITERS",
    "DEFAULT_ADAGRAD_EPSILON",
    "DEFAULT_TOLERANCE",
    "DEFAULT_LEAF_SIZE",
    "DEFAULT_CONC_EMPHASIS",
    "DEFAULT_SVD_DIM",
    "DEFAULT_EIGEN_TOL",
    "DEFAULT_CV_FOLDS",
    "DEFAULT_REG_GRID",
    "MAX_EXACT_NEIGHBOURHOOD",
]
