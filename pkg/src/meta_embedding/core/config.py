"""
Shared configuration for the library, the pipeline and the CLI.
"""
import os
import logging
from dotenv import load_dotenv

load_dotenv()

# Default hyperparameters. Every dataclass default in the package reads these.
DEFAULT_K = 1200
DEFAULT_DIM = 300
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_MAX_ITERS = 100
DEFAULT_ADAGRAD_EPSILON = 1e-8
DEFAULT_TOLERANCE = 1e-7
DEFAULT_LEAF_SIZE = 40
DEFAULT_CONC_EMPHASIS = 8.0
DEFAULT_SVD_DIM = 300
DEFAULT_EIGEN_TOL = 1e-8
DEFAULT_CV_FOLDS = 5
DEFAULT_REG_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)

# Dense per-word solves are refused above this union-neighbourhood size.
MAX_EXACT_NEIGHBOURHOOD = 5000


class Config:
    """Centralized configuration loaded from environment variables."""

    # Logging
    LOG_LEVEL = os.getenv("META_LOG_LEVEL", "INFO")
    LOG_FORMAT = os.getenv("META_LOG_FORMAT", "%(asctime)s - %(levelname)s - %(message)s")

    # Stage cache
    CACHE_DIR = os.getenv("META_CACHE_DIR", ".meta_cache")

    # Parallelism
    WORKERS = int(os.getenv("META_WORKERS", "1"))

    @classmethod
    def get_workers(cls) -> int:
        """Worker count, never below 1."""
        return max(1, cls.WORKERS)


def setup_logging(level: str = None):
    """Configure logging based on META_LOG_LEVEL (or an explicit override)."""
    level_name = (level or Config.LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=Config.LOG_FORMAT,
    )
    return logging.getLogger(__name__)
