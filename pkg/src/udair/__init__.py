"""Domain-adaptive all-in-one image restoration with a degradation codebook."""

from .config import TASKS, RunConfig, build_config

__version__ = "0.1.0"

__all__ = ["TASKS", "RunConfig", "build_config", "__version__"]
