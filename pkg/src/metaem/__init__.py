"""Reconstructing latent group instruments from pooled data and using them
for two-stage least-squares treatment effect estimation."""

from .dataset import Dataset, ScenarioSpec, generate, generate_test, load, save
from .meta_em import GivResult, MetaConfig, run
from .representation import TrainConfig

__version__ = "0.1.0"

__all__ = ["Dataset", "ScenarioSpec", "generate", "generate_test", "load", "save",
           "GivResult", "MetaConfig", "run", "TrainConfig", "__version__"]
