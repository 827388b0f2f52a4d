"""Neighbour-enhanced supervised contrastive learning on a LightGCN backbone."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NesclError, NumericError  # noqa: E402,F401
from .interactions import InteractionDataset, build_graph, load_dataset  # noqa: E402,F401
from .training import TrainConfig, fit  # noqa: E402,F401
