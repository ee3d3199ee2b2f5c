"""Class-incremental learning with adapted feature rehearsal."""

from .config import RunConfig, load_config
from .trainer import IncrementalTrainer, run

__all__ = ["RunConfig", "load_config", "IncrementalTrainer", "run"]
__version__ = "0.1.0"
