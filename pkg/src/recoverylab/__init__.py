"""recoverylab: failure injection, recovery-data generation, hindsight value
labeling, and value-conditioned policy training on a desk-scale 2D bimanual
manipulation world, with a phase-based recovery benchmark on top."""

__version__ = "0.1.0"

from .config import Config, load_config

__all__ = ["Config", "load_config", "__version__"]
