"""Region-indexed visual grounding with language-guided semantic cues, in numpy."""
from .config import ConfigError, RunConfig, load_config
from .model import GroundingModel

__version__ = "0.1.0"

__all__ = ["ConfigError", "GroundingModel", "RunConfig", "load_config", "__version__"]
