"""Expression-conditioned dynamic subnets for visual grounding."""

from .config import RunConfig
from .model import GroundingModel
from .supernet import Supernet, SupernetConfig

__all__ = ["GroundingModel", "RunConfig", "Supernet", "SupernetConfig"]
__version__ = "0.1.0"
