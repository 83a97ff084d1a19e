"""Anchor-free corner detector over a matrix of aspect-ratio-specific layers."""

from .config import Config, load_config
from .decoder import Detection, decode
from .model import Detector

__all__ = ["Config", "Detection", "Detector", "decode", "load_config"]
__version__ = "0.1.0"
