"""Joint audio-video flow-matching lab.

Two structurally identical diffusion-transformer branches denoise paired
video and audio token timelines, exchanging features through windowed
cross-modal aligners gated by a predicted salient-region mask. Sampling uses
per-modality guidance against an exchange-silenced forward pass. The data
side is fully synthetic with a known cross-modal coupling, so alignment
quality is measurable exactly.
"""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, OracleFailure, ShapeError, UndefinedScore
from .layout import FrameLayout

__all__ = [
    "ConfigError",
    "FormatError",
    "FrameLayout",
    "OracleFailure",
    "ShapeError",
    "UndefinedScore",
    "__version__",
]
