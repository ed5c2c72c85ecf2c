"""Three-branch spatio-temporal action detection, scaled to run on a desk.

The pipeline detects per-person actions at key frames of a video by fusing
a short-term person branch (SlowFast backbone plus 3D RoI pooling), a
long-term feature-bank branch (attention over up to a minute of stored
person features), and a global clip branch with an auxiliary scene loss.
Training runs in two stages: the short-term extractor first, then the full
model against a bank built from the frozen stage-1 weights.
"""

from .config import ExperimentConfig, ConfigError
from .data import ActionVocabulary, Detection, VideoTensor

__all__ = [
    "ActionVocabulary",
    "ConfigError",
    "Detection",
    "ExperimentConfig",
    "VideoTensor",
]

__version__ = "0.1.0"
