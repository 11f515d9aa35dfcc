"""CS-Mixer: a hierarchical vision MLP with low-rank spatial-channel token mixing."""

__version__ = "0.1.0"

from .config import VARIANTS, ModelConfig, tiny_config, variant  # noqa: E402
from .model import CSMixer  # noqa: E402
from .tensor import Tape, Tensor  # noqa: E402

__all__ = ["CSMixer", "ModelConfig", "Tape", "Tensor", "VARIANTS", "tiny_config", "variant"]
