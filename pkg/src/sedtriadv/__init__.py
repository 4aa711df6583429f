"""Weakly-labeled polyphonic sound event detection with dual-labeler
agreement pseudo-labeling and gradient-reversal domain adaptation.

Pure numpy: the reverse-mode autodiff engine, CRNN, optimizer, trainer, and
evaluator live in this package with no deep-learning framework dependency.
"""

from .autodiff import Parameter, Tensor, backward, grad_reverse, no_grad
from .errors import SedError
from .frontend import AudioClip, FrontendConfig, log_mel, read_wav

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "FrontendConfig",
    "Parameter",
    "SedError",
    "Tensor",
    "__version__",
    "backward",
    "grad_reverse",
    "log_mel",
    "no_grad",
    "read_wav",
]
