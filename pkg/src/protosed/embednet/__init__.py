from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .network import Embedder, EmbedderConfig, expected_param_count
from .optim import SGD, learning_rate

__all__ = [
    "Tensor",
    "no_grad",
    "Embedder",
    "EmbedderConfig",
    "expected_param_count",
    "SGD",
    "learning_rate",
    "save_checkpoint",
    "load_checkpoint",
]
