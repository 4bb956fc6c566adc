"""Disentangled counterfactual learning for physical audiovisual reasoning, at desk scale.

Subpackages by layer: ``autograd``/``nn`` (numerics), ``dse`` (sequential
disentanglement), ``clm`` (affinity graphs and counterfactual effects),
``imlm`` (missing-modality completion), ``synth`` (episodes with known
factors), ``pipeline``/``config``/``cli`` (training harness).
"""

from .autograd import NumericDomainError, ShapeError, Tensor, no_grad
from .config import ConfigError, TrainConfig, load_config

__all__ = ["Tensor", "no_grad", "NumericDomainError", "ShapeError", "TrainConfig", "ConfigError",
           "load_config"]
__version__ = "0.1.0"
