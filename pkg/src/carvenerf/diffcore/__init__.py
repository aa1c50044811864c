from .nn import MlpSpec, encoded_width, forward, forward_numpy, init_mlp, positional_encoding
from .params import ConfigurationError, DivergedError, ParamStore, adam_step, gradients
from .tape import ContractError, Node, Tape

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DivergedError",
    "MlpSpec",
    "Node",
    "ParamStore",
    "Tape",
    "adam_step",
    "encoded_width",
    "forward",
    "forward_numpy",
    "gradients",
    "init_mlp",
    "positional_encoding",
]
