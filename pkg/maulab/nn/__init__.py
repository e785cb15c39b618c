from maulab.nn.modules import Module, Parameter
from maulab.nn.tensor import Tensor, no_grad

__all__ = ["Tensor", "Parameter", "Module", "no_grad"]
