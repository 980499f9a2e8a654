from safeplan.nn import autodiff
from safeplan.nn.autodiff import Graph, Tensor, grad, stop_gradient, tensor
from safeplan.nn.optim import clip_by_global_norm, opt_step
from safeplan.nn.params import ParamSet, dense, gru_cell, init_dense, init_gru, init_mlp, mlp_forward

elu = autodiff.elu

__all__ = [
    "Graph", "ParamSet", "Tensor", "autodiff", "clip_by_global_norm", "dense", "elu", "grad",
    "gru_cell", "init_dense", "init_gru", "init_mlp", "mlp_forward", "opt_step", "stop_gradient",
    "tensor",
]
