from cpseg.autodiff.gradcheck import gradient_check, numerical_gradient
from cpseg.autodiff.rng import Rng
from cpseg.autodiff.tensor import Parameter, Tensor, as_tensor, concat, matmul, no_grad, parameter, stack

__all__ = [
    "Parameter",
    "Rng",
    "Tensor",
    "as_tensor",
    "concat",
    "gradient_check",
    "matmul",
    "no_grad",
    "numerical_gradient",
    "parameter",
    "stack",
]
