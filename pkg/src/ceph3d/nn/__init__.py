from .gradcheck import GradCheckReport, grad_check, numeric_grad, rel_error
from .layers import AvgPool, Conv, Dense, Flatten, Layer, MaxPool, ReLU, ShapeError
from .network import Sequential, StaleCacheError, mlp
from .optim import AdamState, DivergenceError, adam_step

__all__ = [
    "AdamState", "AvgPool", "Conv", "Dense", "DivergenceError", "Flatten", "GradCheckReport",
    "Layer", "MaxPool", "ReLU", "Sequential", "ShapeError", "StaleCacheError", "adam_step",
    "grad_check", "mlp", "numeric_grad", "rel_error",
]
