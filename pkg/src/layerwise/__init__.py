"""Layer-wise scaled decoder-only transformer at desk scale."""

__version__ = "0.1.0"

from .errors import LayerwiseError, NumericError
from .plan import ModelSpec, LayerPlan, ScalePlan, build_plan, count_parameters, count_norm_invocations
from .model import Checkpoint, Transformer, init_model, generate
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "LayerwiseError",
    "NumericError",
    "ModelSpec",
    "LayerPlan",
    "ScalePlan",
    "build_plan",
    "count_parameters",
    "count_norm_invocations",
    "Checkpoint",
    "Transformer",
    "init_model",
    "generate",
    "load_checkpoint",
    "save_checkpoint",
]
