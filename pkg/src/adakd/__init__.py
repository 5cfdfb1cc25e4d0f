"""Token-adaptive knowledge distillation for small autoregressive language models."""

__version__ = "0.1.0"

from .config import DistillRunConfig, load_config, with_overrides
from .difficulty import IndicatorKind, score_tokens
from .estimators import AdaKDDistiller, TeacherLM
from .experiments import compare_methods
from .idts import IdtsConfig, InverseDifficultyTemperature, TemperatureMode, temperatures_for
from .latf import LatfConfig, LatfController, select_tokens
from .loss import DistillObjective, DivergenceKind, selective_distill_loss
from .nn import ModelSpec, TinyTransformerLM
from .trainer import run_distillation, train_teacher

__all__ = [
    "AdaKDDistiller", "DistillObjective", "DistillRunConfig", "DivergenceKind", "IdtsConfig",
    "IndicatorKind", "InverseDifficultyTemperature", "LatfConfig", "LatfController", "ModelSpec",
    "TeacherLM", "TemperatureMode", "TinyTransformerLM", "compare_methods", "load_config", "run_distillation",
    "score_tokens", "select_tokens", "selective_distill_loss", "temperatures_for", "train_teacher",
    "with_overrides",
]
