"""Gradient-weighted attention relevance with layer-norm statistics for toy ViT/Swin models."""

from .attribution import AttributionOptions, Heatmap, attribute, explain, rollout, upsample
from .models import Model, ModelConfig, forward, toy_swin_config, toy_vit_config

__all__ = [
    "AttributionOptions", "Heatmap", "Model", "ModelConfig", "attribute", "explain",
    "forward", "rollout", "toy_swin_config", "toy_vit_config", "upsample",
]
__version__ = "0.1.0"
