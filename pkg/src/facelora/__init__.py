"""LoRA fine-tuning of frozen ViT backbones for face verification."""

from .lora import AdaptedLinear, LoraAdapter, ScalingMode, adapter_forward, init_adapter, lora_scale, merge
from .loss import CosFaceHead, cosface_logits, cosface_loss
from .vit import ViTBackbone, ViTConfig, extract_embedding, load_backbone_weights, save_backbone_weights

__version__ = "0.1.0"

__all__ = [
    "AdaptedLinear",
    "CosFaceHead",
    "LoraAdapter",
    "ScalingMode",
    "ViTBackbone",
    "ViTConfig",
    "adapter_forward",
    "cosface_logits",
    "cosface_loss",
    "extract_embedding",
    "init_adapter",
    "load_backbone_weights",
    "lora_scale",
    "merge",
    "save_backbone_weights",
]
