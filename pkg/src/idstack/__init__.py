"""Stacked ID embeddings for personalized text-to-image generation, at desk scale.

Large pretrained models sit behind the adapter interfaces in :mod:`idstack.adapters`;
deterministic mocks make every stage runnable offline.
"""

from .adapters import AdapterSet, build_adapters, mock_adapters
from .diffusion import IdentityDiffusion, ModelConfig, SamplerConfig, generate, load_checkpoint, save_checkpoint
from .encoders import IDImage
from .stacking import build_mixing_pool, compose, merge_into_text, stack

__all__ = [
    "AdapterSet",
    "IDImage",
    "IdentityDiffusion",
    "ModelConfig",
    "SamplerConfig",
    "build_adapters",
    "build_mixing_pool",
    "compose",
    "generate",
    "load_checkpoint",
    "merge_into_text",
    "mock_adapters",
    "save_checkpoint",
    "stack",
]
