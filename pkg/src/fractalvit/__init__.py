"""Desk-scale laboratory for fractal attention masks, summary-token
hierarchies, and positional encodings in a tiny ViT encoder."""

from .autodiff import Tape, Tensor
from .encoder import EncoderConfig, EncoderParams, forward, init_params
from .grid import GridSpec, TokenLayout, build_layout, max_levels
from .mask import AttentionMask, build_fractal_mask, build_full_mask
from .posenc import AlibiBias, PosTable, alibi2d_bias, alibi_slopes, sincos2d

__version__ = "0.1.0"

__all__ = [
    "AlibiBias",
    "AttentionMask",
    "EncoderConfig",
    "EncoderParams",
    "GridSpec",
    "PosTable",
    "Tape",
    "Tensor",
    "TokenLayout",
    "alibi2d_bias",
    "alibi_slopes",
    "build_fractal_mask",
    "build_full_mask",
    "build_layout",
    "forward",
    "init_params",
    "max_levels",
    "sincos2d",
]
