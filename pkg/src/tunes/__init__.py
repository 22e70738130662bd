"""Temporal U-Net with self-attention for surgical phase recognition."""

from .attention import AttentionMask, MultiHeadAttention, TransformerBlock, scaled_dot_attention
from .model import Tunes, TunesConfig, build_model, count_parameters, load_checkpoint, save_checkpoint
from .ops import ConvBlock, Downsample, TemporalConv, Upsample

__all__ = [
    "AttentionMask",
    "ConvBlock",
    "Downsample",
    "MultiHeadAttention",
    "TemporalConv",
    "TransformerBlock",
    "Tunes",
    "TunesConfig",
    "Upsample",
    "build_model",
    "count_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "scaled_dot_attention",
]

__version__ = "0.1.0"
