"""Rotary vs polar-coordinate positional encodings for Transformer attention."""

from .encoding import (ComplexHeadVector, EncodingKind, FrequencySchedule,
                       PhaseBias, clamp_bias, init_bias, make_frequencies,
                       pope_encode, pope_score, pope_score_polar, rope_rotate,
                       rope_score, rope_score_polar, softplus)
from .model import ModelConfig, Transformer
from .training import TrainConfig, preset, train

__all__ = [
    "ComplexHeadVector", "EncodingKind", "FrequencySchedule", "PhaseBias",
    "clamp_bias", "init_bias", "make_frequencies", "pope_encode", "pope_score",
    "pope_score_polar", "rope_rotate", "rope_score", "rope_score_polar",
    "softplus", "ModelConfig", "Transformer", "TrainConfig", "preset", "train",
]

__version__ = "0.1.0"
