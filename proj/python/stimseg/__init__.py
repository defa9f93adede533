"""Emotion-prompted segmentation and explanation on synthetic data."""

from ._core import (
    EMOTIONS,
    CheckpointError,
    ConfigError,
    LoadError,
    Model,
    NumericalError,
    bbox,
    bleu,
    code_version,
    dice_loss,
    emotion_alignment,
    focal_loss,
    iou,
    keyword_emotion,
    p_at_k,
    read_manifest,
    rouge_l,
    selftest,
    synthesize,
    train,
)

__all__ = [
    "EMOTIONS",
    "CheckpointError",
    "ConfigError",
    "LoadError",
    "Model",
    "NumericalError",
    "bbox",
    "bleu",
    "code_version",
    "dice_loss",
    "emotion_alignment",
    "focal_loss",
    "iou",
    "keyword_emotion",
    "p_at_k",
    "read_manifest",
    "rouge_l",
    "selftest",
    "synthesize",
    "train",
]
