"""Phrase-level cross-lingual prosody transfer for machine dubbing, at desk scale."""

from .corpus import AlignedToken, FeatureMatrix, FrameSpec, UtteranceRecord
from .encoder import EncoderConfig, GaussianPosterior, ProsodyEmbedding, ReferenceEncoder
from .losses import LossBreakdown, LossWeights
from .segmentation import Mode, PhraseSet, PhraseSpan

__all__ = [
    "AlignedToken",
    "EncoderConfig",
    "FeatureMatrix",
    "FrameSpec",
    "GaussianPosterior",
    "LossBreakdown",
    "LossWeights",
    "Mode",
    "PhraseSet",
    "PhraseSpan",
    "ProsodyEmbedding",
    "ReferenceEncoder",
    "UtteranceRecord",
]

__version__ = "0.1.0"
