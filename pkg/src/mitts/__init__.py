"""Emotional text-to-speech with mutual-information-guided style disentanglement.

A desk-scale, fully testable acoustic-model stack: a FastSpeech2-style
backbone, a dual-extractor style encoder (global timbre + phoneme-level
emotion), a Donsker-Varadhan mutual-information estimator that pushes the
two style embeddings apart, a two-stage training loop, and an objective
evaluation harness (DTW-aligned mel-cepstral distortion, probe accuracy,
clustering metrics).
"""

from mitts.errors import ValidationError
from mitts.data import (
    Batch,
    EmotionProgram,
    MelSpectrogram,
    NEUTRAL_EMOTION_ID,
    PhonemeItem,
    SyntheticSpec,
    collate_batch,
    extract_prosody_targets,
    generate_synthetic_corpus,
    load_manifest,
    save_corpus,
    split_corpus,
)
from mitts.mine import MIEstimate, MIEstimator, gaussian_mi_oracle
from mitts.model import DisentangledTTS, load_checkpoint, save_checkpoint
from mitts.training import TrainConfig, load_config, run_training

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "DisentangledTTS",
    "EmotionProgram",
    "MelSpectrogram",
    "MIEstimate",
    "MIEstimator",
    "NEUTRAL_EMOTION_ID",
    "PhonemeItem",
    "SyntheticSpec",
    "TrainConfig",
    "ValidationError",
    "collate_batch",
    "extract_prosody_targets",
    "gaussian_mi_oracle",
    "generate_synthetic_corpus",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "run_training",
    "save_checkpoint",
    "save_corpus",
    "split_corpus",
]
