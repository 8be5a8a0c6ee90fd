"""Composed synthesis model: acoustic backbone plus style encoder plus the
emotion/speaker classifier heads, and the versioned checkpoint container."""

import hashlib

import torch
from torch import nn

from mitts.backbone import AcousticBackbone
from mitts.errors import ValidationError
from mitts.style_encoder import StyleBundle, StyleEncoder

CHECKPOINT_VERSION = 1


class ClassifierHead(nn.Module):
    """Two fully-connected layers mapping an embedding to class logits."""

    def __init__(self, in_dim: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_classes)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class DisentangledTTS(nn.Module):
    """Backbone + style encoder + label predictors for stage-2 training.

    Style fusion happens between the phoneme encoder and the variance
    adaptor: hidden phoneme states are combined with the per-phoneme emotion
    sequence and the broadcast timbre vector before expansion to frames.
    """

    def __init__(
        self,
        backbone: AcousticBackbone,
        style_encoder: StyleEncoder,
        n_speakers: int,
        n_emotions: int,
        classifier_hidden: int = 64,
    ):
        super().__init__()
        self.backbone = backbone
        self.style_encoder = style_encoder
        self.emotion_predictor = ClassifierHead(
            backbone.dim, n_emotions, classifier_hidden
        )
        self.speaker_predictor = ClassifierHead(
            backbone.dim, n_speakers, classifier_hidden
        )

    def forward_utterance(
        self,
        ids: torch.Tensor,
        ref_mel: torch.Tensor,
        targets: dict | None = None,
        deterministic: bool = False,
    ):
        """One utterance: returns (mel (T, M), predictions, StyleBundle)."""
        h = self.backbone.encoder(ids, deterministic=deterministic)
        bundle = self.style_encoder(ref_mel, h)
        styled = self.style_encoder.fuse(h, bundle)
        frames, predictions = self.backbone.variance_adaptor(
            styled, targets=targets, deterministic=deterministic
        )
        mel = self.backbone.decoder(frames, deterministic=deterministic)
        return mel, predictions, bundle

    def extract_styles(self, ids: torch.Tensor, ref_mel: torch.Tensor) -> StyleBundle:
        """Style bundle only, deterministic, no decoding."""
        h = self.backbone.encoder(ids, deterministic=True)
        return self.style_encoder(ref_mel, h)

    @torch.no_grad()
    def synthesize(self, ids: torch.Tensor, ref_mel: torch.Tensor) -> torch.Tensor:
        """Inference: durations come from the duration predictor."""
        mel, _, _ = self.forward_utterance(ids, ref_mel, deterministic=True)
        return mel


def parameter_hash(module: nn.Module) -> str:
    """Order-stable sha256 over a module's state dict; detects any drift."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def checkpoint_groups(model: nn.Module, mi_estimator=None) -> dict:
    """Named parameter groups for the checkpoint container."""
    if isinstance(model, DisentangledTTS):
        groups = {
            "encoder": model.backbone.encoder.state_dict(),
            "variance_adaptor": model.backbone.variance_adaptor.state_dict(),
            "decoder": model.backbone.decoder.state_dict(),
            "style_encoder": model.style_encoder.state_dict(),
            "predictors": {
                "emotion": model.emotion_predictor.state_dict(),
                "speaker": model.speaker_predictor.state_dict(),
            },
        }
    elif isinstance(model, AcousticBackbone):
        groups = {
            "encoder": model.encoder.state_dict(),
            "variance_adaptor": model.variance_adaptor.state_dict(),
            "decoder": model.decoder.state_dict(),
        }
    else:
        raise ValidationError(f"cannot checkpoint a {type(model).__name__}")
    if mi_estimator is not None:
        groups["mi_estimator"] = mi_estimator.state_dict()
    return groups


def save_checkpoint(
    path,
    model: nn.Module,
    dimensions: dict,
    stage: int,
    step: int,
    config_hash: str,
    mi_estimator=None,
):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": step,
        "config_hash": config_hash,
        "dimensions": dict(dimensions),
        "groups": checkpoint_groups(model, mi_estimator),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {path}")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ValidationError(f"not a recognizable checkpoint: {path}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise ValidationError(
            f"checkpoint format {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def verify_dimensions(payload: dict, expected: dict):
    """Stage-2 loading refuses checkpoints whose dimensions disagree."""
    stored = payload["dimensions"]
    for key, want in expected.items():
        have = stored.get(key)
        if have != want:
            raise ValidationError(
                f"checkpoint dimension mismatch on {key!r}: "
                f"checkpoint has {have}, model needs {want}"
            )


def load_backbone_groups(backbone: AcousticBackbone, payload: dict):
    groups = payload["groups"]
    for name in ("encoder", "variance_adaptor", "decoder"):
        if name not in groups:
            raise ValidationError(f"checkpoint missing parameter group {name!r}")
    backbone.encoder.load_state_dict(groups["encoder"])
    backbone.variance_adaptor.load_state_dict(groups["variance_adaptor"])
    backbone.decoder.load_state_dict(groups["decoder"])


def load_full_model(model: DisentangledTTS, payload: dict, mi_estimator=None):
    load_backbone_groups(model.backbone, payload)
    groups = payload["groups"]
    for name in ("style_encoder", "predictors"):
        if name not in groups:
            raise ValidationError(f"checkpoint missing parameter group {name!r}")
    model.style_encoder.load_state_dict(groups["style_encoder"])
    model.emotion_predictor.load_state_dict(groups["predictors"]["emotion"])
    model.speaker_predictor.load_state_dict(groups["predictors"]["speaker"])
    if mi_estimator is not None:
        if "mi_estimator" not in groups:
            raise ValidationError("checkpoint missing parameter group 'mi_estimator'")
        mi_estimator.load_state_dict(groups["mi_estimator"])
