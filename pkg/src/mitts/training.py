"""Two-stage optimization: neutral-only backbone pretraining, then style
training with a frozen phoneme encoder and alternating critic updates.

The metrics log is append-only JSONL, one record per logged step, and the
whole trajectory is a deterministic function of (config, corpus)."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from mitts.backbone import AcousticBackbone, stage1_forward
from mitts.data import (
    collate_batch,
    load_manifest,
    neutral_subset,
    prosody_stats,
    split_corpus,
)
from mitts.errors import ValidationError
from mitts.mine import MIEstimator, make_marginal_permutation
from mitts.model import (
    DisentangledTTS,
    load_backbone_groups,
    load_checkpoint,
    load_full_model,
    parameter_hash,
    save_checkpoint,
    verify_dimensions,
)
from mitts.style_encoder import StyleEncoder

REFERENCE_RULES = ("same_utterance", "same_speaker_emotion_diff_text")


@dataclass
class TrainConfig:
    """Flat run configuration; every field round-trips through JSON.

    Loss weights lambda_dur..lambda_speaker default to 1.0 and lambda_mi to
    0.1. Width/step defaults are desk-scale; the reference-scale settings
    (batch 64, 60k steps, model width 256) remain reachable through the same
    fields.
    """

    stage: int = 1
    data_dir: str = ""
    out_dir: str = ""
    init_checkpoint: str = ""
    seed: int = 0
    total_steps: int = 2000
    batch_size: int = 16
    warmup_steps: int = 400
    lr_factor: float = 1.0
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    lambda_dur: float = 1.0
    lambda_pitch: float = 1.0
    lambda_energy: float = 1.0
    lambda_emotion: float = 1.0
    lambda_speaker: float = 1.0
    lambda_mi: float = 0.1
    use_predictors: bool = True
    use_mine: bool = True
    # Train the critic for measurement even when its penalty is disabled;
    # lets an ablation run log a meaningful MI estimate.
    mine_monitor: bool = False
    mine_steps_per_tts_step: int = 5
    mine_lr: float = 1e-4
    mine_hidden: int = 128
    reference_rule: str = "same_utterance"
    log_every: int = 1
    val_every: int = 200
    checkpoint_every: int = 0
    dim: int = 64
    heads: int = 2
    encoder_blocks: int = 4
    decoder_blocks: int = 6
    fft_filter_size: int = 128
    fft_kernel_size: int = 9
    predictor_filter_size: int = 256
    predictor_kernel_size: int = 3
    dropout: float = 0.1
    n_bins: int = 256
    ref_dim: int = 32
    ref_channels: list = None
    n_timbre_tokens: int = 10
    n_emotion_tokens: int = 10
    token_heads: int = 4
    align_heads: int = 4
    pepa_kernel_size: int = 3
    smoothing_radius: int = 1
    classifier_hidden: int = 64

    def __post_init__(self):
        if self.ref_channels is None:
            self.ref_channels = [16, 16, 32, 32, 64, 64]

    def validate(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}")
        for name in (
            "lambda_dur", "lambda_pitch", "lambda_energy", "lambda_emotion",
            "lambda_speaker", "lambda_mi",
        ):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.stage == 2 and not self.init_checkpoint:
            raise ValidationError("stage 2 requires init_checkpoint (a stage-1 run)")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")
        if self.reference_rule not in REFERENCE_RULES:
            raise ValidationError(
                f"reference_rule must be one of {REFERENCE_RULES}, "
                f"got {self.reference_rule!r}"
            )
        for name in (
            "total_steps", "batch_size", "warmup_steps", "mine_steps_per_tts_step",
            "log_every", "val_every", "dim", "heads", "encoder_blocks",
            "decoder_blocks", "fft_filter_size", "predictor_filter_size",
            "n_bins", "ref_dim", "n_timbre_tokens", "n_emotion_tokens",
            "token_heads", "align_heads", "classifier_hidden", "mine_hidden",
        ):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stage == 2 and self.batch_size < 2:
            raise ValidationError("stage 2 needs batch_size >= 2 for marginal pairs")
        if self.grad_clip < 0:
            raise ValidationError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.dim % self.heads != 0 or self.dim % 2 != 0:
            raise ValidationError(
                f"dim must be even and divisible by heads, got dim={self.dim} "
                f"heads={self.heads}"
            )
        if not (isinstance(self.ref_channels, list) and self.ref_channels
                and all(isinstance(c, int) and c >= 1 for c in self.ref_channels)):
            raise ValidationError("ref_channels must be a non-empty list of ints >= 1")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, value, target_type):
    if target_type == "bool" or target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ValidationError(f"config key {name!r} expects a bool, got {value!r}")
    if target_type == "int" or target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ValidationError(f"config key {name!r} expects an int, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ValidationError(f"config key {name!r} expects an int, got {value!r}")
    if target_type == "float" or target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ValidationError(f"config key {name!r} expects a float, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ValidationError(f"config key {name!r} expects a float, got {value!r}")
    if target_type == "str" or target_type is str:
        return str(value)
    if target_type == "list" or target_type is list:
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ValidationError(
                    f"config key {name!r} expects a JSON list, got {value!r}"
                )
        if not isinstance(value, list):
            raise ValidationError(f"config key {name!r} expects a list, got {value!r}")
        return value
    return value


def config_from_dict(data: dict) -> TrainConfig:
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    coerced = {k: _coerce(k, v, _FIELD_TYPES[k]) for k, v in data.items()}
    return TrainConfig(**coerced)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return config_from_dict(data)


def save_config(config: TrainConfig, path):
    with open(path, "w") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_overrides(config: TrainConfig, overrides: list) -> TrainConfig:
    """Apply KEY=VALUE strings on top of a config."""
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        if key not in _FIELD_TYPES:
            raise ValidationError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, value, _FIELD_TYPES[key])
    return replace(config, **updates)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def noam_lr(step: int, dim: int, warmup_steps: int, factor: float = 1.0) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValidationError(f"schedule step must be >= 1, got {step}")
    return factor * dim**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


def _to_float(x) -> float:
    return float(torch.as_tensor(x).detach())


def compute_stage1_loss(recons, dur, lambda_dur: float):
    """total = recons + lambda_dur * dur."""
    total = recons + lambda_dur * dur
    return total, {
        "total": _to_float(total),
        "recons": _to_float(recons),
        "dur": _to_float(dur),
    }


def compute_stage2_loss(components: dict, mi_value, config: TrainConfig):
    """Weighted sum of whatever terms the ablation leaves in play.

    components holds tensors (or floats) for recons/dur/pitch/energy and,
    unless use_predictors is off, emotion/speaker. mi_value is the current
    bound estimate; only its positive part is penalized, and only when
    use_mine is on. Removed terms are logged as 0.0 and contribute nothing.
    """
    total = (
        torch.as_tensor(components["recons"])
        + config.lambda_dur * torch.as_tensor(components["dur"])
        + config.lambda_pitch * torch.as_tensor(components["pitch"])
        + config.lambda_energy * torch.as_tensor(components["energy"])
    )
    logged = {
        "recons": _to_float(components["recons"]),
        "dur": _to_float(components["dur"]),
        "pitch": _to_float(components["pitch"]),
        "energy": _to_float(components["energy"]),
        "emotion": 0.0,
        "speaker": 0.0,
        "mi_penalty": 0.0,
    }
    if config.use_predictors:
        total = total + config.lambda_emotion * torch.as_tensor(components["emotion"])
        total = total + config.lambda_speaker * torch.as_tensor(components["speaker"])
        logged["emotion"] = _to_float(components["emotion"])
        logged["speaker"] = _to_float(components["speaker"])
    if config.use_mine and mi_value is not None:
        penalty = torch.relu(torch.as_tensor(mi_value))
        total = total + config.lambda_mi * penalty
        logged["mi_penalty"] = _to_float(penalty)
    logged["total"] = _to_float(total)
    return total, logged


def corpus_dimensions(items) -> dict:
    """Model-shaping facts derived from the corpus itself."""
    if not items:
        raise ValidationError("corpus is empty")
    stats = prosody_stats(items)
    return {
        "vocab_size": int(max(int(it.phoneme_ids.max()) for it in items)) + 1,
        "n_mels": items[0].mel.n_bins,
        "n_speakers": int(max(it.speaker_id for it in items)) + 1,
        "n_emotions": int(max(it.emotion_id for it in items)) + 1,
        "pitch_min": stats["pitch_min"],
        "pitch_max": stats["pitch_max"],
        "energy_min": stats["energy_min"],
        "energy_max": stats["energy_max"],
    }


def _checkpoint_dims(config: TrainConfig, dims: dict) -> dict:
    return {
        "vocab_size": dims["vocab_size"],
        "n_mels": dims["n_mels"],
        "n_speakers": dims["n_speakers"],
        "n_emotions": dims["n_emotions"],
        "dim": config.dim,
        "ref_dim": config.ref_dim,
    }


def build_backbone(config: TrainConfig, dims: dict) -> AcousticBackbone:
    return AcousticBackbone(
        vocab_size=dims["vocab_size"],
        n_mels=dims["n_mels"],
        pitch_range=(dims["pitch_min"], dims["pitch_max"]),
        energy_range=(dims["energy_min"], dims["energy_max"]),
        dim=config.dim,
        heads=config.heads,
        encoder_blocks=config.encoder_blocks,
        decoder_blocks=config.decoder_blocks,
        fft_filter_size=config.fft_filter_size,
        fft_kernel_size=config.fft_kernel_size,
        predictor_filter_size=config.predictor_filter_size,
        predictor_kernel_size=config.predictor_kernel_size,
        dropout=config.dropout,
        n_bins=config.n_bins,
    )


def build_model(config: TrainConfig, dims: dict) -> DisentangledTTS:
    style = StyleEncoder(
        n_mels=dims["n_mels"],
        dim=config.dim,
        ref_dim=config.ref_dim,
        n_timbre_tokens=config.n_timbre_tokens,
        n_emotion_tokens=config.n_emotion_tokens,
        token_heads=config.token_heads,
        align_heads=config.align_heads,
        ref_channels=tuple(config.ref_channels),
        pepa_kernel_size=config.pepa_kernel_size,
        smoothing_radius=config.smoothing_radius,
    )
    return DisentangledTTS(
        backbone=build_backbone(config, dims),
        style_encoder=style,
        n_speakers=dims["n_speakers"],
        n_emotions=dims["n_emotions"],
        classifier_hidden=config.classifier_hidden,
    )


def _fold(*parts) -> int:
    h = 0
    for p in parts:
        h = (h * 1000003 + int(p) + 1) % (2**31 - 1)
    return h


def freeze_phoneme_encoder(model: DisentangledTTS):
    """Stage-2 contract: encoder parameters never move again. Dropout inside
    the frozen stack is disabled so its outputs are stable inputs for the
    style projection."""
    model.backbone.encoder.requires_grad_(False)
    for block in model.backbone.encoder.blocks:
        block.dropout = 0.0


def stage2_batch_terms(
    model: DisentangledTTS, batch, config: TrainConfig, deterministic: bool = False
):
    """Per-batch loss components plus stacked style embeddings.

    Returns (components, timbre (B, D), emotion_global (B, D)). emotion and
    speaker cross-entropies are only computed (and only build graph) when
    use_predictors is on.
    """
    n_mels = model.backbone.n_mels
    abs_sum = batch.mel.new_zeros(())
    dur_sq = batch.mel.new_zeros(())
    pitch_sq = batch.mel.new_zeros(())
    energy_sq = batch.mel.new_zeros(())
    n_mel = n_ph = n_fr = 0
    timbres, emotions = [], []
    phoneme_lengths = batch.phoneme_lengths
    frame_lengths = batch.frame_lengths
    ref_lengths = batch.ref_lengths
    for b in range(len(batch)):
        L = int(phoneme_lengths[b])
        T = int(frame_lengths[b])
        R = int(ref_lengths[b])
        targets = {
            "durations": batch.durations[b, :L],
            "pitch": batch.pitch[b, :T],
            "energy": batch.energy[b, :T],
        }
        mel_pred, preds, bundle = model.forward_utterance(
            batch.phoneme_ids[b, :L],
            batch.ref_mel[b, :R],
            targets=targets,
            deterministic=deterministic,
        )
        abs_sum = abs_sum + (mel_pred - batch.mel[b, :T]).abs().sum()
        dur_target = torch.log1p(batch.durations[b, :L].to(mel_pred.dtype))
        dur_sq = dur_sq + (preds["log_dur"] - dur_target).pow(2).sum()
        pitch_sq = pitch_sq + (preds["pitch"] - batch.pitch[b, :T]).pow(2).sum()
        energy_sq = energy_sq + (preds["energy"] - batch.energy[b, :T]).pow(2).sum()
        n_mel += T * n_mels
        n_ph += L
        n_fr += T
        timbres.append(bundle.timbre)
        emotions.append(bundle.emotion_global)
    components = {
        "recons": abs_sum / n_mel,
        "dur": dur_sq / n_ph,
        "pitch": pitch_sq / n_fr,
        "energy": energy_sq / n_fr,
    }
    timbre = torch.stack(timbres)
    emotion_global = torch.stack(emotions)
    if config.use_predictors:
        components["emotion"] = F.cross_entropy(
            model.emotion_predictor(emotion_global), batch.emotion_ids
        )
        components["speaker"] = F.cross_entropy(
            model.speaker_predictor(timbre), batch.speaker_ids
        )
    return components, timbre, emotion_global


def alternating_train_step(
    model: DisentangledTTS,
    optimizer: torch.optim.Optimizer,
    estimator: MIEstimator,
    batch,
    config: TrainConfig,
    step: int,
) -> dict:
    """Critic ascent steps on detached embeddings, then one TTS descent step
    whose MI penalty backpropagates through the frozen critic."""
    components, timbre, emotion_global = stage2_batch_terms(model, batch, config)

    if config.use_mine or config.mine_monitor:
        for k in range(config.mine_steps_per_tts_step):
            estimator.update(emotion_global, timbre, seed=_fold(config.seed, step, k))

    mi_for_loss = None
    mi_estimate = 0.0
    frozen = []
    if config.use_mine:
        for p in estimator.parameters():
            frozen.append((p, p.requires_grad))
            p.requires_grad_(False)
        perm = make_marginal_permutation(timbre.shape[0], _fold(config.seed, step, 7919))
        mi_for_loss = estimator.dv_bound(emotion_global, timbre, timbre[perm])
        mi_estimate = float(mi_for_loss.detach())
    elif config.mine_monitor:
        mi_estimate = estimator.estimate(
            emotion_global.detach(), timbre.detach(), seed=_fold(config.seed, step, 7919)
        ).value

    try:
        total, logged = compute_stage2_loss(components, mi_for_loss, config)
        if not torch.isfinite(total):
            raise ValidationError("non-finite loss")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for p in model.parameters() if p.requires_grad], config.grad_clip
            )
        optimizer.step()
    finally:
        for p, had_grad in frozen:
            p.requires_grad_(had_grad)
    logged["mi_estimate"] = mi_estimate
    return logged


def _iter_eval_batches(items, batch_size):
    for start in range(0, len(items), batch_size):
        yield items[start : start + batch_size]


def validation_recons(model, val_items, config: TrainConfig, stage: int) -> float:
    """Teacher-forced mean absolute mel error over the validation split."""
    abs_sum = 0.0
    n = 0
    with torch.no_grad():
        for chunk in _iter_eval_batches(val_items, config.batch_size):
            batch = collate_batch(chunk, "same_utterance", seed=0)
            if stage == 1:
                out = stage1_forward(model, batch, deterministic=True)
                mel_pred = out["mel_pred"]
                for b in range(len(batch)):
                    T = int(batch.frame_lengths[b])
                    abs_sum += float((mel_pred[b, :T] - batch.mel[b, :T]).abs().sum())
                    n += T * model.n_mels
            else:
                components, _, _ = stage2_batch_terms(
                    model, batch, config, deterministic=True
                )
                total_frames = int(batch.frame_lengths.sum())
                abs_sum += float(components["recons"]) * total_frames * model.backbone.n_mels
                n += total_frames * model.backbone.n_mels
    return abs_sum / n


def run_training(config: TrainConfig, items=None, init_checkpoint=None) -> dict:
    """Execute one training stage end to end; returns paths and summary."""
    config.validate()
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir is None:
        raise ValidationError("config.out_dir is required")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.json")
    cfg_hash = config_hash(config)

    torch.manual_seed(config.seed)
    if items is None:
        if not config.data_dir:
            raise ValidationError("config.data_dir is required when no corpus is passed")
        items = load_manifest(Path(config.data_dir) / "manifest.jsonl")
    if not items:
        raise ValidationError("corpus is empty")
    dims = corpus_dimensions(items)
    train_items, val_items, _ = split_corpus(items, seed=config.seed)
    if config.stage == 1:
        train_items = neutral_subset(train_items)
        val_items = neutral_subset(val_items)
        if not train_items:
            raise ValidationError("stage 1 needs neutral-emotion items")

    estimator = None
    checkpoint_path = init_checkpoint or (config.init_checkpoint or None)
    if config.stage == 1:
        model = build_backbone(config, dims)
        if checkpoint_path:
            payload = load_checkpoint(checkpoint_path)
            verify_dimensions(payload, _checkpoint_dims(config, dims))
            load_backbone_groups(model, payload)
        encoder_ref = None
    else:
        model = build_model(config, dims)
        estimator = MIEstimator(
            config.dim, config.dim, hidden=config.mine_hidden, lr=config.mine_lr
        )
        payload = load_checkpoint(checkpoint_path)
        verify_dimensions(payload, _checkpoint_dims(config, dims))
        if payload["stage"] == 1:
            load_backbone_groups(model.backbone, payload)
        else:
            load_full_model(model, payload, estimator)
        freeze_phoneme_encoder(model)
        encoder_ref = parameter_hash(model.backbone.encoder)

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        trainable,
        lr=noam_lr(1, config.dim, config.warmup_steps, config.lr_factor),
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )

    rng = np.random.default_rng([config.seed, 31, config.stage])
    metrics_path = out_dir / "metrics.jsonl"
    initial_val = validation_recons(model, val_items, config, config.stage) if val_items else None
    summary = {"initial_val_recons": initial_val}
    with open(metrics_path, "w") as log:
        if initial_val is not None:
            log.write(json.dumps(
                {"step": 0, "stage": config.stage, "val_recons": initial_val}
            ) + "\n")
        for step in range(1, config.total_steps + 1):
            lr = noam_lr(step, config.dim, config.warmup_steps, config.lr_factor)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = rng.choice(
                len(train_items),
                size=min(config.batch_size, len(train_items)),
                replace=False,
            )
            batch = collate_batch(
                [train_items[i] for i in idx],
                config.reference_rule,
                seed=_fold(config.seed, step),
                pool=train_items,
            )
            try:
                if config.stage == 1:
                    out = stage1_forward(model, batch)
                    total, logged = compute_stage1_loss(
                        out["losses"]["recons"], out["losses"]["dur"], config.lambda_dur
                    )
                    if not torch.isfinite(total):
                        raise ValidationError("non-finite loss")
                    optimizer.zero_grad(set_to_none=True)
                    total.backward()
                    if config.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
                    optimizer.step()
                else:
                    logged = alternating_train_step(
                        model, optimizer, estimator, batch, config, step
                    )
                    logged["encoder_hash"] = parameter_hash(model.backbone.encoder)
            except ValidationError as exc:
                raise ValidationError(f"training aborted at step {step}: {exc}") from exc
            if step % config.log_every == 0 or step == config.total_steps:
                record = {"step": step, "stage": config.stage, **logged, "lr": lr}
                log.write(json.dumps(record) + "\n")
            if val_items and (step % config.val_every == 0 or step == config.total_steps):
                val = validation_recons(model, val_items, config, config.stage)
                log.write(json.dumps(
                    {"step": step, "stage": config.stage, "val_recons": val}
                ) + "\n")
                summary["final_val_recons"] = val
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_step{step}.pt", model,
                    _checkpoint_dims(config, dims), config.stage, step, cfg_hash,
                    mi_estimator=estimator,
                )

    if config.stage == 2 and parameter_hash(model.backbone.encoder) != encoder_ref:
        raise ValidationError("frozen encoder drifted during stage 2")

    final_path = out_dir / f"checkpoint_stage{config.stage}_final.pt"
    save_checkpoint(
        final_path, model, _checkpoint_dims(config, dims), config.stage,
        config.total_steps, cfg_hash, mi_estimator=estimator,
    )
    summary.update({
        "final_checkpoint": str(final_path),
        "metrics_path": str(metrics_path),
        "config_hash": cfg_hash,
        "dimensions": dims,
        "last": logged if config.total_steps else {},
    })
    return summary
