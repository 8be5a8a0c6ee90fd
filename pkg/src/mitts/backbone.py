"""Non-autoregressive acoustic model: phoneme encoder, variance adaptor,
length regulator, mel decoder.

Every forward pass here operates on one compact, unpadded sequence (L, D).
Batches are handled by looping at the caller and re-padding outputs; padded
positions therefore never enter any kernel, which is what makes outputs
bitwise invariant to how much trailing padding a batch happens to carry.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from mitts.data import NEUTRAL_EMOTION_ID, Batch
from mitts.errors import ValidationError


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sin/cos position table, (length, dim). dim must be even."""
    if dim % 2 != 0:
        raise ValidationError(f"positional encoding needs an even dim, got {dim}")
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)
    return table.to(dtype)


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise ValidationError(f"non-finite values in {where}")


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention on a single (L, D) sequence."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        L = x.shape[0]
        q = self.query(x).view(L, self.heads, self.head_dim).transpose(0, 1)
        k = self.key(x).view(L, self.heads, self.head_dim).transpose(0, 1)
        v = self.value(x).view(L, self.heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5  # (H, L, L)
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(0, 1).reshape(L, self.dim)
        out = self.out(mixed)
        if return_weights:
            return out, weights
        return out


class FFTBlock(nn.Module):
    """Self-attention plus convolutional feed-forward, pre-norm residuals.

    Normalization feeds each sublayer; the residual stream itself stays
    unnormalized so additive conditioning entering the stack keeps a direct,
    unattenuated path to the output (post-norm stacks can grow sublayer
    outputs until their norms scale every upstream gradient toward zero).
    """

    def __init__(
        self,
        dim: int,
        heads: int = 2,
        filter_size: int = 256,
        kernel_size: int = 9,
        dropout: float = 0.1,
    ):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValidationError(f"kernel_size must be odd, got {kernel_size}")
        self.attention = SelfAttention(dim, heads)
        self.attention_norm = nn.LayerNorm(dim)
        self.conv1 = nn.Conv1d(dim, filter_size, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_size, dim, kernel_size, padding=kernel_size // 2)
        self.ff_norm = nn.LayerNorm(dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, deterministic: bool = False) -> torch.Tensor:
        """(L, D) -> (L, D)."""
        _check_finite(x, "fft_block input")
        attn = self.attention(self.attention_norm(x))
        attn = F.dropout(attn, self.dropout, training=not deterministic)
        x = x + attn
        ff = self.conv1(self.ff_norm(x).t().unsqueeze(0))
        ff = self.conv2(F.relu(ff)).squeeze(0).t()
        ff = F.dropout(ff, self.dropout, training=not deterministic)
        return x + ff


class PhonemeEncoder(nn.Module):
    """Embedding + sinusoidal positions + a stack of FFT blocks.

    A final layer norm bounds the output scale of the pre-norm stack, so
    hidden states stay commensurate with the style embeddings added to them
    later.
    """

    def __init__(
        self,
        vocab_size: int,
        dim: int = 256,
        heads: int = 2,
        n_blocks: int = 4,
        filter_size: int = 256,
        kernel_size: int = 9,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.embedding = nn.Embedding(vocab_size, dim)
        self.blocks = nn.ModuleList(
            FFTBlock(dim, heads, filter_size, kernel_size, dropout)
            for _ in range(n_blocks)
        )
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor, deterministic: bool = False) -> torch.Tensor:
        """(L,) int ids -> (L, D) hidden sequence."""
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValidationError(
                f"phoneme id out of range [0, {self.vocab_size}): "
                f"{int(ids.min())}..{int(ids.max())}"
            )
        x = self.embedding(ids)
        x = x + sinusoidal_encoding(x.shape[0], self.dim, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, deterministic=deterministic)
        return self.out_norm(x)


def length_regulate(h: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Repeat row i of h durations[i] times; zero-duration rows are dropped.

    h: (N, D), durations: (N,) ints >= 0. Returns (sum(durations), D).
    """
    durations = torch.as_tensor(durations, dtype=torch.long)
    if durations.shape[0] != h.shape[0]:
        raise ValidationError(
            f"duration count {durations.shape[0]} != row count {h.shape[0]}"
        )
    if durations.numel() and durations.min() < 0:
        raise ValidationError(f"negative duration {int(durations.min())}")
    return torch.repeat_interleave(h, durations, dim=0)


class VariancePredictor(nn.Module):
    """Two conv layers with filter_size channels, each followed by ReLU,
    layer norm, and dropout, then a per-position scalar projection."""

    def __init__(
        self,
        dim: int,
        filter_size: int = 256,
        kernel_size: int = 3,
        dropout: float = 0.1,
    ):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(dim, filter_size, kernel_size, padding=pad)
        self.norm1 = nn.LayerNorm(filter_size)
        self.conv2 = nn.Conv1d(filter_size, filter_size, kernel_size, padding=pad)
        self.norm2 = nn.LayerNorm(filter_size)
        self.proj = nn.Linear(filter_size, 1)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, deterministic: bool = False) -> torch.Tensor:
        """(L, D) -> (L,) scalar predictions."""
        if x.shape[0] == 0:  # conv kernels cannot span an empty sequence
            return x.new_zeros(0)
        h = F.relu(self.conv1(x.t().unsqueeze(0))).squeeze(0).t()
        h = self.norm1(h)
        h = F.dropout(h, self.dropout, training=not deterministic)
        h = F.relu(self.conv2(h.t().unsqueeze(0))).squeeze(0).t()
        h = self.norm2(h)
        h = F.dropout(h, self.dropout, training=not deterministic)
        return self.proj(h).squeeze(-1)


class ScalarBucketEmbedding(nn.Module):
    """Embedding of a real-valued signal via fixed quantization buckets
    spanning a [lo, hi] range taken from corpus statistics."""

    def __init__(self, lo: float, hi: float, dim: int, n_bins: int = 256):
        super().__init__()
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValidationError(f"bad bucket range [{lo}, {hi}]")
        self.n_bins = n_bins
        # n_bins - 1 interior edges; bucketize maps values to 0..n_bins-1.
        edges = torch.linspace(lo, hi, n_bins + 1)[1:-1]
        self.register_buffer("edges", edges)
        self.table = nn.Embedding(n_bins, dim)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """(L,) real values -> (L, dim)."""
        buckets = torch.bucketize(values.detach(), self.edges)
        return self.table(buckets)


class VarianceAdaptor(nn.Module):
    """Duration/pitch/energy prediction plus length regulation.

    The duration predictor works in log(1 + d) space. Training passes use
    target durations for regulation and target pitch/energy for the bucket
    embeddings; deterministic (inference) passes regulate by
    round(exp(log_dur)) clamped at 0 and embed the predictions themselves.
    """

    def __init__(
        self,
        dim: int,
        pitch_range: tuple[float, float],
        energy_range: tuple[float, float],
        filter_size: int = 256,
        kernel_size: int = 3,
        dropout: float = 0.1,
        n_bins: int = 256,
    ):
        super().__init__()
        self.duration_predictor = VariancePredictor(dim, filter_size, kernel_size, dropout)
        self.pitch_predictor = VariancePredictor(dim, filter_size, kernel_size, dropout)
        self.energy_predictor = VariancePredictor(dim, filter_size, kernel_size, dropout)
        self.pitch_embedding = ScalarBucketEmbedding(*pitch_range, dim, n_bins)
        self.energy_embedding = ScalarBucketEmbedding(*energy_range, dim, n_bins)

    def forward(
        self,
        h: torch.Tensor,
        targets: dict | None = None,
        deterministic: bool = False,
    ):
        """(L, D) -> ((T, D) frame sequence, predictions dict).

        predictions: log_dur (L,), pitch (T,), energy (T,).
        """
        if targets is None and not deterministic:
            raise ValidationError(
                "training-mode variance adaptor call requires "
                "duration/pitch/energy targets"
            )
        log_dur = self.duration_predictor(h, deterministic=deterministic)
        if targets is not None:
            durations = torch.as_tensor(targets["durations"], dtype=torch.long)
        else:
            durations = torch.clamp(torch.round(torch.exp(log_dur)), min=0).long()
        frames = length_regulate(h, durations)
        pitch = self.pitch_predictor(frames, deterministic=deterministic)
        energy = self.energy_predictor(frames, deterministic=deterministic)
        pitch_source = (
            torch.as_tensor(targets["pitch"], dtype=h.dtype)
            if targets is not None
            else pitch
        )
        energy_source = (
            torch.as_tensor(targets["energy"], dtype=h.dtype)
            if targets is not None
            else energy
        )
        frames = frames + self.pitch_embedding(pitch_source)
        frames = frames + self.energy_embedding(energy_source)
        return frames, {"log_dur": log_dur, "pitch": pitch, "energy": energy}


class MelDecoder(nn.Module):
    """Sinusoidal positions + FFT blocks + layer norm + linear projection
    to mel bins."""

    def __init__(
        self,
        dim: int = 256,
        n_mels: int = 80,
        heads: int = 2,
        n_blocks: int = 6,
        filter_size: int = 256,
        kernel_size: int = 9,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(
            FFTBlock(dim, heads, filter_size, kernel_size, dropout)
            for _ in range(n_blocks)
        )
        self.out_norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, n_mels)

    def forward(self, frames: torch.Tensor, deterministic: bool = False) -> torch.Tensor:
        """(T, D) -> (T, M)."""
        if frames.shape[0] < 1:
            raise ValidationError("decoder received an empty frame sequence")
        x = frames + sinusoidal_encoding(frames.shape[0], self.dim, dtype=frames.dtype)
        for i, block in enumerate(self.blocks):
            x = block(x, deterministic=deterministic)
            if not torch.isfinite(x).all():
                raise ValidationError(f"non-finite activations after decoder block {i}")
        return self.proj(self.out_norm(x))


class AcousticBackbone(nn.Module):
    """Phoneme encoder + variance adaptor + mel decoder."""

    def __init__(
        self,
        vocab_size: int,
        n_mels: int,
        pitch_range: tuple[float, float],
        energy_range: tuple[float, float],
        dim: int = 256,
        heads: int = 2,
        encoder_blocks: int = 4,
        decoder_blocks: int = 6,
        fft_filter_size: int = 256,
        fft_kernel_size: int = 9,
        predictor_filter_size: int = 256,
        predictor_kernel_size: int = 3,
        dropout: float = 0.1,
        n_bins: int = 256,
    ):
        super().__init__()
        self.dim = dim
        self.n_mels = n_mels
        self.encoder = PhonemeEncoder(
            vocab_size, dim, heads, encoder_blocks, fft_filter_size,
            fft_kernel_size, dropout,
        )
        self.variance_adaptor = VarianceAdaptor(
            dim, pitch_range, energy_range, predictor_filter_size,
            predictor_kernel_size, dropout, n_bins,
        )
        self.decoder = MelDecoder(
            dim, n_mels, heads, decoder_blocks, fft_filter_size,
            fft_kernel_size, dropout,
        )

    def forward_utterance(
        self,
        ids: torch.Tensor,
        targets: dict | None = None,
        deterministic: bool = False,
    ):
        """Full pass for one utterance; returns (mel (T, M), predictions)."""
        h = self.encoder(ids, deterministic=deterministic)
        frames, predictions = self.variance_adaptor(
            h, targets=targets, deterministic=deterministic
        )
        mel = self.decoder(frames, deterministic=deterministic)
        return mel, predictions


def masked_map(fn, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Apply fn to each compact row slice of a padded batch; re-pad with zeros.

    values: (B, L, ...) with trailing padding, mask: (B, L) bool. fn maps a
    compact (l, ...) tensor to (l', ...). Returns (padded outputs, new mask);
    padded cells are exact zeros. Because fn never sees padded positions,
    results are bitwise independent of the padded width.
    """
    lengths = mask.sum(dim=1)
    outs = [fn(values[b, : lengths[b]]) for b in range(values.shape[0])]
    longest = max(o.shape[0] for o in outs)
    out = torch.zeros(
        (len(outs), longest) + outs[0].shape[1:], dtype=outs[0].dtype
    )
    out_mask = torch.zeros(len(outs), longest, dtype=torch.bool)
    for b, o in enumerate(outs):
        out[b, : o.shape[0]] = o
        out_mask[b, : o.shape[0]] = True
    return out, out_mask


def stage1_forward(
    backbone: AcousticBackbone, batch: Batch, deterministic: bool = False
) -> dict:
    """Teacher-forced reconstruction pass over a neutral-emotion batch.

    Returns padded mel/log-duration predictions and scalar losses:
    recons = masked mean absolute error on mel, dur = masked mean squared
    error on log(1 + duration).
    """
    for b in range(len(batch)):
        if int(batch.emotion_ids[b]) != NEUTRAL_EMOTION_ID:
            raise ValidationError(
                f"stage-1 batch must be neutral-only; item "
                f"{batch.item_ids[b]!r} has emotion {int(batch.emotion_ids[b])}"
            )
    phoneme_lengths = batch.phoneme_lengths
    frame_lengths = batch.frame_lengths
    mel_preds, log_durs = [], []
    abs_sum = batch.mel.new_zeros(())
    sq_sum = batch.mel.new_zeros(())
    n_mel_values = 0
    n_phonemes = 0
    for b in range(len(batch)):
        L = int(phoneme_lengths[b])
        T = int(frame_lengths[b])
        ids = batch.phoneme_ids[b, :L]
        durations = batch.durations[b, :L]
        targets = {
            "durations": durations,
            "pitch": batch.pitch[b, :T],
            "energy": batch.energy[b, :T],
        }
        mel_pred, predictions = backbone.forward_utterance(
            ids, targets=targets, deterministic=deterministic
        )
        mel_preds.append(mel_pred)
        log_durs.append(predictions["log_dur"])
        abs_sum = abs_sum + (mel_pred - batch.mel[b, :T]).abs().sum()
        dur_target = torch.log1p(durations.to(mel_pred.dtype))
        sq_sum = sq_sum + (predictions["log_dur"] - dur_target).pow(2).sum()
        n_mel_values += T * backbone.n_mels
        n_phonemes += L
    mel_out = batch.mel.new_zeros(len(batch), int(frame_lengths.max()), backbone.n_mels)
    dur_out = batch.mel.new_zeros(len(batch), int(phoneme_lengths.max()))
    for b in range(len(batch)):
        mel_out[b, : mel_preds[b].shape[0]] = mel_preds[b]
        dur_out[b, : log_durs[b].shape[0]] = log_durs[b]
    return {
        "mel_pred": mel_out,
        "log_dur_pred": dur_out,
        "losses": {
            "recons": abs_sum / n_mel_values,
            "dur": sq_sum / n_phonemes,
        },
    }
