"""Dual-path style extraction from a reference mel-spectrogram: a single
global timbre vector via a token bank, and a per-phoneme emotion sequence via
cross-attention from projected phoneme encodings into reference features.

As in the rest of the model, every forward pass takes one compact, unpadded
sequence; batching is a loop at the caller.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from mitts.errors import ValidationError


def _conv_len(n: int, kernel: int = 3, stride: int = 2, pad: int = 1) -> int:
    return (n + 2 * pad - kernel) // stride + 1


class ReferenceEncoder(nn.Module):
    """Strided 2-D conv stack over the mel grid + recurrent summarizer.

    Each conv halves both time and frequency; with 6 layers a T-frame mel
    yields J = ceil(T / 64) summary positions. Normalization is per time
    position over (channels, frequency) so outputs depend only on the frames
    actually present, and a unidirectional GRU keeps the summary causal.
    """

    def __init__(
        self,
        n_mels: int,
        out_dim: int = 128,
        channels: tuple = (32, 32, 64, 64, 128, 128),
        kernel_size: int = 3,
        stride: int = 2,
    ):
        super().__init__()
        self.stride_factor = stride ** len(channels)
        pad = kernel_size // 2
        convs, norms = [], []
        freq = n_mels
        in_ch = 1
        for ch in channels:
            convs.append(nn.Conv2d(in_ch, ch, kernel_size, stride=stride, padding=pad))
            freq = _conv_len(freq, kernel_size, stride, pad)
            norms.append(nn.LayerNorm((ch, freq)))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.gru = nn.GRU(channels[-1] * freq, out_dim, batch_first=True)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(T, M) mel -> (J, out_dim) reference features."""
        if mel.shape[0] < 1:
            raise ValidationError("reference mel must have at least one frame")
        if not torch.isfinite(mel).all():
            raise ValidationError("non-finite values in reference mel")
        x = mel.unsqueeze(0).unsqueeze(0)  # (1, 1, T, M)
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x)
            x = norm(x.permute(0, 2, 1, 3)).permute(0, 2, 1, 3)
            x = F.relu(x)
        # (1, C, J, F) -> (1, J, C*F)
        x = x.permute(0, 2, 1, 3).flatten(2)
        out, _ = self.gru(x)
        return out.squeeze(0)


class CrossAttention(nn.Module):
    """Multi-head attention of queries over an unordered key/value set.

    Keys and values carry no positional information, so permuting them
    (single-head) permutes nothing in the output.
    """

    def __init__(self, query_dim: int, key_dim: int, num_units: int, num_heads: int):
        super().__init__()
        if num_units % num_heads != 0:
            raise ValidationError(
                f"num_units {num_units} not divisible by num_heads {num_heads}"
            )
        self.num_heads = num_heads
        self.head_dim = num_units // num_heads
        self.num_units = num_units
        self.scale = key_dim**0.5
        self.w_query = nn.Linear(query_dim, num_units, bias=False)
        self.w_key = nn.Linear(key_dim, num_units, bias=False)
        self.w_value = nn.Linear(key_dim, num_units, bias=False)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor, return_weights=False):
        """queries (N, query_dim), keys (J, key_dim) -> (N, num_units)."""
        n, j = queries.shape[0], keys.shape[0]
        q = self.w_query(queries).view(n, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.w_key(keys).view(j, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.w_value(keys).view(j, self.num_heads, self.head_dim).transpose(0, 1)
        weights = torch.softmax(q @ k.transpose(-2, -1) / self.scale, dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(n, self.num_units)
        if return_weights:
            return out, weights  # weights: (H, N, J)
        return out


class StyleTokenLayer(nn.Module):
    """Learnable token bank; queries attend over tanh-squashed tokens."""

    def __init__(
        self,
        query_dim: int,
        num_units: int,
        n_tokens: int = 10,
        num_heads: int = 4,
    ):
        super().__init__()
        if n_tokens < 1:
            raise ValidationError(f"need at least one token, got {n_tokens}")
        self.tokens = nn.Parameter(torch.empty(n_tokens, num_units // num_heads))
        nn.init.normal_(self.tokens, mean=0.0, std=0.5)
        self.attention = CrossAttention(
            query_dim, num_units // num_heads, num_units, num_heads
        )

    def forward(self, queries: torch.Tensor, return_weights=False):
        """(N, query_dim) -> (N, num_units) token mixtures, rows independent."""
        return self.attention(queries, torch.tanh(self.tokens), return_weights)


class PhonemeProjection(nn.Module):
    """Two 1-D convs over the phoneme axis mapping encoder hiddens into the
    reference-feature space, with an activation between."""

    def __init__(self, dim: int, out_dim: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(dim, dim, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(dim, out_dim, kernel_size, padding=pad)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, dim) -> (N, out_dim)."""
        h = F.relu(self.conv1(x.t().unsqueeze(0)))
        return self.conv2(h).squeeze(0).t()


class WindowedSelfAttention(nn.Module):
    """Self-attentive pooling restricted to a local window: each row becomes a
    convex combination of its neighbors within the given radius."""

    def __init__(self, dim: int, radius: int = 1):
        super().__init__()
        if radius < 0:
            raise ValidationError(f"radius must be >= 0, got {radius}")
        self.radius = radius
        self.scale = dim**0.5
        self.score = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, return_weights=False):
        """(N, D) -> (N, D)."""
        n = x.shape[0]
        scores = x @ self.score(x).t() / self.scale
        idx = torch.arange(n)
        inside = (idx.unsqueeze(1) - idx.unsqueeze(0)).abs() <= self.radius
        scores = scores.masked_fill(~inside, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = weights @ x
        if return_weights:
            return out, weights
        return out


def pool_global_emotion(rows: torch.Tensor, mask: torch.Tensor | None = None):
    """Arithmetic mean over the real rows of an emotion sequence."""
    if mask is not None:
        rows = rows[mask]
    if rows.shape[0] == 0:
        raise ValidationError("cannot pool an empty emotion sequence")
    return rows.mean(dim=0)


@dataclass
class StyleBundle:
    """Per-utterance style outputs.

    timbre: (D,) global voice embedding; emotion_seq: (N, D) per-phoneme
    emotion embeddings; emotion_smooth: (N, D) neighborhood-smoothed version;
    emotion_global: (D,) mean of emotion_seq rows.
    """

    timbre: torch.Tensor
    emotion_seq: torch.Tensor
    emotion_smooth: torch.Tensor
    emotion_global: torch.Tensor


class StyleEncoder(nn.Module):
    """Reference mel -> (timbre vector, per-phoneme emotion sequence), plus
    fusion of both into the phoneme hidden sequence."""

    def __init__(
        self,
        n_mels: int,
        dim: int = 256,
        ref_dim: int = 128,
        n_timbre_tokens: int = 10,
        n_emotion_tokens: int = 10,
        token_heads: int = 4,
        align_heads: int = 4,
        ref_channels: tuple = (32, 32, 64, 64, 128, 128),
        pepa_kernel_size: int = 3,
        smoothing_radius: int = 1,
    ):
        super().__init__()
        self.reference_encoder = ReferenceEncoder(n_mels, ref_dim, ref_channels)
        self.timbre_tokens = StyleTokenLayer(ref_dim, dim, n_timbre_tokens, token_heads)
        self.pepa = PhonemeProjection(dim, ref_dim, pepa_kernel_size)
        self.emotion_align = CrossAttention(ref_dim, ref_dim, ref_dim, align_heads)
        self.emotion_tokens = StyleTokenLayer(ref_dim, dim, n_emotion_tokens, token_heads)
        self.pooling = WindowedSelfAttention(dim, smoothing_radius)
        self.fusion_norm = nn.LayerNorm(dim, eps=1e-5)

    def extract_timbre(self, ref_features: torch.Tensor) -> torch.Tensor:
        """(J, ref_dim) -> (D,); query is the mean reference feature."""
        query = ref_features.mean(dim=0, keepdim=True)
        return self.timbre_tokens(query).squeeze(0)

    def extract_emotion(self, ref_features: torch.Tensor, phoneme_h: torch.Tensor):
        """Returns (emotion_seq (N, D), emotion_smooth (N, D))."""
        queries = self.pepa(phoneme_h)
        aligned = self.emotion_align(queries, ref_features)
        emotion_seq = self.emotion_tokens(aligned)
        emotion_smooth = self.pooling(emotion_seq)
        return emotion_seq, emotion_smooth

    def forward(self, ref_mel: torch.Tensor, phoneme_h: torch.Tensor) -> StyleBundle:
        """ref_mel (T, M) and phoneme hiddens (N, D) -> StyleBundle.

        Reference length T and phoneme count N are unrelated; mismatched
        text is the intended use."""
        ref_features = self.reference_encoder(ref_mel)
        timbre = self.extract_timbre(ref_features)
        emotion_seq, emotion_smooth = self.extract_emotion(ref_features, phoneme_h)
        return StyleBundle(
            timbre=timbre,
            emotion_seq=emotion_seq,
            emotion_smooth=emotion_smooth,
            emotion_global=pool_global_emotion(emotion_seq),
        )

    def fuse(self, phoneme_h: torch.Tensor, bundle: StyleBundle) -> torch.Tensor:
        """LayerNorm(phoneme_h + emotion_smooth + broadcast timbre)."""
        if phoneme_h.shape != bundle.emotion_smooth.shape:
            raise ValidationError(
                f"cannot fuse emotion sequence {tuple(bundle.emotion_smooth.shape)} "
                f"with phoneme sequence {tuple(phoneme_h.shape)}"
            )
        if bundle.timbre.shape[-1] != phoneme_h.shape[-1]:
            raise ValidationError(
                f"timbre dim {bundle.timbre.shape[-1]} != "
                f"hidden dim {phoneme_h.shape[-1]}"
            )
        return self.fusion_norm(phoneme_h + bundle.emotion_smooth + bundle.timbre)
