"""Tests for the style encoder: reference encoder, token layers, phoneme
projection, cross-attention alignment, windowed smoothing, fusion."""

import math

import numpy as np
import pytest
import torch

from mitts.errors import ValidationError
from mitts.style_encoder import (
    CrossAttention,
    PhonemeProjection,
    ReferenceEncoder,
    StyleEncoder,
    StyleTokenLayer,
    WindowedSelfAttention,
    pool_global_emotion,
)
from fdcheck import assert_gradients_match

TINY_CHANNELS = (2, 2, 2, 2, 2, 2)


def tiny_style_encoder(n_mels=8, dim=8, ref_dim=8):
    return StyleEncoder(
        n_mels=n_mels,
        dim=dim,
        ref_dim=ref_dim,
        n_timbre_tokens=2,
        n_emotion_tokens=3,
        token_heads=2,
        align_heads=2,
        ref_channels=TINY_CHANNELS,
    )


class TestReferenceEncoder:
    def test_stride_arithmetic(self):
        """Six stride-2 layers: J = ceil(T / 64)."""
        torch.manual_seed(0)
        enc = ReferenceEncoder(8, out_dim=8, channels=TINY_CHANNELS)
        for t, j in [(1, 1), (5, 1), (64, 1), (65, 2), (100, 2), (128, 2), (129, 3)]:
            assert enc(torch.randn(t, 8)).shape == (j, 8), f"T={t}"

    def test_zero_mel_finite(self):
        torch.manual_seed(0)
        enc = ReferenceEncoder(8, out_dim=8, channels=TINY_CHANNELS)
        out = enc(torch.zeros(16, 8))
        assert torch.isfinite(out).all()

    def test_pure(self):
        torch.manual_seed(0)
        enc = ReferenceEncoder(8, out_dim=8, channels=TINY_CHANNELS)
        mel = torch.randn(17, 8)
        assert torch.equal(enc(mel), enc(mel))

    def test_empty_and_nonfinite_rejected(self):
        enc = ReferenceEncoder(8, out_dim=8, channels=TINY_CHANNELS)
        with pytest.raises(ValidationError, match="at least one frame"):
            enc(torch.zeros(0, 8))
        bad = torch.zeros(4, 8)
        bad[1, 1] = float("inf")
        with pytest.raises(ValidationError, match="non-finite"):
            enc(bad)

    def test_gradients(self):
        torch.manual_seed(1)
        enc = ReferenceEncoder(6, out_dim=4, channels=TINY_CHANNELS).double()
        mel = torch.randn(5, 6, dtype=torch.float64)
        assert_gradients_match(enc, lambda: enc(mel).pow(2).sum())


class TestCrossAttention:
    def test_single_key_collapses_to_value(self):
        torch.manual_seed(0)
        attn = CrossAttention(4, 4, 4, num_heads=2)
        keys = torch.randn(1, 4)
        out = attn(torch.randn(3, 4), keys)
        expected = attn.w_value(keys).expand(3, 4)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_identical_keys_collapse_to_value(self):
        torch.manual_seed(0)
        attn = CrossAttention(4, 4, 4, num_heads=2)
        key = torch.randn(1, 4)
        out = attn(torch.randn(3, 4), key.expand(5, 4))
        assert torch.allclose(out, attn.w_value(key).expand(3, 4), atol=1e-6)

    def test_hand_computed_two_by_two(self):
        """Single head, 2 queries x 2 keys, parameters set by hand; weights
        and outputs recomputed with plain python floats."""
        attn = CrossAttention(2, 2, 2, num_heads=1)
        wq = [[1.0, 0.0], [0.0, 1.0]]
        wk = [[0.5, -1.0], [2.0, 0.0]]
        wv = [[1.0, 2.0], [-1.0, 0.5]]
        attn.w_query.weight.data = torch.tensor(wq)
        attn.w_key.weight.data = torch.tensor(wk)
        attn.w_value.weight.data = torch.tensor(wv)
        queries = torch.tensor([[0.3, -0.7], [1.1, 0.2]])
        keys = torch.tensor([[0.9, 0.4], [-0.2, 1.5]])
        out, weights = attn(queries, keys, return_weights=True)

        def matvec(m, v):
            return [sum(m[r][c] * v[c] for c in range(2)) for r in range(2)]

        kproj = [matvec(wk, list(k)) for k in keys.tolist()]
        vproj = [matvec(wv, list(k)) for k in keys.tolist()]
        scale = math.sqrt(2.0)
        for i, q in enumerate(queries.tolist()):
            qp = matvec(wq, q)
            logits = [
                sum(qp[d] * kproj[j][d] for d in range(2)) / scale for j in range(2)
            ]
            mx = max(logits)
            exps = [math.exp(l - mx) for l in logits]
            alpha = [e / sum(exps) for e in exps]
            expected = [
                sum(alpha[j] * vproj[j][d] for j in range(2)) for d in range(2)
            ]
            assert weights[0, i].tolist() == pytest.approx(alpha, abs=1e-6)
            assert out[i].tolist() == pytest.approx(expected, abs=1e-6)

    def test_rows_sum_to_one(self):
        torch.manual_seed(2)
        attn = CrossAttention(6, 6, 6, num_heads=3)
        _, w = attn(torch.randn(4, 6), torch.randn(7, 6), return_weights=True)
        assert torch.allclose(w.sum(dim=-1), torch.ones(3, 4), atol=1e-6)
        assert (w >= 0).all()

    def test_key_permutation_equivariance(self):
        """No positional encoding on keys/values: permuting reference frames
        leaves single-head outputs unchanged."""
        torch.manual_seed(3)
        attn = CrossAttention(4, 4, 4, num_heads=1).double()
        queries = torch.randn(3, 4, dtype=torch.float64)
        keys = torch.randn(6, 4, dtype=torch.float64)
        perm = torch.tensor([4, 0, 5, 2, 1, 3])
        assert torch.allclose(
            attn(queries, keys), attn(queries, keys[perm]), atol=1e-12
        )

    def test_bad_head_split_rejected(self):
        with pytest.raises(ValidationError, match="divisible"):
            CrossAttention(4, 4, 6, num_heads=4)

    def test_gradients(self):
        torch.manual_seed(4)
        attn = CrossAttention(4, 4, 4, num_heads=2).double()
        q = torch.randn(3, 4, dtype=torch.float64)
        k = torch.randn(5, 4, dtype=torch.float64)
        assert_gradients_match(attn, lambda: attn(q, k).pow(2).sum())


class TestStyleTokenLayer:
    def test_single_token_ignores_query(self):
        torch.manual_seed(0)
        layer = StyleTokenLayer(4, 4, n_tokens=1, num_heads=2)
        a = layer(torch.randn(2, 4))
        b = layer(torch.randn(2, 4) * 50.0)
        expected = layer.attention.w_value(torch.tanh(layer.tokens))
        assert torch.allclose(a, expected.expand(2, 4), atol=1e-6)
        assert torch.allclose(a, b, atol=1e-6)

    def test_identical_tokens_collapse(self):
        torch.manual_seed(0)
        layer = StyleTokenLayer(4, 4, n_tokens=5, num_heads=2)
        layer.tokens.data = layer.tokens.data[0:1].expand(5, 2).contiguous()
        out = layer(torch.randn(3, 4))
        expected = layer.attention.w_value(torch.tanh(layer.tokens.data[0:1]))
        assert torch.allclose(out, expected.expand(3, 4), atol=1e-6)

    def test_hand_computed_quarter_three_quarter_split(self):
        """Logits (0, ln 3) must give weights (0.25, 0.75)."""
        layer = StyleTokenLayer(1, 1, n_tokens=2, num_heads=1)
        k2 = math.log(3.0) / 2.0
        layer.tokens.data = torch.tensor([[0.0], [math.atanh(k2)]])
        layer.attention.w_query.weight.data = torch.tensor([[2.0]])
        layer.attention.w_key.weight.data = torch.tensor([[1.0]])
        layer.attention.w_value.weight.data = torch.tensor([[3.0]])
        with torch.no_grad():
            out, weights = layer(torch.tensor([[1.0]]), return_weights=True)
        assert weights.squeeze().tolist() == pytest.approx([0.25, 0.75], abs=1e-6)
        assert float(out) == pytest.approx(0.25 * 3.0 * 0.0 + 0.75 * 3.0 * k2, abs=1e-6)

    def test_row_independence(self):
        torch.manual_seed(1)
        layer = StyleTokenLayer(4, 4, n_tokens=3, num_heads=2)
        q = torch.randn(4, 4)
        base = layer(q)
        q2 = q.clone()
        q2[0] += 10.0
        moved = layer(q2)
        assert torch.equal(base[1:], moved[1:])
        assert not torch.allclose(base[0], moved[0])

    def test_no_tokens_rejected(self):
        with pytest.raises(ValidationError, match="token"):
            StyleTokenLayer(4, 4, n_tokens=0)

    def test_gradients(self):
        torch.manual_seed(5)
        layer = StyleTokenLayer(4, 4, n_tokens=3, num_heads=2).double()
        q = torch.randn(2, 4, dtype=torch.float64)
        assert_gradients_match(layer, lambda: layer(q).pow(2).sum())


class TestPhonemeProjection:
    def test_length_preserved(self):
        torch.manual_seed(0)
        proj = PhonemeProjection(8, 4)
        for n in (1, 2, 9):
            assert proj(torch.randn(n, 8)).shape == (n, 4)

    def test_gradient_stops_at_frozen_encoder(self):
        """Gradient reaches the projection but not a frozen upstream module."""
        torch.manual_seed(0)
        upstream = torch.nn.Linear(8, 8)
        upstream.requires_grad_(False)
        proj = PhonemeProjection(8, 4)
        h = upstream(torch.randn(3, 8))
        proj(h).sum().backward()
        assert all(p.grad is not None for p in proj.parameters())
        assert all(p.grad is None for p in upstream.parameters())

    def test_gradients(self):
        torch.manual_seed(6)
        proj = PhonemeProjection(8, 4).double()
        x = torch.randn(3, 8, dtype=torch.float64)
        assert_gradients_match(proj, lambda: proj(x).pow(2).sum())


class TestWindowedSmoothing:
    def test_single_row_identity(self):
        torch.manual_seed(0)
        pool = WindowedSelfAttention(4, radius=1)
        x = torch.randn(1, 4)
        assert torch.allclose(pool(x), x, atol=1e-7)

    def test_identical_rows_fixed_point(self):
        torch.manual_seed(0)
        pool = WindowedSelfAttention(4, radius=1)
        x = torch.randn(1, 4).expand(6, 4)
        assert torch.allclose(pool(x), x, atol=1e-6)

    def test_convex_hull_in_weight_space(self):
        """Weights are a probability vector supported on the local window,
        and the output is exactly the weighted sum of input rows."""
        torch.manual_seed(1)
        pool = WindowedSelfAttention(8, radius=1)
        x = torch.randn(5, 8)
        out, weights = pool(x, return_weights=True)
        assert (weights >= 0).all()
        assert torch.allclose(weights.sum(dim=1), torch.ones(5), atol=1e-6)
        for i in range(5):
            for j in range(5):
                if abs(i - j) > 1:
                    assert float(weights[i, j]) == 0.0
        assert torch.allclose(out, weights @ x, atol=1e-6)

    def test_radius_zero_is_identity_mix(self):
        torch.manual_seed(2)
        pool = WindowedSelfAttention(4, radius=0)
        x = torch.randn(4, 4)
        assert torch.allclose(pool(x), x, atol=1e-7)

    def test_negative_radius_rejected(self):
        with pytest.raises(ValidationError, match="radius"):
            WindowedSelfAttention(4, radius=-1)

    def test_gradients(self):
        torch.manual_seed(7)
        pool = WindowedSelfAttention(6, radius=1).double()
        x = torch.randn(4, 6, dtype=torch.float64)
        assert_gradients_match(pool, lambda: pool(x).pow(2).sum())


class TestGlobalPooling:
    def test_single_row(self):
        v = torch.tensor([[1.0, -2.0, 3.0]])
        assert torch.equal(pool_global_emotion(v), v[0])

    def test_opposite_rows_cancel(self):
        v = torch.tensor([1.0, -0.5, 2.0])
        out = pool_global_emotion(torch.stack([v, -v]))
        assert torch.allclose(out, torch.zeros(3), atol=1e-7)

    def test_padding_invariant(self):
        rows = torch.randn(3, 4)
        padded = torch.cat([rows, torch.zeros(2, 4)])
        mask = torch.tensor([True, True, True, False, False])
        assert torch.equal(pool_global_emotion(padded, mask), pool_global_emotion(rows))

    def test_fully_masked_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            pool_global_emotion(torch.randn(3, 4), torch.zeros(3, dtype=torch.bool))


class TestFusion:
    def test_zero_inputs_zero_output(self):
        enc = tiny_style_encoder()
        from mitts.style_encoder import StyleBundle

        bundle = StyleBundle(
            timbre=torch.zeros(8),
            emotion_seq=torch.zeros(3, 8),
            emotion_smooth=torch.zeros(3, 8),
            emotion_global=torch.zeros(8),
        )
        out = enc.fuse(torch.zeros(3, 8), bundle)
        assert torch.all(out == 0.0)

    def test_rows_normalized_before_affine(self):
        torch.manual_seed(0)
        enc = tiny_style_encoder()
        from mitts.style_encoder import StyleBundle

        bundle = StyleBundle(
            timbre=torch.randn(8),
            emotion_seq=torch.randn(3, 8),
            emotion_smooth=torch.randn(3, 8),
            emotion_global=torch.randn(8),
        )
        out = enc.fuse(torch.randn(3, 8), bundle)
        assert torch.allclose(out.mean(dim=1), torch.zeros(3), atol=1e-6)
        biased_var = out.var(dim=1, unbiased=False)
        assert torch.allclose(biased_var, torch.ones(3), atol=1e-3)

    def test_hand_computed_two_by_four(self):
        enc = StyleEncoder(n_mels=8, dim=4, ref_dim=4, token_heads=2,
                           align_heads=2, ref_channels=TINY_CHANNELS)
        from mitts.style_encoder import StyleBundle

        h = [[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 1.0, 0.0]]
        e = [[0.5, 0.5, 0.5, 0.5], [1.0, 0.0, -1.0, 0.0]]
        t = [0.1, -0.1, 0.2, -0.2]
        bundle = StyleBundle(
            timbre=torch.tensor(t),
            emotion_seq=torch.tensor(e),
            emotion_smooth=torch.tensor(e),
            emotion_global=torch.tensor(t),
        )
        out = enc.fuse(torch.tensor(h), bundle)
        for i in range(2):
            row = [h[i][d] + e[i][d] + t[d] for d in range(4)]
            mean = sum(row) / 4
            var = sum((x - mean) ** 2 for x in row) / 4
            expected = [(x - mean) / math.sqrt(var + 1e-5) for x in row]
            assert out[i].tolist() == pytest.approx(expected, abs=1e-5)

    def test_dimension_mismatch_rejected(self):
        enc = tiny_style_encoder()
        from mitts.style_encoder import StyleBundle

        bundle = StyleBundle(
            timbre=torch.zeros(8),
            emotion_seq=torch.zeros(4, 8),
            emotion_smooth=torch.zeros(4, 8),
            emotion_global=torch.zeros(8),
        )
        with pytest.raises(ValidationError, match="fuse"):
            enc.fuse(torch.zeros(3, 8), bundle)


class TestStyleEncoderEndToEnd:
    def test_bundle_shapes_track_phoneme_count(self):
        """Reference length and phoneme count are unrelated; the emotion
        sequence always follows the phoneme count."""
        torch.manual_seed(0)
        enc = tiny_style_encoder()
        rng = np.random.default_rng(0)
        for _ in range(12):
            t = int(rng.integers(1, 90))
            n = int(rng.integers(1, 14))
            bundle = enc(torch.randn(t, 8), torch.randn(n, 8))
            assert bundle.timbre.shape == (8,)
            assert bundle.emotion_seq.shape == (n, 8)
            assert bundle.emotion_smooth.shape == (n, 8)
            assert bundle.emotion_global.shape == (8,)
            for tensor in (bundle.timbre, bundle.emotion_seq, bundle.emotion_smooth):
                assert torch.isfinite(tensor).all()

    def test_global_is_mean_of_presmoothing_rows(self):
        torch.manual_seed(1)
        enc = tiny_style_encoder()
        bundle = enc(torch.randn(20, 8), torch.randn(5, 8))
        assert torch.allclose(
            bundle.emotion_global, bundle.emotion_seq.mean(dim=0), atol=1e-7
        )

    def test_deterministic(self):
        torch.manual_seed(2)
        enc = tiny_style_encoder()
        ref = torch.randn(30, 8)
        h = torch.randn(4, 8)
        a = enc(ref, h)
        b = enc(ref, h)
        assert torch.equal(a.timbre, b.timbre)
        assert torch.equal(a.emotion_smooth, b.emotion_smooth)

    def test_full_gradient_chain(self):
        torch.manual_seed(3)
        enc = StyleEncoder(
            n_mels=6, dim=4, ref_dim=4, n_timbre_tokens=2, n_emotion_tokens=2,
            token_heads=2, align_heads=2, ref_channels=TINY_CHANNELS,
        ).double()
        ref = torch.randn(7, 6, dtype=torch.float64)
        h = torch.randn(3, 4, dtype=torch.float64)

        def loss():
            bundle = enc(ref, h)
            fused = enc.fuse(h, bundle)
            return (
                fused.pow(2).sum()
                + bundle.timbre.pow(2).sum()
                + bundle.emotion_global.pow(2).sum()
            )

        assert_gradients_match(enc, loss)
