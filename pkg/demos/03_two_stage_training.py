"""
Two-stage training walkthrough
==============================

Stage 1 teaches the acoustic backbone to reconstruct neutral speech from
phonemes alone.  Stage 2 freezes the phoneme encoder, attaches the style
encoder, and trains everything else with the full objective: reconstruction,
variance losses, emotion and speaker predictors, and the mutual-information
penalty that separates the two style embeddings.

The run here is deliberately tiny (narrow model, few steps) so it finishes
in well under a minute; the same code paths scale to the real settings by
changing config fields only.
"""

# %%
# A tiny configuration and corpus
# -------------------------------

import json
from dataclasses import replace
from pathlib import Path

from mitts.data import SyntheticSpec, generate_synthetic_corpus
from mitts.training import TrainConfig, run_training

items = generate_synthetic_corpus(
    SyntheticSpec(n_speakers=2, n_emotions=3, n_utterances=60, n_mels=20, seed=7,
                  min_phonemes=4, max_phonemes=6)
)
out_root = Path("demos_output/two_stage")

base = TrainConfig(
    seed=7,
    dim=16, heads=2, encoder_blocks=1, decoder_blocks=2,
    fft_filter_size=32, fft_kernel_size=3, predictor_filter_size=16,
    ref_dim=8, ref_channels=[4] * 6,
    n_timbre_tokens=3, n_emotion_tokens=3, token_heads=2, align_heads=2,
    mine_hidden=32, classifier_hidden=16,
    batch_size=8, warmup_steps=20, val_every=40,
)

# %%
# Stage 1: neutral-only pretraining of the backbone.

stage1 = replace(base, stage=1, total_steps=200, out_dir=str(out_root / "stage1"))
s1 = run_training(stage1, items=items)
print(f"stage 1 validation reconstruction: {s1['initial_val_recons']:.4f} "
      f"-> {s1['final_val_recons']:.4f}")

# %%
# Stage 2: freeze the phoneme encoder, train the style machinery.
#
# Each logged step alternates a few critic ascent updates with one descent
# step on the synthesis objective; the critic is frozen during the latter
# so the penalty gradient flows into the style encoder, not the critic.

stage2 = replace(
    base, stage=2, total_steps=60,
    init_checkpoint=s1["final_checkpoint"],
    out_dir=str(out_root / "stage2"),
)
s2 = run_training(stage2, items=items)
print(f"stage 2 validation reconstruction: {s2['initial_val_recons']:.4f} "
      f"-> {s2['final_val_recons']:.4f}")

# %%
# The metrics log is one JSON record per step.  Two invariants worth
# seeing directly: the MI penalty term is never negative, and the frozen
# encoder's parameter hash never changes.

records = [json.loads(line)
           for line in Path(s2["metrics_path"]).read_text().splitlines()]
steps = [r for r in records if "total" in r]
hashes = {r["encoder_hash"] for r in steps}
print(f"\n{len(steps)} training records; encoder hash values seen: {len(hashes)}")
print(f"mi penalty range: [{min(r['mi_penalty'] for r in steps):.4f}, "
      f"{max(r['mi_penalty'] for r in steps):.4f}]")
print("last step:", {k: round(v, 4) for k, v in steps[-1].items()
                     if isinstance(v, float)})
print(f"\nfinal checkpoint: {s2['final_checkpoint']}")
