"""End-to-end tests for the command-line interface: the full pipeline from
corpus generation through evaluation, exit codes, failure markers, and the
determinism of the ablation table."""

import json
from pathlib import Path

import numpy as np
import pytest

from mitts.cli import format_ablation_table, main

TINY_MODEL = [
    "--set", "dim=16",
    "--set", "heads=2",
    "--set", "encoder_blocks=1",
    "--set", "decoder_blocks=1",
    "--set", "fft_filter_size=16",
    "--set", "fft_kernel_size=3",
    "--set", "predictor_filter_size=16",
    "--set", "ref_dim=8",
    "--set", "ref_channels=[4, 4, 4, 4, 4, 4]",
    "--set", "n_timbre_tokens=3",
    "--set", "n_emotion_tokens=3",
    "--set", "token_heads=2",
    "--set", "align_heads=2",
    "--set", "mine_hidden=16",
    "--set", "classifier_hidden=16",
    "--set", "batch_size=4",
    "--set", "warmup_steps=10",
    "--set", "val_every=50",
]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main([
        "gen-data", "--out", str(out), "--seed", "3",
        "--set", "n_speakers=2", "--set", "n_emotions=2",
        "--set", "n_utterances=160", "--set", "n_mels=16",
        "--set", "min_phonemes=3", "--set", "max_phonemes=5",
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    s1 = root / "stage1"
    code = main([
        "train", "--out", str(s1), "--seed", "5",
        "--set", f"data_dir={corpus_dir}", "--set", "stage=1",
        "--set", "total_steps=40", *TINY_MODEL,
    ])
    assert code == 0
    s1_ckpt = s1 / "checkpoint_stage1_final.pt"
    assert s1_ckpt.exists()
    s2 = root / "stage2"
    code = main([
        "train", "--out", str(s2), "--seed", "5",
        "--set", f"data_dir={corpus_dir}", "--set", "stage=2",
        "--set", f"init_checkpoint={s1_ckpt}",
        "--set", "total_steps=20", *TINY_MODEL,
    ])
    assert code == 0
    s2_ckpt = s2 / "checkpoint_stage2_final.pt"
    assert s2_ckpt.exists()
    return {"stage1": s1_ckpt, "stage2": s2_ckpt}


class TestGenData:
    def test_writes_manifest_and_snapshot(self, corpus_dir):
        manifest = corpus_dir / "manifest.jsonl"
        assert manifest.exists()
        assert len(manifest.read_text().splitlines()) == 160
        snapshot = json.loads((corpus_dir / "resolved_config.json").read_text())
        assert snapshot["n_utterances"] == 160
        assert snapshot["seed"] == 3

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        code = main(["gen-data", "--out", str(tmp_path / "x"), "--set", "bogus=1"])
        assert code == 2
        assert "bogus" in capsys.readouterr().err

    def test_missing_out_exits_2(self):
        assert main(["gen-data"]) == 2


class TestTrain:
    def test_checkpoints_and_snapshot(self, trained):
        s2_dir = trained["stage2"].parent
        snapshot = json.loads((s2_dir / "resolved_config.json").read_text())
        assert snapshot["command"] == "train"
        assert snapshot["stage"] == 2
        assert snapshot["seed"] == 5
        assert (s2_dir / "metrics.jsonl").exists()

    def test_invalid_override_exits_2(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path), "--set", "stage=9"])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and "\n" not in err.rstrip("\n")

    def test_failure_marker_written(self, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--out", str(out), "--set", "stage=2"])
        assert code == 2
        cause = (out / "failed" / "cause.txt").read_text()
        assert "init_checkpoint" in cause


class TestSynthesize:
    def test_writes_mels(self, corpus_dir, trained, tmp_path):
        out = tmp_path / "synth"
        code = main([
            "synthesize", "--out", str(out), "--seed", "5",
            "--set", f"data_dir={corpus_dir}",
            "--set", f"init_checkpoint={trained['stage2']}", *TINY_MODEL,
        ])
        assert code == 0
        mels = sorted((out / "mels").glob("*.npy"))
        assert len(mels) == 160
        grid = np.load(mels[0])
        assert grid.ndim == 2 and grid.shape[1] == 16

    def test_stage1_checkpoint_rejected(self, corpus_dir, trained, tmp_path):
        code = main([
            "synthesize", "--out", str(tmp_path / "x"),
            "--set", f"data_dir={corpus_dir}",
            "--set", f"init_checkpoint={trained['stage1']}", *TINY_MODEL,
        ])
        assert code == 2


class TestEvaluate:
    def test_in_process_report(self, corpus_dir, trained, tmp_path):
        out = tmp_path / "eval"
        code = main([
            "evaluate", "--out", str(out), "--seed", "5",
            "--set", f"data_dir={corpus_dir}",
            "--set", f"init_checkpoint={trained['stage2']}", *TINY_MODEL,
        ])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mcd_mean"] > 0.0
        assert 0.0 <= report["emotion_uaa"] <= 1.0
        assert Path(report["artifacts"]["emotion_pca"]).exists()

    def test_count_mismatch_exits_2(self, corpus_dir, trained, tmp_path, capsys):
        synth_dir = tmp_path / "partial"
        synth_dir.mkdir()
        np.save(synth_dir / "only_one.npy", np.zeros((4, 16)))
        code = main([
            "evaluate", "--out", str(tmp_path / "eval"),
            "--synth", str(synth_dir),
            "--set", f"data_dir={corpus_dir}",
            "--set", f"init_checkpoint={trained['stage2']}", *TINY_MODEL,
        ])
        assert code == 2
        err = capsys.readouterr().err
        assert "160" in err and "1" in err


class TestAblate:
    def ablate_args(self, corpus_dir, trained, out):
        return [
            "ablate", "--out", str(out), "--seed", "5",
            "--set", f"data_dir={corpus_dir}",
            "--set", f"init_checkpoint={trained['stage1']}",
            "--set", "total_steps=10", *TINY_MODEL,
        ]

    def test_table_and_reports(self, corpus_dir, trained, tmp_path):
        out = tmp_path / "ablate"
        assert main(self.ablate_args(corpus_dir, trained, out)) == 0
        table = (out / "ablation_table.txt").read_text()
        for name in ("full", "no_mine", "no_predictors"):
            assert name in table
            assert (out / name / "report.json").exists()
            assert (out / name / "metrics.jsonl").exists()
        rows = json.loads((out / "ablation_table.json").read_text())
        assert set(rows) == {"full", "no_mine", "no_predictors"}
        for metrics in rows.values():
            assert set(metrics) == {
                "mcd", "emotion_uaa", "speaker_accuracy",
                "speaker_from_emotion_uaa",
            }

    def test_same_seed_identical_tables(self, corpus_dir, trained, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(self.ablate_args(corpus_dir, trained, out_a)) == 0
        assert main(self.ablate_args(corpus_dir, trained, out_b)) == 0
        assert (out_a / "ablation_table.txt").read_bytes() == (
            out_b / "ablation_table.txt"
        ).read_bytes()
        assert (out_a / "ablation_table.json").read_bytes() == (
            out_b / "ablation_table.json"
        ).read_bytes()
        for name in ("full", "no_mine", "no_predictors"):
            assert (out_a / name / "metrics.jsonl").read_bytes() == (
                out_b / name / "metrics.jsonl"
            ).read_bytes()


class TestTableFormat:
    def test_header_and_alignment(self):
        rows = [
            ("full", {"mcd": 1.25, "emotion_uaa": 0.9,
                      "speaker_accuracy": 1.0, "speaker_from_emotion_uaa": 0.5}),
        ]
        table = format_ablation_table(rows)
        lines = table.splitlines()
        assert lines[0].split()[0] == "variant"
        assert set(lines[1]) <= {"-", " "}
        assert "1.25" in lines[2]

    def test_unknown_subcommand_exits_2(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()
