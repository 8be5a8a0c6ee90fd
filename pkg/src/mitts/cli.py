"""Command-line entry point: corpus generation, both training stages,
synthesis, evaluation, and the ablation sweep.

Every subcommand shares the same flag surface (--config, --set, --out,
--seed), writes a resolved-config snapshot into its output directory, and
reports failures with a single-line cause plus a failed/ marker.  Exit
codes: 0 success, 2 validation error, 3 runtime failure.
"""

import argparse
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from mitts.data import (
    SyntheticSpec,
    generate_synthetic_corpus,
    load_manifest,
    save_corpus,
    split_corpus,
)
from mitts.errors import ValidationError
from mitts.evaluation import evaluate_model, synthesize_mels
from mitts.model import load_checkpoint, load_full_model, verify_dimensions
from mitts.training import (
    TrainConfig,
    _checkpoint_dims,
    _coerce,
    apply_overrides,
    build_model,
    corpus_dimensions,
    load_config,
    run_training,
    save_config,
)

# SyntheticSpec fields settable from the command line; template/program
# arrays are always derived from the seed.
_GEN_FIELDS = {
    f.name: f.type
    for f in fields(SyntheticSpec)
    if f.name not in ("speaker_templates", "emotion_programs")
}

ANTI_LEAKAGE_RULE = "same_speaker_emotion_diff_text"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mitts",
        description="Emotion and timbre disentangled synthesis toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen-data": "Generate a synthetic corpus with known factor labels.",
        "train": "Run one training stage from a config.",
        "synthesize": "Predict mels for a manifest from a trained checkpoint.",
        "evaluate": "Score synthesized mels and style embeddings.",
        "ablate": "Train and compare the full model against both ablations.",
    }
    for name, help_text in specs.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="JSON config file")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field (repeatable)",
        )
        cmd.add_argument("--out", help="output directory")
        cmd.add_argument("--seed", type=int, help="override the config seed")
        if name == "evaluate":
            cmd.add_argument(
                "--synth",
                help="directory of synthesized .npy mels; omitted means "
                "synthesize in-process",
            )
    return parser


def _resolve_train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    config = apply_overrides(config, args.set)
    if args.out:
        config = replace(config, out_dir=str(args.out))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _resolve_gen_spec(args) -> SyntheticSpec:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}")
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        data[key] = value
    unknown = set(data) - set(_GEN_FIELDS)
    if unknown:
        raise ValidationError(f"unknown corpus keys: {sorted(unknown)}")
    coerced = {k: _coerce(k, v, _GEN_FIELDS[k]) for k, v in data.items()}
    if args.seed is not None:
        coerced["seed"] = args.seed
    return SyntheticSpec(**coerced)


def _require_out(value, flag_hint: str) -> Path:
    if not value:
        raise ValidationError(f"an output directory is required ({flag_hint})")
    out = Path(value)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(out_dir: Path, payload: dict):
    (out_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _load_items(config: TrainConfig):
    if not config.data_dir:
        raise ValidationError("config.data_dir must point at a corpus directory")
    return load_manifest(Path(config.data_dir) / "manifest.jsonl")


def _model_from_checkpoint(config: TrainConfig, items):
    """Rebuild the full model a checkpoint was trained with."""
    if not config.init_checkpoint:
        raise ValidationError(
            "init_checkpoint must point at a stage-2 checkpoint"
        )
    payload = load_checkpoint(config.init_checkpoint)
    if payload["stage"] != 2:
        raise ValidationError(
            "synthesis and evaluation need a stage-2 checkpoint, got stage "
            f"{payload['stage']}"
        )
    dims = corpus_dimensions(items)
    verify_dimensions(payload, _checkpoint_dims(config, dims))
    model = build_model(config, dims)
    load_full_model(model, payload)
    return model


def cmd_gen_data(args) -> str:
    spec = _resolve_gen_spec(args)
    out_dir = _require_out(args.out, "--out")
    items = generate_synthetic_corpus(spec)
    manifest = save_corpus(items, out_dir)
    snapshot = {k: getattr(spec, k) for k in _GEN_FIELDS}
    _write_snapshot(out_dir, {"command": "gen-data", **snapshot})
    return f"wrote {len(items)} utterances to {manifest}"


def cmd_train(args) -> str:
    config = _resolve_train_config(args)
    out_dir = _require_out(config.out_dir, "--out or config out_dir")
    summary = run_training(config)
    _write_snapshot(out_dir, {"command": "train", **asdict(config)})
    return (
        f"stage {config.stage} done: checkpoint {summary['final_checkpoint']}, "
        f"validation reconstruction {summary.get('final_val_recons')}"
    )


def cmd_synthesize(args) -> str:
    config = _resolve_train_config(args)
    out_dir = _require_out(args.out or config.out_dir, "--out or config out_dir")
    items = _load_items(config)
    model = _model_from_checkpoint(config, items)
    # The training default for references is reconstruction-style; synthesis
    # defaults to the anti-leakage rule unless the config says otherwise.
    rule = config.reference_rule
    if rule == TrainConfig().reference_rule:
        rule = ANTI_LEAKAGE_RULE
    mels = synthesize_mels(model, items, seed=config.seed, rule=rule)
    mel_dir = out_dir / "mels"
    mel_dir.mkdir(parents=True, exist_ok=True)
    for item_id, mel in mels.items():
        np.save(mel_dir / f"{item_id}.npy", mel)
    _write_snapshot(out_dir, {"command": "synthesize", **asdict(config)})
    return f"wrote {len(mels)} mels to {mel_dir}"


def _load_synth_dir(path, items) -> dict:
    synth_dir = Path(path)
    if not synth_dir.is_dir():
        raise ValidationError(f"synthesis directory not found: {synth_dir}")
    files = sorted(synth_dir.glob("*.npy"))
    if len(files) != len(items):
        raise ValidationError(
            f"manifest lists {len(items)} utterances but {synth_dir} contains "
            f"{len(files)} mel files"
        )
    mels = {f.stem: np.load(f) for f in files}
    missing = [it.item_id for it in items if it.item_id not in mels]
    if missing:
        raise ValidationError(
            f"synthesis directory is missing mels for {len(missing)} manifest "
            f"entries, e.g. {missing[:3]}"
        )
    return mels


def cmd_evaluate(args) -> str:
    config = _resolve_train_config(args)
    out_dir = _require_out(args.out or config.out_dir, "--out or config out_dir")
    items = _load_items(config)
    model = _model_from_checkpoint(config, items)
    synth = _load_synth_dir(args.synth, items) if args.synth else None
    report = evaluate_model(
        model,
        items,
        seed=config.seed,
        out_dir=out_dir / "plots",
        synth=synth,
    )
    report.save(out_dir / "report.json")
    _write_snapshot(out_dir, {"command": "evaluate", **asdict(config)})
    return (
        f"mcd {report.mcd_mean:.3f} dB, emotion uaa {report.emotion_uaa:.3f}, "
        f"speaker accuracy {report.speaker_accuracy:.3f}, report in {out_dir}"
    )


ABLATION_VARIANTS = (
    ("full", {"use_predictors": True, "use_mine": True, "mine_monitor": False}),
    ("no_mine", {"use_predictors": True, "use_mine": False, "mine_monitor": True}),
    ("no_predictors", {"use_predictors": False, "use_mine": True, "mine_monitor": False}),
)

TABLE_COLUMNS = ("mcd", "emotion_uaa", "speaker_accuracy", "speaker_from_emotion_uaa")


def format_ablation_table(rows: list) -> str:
    """Fixed-width text table; floats printed with repr so reruns with the
    same seed produce byte-identical output."""
    header = ["variant"] + list(TABLE_COLUMNS)
    cells = [header] + [
        [name] + [repr(metrics[c]) for c in TABLE_COLUMNS] for name, metrics in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_ablation(config: TrainConfig, items=None) -> dict:
    """Train the full model and both ablations from one shared stage-1
    checkpoint and seed, then score each on the validation split."""
    out_dir = _require_out(config.out_dir, "--out or config out_dir")
    if items is None:
        items = _load_items(config)
    stage1_ckpt = config.init_checkpoint
    if not stage1_ckpt:
        s1_config = replace(config, stage=1, out_dir=str(out_dir / "stage1"))
        stage1_ckpt = run_training(s1_config, items=items)["final_checkpoint"]

    _, val_items, _ = split_corpus(items, seed=config.seed)
    rows = []
    for name, flags in ABLATION_VARIANTS:
        variant = replace(
            config,
            stage=2,
            init_checkpoint=str(stage1_ckpt),
            out_dir=str(out_dir / name),
            **flags,
        )
        summary = run_training(variant, items=items)
        model = _model_from_checkpoint(
            replace(variant, init_checkpoint=summary["final_checkpoint"]), items
        )
        report = evaluate_model(
            model, val_items, seed=config.seed, pool=items
        )
        report.save(out_dir / name / "report.json")
        rows.append(
            (
                name,
                {
                    "mcd": report.mcd_mean,
                    "emotion_uaa": report.emotion_uaa,
                    "speaker_accuracy": report.speaker_accuracy,
                    "speaker_from_emotion_uaa": report.speaker_from_emotion_uaa,
                },
            )
        )

    table = format_ablation_table(rows)
    (out_dir / "ablation_table.txt").write_text(table)
    (out_dir / "ablation_table.json").write_text(
        json.dumps(dict(rows), indent=2, sort_keys=True) + "\n"
    )
    return {"rows": dict(rows), "table": table, "out_dir": str(out_dir)}


def cmd_ablate(args) -> str:
    config = _resolve_train_config(args)
    result = run_ablation(config)
    _write_snapshot(Path(result["out_dir"]), {"command": "ablate", **asdict(config)})
    return result["table"].rstrip("\n")


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _failure_dir(args):
    out = getattr(args, "out", None)
    if not out and getattr(args, "config", None):
        try:
            out = load_config(args.config).out_dir
        except ValidationError:
            out = None
    return Path(out) if out else None


def _report_failure(args, exc: Exception, code: int) -> int:
    cause = f"{type(exc).__name__}: {exc}".splitlines()[0]
    print(f"error: {cause}", file=sys.stderr)
    out = _failure_dir(args)
    if out is not None:
        marker = out / "failed"
        marker.mkdir(parents=True, exist_ok=True)
        (marker / "cause.txt").write_text(cause + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        message = _HANDLERS[args.command](args)
    except ValidationError as exc:
        return _report_failure(args, exc, 2)
    except Exception as exc:  # noqa: BLE001 - boundary between library and shell
        return _report_failure(args, exc, 3)
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
