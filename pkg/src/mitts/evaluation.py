"""Objective evaluation: time-alignment by dynamic programming, mel-cepstral
distortion, probe-based classification accuracy on style embeddings,
clustering quality, and 2-D projections with coordinate sidecars."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.fft import dct
from scipy.spatial.distance import cdist
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score
from sklearn.model_selection import train_test_split

from mitts.data import MelSpectrogram, select_references
from mitts.errors import ValidationError

# 10 / ln(10) * sqrt(2): per-frame distortion of a cepstral difference in dB.
MCD_SCALE = (10.0 / math.log(10.0)) * math.sqrt(2.0)
DEFAULT_CEPSTRAL_ORDER = 13
PROJECTION_METHODS = ("pca", "tsne")


def _as_frames(mel) -> np.ndarray:
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ValidationError("expected a non-empty (frames x bins) array")
    return values


def dtw_align(a: np.ndarray, b: np.ndarray) -> list:
    """Minimum-cost monotone alignment between two frame sequences.

    Frames are compared by Euclidean distance; admissible steps are (1, 0),
    (0, 1) and (1, 1).  The returned path starts at (0, 0), ends at
    (A-1, B-1), and ties during backtrace prefer the diagonal step, then
    (1, 0), then (0, 1), so the path is deterministic.
    """
    a = _as_frames(a)
    b = _as_frames(b)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(
            f"frame dimensions differ: {a.shape[1]} vs {b.shape[1]}"
        )
    cost = cdist(a, b, metric="euclidean")
    A, B = cost.shape
    total = np.full((A, B), np.inf)
    total[0, 0] = cost[0, 0]
    for i in range(A):
        for j in range(B):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = total[i - 1, j - 1]
            if i > 0:
                best = min(best, total[i - 1, j])
            if j > 0:
                best = min(best, total[i, j - 1])
            total[i, j] = cost[i, j] + best
    path = [(A - 1, B - 1)]
    i, j = A - 1, B - 1
    while i > 0 or j > 0:
        if i > 0 and j > 0 and total[i - 1, j - 1] <= min(
            total[i - 1, j], total[i, j - 1]
        ):
            i, j = i - 1, j - 1
        elif i > 0 and (j == 0 or total[i - 1, j] <= total[i, j - 1]):
            i = i - 1
        else:
            j = j - 1
        path.append((i, j))
    path.reverse()
    return path


def path_cost(a: np.ndarray, b: np.ndarray, path) -> float:
    """Total Euclidean cost accumulated along an alignment path."""
    a = _as_frames(a)
    b = _as_frames(b)
    return float(sum(np.linalg.norm(a[i] - b[j]) for i, j in path))


def mel_to_cepstra(mel, order: int = DEFAULT_CEPSTRAL_ORDER) -> np.ndarray:
    """Cepstra from a log-mel grid: per-frame orthonormal type-II discrete
    cosine transform, keeping coefficients 1..order and dropping the 0th
    (which carries per-frame overall level)."""
    values = _as_frames(mel)
    n_bins = values.shape[1]
    if not 1 <= order <= n_bins - 1:
        raise ValidationError(
            f"cepstral order must be in [1, {n_bins - 1}] for {n_bins} mel bins, "
            f"got {order}"
        )
    return dct(values, type=2, norm="ortho", axis=1)[:, 1 : order + 1]


def mcd(ref, syn, order: int = DEFAULT_CEPSTRAL_ORDER) -> float:
    """Mel-cepstral distortion in dB, averaged over the aligned path.

    Cepstra exclude the 0th coefficient, so a frame-constant offset applied
    to every mel bin does not change the result.
    """
    c_ref = mel_to_cepstra(ref, order)
    c_syn = mel_to_cepstra(syn, order)
    path = dtw_align(c_ref, c_syn)
    dists = [np.linalg.norm(c_ref[i] - c_syn[j]) for i, j in path]
    return float(MCD_SCALE * np.mean(dists))


def _check_probe_inputs(embeddings, labels, min_per_class: int):
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("embeddings must be (N, D) with one label per row")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValidationError("need at least 2 classes")
    thin = [(c, n) for c, n in zip(classes, counts) if n < min_per_class]
    if thin:
        raise ValidationError(
            f"every class needs >= {min_per_class} samples; too few for "
            f"{', '.join(f'class {c} ({n})' for c, n in thin)}"
        )
    return X, y, classes


def fit_probe(embeddings, labels) -> LogisticRegression:
    """Multinomial logistic probe trained to convergence on all given rows."""
    X = np.asarray(embeddings, dtype=np.float64)
    clf = LogisticRegression(max_iter=5000)
    clf.fit(X, np.asarray(labels))
    return clf


def probe_recalls(clf, embeddings, labels) -> dict:
    """Per-class recall of a fixed trained probe on a labelled set."""
    predictions = clf.predict(np.asarray(embeddings, dtype=np.float64))
    y = np.asarray(labels)
    recalls = {}
    for cls in np.unique(y):
        in_class = y == cls
        recalls[int(cls)] = float((predictions[in_class] == cls).mean())
    return recalls


def probe_uaa(embeddings, labels, split_seed: int = 0) -> dict:
    """Unweighted average accuracy of a held-out logistic probe.

    The rows are split in half, stratified by label and deterministic in
    split_seed; the probe trains on one half and is scored on the other.
    UAA is the unweighted mean of per-class recalls, so class imbalance in
    the test half does not tilt the number.
    """
    X, y, _ = _check_probe_inputs(embeddings, labels, min_per_class=4)
    X_train, X_test, y_train, y_test = train_test_split(
        X, y, test_size=0.5, random_state=split_seed, stratify=y
    )
    clf = fit_probe(X_train, y_train)
    recalls = probe_recalls(clf, X_test, y_test)
    return {
        "uaa": float(np.mean(list(recalls.values()))),
        "per_class_recall": recalls,
    }


def cluster_silhouette(embeddings, labels) -> float:
    """Mean Euclidean silhouette over all points.

    A zero-variance embedding set (every row identical) is defined to score
    0, since cohesion and separation are then indistinguishable.
    """
    X, y, _ = _check_probe_inputs(embeddings, labels, min_per_class=2)
    if np.allclose(X, X[0], atol=0.0):
        return 0.0
    return float(silhouette_score(X, y, metric="euclidean"))


def project_embeddings_2d(
    embeddings,
    labels,
    method: str,
    seed: int,
    out_path,
    ids=None,
) -> dict:
    """Project embeddings to 2-D and write a labelled scatter plot.

    Returns {"plot_path", "coords_path"}; the sidecar is a CSV table with
    columns id, x, y, label at the plot path with a .csv suffix.  pca output
    is deterministic; tsne output is deterministic for a fixed seed.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("embeddings must be (N, D) with one label per row")
    if X.shape[0] < 3:
        raise ValidationError(f"need at least 3 points to project, got {X.shape[0]}")
    if method not in PROJECTION_METHODS:
        raise ValidationError(
            f"projection method must be one of {PROJECTION_METHODS}, got {method!r}"
        )
    if ids is None:
        ids = [str(k) for k in range(X.shape[0])]
    if method == "pca":
        coords = PCA(n_components=2, svd_solver="full").fit_transform(X)
    else:
        perplexity = min(30.0, max(1.0, (X.shape[0] - 1) / 3.0))
        coords = TSNE(
            n_components=2, random_state=seed, init="pca", perplexity=perplexity
        ).fit_transform(X)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    coords_path = out_path.with_suffix(".csv")
    with open(coords_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "x", "y", "label"])
        for k in range(X.shape[0]):
            writer.writerow(
                [ids[k], repr(float(coords[k, 0])), repr(float(coords[k, 1])), y[k]]
            )

    # Figure built without pyplot so no global matplotlib state is touched.
    from matplotlib.figure import Figure

    fig = Figure(figsize=(6.0, 5.0))
    ax = fig.subplots()
    for cls in np.unique(y):
        member = y == cls
        ax.scatter(coords[member, 0], coords[member, 1], s=18, label=str(cls))
    ax.legend(title="label", fontsize=8)
    ax.set_xlabel(f"{method} dim 1")
    ax.set_ylabel(f"{method} dim 2")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    return {"plot_path": str(out_path), "coords_path": str(coords_path)}


def extract_style_embeddings(model, items, seed: int = 0, pool=None) -> dict:
    """Timbre and pooled emotion embeddings for every utterance.

    References follow the anti-leakage rule: each reference shares the
    item's speaker and emotion but never its text, so the probes cannot key
    on lexical content.  pool widens the reference candidates beyond the
    items themselves (useful when embedding a small subset).
    """
    if not items:
        raise ValidationError("no utterances to embed")
    refs = select_references(items, "same_speaker_emotion_diff_text", seed, pool=pool)
    timbres, emotions = [], []
    with torch.no_grad():
        for item, ref in zip(items, refs):
            ids = torch.from_numpy(item.phoneme_ids)
            ref_mel = torch.from_numpy(ref.mel.values).to(torch.float32)
            bundle = model.extract_styles(ids, ref_mel)
            timbres.append(bundle.timbre.numpy())
            emotions.append(bundle.emotion_global.numpy())
    return {
        "timbre": np.stack(timbres),
        "emotion": np.stack(emotions),
        "speaker_ids": np.array([it.speaker_id for it in items]),
        "emotion_ids": np.array([it.emotion_id for it in items]),
        "item_ids": [it.item_id for it in items],
        "reference_ids": [r.item_id for r in refs],
    }


@dataclass
class EvalReport:
    """Flat bundle of evaluation numbers plus paths of emitted artifacts."""

    mcd_mean: float
    mcd_per_utterance: dict
    emotion_uaa: float
    emotion_per_class_recall: dict
    speaker_accuracy: float
    speaker_from_emotion_uaa: float
    silhouette_emotion: float
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mcd_mean": self.mcd_mean,
            "mcd_per_utterance": dict(self.mcd_per_utterance),
            "emotion_uaa": self.emotion_uaa,
            "emotion_per_class_recall": dict(self.emotion_per_class_recall),
            "speaker_accuracy": self.speaker_accuracy,
            "speaker_from_emotion_uaa": self.speaker_from_emotion_uaa,
            "silhouette_emotion": self.silhouette_emotion,
            "artifacts": dict(self.artifacts),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def mcd_report(pairs, order: int = DEFAULT_CEPSTRAL_ORDER) -> dict:
    """Per-utterance distortion for (item_id, reference mel, synthesized mel)
    triples, plus the mean."""
    if not pairs:
        raise ValidationError("no mel pairs to score")
    per_utt = {item_id: mcd(ref, syn, order) for item_id, ref, syn in pairs}
    return {"mcd_mean": float(np.mean(list(per_utt.values()))), "per_utterance": per_utt}


def synthesize_mels(
    model,
    items,
    seed: int = 0,
    pool=None,
    rule: str = "same_speaker_emotion_diff_text",
) -> dict:
    """Predict a mel per utterance; references default to the anti-leakage
    rule (same speaker and emotion, different text)."""
    if not items:
        raise ValidationError("no utterances to synthesize")
    refs = select_references(items, rule, seed, pool=pool)
    out = {}
    with torch.no_grad():
        for item, ref in zip(items, refs):
            ids = torch.from_numpy(item.phoneme_ids)
            ref_mel = torch.from_numpy(ref.mel.values).to(torch.float32)
            out[item.item_id] = model.synthesize(ids, ref_mel).numpy().astype(np.float64)
    return out


def evaluate_model(
    model,
    items,
    seed: int = 0,
    order: int = DEFAULT_CEPSTRAL_ORDER,
    out_dir=None,
    split_seed: int = 0,
    pool=None,
    synth: dict | None = None,
) -> EvalReport:
    """Full objective evaluation of a trained model on a held-out set.

    Computes distortion against the target mels, probe accuracies on both
    style embeddings (including the speaker-from-emotion leakage probe), the
    emotion-cluster silhouette, and, when out_dir is given, 2-D projection
    plots of the emotion embeddings.  pool widens reference selection beyond
    the evaluated items (typically the full corpus when items is one split);
    synth supplies precomputed mels keyed by item id instead of synthesizing
    in-process.
    """
    if synth is None:
        synth = synthesize_mels(model, items, seed, pool=pool)
    else:
        missing = [it.item_id for it in items if it.item_id not in synth]
        if missing:
            raise ValidationError(
                f"synthesized mels cover {len(synth)} utterances but the "
                f"manifest lists {len(items)}; missing e.g. {missing[:3]}"
            )
    pairs = [(it.item_id, it.mel, synth[it.item_id]) for it in items]
    distortion = mcd_report(pairs, order)

    styles = extract_style_embeddings(model, items, seed, pool=pool)
    emotion_probe = probe_uaa(styles["emotion"], styles["emotion_ids"], split_seed)
    speaker_probe = probe_uaa(styles["timbre"], styles["speaker_ids"], split_seed)
    leakage_probe = probe_uaa(styles["emotion"], styles["speaker_ids"], split_seed)
    silhouette = cluster_silhouette(styles["emotion"], styles["emotion_ids"])

    artifacts = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for method in PROJECTION_METHODS:
            result = project_embeddings_2d(
                styles["emotion"],
                styles["emotion_ids"],
                method,
                seed,
                out_dir / f"emotion_{method}.png",
                ids=styles["item_ids"],
            )
            artifacts[f"emotion_{method}"] = result["plot_path"]
            artifacts[f"emotion_{method}_coords"] = result["coords_path"]

    return EvalReport(
        mcd_mean=distortion["mcd_mean"],
        mcd_per_utterance=distortion["per_utterance"],
        emotion_uaa=emotion_probe["uaa"],
        emotion_per_class_recall=emotion_probe["per_class_recall"],
        speaker_accuracy=speaker_probe["uaa"],
        speaker_from_emotion_uaa=leakage_probe["uaa"],
        silhouette_emotion=silhouette,
        artifacts=artifacts,
    )
