"""Interaction-rupture detection over facial and audio feature windows.

The pipeline: resample each feature stream to 1 Hz, cut 10 s windows with
3 s overlap, balance classes with NearMiss-1 undersampling, z-normalize
from the training split, then run subject-independent stratified 5-fold
cross-validation (repeated 10 times) over recurrent classifiers, uni-modal
or fused. Model selection ranks configurations by mean precision.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .neural import (
    Network,
    NetworkSpec,
    TrainConfig,
    bilstm,
    dense,
    gru,
    lstm,
    pool_last,
    softmax_probs,
    train,
)

logger = logging.getLogger(__name__)

FACIAL_WIDTH = 35
AUDIO_WIDTH = 25
WINDOW_S = 10
OVERLAP_S = 3
MODALITY_WIDTHS = {"facial": FACIAL_WIDTH, "audio": AUDIO_WIDTH}

MODEL_TAGS = ("lstm", "gru", "bilstm")
FUSION_TAGS = ("facial", "audio", "early", "late")


@dataclass(frozen=True)
class FeatureStream:
    """One subject's raw feature sequence for a single modality."""

    modality: str
    subject_id: str
    timestamps: tuple[float, ...]
    values: np.ndarray  # (n_samples, width)

    def __post_init__(self) -> None:
        if self.modality not in MODALITY_WIDTHS:
            raise ValueError(f"unknown modality {self.modality!r}")
        width = MODALITY_WIDTHS[self.modality]
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != width:
            raise ValueError(
                f"{self.modality} stream needs shape (n, {width}), got {vals.shape}"
            )
        if len(self.timestamps) != vals.shape[0]:
            raise ValueError("timestamp count must match sample count")
        ts = np.asarray(self.timestamps)
        if len(ts) == 0:
            raise ValueError("stream must contain at least one sample")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class FeatureWindow:
    """A 10-step window at 1 Hz with its rupture label."""

    matrix: np.ndarray  # (WINDOW_S, width)
    label: int
    subject_id: str
    start_s: int

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != WINDOW_S:
            raise ValueError(f"window must have {WINDOW_S} rows, got {mat.shape}")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 (NoIR) or 1 (IR)")
        object.__setattr__(self, "matrix", mat)


def resample_1hz(stream: FeatureStream) -> FeatureStream:
    """Resample to one vector per whole second.

    Second s takes the sample with the largest timestamp <= s, so output
    covers ceil(first) .. floor(last). A stream already on the integer
    grid is a fixed point.
    """
    ts = np.asarray(stream.timestamps)
    first = math.ceil(ts[0])
    last = math.floor(ts[-1])
    if last < first:
        raise ValueError("stream spans no whole second")
    seconds = np.arange(first, last + 1)
    # Index of the nearest sample at or before each whole second.
    idx = np.searchsorted(ts, seconds, side="right") - 1
    return FeatureStream(
        modality=stream.modality,
        subject_id=stream.subject_id,
        timestamps=tuple(float(s) for s in seconds),
        values=stream.values[idx],
    )


def window_starts(length: int, window_s: int = WINDOW_S, overlap_s: int = OVERLAP_S) -> list[int]:
    """Valid window start offsets for a 1 Hz stream of the given length."""
    stride = window_s - overlap_s
    if stride <= 0:
        raise ValueError("overlap must be smaller than the window")
    if length < window_s:
        return []
    return list(range(0, length - window_s + 1, stride))


def make_windows(
    stream: FeatureStream,
    labels: Optional[Mapping[int, int]] = None,
    window_s: int = WINDOW_S,
    overlap_s: int = OVERLAP_S,
) -> list[FeatureWindow]:
    """Cut a 1 Hz stream into overlapping windows.

    `labels` maps a window's absolute start second to its rupture label;
    unlisted windows are NoIR. Streams shorter than one window yield an
    empty result (logged, not raised).
    """
    ts = np.asarray(stream.timestamps)
    if np.any(np.diff(ts) != 1.0):
        raise ValueError("make_windows expects a 1 Hz stream; resample first")
    starts = window_starts(len(stream), window_s, overlap_s)
    if not starts:
        logger.warning(
            "stream for subject %s spans %d s, shorter than one %d s window",
            stream.subject_id, len(stream), window_s,
        )
        return []
    base = int(ts[0])
    out = []
    for offset in starts:
        start_abs = base + offset
        label = int(labels.get(start_abs, 0)) if labels else 0
        out.append(
            FeatureWindow(
                matrix=stream.values[offset:offset + window_s],
                label=label,
                subject_id=stream.subject_id,
                start_s=start_abs,
            )
        )
    return out


def znormalize(
    train_windows: np.ndarray, test_windows: np.ndarray
) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Per-feature z-normalization with statistics from the training set.

    Features with zero variance in training are forced to all-zero columns
    rather than dividing by zero. Returns (train, test, (mean, std)).
    """
    train_arr = np.asarray(train_windows, dtype=float)
    if train_arr.size == 0:
        raise ValueError("training set must be non-empty")
    flat = train_arr.reshape(-1, train_arr.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    dead = std == 0.0
    if dead.any():
        logger.warning("dropping %d constant feature(s) to zero", int(dead.sum()))
    safe_std = np.where(dead, 1.0, std)

    def apply(arr: np.ndarray) -> np.ndarray:
        out = (np.asarray(arr, dtype=float) - mean) / safe_std
        out[..., dead] = 0.0
        return out

    return apply(train_arr), apply(np.asarray(test_windows, dtype=float)), (mean, std)


def nearmiss_undersample(windows: np.ndarray, labels: np.ndarray, k: int = 3) -> np.ndarray:
    """NearMiss-1 undersampling; returns kept indices in ascending order.

    Majority samples are ranked by mean Euclidean distance (over flattened
    windows) to their k nearest minority samples; the closest |minority|
    of them are kept alongside the whole minority class.
    """
    labels = np.asarray(labels, dtype=int)
    arr = np.asarray(windows, dtype=float).reshape(len(labels), -1)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("undersampling needs both classes present")
    minority_class = classes[np.argmin(counts)]
    majority_class = classes[np.argmax(counts)]
    minority_idx = np.flatnonzero(labels == minority_class)
    majority_idx = np.flatnonzero(labels == majority_class)
    if len(minority_idx) == len(majority_idx):
        return np.arange(len(labels))

    k_eff = min(k, len(minority_idx))
    minority = arr[minority_idx]
    scores = np.empty(len(majority_idx))
    for i, mi in enumerate(majority_idx):
        d = np.sqrt(((minority - arr[mi]) ** 2).sum(axis=1))
        scores[i] = np.sort(d)[:k_eff].mean()
    # Stable sort keeps the earliest-seen window on score ties.
    keep_major = majority_idx[np.argsort(scores, kind="stable")[: len(minority_idx)]]
    return np.sort(np.concatenate([minority_idx, keep_major]))


def early_fusion_windows(facial: FeatureWindow, audio: FeatureWindow) -> np.ndarray:
    """Concatenate aligned windows per time step, facial block first."""
    _check_aligned(facial, audio)
    return np.concatenate([facial.matrix, audio.matrix], axis=1)


def _check_aligned(facial: FeatureWindow, audio: FeatureWindow) -> None:
    if facial.subject_id != audio.subject_id or facial.start_s != audio.start_s:
        raise ValueError(
            f"windows misaligned: facial ({facial.subject_id}, {facial.start_s}) vs "
            f"audio ({audio.subject_id}, {audio.start_s})"
        )


@dataclass(frozen=True)
class FoldMetrics:
    """Binary metrics with IR as the positive class."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
        }


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> FoldMetrics:
    preds = np.asarray(predictions, dtype=int)
    labs = np.asarray(labels, dtype=int)
    if preds.shape != labs.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {labs.shape} labels")
    if preds.size == 0:
        raise ValueError("cannot score an empty prediction set")
    tp = int(np.sum((preds == 1) & (labs == 1)))
    fp = int(np.sum((preds == 1) & (labs == 0)))
    fn = int(np.sum((preds == 0) & (labs == 1)))
    accuracy = float(np.mean(preds == labs))
    precision_defined = (tp + fp) > 0
    recall_defined = (tp + fn) > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn) if recall_defined else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return FoldMetrics(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        precision_defined=precision_defined,
        recall_defined=recall_defined,
    )


@dataclass
class RuptureDataset:
    """Aligned facial and audio windows with one label per position."""

    facial: list[FeatureWindow]
    audio: list[FeatureWindow]

    def __post_init__(self) -> None:
        if len(self.facial) != len(self.audio):
            raise ValueError("facial and audio window lists must have equal length")
        for f, a in zip(self.facial, self.audio):
            _check_aligned(f, a)
            if f.label != a.label:
                raise ValueError(
                    f"label disagreement at ({f.subject_id}, {f.start_s}): {f.label} vs {a.label}"
                )

    def __len__(self) -> int:
        return len(self.facial)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([w.label for w in self.facial], dtype=int)

    @property
    def subjects(self) -> list[str]:
        return sorted({w.subject_id for w in self.facial})

    def facial_tensor(self) -> np.ndarray:
        return np.stack([w.matrix for w in self.facial])

    def audio_tensor(self) -> np.ndarray:
        return np.stack([w.matrix for w in self.audio])

    def fused_tensor(self) -> np.ndarray:
        return np.concatenate([self.facial_tensor(), self.audio_tensor()], axis=2)

    def class_counts(self) -> dict[int, int]:
        labels = self.labels
        return {0: int(np.sum(labels == 0)), 1: int(np.sum(labels == 1))}

    def subset(self, indices: np.ndarray) -> "RuptureDataset":
        return RuptureDataset(
            facial=[self.facial[i] for i in indices],
            audio=[self.audio[i] for i in indices],
        )

    def balanced(self, k: int = 3) -> "RuptureDataset":
        """NearMiss-balance once, on concatenated modalities.

        Selecting on the fused feature space keeps the facial/audio index
        alignment intact, since one index decision covers both views.
        """
        idx = nearmiss_undersample(self.fused_tensor(), self.labels, k=k)
        return self.subset(idx)


def build_dataset(
    facial_streams: Sequence[FeatureStream],
    audio_streams: Sequence[FeatureStream],
    labels: Mapping[tuple[str, int], int],
) -> RuptureDataset:
    """Resample, window, and align both modalities into one dataset.

    Only (subject, start) positions present in both modalities survive;
    label lookup falls back to NoIR.
    """
    facial_by_subject = {s.subject_id: s for s in facial_streams}
    audio_by_subject = {s.subject_id: s for s in audio_streams}
    facial_out: list[FeatureWindow] = []
    audio_out: list[FeatureWindow] = []
    for subject in sorted(set(facial_by_subject) & set(audio_by_subject)):
        subject_labels = {
            start: lab for (sid, start), lab in labels.items() if sid == subject
        }
        f_windows = {
            w.start_s: w
            for w in make_windows(resample_1hz(facial_by_subject[subject]), subject_labels)
        }
        a_windows = {
            w.start_s: w
            for w in make_windows(resample_1hz(audio_by_subject[subject]), subject_labels)
        }
        for start in sorted(set(f_windows) & set(a_windows)):
            facial_out.append(f_windows[start])
            audio_out.append(a_windows[start])
    return RuptureDataset(facial=facial_out, audio=audio_out)


# ---------------------------------------------------------------------------
# Window classifiers
# ---------------------------------------------------------------------------


def classifier_spec(model: str, width: int, hidden: int, seed: int) -> NetworkSpec:
    if model == "lstm":
        layers = (lstm(width, hidden), pool_last(hidden), dense(hidden, 2, "linear"))
    elif model == "gru":
        layers = (gru(width, hidden), pool_last(hidden), dense(hidden, 2, "linear"))
    elif model == "bilstm":
        layers = (
            bilstm(width, hidden),
            pool_last(2 * hidden, bidirectional=True),
            dense(2 * hidden, 2, "linear"),
        )
    else:
        raise ValueError(f"unknown model tag {model!r}; valid: {MODEL_TAGS}")
    return NetworkSpec(layers=layers, loss="softmax_cross_entropy", seed=seed)


@dataclass
class WindowClassifier:
    """A trained recurrent classifier over (n, 10, width) window tensors."""

    spec: NetworkSpec
    params: dict
    norm_stats: tuple[np.ndarray, np.ndarray]

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        mean, std = self.norm_stats
        dead = std == 0.0
        safe = np.where(dead, 1.0, std)
        arr = (np.asarray(windows, dtype=float) - mean) / safe
        arr[..., dead] = 0.0
        logits = Network(self.spec).forward(self.params, arr)
        return softmax_probs(logits)

    def predict(self, windows: np.ndarray) -> np.ndarray:
        return self.predict_proba(windows).argmax(axis=1)


def train_window_classifier(
    model: str,
    train_windows: np.ndarray,
    train_labels: np.ndarray,
    config: TrainConfig,
    seed: int,
) -> WindowClassifier:
    normed, _, stats = znormalize(train_windows, train_windows[:1])
    spec = classifier_spec(model, train_windows.shape[-1], hidden=16, seed=seed)
    params, _ = train(Network(spec), (normed, np.asarray(train_labels, dtype=int)), config)
    return WindowClassifier(spec=spec, params=params, norm_stats=stats)


def late_fusion_predict(
    facial_model: WindowClassifier,
    audio_model: WindowClassifier,
    facial_window: FeatureWindow,
    audio_window: FeatureWindow,
) -> tuple[int, float]:
    """Pick the uni-modal model with the higher max class probability.

    Equal confidences go to the audio model.
    """
    _check_aligned(facial_window, audio_window)
    f_probs = facial_model.predict_proba(facial_window.matrix[None])[0]
    a_probs = audio_model.predict_proba(audio_window.matrix[None])[0]
    f_conf = float(f_probs.max())
    a_conf = float(a_probs.max())
    if f_conf > a_conf:
        return int(f_probs.argmax()), f_conf
    return int(a_probs.argmax()), a_conf


def _late_fusion_batch(
    facial_model: WindowClassifier, audio_model: WindowClassifier,
    facial_windows: np.ndarray, audio_windows: np.ndarray,
) -> np.ndarray:
    f_probs = facial_model.predict_proba(facial_windows)
    a_probs = audio_model.predict_proba(audio_windows)
    use_facial = f_probs.max(axis=1) > a_probs.max(axis=1)
    return np.where(use_facial, f_probs.argmax(axis=1), a_probs.argmax(axis=1))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CVConfig:
    folds: int = 5
    repeats: int = 10
    hidden: int = 16
    epochs: int = 30
    learning_rate: float = 5e-3
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class CVResult:
    model: str
    fusion: str
    records: tuple[FoldMetrics, ...]
    summary: dict

    def mean_precision(self) -> float:
        return self.summary["precision"]["mean"]


def stratified_subject_folds(
    subjects: Sequence[str],
    positives: set[str],
    n_folds: int,
    rng: np.random.Generator,
) -> list[list[str]]:
    """Partition subjects into folds, spreading IR-positive subjects evenly."""
    pos = [s for s in subjects if s in positives]
    neg = [s for s in subjects if s not in positives]
    rng.shuffle(pos)
    rng.shuffle(neg)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for i, subject in enumerate(pos):
        folds[i % n_folds].append(subject)
    # Continue dealing where the positives stopped, to even out sizes.
    offset = len(pos)
    for i, subject in enumerate(neg):
        folds[(offset + i) % n_folds].append(subject)
    return folds


def summarize(records: Sequence[FoldMetrics]) -> dict:
    out = {}
    for name in ("accuracy", "precision", "recall", "f1"):
        vals = np.asarray([getattr(r, name) for r in records])
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def run_cv(dataset: RuptureDataset, model: str, fusion: str, config: CVConfig | None = None) -> CVResult:
    """Repeated stratified subject-independent cross-validation.

    folds x repeats metric records (50 by default); stratification operates
    on subjects (grouped by IR-positive presence) so no subject's windows
    ever straddle a train/test boundary.
    """
    if model not in MODEL_TAGS:
        raise ValueError(f"unknown model tag {model!r}; valid: {MODEL_TAGS}")
    if fusion not in FUSION_TAGS:
        raise ValueError(f"unknown fusion tag {fusion!r}; valid: {FUSION_TAGS}")
    config = config or CVConfig()
    subjects = dataset.subjects
    if len(subjects) < config.folds:
        raise ValueError(f"need at least {config.folds} subjects, got {len(subjects)}")

    labels = dataset.labels
    subject_col = np.asarray([w.subject_id for w in dataset.facial])
    positives = {s for s in subjects if labels[subject_col == s].any()}

    train_cfg = TrainConfig(
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        epochs=config.epochs,
        shuffle_seed=config.seed,
    )
    records: list[FoldMetrics] = []
    for repeat in range(config.repeats):
        rng = np.random.default_rng(config.seed * 1000 + repeat)
        folds = stratified_subject_folds(subjects, positives, config.folds, rng)
        for fold_i, test_subjects in enumerate(folds):
            test_mask = np.isin(subject_col, test_subjects)
            train_idx = np.flatnonzero(~test_mask)
            test_idx = np.flatnonzero(test_mask)
            if len(test_idx) == 0 or len(train_idx) == 0:
                raise ValueError(f"fold {fold_i} of repeat {repeat} is degenerate")
            assert not (set(subject_col[train_idx]) & set(subject_col[test_idx]))
            seed = config.seed * 10_000 + repeat * 100 + fold_i
            preds = _fit_predict_fold(dataset, model, fusion, train_idx, test_idx,
                                      train_cfg, config.hidden, seed)
            records.append(compute_metrics(preds, labels[test_idx]))
    return CVResult(model=model, fusion=fusion, records=tuple(records),
                    summary=summarize(records))


def _fit_predict_fold(
    dataset: RuptureDataset, model: str, fusion: str,
    train_idx: np.ndarray, test_idx: np.ndarray,
    train_cfg: TrainConfig, hidden: int, seed: int,
) -> np.ndarray:
    labels = dataset.labels

    def fit_one(tensor: np.ndarray) -> np.ndarray:
        tr, te, stats = znormalize(tensor[train_idx], tensor[test_idx])
        spec = classifier_spec(model, tensor.shape[-1], hidden=hidden, seed=seed)
        net = Network(spec)
        params, _ = train(net, (tr, labels[train_idx]), train_cfg)
        # te is already normalized with the training stats; score directly.
        return softmax_probs(net.forward(params, te))

    if fusion == "facial":
        return fit_one(dataset.facial_tensor()).argmax(axis=1)
    if fusion == "audio":
        return fit_one(dataset.audio_tensor()).argmax(axis=1)
    if fusion == "early":
        return fit_one(dataset.fused_tensor()).argmax(axis=1)
    # Late fusion: independent uni-modal models, max-confidence decision.
    f_probs = fit_one(dataset.facial_tensor())
    a_probs = fit_one(dataset.audio_tensor())
    use_facial = f_probs.max(axis=1) > a_probs.max(axis=1)
    return np.where(use_facial, f_probs.argmax(axis=1), a_probs.argmax(axis=1))


def rank_configurations(results: Sequence[CVResult]) -> list[CVResult]:
    """Order candidate configurations by mean precision, best first.

    Precision is the primary selection metric; mean F1 breaks ties.
    """
    return sorted(
        results,
        key=lambda r: (r.mean_precision(), r.summary["f1"]["mean"]),
        reverse=True,
    )


def format_report_table(results: Sequence[CVResult]) -> str:
    """Plain-text mean +/- std table over all folds, one row per config."""
    header = f"{'model':<8} {'fusion':<7} {'accuracy':>13} {'precision':>13} {'recall':>13} {'f1':>13}"
    lines = [header, "-" * len(header)]
    for r in results:
        cells = [
            f"{r.summary[m]['mean']:.2f} ± {r.summary[m]['std']:.2f}"
            for m in ("accuracy", "precision", "recall", "f1")
        ]
        lines.append(f"{r.model:<8} {r.fusion:<7} " + " ".join(f"{c:>13}" for c in cells))
    return "\n".join(lines)


def report_json(results: Sequence[CVResult]) -> dict:
    return {
        "configurations": [
            {
                "model": r.model,
                "fusion": r.fusion,
                "folds": len(r.records),
                "summary": r.summary,
                "records": [m.as_dict() for m in r.records],
            }
            for r in results
        ],
        "ranking": [
            {"model": r.model, "fusion": r.fusion, "mean_precision": r.mean_precision()}
            for r in rank_configurations(results)
        ],
    }


# ---------------------------------------------------------------------------
# Synthetic corpus with separability planted by construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticRuptureConfig:
    """Generator knobs; the class-conditional shift makes IR windows separable.

    Rupture events occupy seconds [start+3, start+7) of their window, which
    no neighbouring window overlaps (stride 7), so labels are exact.
    """

    n_subjects: int = 8
    seconds_per_subject: int = 180
    ir_window_rate: float = 0.3
    facial_shift: float = 0.6
    facial_shift_features: int = 6
    audio_shift: float = 2.5
    audio_shift_features: int = 10
    negative_subjects: int = 0  # subjects generated with no IR events at all
    seed: int = 0


def synthetic_rupture_corpus(
    config: SyntheticRuptureConfig | None = None,
) -> tuple[list[FeatureStream], list[FeatureStream], dict[tuple[str, int], int]]:
    """Build facial/audio streams with planted, exactly-labeled IR windows."""
    config = config or SyntheticRuptureConfig()
    rng = np.random.default_rng(config.seed)
    facial_streams: list[FeatureStream] = []
    audio_streams: list[FeatureStream] = []
    labels: dict[tuple[str, int], int] = {}
    for s_i in range(config.n_subjects):
        subject = f"subj{s_i:02d}"
        n = config.seconds_per_subject + 1  # seconds 0..seconds_per_subject
        ts = tuple(float(t) for t in range(n))
        facial = rng.normal(0.0, 1.0, size=(n, FACIAL_WIDTH))
        audio = rng.normal(0.0, 1.0, size=(n, AUDIO_WIDTH))
        starts = window_starts(n)
        is_negative_subject = s_i < config.negative_subjects
        for start in starts:
            is_ir = (not is_negative_subject) and rng.random() < config.ir_window_rate
            labels[(subject, start)] = int(is_ir)
            if is_ir:
                span = slice(start + 3, start + 7)
                facial[span, : config.facial_shift_features] += config.facial_shift
                audio[span, : config.audio_shift_features] += config.audio_shift
        facial_streams.append(
            FeatureStream(modality="facial", subject_id=subject, timestamps=ts, values=facial)
        )
        audio_streams.append(
            FeatureStream(modality="audio", subject_id=subject, timestamps=ts, values=audio)
        )
    return facial_streams, audio_streams, labels


# ---------------------------------------------------------------------------
# CSV interop
# ---------------------------------------------------------------------------


def save_feature_csv(streams: Sequence[FeatureStream], path: Path) -> None:
    if not streams:
        raise ValueError("nothing to save")
    width = streams[0].values.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "t_seconds"] + [f"f_{i}" for i in range(width)])
        for stream in streams:
            for t, row in zip(stream.timestamps, stream.values):
                writer.writerow([stream.subject_id, repr(float(t))] + [repr(float(v)) for v in row])


def load_feature_csv(path: Path, modality: str) -> list[FeatureStream]:
    width = MODALITY_WIDTHS[modality]
    per_subject: dict[str, list[tuple[float, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["subject_id", "t_seconds"]:
            raise ValueError(f"{path}: expected header subject_id,t_seconds,f_0..")
        if len(header) != 2 + width:
            raise ValueError(
                f"{path}: {len(header) - 2} feature columns, expected {width} for {modality}"
            )
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 2 + width:
                raise ValueError(f"{path}:{line_no}: wrong column count")
            per_subject.setdefault(row[0], []).append(
                (float(row[1]), [float(v) for v in row[2:]])
            )
    streams = []
    for subject in sorted(per_subject):
        samples = sorted(per_subject[subject], key=lambda p: p[0])
        streams.append(
            FeatureStream(
                modality=modality,
                subject_id=subject,
                timestamps=tuple(t for t, _ in samples),
                values=np.asarray([v for _, v in samples]),
            )
        )
    return streams


def save_labels_csv(labels: Mapping[tuple[str, int], int], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "t_start", "label"])
        for (subject, start), label in sorted(labels.items()):
            writer.writerow([subject, start, label])


def load_labels_csv(path: Path) -> dict[tuple[str, int], int]:
    out: dict[tuple[str, int], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "t_start", "label"]:
            raise ValueError(f"{path}: expected header subject_id,t_start,label")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{line_no}: wrong column count")
            label = int(row[2])
            if label not in (0, 1):
                raise ValueError(f"{path}:{line_no}: label must be 0 or 1, got {label}")
            out[(row[0], int(row[1]))] = label
    return out
