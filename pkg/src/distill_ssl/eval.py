"""Frozen-feature extraction, linear probing, phase metrics, label sweeps.

Features are backbone outputs (pre projection head).  Transfer modes
combine teacher and student features by addition or concatenation, or
evaluate either alone.  The probe is multinomial logistic regression fit
by full-batch gradient descent on a per-class stratified label subset.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import Frame, resize_to
from .contrastive import (
    ContractError,
    EncoderConfig,
    EncoderParams,
    KeyQueue,
    MoCoState,
    TrainConfig,
    center_input,
    forward_backbone,
)
from .data import LabeledFrame, load_checkpoint
from .distill import encoder_from_checkpoint
from .rng import STREAM_PROBE, Rng
from .tensor import stable_softmax

MODES = ("student", "teacher", "addition", "concatenation")


class SamplingError(RuntimeError):
    """The stratified subset cannot cover every class; change seed or fraction."""


@dataclass
class FeatureSet:
    features: np.ndarray  # n x D
    labels: np.ndarray  # n ints

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.5
    steps: int = 300
    weight_decay: float = 1e-4
    label_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    jaccard: float
    per_class: list[dict]


# ---------------------------------------------------------------------------
# feature extraction


def _backbone_features(enc: EncoderParams, frames: list[Frame], batch: int = 128) -> np.ndarray:
    size = enc.cfg.input_size
    stacked = np.stack([resize_to(f, size).pixels for f in frames])
    outs = []
    with T.no_grad():
        for start in range(0, stacked.shape[0], batch):
            x = T.constant(center_input(stacked[start : start + batch]))
            outs.append(forward_backbone(enc, x).data)
    return np.concatenate(outs, axis=0)


def extract_features(
    student: EncoderParams | None,
    teacher: EncoderParams | None,
    frames: list[Frame],
    mode: str,
    labels: np.ndarray | None = None,
) -> FeatureSet:
    """Deterministic frozen features for one transfer mode.

    student/teacher may be None when the mode does not use them.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode in ("student", "addition", "concatenation") and student is None:
        raise ContractError(f"mode {mode!r} needs student parameters")
    if mode in ("teacher", "addition", "concatenation") and teacher is None:
        raise ContractError(f"mode {mode!r} needs teacher parameters")
    if mode == "student":
        feats = _backbone_features(student, frames)
    elif mode == "teacher":
        feats = _backbone_features(teacher, frames)
    else:
        f_t = _backbone_features(teacher, frames)
        f_s = _backbone_features(student, frames)
        if f_t.shape[1] != f_s.shape[1] and mode == "addition":
            raise ContractError(
                f"addition needs matching feature dims, got {f_t.shape[1]} and {f_s.shape[1]}"
            )
        feats = f_t + f_s if mode == "addition" else np.concatenate([f_t, f_s], axis=1)
    n = feats.shape[0]
    lab = labels if labels is not None else np.zeros(n, dtype=np.int64)
    return FeatureSet(feats, np.asarray(lab, dtype=np.int64))


def load_encoder(ckpt_path, enc_cfg: EncoderConfig, set_prefix: str = "query") -> EncoderParams:
    expected = {f"{set_prefix}.{n}": p for n, p in enc_cfg.param_shapes().items()}
    named, _ = load_checkpoint(ckpt_path, expected_shapes=expected)
    return encoder_from_checkpoint(named, set_prefix, enc_cfg)


# ---------------------------------------------------------------------------
# linear probe


def stratified_indices(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """ceil(fraction * n_c) indices per class c, drawn from a seeded stream."""
    rng = Rng(seed).derive(STREAM_PROBE)
    chosen = []
    for cls in np.unique(labels):
        pool = np.flatnonzero(labels == cls)
        if pool.size == 0:
            raise SamplingError(f"class {cls} has no samples")
        take = math.ceil(fraction * pool.size)
        perm = rng.derive(int(cls)).permutation(pool.size)
        chosen.append(pool[perm[:take]])
    return np.sort(np.concatenate(chosen))


@dataclass
class LinearProbe:
    weight: np.ndarray  # D x classes
    bias: np.ndarray  # classes
    loss_curve: list[float] = field(default_factory=list)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(features @ self.weight + self.bias, axis=1)


def fit_linear_probe(fs: FeatureSet, cfg: ProbeConfig, num_classes: int | None = None) -> LinearProbe:
    """Full-batch gradient descent on softmax cross-entropy + L2 penalty."""
    k = int(num_classes if num_classes is not None else fs.labels.max() + 1)
    subset = stratified_indices(fs.labels, cfg.label_fraction, cfg.seed)
    x = fs.features[subset]
    y = fs.labels[subset]
    present = np.unique(y)
    if present.size < k:
        missing = sorted(set(range(k)) - set(int(c) for c in present))
        raise SamplingError(f"classes {missing} absent from probe subset; change seed or fraction")
    n = x.shape[0]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    curve = []
    for _ in range(cfg.steps):
        p = stable_softmax(x @ w + b)
        ce = float(-np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean())
        curve.append(ce + 0.5 * cfg.weight_decay * float((w * w).sum()))
        d = (p - onehot) / n
        w -= cfg.lr * (x.T @ d + cfg.weight_decay * w)
        b -= cfg.lr * d.sum(axis=0)
    return LinearProbe(w, b, curve)


# ---------------------------------------------------------------------------
# metrics


def compute_phase_metrics(preds, labels, num_classes: int) -> Metrics:
    """Accuracy plus unweighted class means of precision/recall/Jaccard.

    A class with neither instances nor predictions is excluded from the
    means.  A class with instances but no predictions has undefined
    precision; it is scored 0 and flagged in the per-class breakdown.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ContractError(f"preds {preds.shape} vs labels {labels.shape}")
    if preds.size == 0:
        raise ContractError("empty prediction set")
    if preds.min() < 0 or preds.max() >= num_classes or labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"class values outside [0, {num_classes})")
    accuracy = float((preds == labels).mean())
    per_class = []
    precisions, recalls, jaccards = [], [], []
    for cls in range(num_classes):
        tp = int(((preds == cls) & (labels == cls)).sum())
        fp = int(((preds == cls) & (labels != cls)).sum())
        fn = int(((preds != cls) & (labels == cls)).sum())
        if tp + fp + fn == 0:
            per_class.append({"class": cls, "tp": 0, "fp": 0, "fn": 0, "excluded": True})
            continue
        precision_defined = (tp + fp) > 0
        recall_defined = (tp + fn) > 0
        precision = tp / (tp + fp) if precision_defined else 0.0
        recall = tp / (tp + fn) if recall_defined else 0.0
        jaccard = tp / (tp + fp + fn)
        per_class.append(
            {
                "class": cls,
                "tp": tp,
                "fp": fp,
                "fn": fn,
                "precision": precision,
                "recall": recall,
                "jaccard": jaccard,
                "precision_defined": precision_defined,
                "recall_defined": recall_defined,
                "excluded": False,
            }
        )
        precisions.append(precision)
        recalls.append(recall)
        jaccards.append(jaccard)
    if not precisions:
        raise ContractError("no class had instances or predictions")
    return Metrics(
        accuracy=accuracy,
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        jaccard=float(np.mean(jaccards)),
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepEncoder:
    """One evaluation arm: a named (mode, student, teacher) combination."""

    name: str
    mode: str
    student: EncoderParams | None = None
    teacher: EncoderParams | None = None


def split_dataset(
    dataset: list[LabeledFrame], holdout_fraction: float = 0.5, seed: int = 0
) -> tuple[list[LabeledFrame], list[LabeledFrame]]:
    """Stratified train/holdout split, deterministic in the seed."""
    labels = np.array([lf.phase for lf in dataset], dtype=np.int64)
    rng = Rng(seed).derive(STREAM_PROBE, 0xFACE)
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        pool = np.flatnonzero(labels == cls)
        perm = rng.derive(int(cls)).permutation(pool.size)
        cut = int(round(pool.size * (1.0 - holdout_fraction)))
        train_idx.extend(pool[perm[:cut]])
        test_idx.extend(pool[perm[cut:]])
    train_idx.sort()
    test_idx.sort()
    return [dataset[i] for i in train_idx], [dataset[i] for i in test_idx]


def label_efficiency_sweep(
    encoders: list[SweepEncoder],
    fractions: list[float],
    seeds: list[int],
    train_set: list[LabeledFrame],
    test_set: list[LabeledFrame],
    num_classes: int,
    probe: ProbeConfig = ProbeConfig(),
) -> tuple[list[dict], dict]:
    """One probe per (encoder, fraction, seed); rows plus mean/std summary."""
    if not encoders or not fractions or not seeds:
        raise ValueError("encoders, fractions and seeds must be non-empty")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
    train_frames = [lf.frame for lf in train_set]
    test_frames = [lf.frame for lf in test_set]
    train_labels = np.array([lf.phase for lf in train_set], dtype=np.int64)
    test_labels = np.array([lf.phase for lf in test_set], dtype=np.int64)
    rows = []
    summary: dict[str, dict] = {}
    for enc in encoders:
        fs_train = extract_features(enc.student, enc.teacher, train_frames, enc.mode, train_labels)
        fs_test = extract_features(enc.student, enc.teacher, test_frames, enc.mode, test_labels)
        summary[enc.name] = {}
        for fraction in fractions:
            accs = []
            for seed in seeds:
                cfg = ProbeConfig(
                    lr=probe.lr,
                    steps=probe.steps,
                    weight_decay=probe.weight_decay,
                    label_fraction=fraction,
                    seed=seed,
                )
                model = fit_linear_probe(fs_train, cfg, num_classes)
                m = compute_phase_metrics(model.predict(fs_test.features), test_labels, num_classes)
                rows.append(
                    {
                        "encoder": enc.name,
                        "mode": enc.mode,
                        "fraction": fraction,
                        "seed": seed,
                        "accuracy": m.accuracy,
                        "precision": m.precision,
                        "recall": m.recall,
                        "jaccard": m.jaccard,
                    }
                )
                accs.append(m.accuracy)
            summary[enc.name][str(fraction)] = {
                "mean_accuracy": float(np.mean(accs)),
                "std_accuracy": float(np.std(accs)),
                "seeds": len(accs),
            }
    return rows, summary


def init_transfer(ckpt_path, enc_cfg: EncoderConfig, cfg: TrainConfig) -> MoCoState:
    """A student whose query and key encoders start as the teacher's."""
    expected = {
        f"{side}.{n}": p for side in ("query", "key") for n, p in enc_cfg.param_shapes().items()
    }
    named, _ = load_checkpoint(ckpt_path, expected_shapes=expected)
    query = encoder_from_checkpoint(named, "query", enc_cfg)
    key = encoder_from_checkpoint(named, "key", enc_cfg)
    return MoCoState(query, key, KeyQueue(cfg.queue_size, enc_cfg.d), cfg)


# ---------------------------------------------------------------------------
# result emission


RESULT_FIELDS = ("encoder", "mode", "fraction", "seed", "accuracy", "precision", "recall", "jaccard")


def write_results_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in RESULT_FIELDS})


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def write_accuracy_svg(summary: dict, path, width: int = 640, height: int = 420) -> None:
    """Accuracy-vs-fraction line chart, one polyline per encoder."""
    pad = 56
    plot_w, plot_h = width - 2 * pad, height - 2 * pad
    fractions = sorted({float(f) for per_enc in summary.values() for f in per_enc})
    if not fractions:
        raise ValueError("empty summary")
    fmin, fmax = min(fractions), max(fractions)
    fspan = (fmax - fmin) or 1.0

    def sx(f: float) -> float:
        return pad + (f - fmin) / fspan * plot_w

    def sy(a: float) -> float:
        return pad + (1.0 - a) * plot_h

    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" text-anchor="middle" font-size="13">label fraction</text>',
        f'<text x="14" y="{height // 2}" font-size="13" transform="rotate(-90 14 {height // 2})" text-anchor="middle">accuracy</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(tick)
        parts.append(f'<line x1="{pad - 4}" y1="{y:.1f}" x2="{pad}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{pad - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{tick:.2f}</text>')
    for f in fractions:
        x = sx(f)
        parts.append(f'<line x1="{x:.1f}" y1="{height - pad}" x2="{x:.1f}" y2="{height - pad + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{height - pad + 18}" text-anchor="middle" font-size="11">{f:g}</text>')
    for i, (name, per_enc) in enumerate(sorted(summary.items())):
        color = palette[i % len(palette)]
        pts = sorted((float(f), stats["mean_accuracy"]) for f, stats in per_enc.items())
        coords = " ".join(f"{sx(f):.1f},{sy(a):.1f}" for f, a in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for f, a in pts:
            parts.append(f'<circle cx="{sx(f):.1f}" cy="{sy(a):.1f}" r="3" fill="{color}"/>')
        ly = pad + 16 * i
        parts.append(f'<line x1="{width - pad - 150}" y1="{ly}" x2="{width - pad - 130}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad - 124}" y="{ly + 4}" font-size="12">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
