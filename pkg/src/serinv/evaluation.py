"""Emotion metrics, linear speaker probing of embeddings, and PCA projection export."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import log_softmax
from .data import Utterance
from .model import EmbeddingRecord, ModelParameters, predict


class EvaluationError(ValueError):
    pass


@dataclass
class Metrics:
    accuracy: float
    per_class_recall: list[float | None]
    confusion: np.ndarray  # rows = truth, cols = prediction

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "per_class_recall": self.per_class_recall,
                "confusion": self.confusion.tolist(), "total": int(self.confusion.sum())}


def metrics_from_predictions(truth: Sequence[int], pred: Sequence[int], num_classes: int) -> Metrics:
    truth, pred = np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)
    if truth.size == 0:
        raise EvaluationError("cannot score an empty split")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    support = confusion.sum(axis=1)
    recall = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(num_classes)]
    return Metrics(float(np.trace(confusion) / confusion.sum()), recall, confusion)


def evaluate(params: ModelParameters, utts: Sequence[Utterance], batch_size: int = 32) -> Metrics:
    """Eval-mode emotion accuracy over ``utts``."""
    if not utts:
        raise EvaluationError("cannot evaluate an empty split")
    logits = predict(params, utts, batch_size).emotion_logits.data
    return metrics_from_predictions([u.emotion for u in utts], logits.argmax(axis=1), params.config.num_emotions)


def write_confusion_csv(metrics: Metrics, names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth"] + [f"pred_{n}" for n in names])
        for name, row in zip(names, metrics.confusion):
            w.writerow([name] + [int(v) for v in row])


# ------------------------------------------------------------------ probe
@dataclass
class ProbeResult:
    probe_accuracy: float
    chance_level: float
    num_probe_speakers: int
    leakage_ratio: float

    def to_json(self) -> dict:
        return asdict(self)


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, num_classes: int, iterations: int = 500,
                           step: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on mean cross-entropy; zero initialisation."""
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(iterations):
        p = np.exp(log_softmax(x @ w + b))
        g = (p - onehot) / n
        w -= step * (x.T @ g)
        b -= step * g.sum(axis=0)
    return w, b


def speaker_probe(records: Sequence[EmbeddingRecord], seed: int = 0, iterations: int = 500,
                  step: float = 0.1) -> ProbeResult:
    """Held-out accuracy of a linear speaker classifier trained on half of each speaker's embeddings."""
    by_spk: dict[int, list[EmbeddingRecord]] = defaultdict(list)
    for r in records:
        by_spk[r.speaker].append(r)
    speakers = sorted(by_spk)
    if len(speakers) < 2:
        raise EvaluationError(f"speaker probe needs >= 2 speakers, got {len(speakers)}")
    small = [s for s in speakers if len(by_spk[s]) < 4]
    if small:
        raise EvaluationError(f"speaker probe needs >= 4 utterances per speaker; short: {small}")
    rng = np.random.default_rng(seed)
    tr_x, tr_y, ev_x, ev_y = [], [], [], []
    for label, s in enumerate(speakers):
        recs = by_spk[s]
        perm = rng.permutation(len(recs))
        half = len(recs) // 2
        for j, i in enumerate(perm):
            (tr_x if j < half else ev_x).append(recs[i].embedding)
            (tr_y if j < half else ev_y).append(label)
    tr_x, ev_x = np.asarray(tr_x, dtype=np.float64), np.asarray(ev_x, dtype=np.float64)
    mu = tr_x.mean(axis=0)
    sd = tr_x.std(axis=0)
    sd[sd == 0] = 1.0
    w, b = fit_softmax_regression((tr_x - mu) / sd, np.asarray(tr_y), len(speakers), iterations, step)
    pred = (((ev_x - mu) / sd) @ w + b).argmax(axis=1)
    acc = float(np.mean(pred == np.asarray(ev_y)))
    chance = 1.0 / len(speakers)
    return ProbeResult(acc, chance, len(speakers), acc / chance)


# -------------------------------------------------------------------- PCA
@dataclass
class Projection:
    coordinates: np.ndarray  # N x k
    explained_variance: np.ndarray  # fraction per component, non-increasing
    components: np.ndarray  # k x D
    mean: np.ndarray


def pca_project(records: Sequence[EmbeddingRecord], k: int = 2) -> Projection:
    """Principal-component projection; each component's largest-magnitude loading is positive."""
    if len(records) < k + 1:
        raise EvaluationError(f"PCA to {k} components needs at least {k + 1} records")
    x = np.asarray([r.embedding for r in records], dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    total = vals.sum()
    if total <= 0:
        raise EvaluationError("embeddings have zero variance")
    comps = vecs[:, :k].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    return Projection(xc @ comps.T, vals[:k] / total, comps, mean)


def write_projection_csv(records: Sequence[EmbeddingRecord], proj: Projection, path,
                         emotion_names: Sequence[str] | None = None,
                         speaker_names: Sequence[str] | None = None) -> None:
    k = proj.coordinates.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "emotion", "speaker"] + [f"pc{i + 1}" for i in range(k)])
        for r, row in zip(records, proj.coordinates):
            emo = emotion_names[r.emotion] if emotion_names else r.emotion
            spk = speaker_names[r.speaker] if speaker_names else r.speaker
            w.writerow([r.id, emo, spk] + [repr(float(v)) for v in row])
