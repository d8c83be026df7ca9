"""K=1 sparse probing: pick the latent and threshold that best separate a
binary task by F1 on a train split, then score F1 and W1 on an eval split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError
from .model import CrosscoderModel, encode_chunked


def f1(preds, labels) -> float:
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if preds.shape != labels.shape:
        raise DataError(f"preds and labels differ in length ({preds.shape} vs {labels.shape})")
    if preds.size == 0:
        raise DataError("f1 needs at least one prediction")
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _check_labels(labels, what):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise DataError(f"{what}: labels must be a nonempty 1-D array")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError(f"{what}: labels must be binary")
    if labels.min() == labels.max():
        raise DataError(f"{what}: both classes must be present")
    return labels.astype(bool)


def best_threshold(values, labels):
    """Best ``(threshold, f1)`` for ``predict positive iff value > threshold``.

    Candidates are ``-inf`` (everything positive), ``0`` and every observed
    value; ties keep the lowest threshold.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = np.sort(values[labels])
    neg = np.sort(values[~labels])
    cands = np.unique(np.concatenate([[-np.inf, 0.0], values]))
    tp = pos.size - np.searchsorted(pos, cands, side="right")
    fp = neg.size - np.searchsorted(neg, cands, side="right")
    fn = pos.size - tp
    denom = 2 * tp + fp + fn
    scores = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    k = int(np.argmax(scores))  # first maximum = lowest threshold
    return float(cands[k]), float(scores[k])


def select_best_latent(acts, labels):
    """``(latent, threshold, train_f1)`` over the columns of ``acts``; ties go to the lower latent."""
    acts = np.asarray(acts)
    labels = _check_labels(labels, "train split")
    if acts.ndim != 2 or acts.shape[0] != labels.size:
        raise DataError(f"activations {acts.shape} do not match {labels.size} labels")
    best = (-1, 0.0, -1.0)
    for i in range(acts.shape[1]):
        thr, score = best_threshold(acts[:, i], labels)
        if score > best[2]:
            best = (i, thr, score)
    return best


def wasserstein1(a, b) -> float:
    """Empirical 1-D W1 as the integral of ``|F_a(x) - F_b(x)|`` over x."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise DataError("wasserstein1 needs two nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.sort(np.concatenate([a, b]))
    widths = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def aggregate_sequences(acts, labels, sequence_ids):
    """Max-over-token per sequence; a sequence's tokens must share one label."""
    acts = np.asarray(acts)
    labels = np.asarray(labels)
    seq = np.asarray(sequence_ids)
    uniq, inv = np.unique(seq, return_inverse=True)
    out = np.full((uniq.size, acts.shape[1]), -np.inf)
    np.maximum.at(out, inv, acts)
    lab_hi = np.zeros(uniq.size, dtype=labels.dtype)
    lab_lo = np.ones(uniq.size, dtype=labels.dtype)
    np.maximum.at(lab_hi, inv, labels)
    np.minimum.at(lab_lo, inv, labels)
    if np.any(lab_hi != lab_lo):
        raise DataError("a sequence carries mixed labels")
    return out, lab_hi


@dataclass(frozen=True)
class ProbeTask:
    name: str
    train: object  # ActivationBatch with labels
    eval: object
    train_sequences: Optional[np.ndarray] = None
    eval_sequences: Optional[np.ndarray] = None

    def __post_init__(self):
        for split, what in ((self.train, "train split"), (self.eval, "eval split")):
            if getattr(split, "labels", None) is None:
                raise DataError(f"probe task {self.name!r}: {what} has no labels")
            _check_labels(split.labels, f"probe task {self.name!r} {what}")


@dataclass(frozen=True)
class ProbeResult:
    task: str
    latent: int
    threshold: float
    f1: float
    w1: float
    train_f1: float = float("nan")

    def row(self) -> dict:
        return {
            "task": self.task,
            "latent": self.latent,
            "threshold": self.threshold,
            "f1": self.f1,
            "w1": self.w1,
            "table": format_cell(self.f1, self.w1),
        }


def format_cell(f1_value, w1_value) -> str:
    """``F1 (%) / W1 (x1e-3)``."""
    return f"{100 * f1_value:.1f} / {1e3 * w1_value:.2f}"


def _split_acts(model, split, sequences, mode, chunk_size):
    acts = encode_chunked(model, split, mode, chunk_size).values
    labels = np.asarray(split.labels)
    if sequences is not None:
        acts, labels = aggregate_sequences(acts, labels, sequences)
    return acts, labels


def run_probe(model: CrosscoderModel, task: ProbeTask, mode="batch_topk", chunk_size=None) -> ProbeResult:
    tr_acts, tr_labels = _split_acts(model, task.train, task.train_sequences, mode, chunk_size)
    latent, thr, train_score = select_best_latent(tr_acts, tr_labels)
    ev_acts, ev_labels = _split_acts(model, task.eval, task.eval_sequences, mode, chunk_size)
    ev_labels = _check_labels(ev_labels, "eval split")
    col = ev_acts[:, latent]
    score = f1(col > thr, ev_labels)
    w1 = wasserstein1(col[ev_labels], col[~ev_labels])
    return ProbeResult(task.name, latent, thr, score, w1, train_score)
