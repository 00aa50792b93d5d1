"""Evaluation machinery for subclass discovery.

Predicted subclasses come from the argmax over the flattened c*s logits
(ties to the lowest flat index).  Accuracy against hidden subclass labels is
measured after the 1-to-1 assignment between predicted and true subclasses
that maximizes accuracy.  All entropies are reported in bits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class MetricReport:
    """One evaluation pass.  subclass_accuracy and effective_bits are None
    when no compatible hidden subclass labels were available."""

    binary_error_rate: float
    subclass_accuracy: float | None
    effective_bits: float | None
    mean_prediction_entropy_bits: float
    utilization_entropy_bits: float
    dead_subclass_count: int
    clamp_events: int

    FIELDS = ("binary_error_rate", "subclass_accuracy", "effective_bits",
              "mean_prediction_entropy_bits", "utilization_entropy_bits",
              "dead_subclass_count", "clamp_events")

    def to_json(self):
        return json.dumps({name: getattr(self, name) for name in self.FIELDS})

    def to_csv_row(self):
        return ",".join("" if getattr(self, name) is None else repr(getattr(self, name))
                        for name in self.FIELDS)


def predicted_subclass(logits):
    """Flat subclass index of the largest logit per example."""
    z = np.asarray(logits)
    return z.reshape(z.shape[0], -1).argmax(axis=1)


def confusion(logits, true_subclass):
    """[c*s, c*s] count matrix, rows = predicted subclass, cols = true."""
    z = np.asarray(logits)
    n, c, s = z.shape
    labels = np.asarray(true_subclass)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c * s):
        bad = int(np.argmax((labels < 0) | (labels >= c * s)))
        raise ValueError(
            f"subclass label {labels[bad]} at index {bad} outside [0, {c * s})")
    counts = np.zeros((c * s, c * s), dtype=np.int64)
    np.add.at(counts, (predicted_subclass(z), labels), 1)
    return counts


def best_permutation_accuracy(counts):
    """Accuracy under the 1-to-1 predicted-to-true assignment that maximizes
    it, found by optimal linear assignment on the count matrix.

    Returns (perm, accuracy) where perm[predicted] = assigned true subclass.
    """
    counts = np.asarray(counts)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    if counts.shape[0] > 64:
        raise ValueError(f"assignment limited to 64 subclasses, got {counts.shape[0]}")
    rows, cols = linear_sum_assignment(counts, maximize=True)
    perm = np.empty(counts.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(counts[rows, cols].sum() / total)


def effective_label_bits(p_correct, s):
    """Label bits per example from a subclass relabeler with accuracy
    p_correct, modeled as a q-ary symmetric channel over s symbols: errors
    are assumed spread equally over the s-1 remaining subclasses.

    Continuous extension 0*log2(0) = 0; chance accuracy 1/s gives exactly 0.
    """
    if not 0.0 <= p_correct <= 1.0:
        raise ValueError(f"p_correct must be in [0, 1], got {p_correct}")
    if s < 2:
        raise ValueError(f"channel needs s >= 2 symbols, got {s}")
    p = float(p_correct)
    if p == 1.0 / s:
        return 0.0
    bits = np.log2(s)
    if p > 0.0:
        bits += p * np.log2(p)
    if p < 1.0:
        bits += (1.0 - p) * np.log2((1.0 - p) / (s - 1))
    return float(bits)


def _entropy_bits(probs):
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return -terms.sum(axis=-1)


def mean_prediction_entropy(p):
    """Mean entropy (bits) of the full c*s probability block per example."""
    p = np.asarray(p)
    return float(_entropy_bits(p.reshape(p.shape[0], -1)).mean())


def utilization_entropy(logits):
    """Entropy (bits) of the histogram of argmax subclass over the batch."""
    z = np.asarray(logits)
    n, c, s = z.shape
    hist = np.bincount(predicted_subclass(z), minlength=c * s)
    return float(_entropy_bits(hist / n))


def dead_subclass_count(logits):
    """Subclasses never selected by argmax over the evaluation set."""
    z = np.asarray(logits)
    _, c, s = z.shape
    return int(c * s - np.unique(predicted_subclass(z)).size)


def knn_probe(query, reference, k):
    """Exact k nearest reference rows to the query representation by
    Euclidean distance, ties broken by index order.

    Returns (indices, distances).  The caller chooses which representation
    (penultimate activations or flattened logits) both sides live in.
    """
    reference = np.asarray(reference)
    query = np.asarray(query).reshape(-1)
    if reference.ndim != 2 or reference.shape[1] != query.size:
        raise ValueError(
            f"reference {reference.shape} incompatible with query of size {query.size}")
    if not 1 <= k <= reference.shape[0]:
        raise ValueError(f"k={k} outside [1, {reference.shape[0]}]")
    dist = np.sqrt(((reference - query) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    return order, dist[order]
