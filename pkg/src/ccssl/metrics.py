"""Classification and pseudo-label diagnostics."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError


def _check_lengths(predictions, labels):
    if len(predictions) != len(labels):
        raise ContractError(f"{len(predictions)} predictions vs {len(labels)} labels")


def top_k_accuracy(predictions, labels, k=1):
    """Fraction of rows whose label is among the k highest scores.

    Ties are broken toward the lower class index.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    _check_lengths(predictions, labels)
    if not 1 <= k <= predictions.shape[1]:
        raise ContractError(f"k={k} outside [1, {predictions.shape[1]}]")
    if len(labels) == 0:
        return 0.0
    order = np.argsort(-predictions, axis=1, kind="stable")[:, :k]
    return float((order == labels[:, None]).any(axis=1).mean())


def confusion_matrix(predictions, labels, num_classes=None):
    """Counts indexed ``[true, predicted]`` with argmax predictions."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    _check_lengths(predictions, labels)
    c = predictions.shape[1] if num_classes is None else num_classes
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (labels, predictions.argmax(axis=1)), 1)
    return counts


def write_confusion_csv(counts, path):
    np.savetxt(path, counts, fmt="%d", delimiter=",")


@dataclass
class PseudoLabelStats:
    accuracy: Optional[float]
    mask_rate: float
    ood_mask_rate: Optional[float]


def pseudo_label_accuracy(plb, true_labels, provenance):
    """Quality of the pseudo-labels that pass the confidence mask.

    ``provenance`` is a boolean array, True for out-of-distribution samples;
    it is used only to stratify. Accuracy is over masked in-distribution
    samples (None when there are none); ``ood_mask_rate`` is the share of
    OOD samples admitted by the mask (None without OOD samples).
    """
    true_labels = np.asarray(true_labels)
    ood = np.asarray(provenance, dtype=bool)
    mask = np.asarray(plb.mask, dtype=bool)
    _check_lengths(mask, true_labels)
    _check_lengths(mask, ood)
    masked_id = mask & ~ood
    acc = float((plb.q_hat[masked_id] == true_labels[masked_id]).mean()) if masked_id.any() else None
    ood_rate = float(mask[ood].mean()) if ood.any() else None
    mask_rate = float(mask.mean()) if len(mask) else 0.0
    return PseudoLabelStats(accuracy=acc, mask_rate=mask_rate, ood_mask_rate=ood_rate)
