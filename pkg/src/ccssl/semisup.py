"""Pseudo-label semi-supervised losses (FixMatch).

Losses take classifier logits rather than probabilities and go through a
log-softmax, so saturated predictions stay finite.
"""

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass
class PseudoLabelBatch:
    p: np.ndarray
    q_hat: np.ndarray
    q: np.ndarray
    mask: np.ndarray
    threshold: float

    def __len__(self):
        return len(self.q)

    @property
    def mask_rate(self):
        return float(self.mask.mean()) if len(self.mask) else 0.0


def pseudo_label(p, t):
    """Hard pseudo-labels and confidence mask from weak-view predictions.

    Everything returned is detached from the graph.
    """
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"confidence threshold must lie in [0, 1], got {t}")
    p = np.array(p.data if isinstance(p, ad.Tensor) else p, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError(f"predictions must be a matrix, got shape {p.shape}")
    q_hat = p.argmax(axis=1)
    q = p[np.arange(len(p)), q_hat]
    return PseudoLabelBatch(p=p, q_hat=q_hat, q=q, mask=q >= t, threshold=t)


def _one_hot(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def supervised_loss(logits, y):
    """Mean cross-entropy of labeled predictions; ``y`` is int or one-hot."""
    logits = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
    target = _one_hot(y, logits.shape[1])
    if target.shape != logits.shape:
        raise DimensionError(f"labels {target.shape} vs logits {logits.shape}")
    log_p = ad.row_log_softmax(logits)
    return -ad.tsum(log_p * target) * (1.0 / logits.shape[0])


def unsupervised_loss(plb, logits_strong):
    """Masked hard-label cross-entropy on strong views.

    Normalized by the full unlabeled batch size, not by the number of
    samples passing the mask.
    """
    logits_strong = logits_strong if isinstance(logits_strong, ad.Tensor) else ad.Tensor(logits_strong)
    if logits_strong.shape != plb.p.shape:
        raise DimensionError(f"strong logits {logits_strong.shape} vs weak predictions {plb.p.shape}")
    target = _one_hot(plb.q_hat, plb.p.shape[1]) * plb.mask[:, None]
    log_p = ad.row_log_softmax(logits_strong)
    return -ad.tsum(log_p * target) * (1.0 / len(plb))


class SemiSupervisedModule(Protocol):
    """What the trainer needs from a pseudo-label method.

    A MixMatch or CoMatch variant would implement the same call.
    """

    def losses(self, logits_x, y, probs_u_weak, logits_u_strong):
        """Return ``(L_x, L_u, PseudoLabelBatch)``."""
        ...


class FixMatch:
    def __init__(self, threshold=0.95):
        self.threshold = threshold

    def losses(self, logits_x, y, probs_u_weak, logits_u_strong):
        plb = pseudo_label(probs_u_weak, self.threshold)
        return supervised_loss(logits_x, y), unsupervised_loss(plb, logits_u_strong), plb
