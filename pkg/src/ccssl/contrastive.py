"""Class-aware contrastive loss over two strong views per unlabeled image.

Views are stacked so rows ``2k`` and ``2k + 1`` of ``z`` are the two strong
views of image ``k``. Each view inherits the pseudo-label and confidence of
its image's weak view. Pairs of views from different images become positives
when they share a pseudo-label and both confidences exceed ``t_push``; those
positives are then down-weighted by the product of the two confidences.

Gradients flow only through ``z``; every target matrix is a constant.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError

NORM_TOL = 1e-9


@dataclass
class ContrastiveBatch:
    z: ad.Tensor
    image_of: np.ndarray
    q_hat_view: np.ndarray
    q_view: np.ndarray
    tau: float = 0.2
    t_push: float = 0.9

    def __post_init__(self):
        if not isinstance(self.z, ad.Tensor):
            self.z = ad.Tensor(self.z)
        self.image_of = np.asarray(self.image_of, dtype=np.intp)
        self.q_hat_view = np.asarray(self.q_hat_view, dtype=np.intp)
        self.q_view = np.asarray(self.q_view, dtype=np.float64)
        _check_tau(self.tau)
        if not 0.0 <= self.t_push <= 1.0:
            raise ConfigError(f"t_push must lie in [0, 1], got {self.t_push}")
        n_views = self.z.shape[0]
        for name in ("image_of", "q_hat_view", "q_view"):
            if getattr(self, name).shape != (n_views,):
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, expected ({n_views},)")

    @classmethod
    def from_images(cls, z, q_hat, q, tau=0.2, t_push=0.9):
        """Build from per-image pseudo-labels; ``z`` rows interleave the views."""
        q_hat = np.asarray(q_hat)
        q = np.asarray(q, dtype=np.float64)
        n = len(q_hat)
        if z.shape[0] != 2 * n:
            raise DimensionError(f"expected {2 * n} view rows for {n} images, got {z.shape[0]}")
        image_of = np.repeat(np.arange(n), 2)
        return cls(z, image_of, q_hat[image_of], q[image_of], tau=tau, t_push=t_push)

    @property
    def n_views(self):
        return self.z.shape[0]

    def check_normalized(self, tol=NORM_TOL):
        norms = np.linalg.norm(self.z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ContractError(f"embedding rows not unit-norm (max dev {np.max(np.abs(norms - 1)):.3g})")


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def _same_image(image_of):
    image_of = np.asarray(image_of)
    return image_of[:, None] == image_of[None, :]


def affinity_matrix(z, tau):
    """Pairwise ``exp(z_i . z_j / tau)`` over unit-norm rows."""
    _check_tau(tau)
    z = z.data if isinstance(z, ad.Tensor) else np.asarray(z, dtype=np.float64)
    return np.exp(z @ z.T / tau)


def contrastive_matrix(image_of):
    """1 on the diagonal and between views of the same image, 0 elsewhere."""
    return _same_image(image_of).astype(np.float64)


def class_links(cb):
    """Cross-image positives: same pseudo-class, both confidences > t_push."""
    confident = cb.q_view > cb.t_push
    same_class = cb.q_hat_view[:, None] == cb.q_hat_view[None, :]
    return same_class & confident[:, None] & confident[None, :] & ~_same_image(cb.image_of)


def class_aware_matrix(cb):
    # same-image pairs stay positive regardless of confidence, so
    # low-confidence views fall back to plain instance contrast
    return (_same_image(cb.image_of) | class_links(cb)).astype(np.float64)


def reweight_target(w_clacon, cb, weight_siblings=False):
    """Scale cross-image positives by ``q_i * q_j``.

    Same-image pairs keep weight 1 unless ``weight_siblings`` is set, in
    which case every off-diagonal entry is scaled (the literal product form).
    """
    w = np.array(w_clacon, dtype=np.float64)
    factor = np.outer(cb.q_view, cb.q_view)
    scaled = ~np.eye(len(w), dtype=bool)
    if not weight_siblings:
        scaled &= ~_same_image(cb.image_of)
    w[scaled] *= factor[scaled]
    return w


def positive_counts(cb, class_aware=True):
    """|P(i)|: cross-image positives of each view."""
    if not class_aware:
        return np.zeros(cb.n_views, dtype=np.intp)
    return class_links(cb).sum(axis=1)


def target_matrix(cb, class_aware=True, reweight=True, weight_siblings=False):
    w = class_aware_matrix(cb) if class_aware else contrastive_matrix(cb.image_of)
    if reweight:
        w = reweight_target(w, cb, weight_siblings=weight_siblings)
    return w


def _log_softmax_excluding_self(z, tau):
    logits = ad.matmul(z, ad.transpose(z)) * (1.0 / tau)
    return ad.row_log_softmax(logits, exclude=np.eye(z.shape[0], dtype=bool))


def _weighted_nll(log_prob, weights, reduction):
    loss = -ad.tsum(log_prob * weights)
    if reduction == "mean":
        return loss * (1.0 / log_prob.shape[0])
    if reduction != "sum":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return loss


def infonce_loss(z, tau, image_of, reduction="sum"):
    """Instance contrast: each view's sibling is its only positive."""
    _check_tau(tau)
    z = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    siblings = _same_image(image_of) & ~np.eye(z.shape[0], dtype=bool)
    if not np.array_equal(siblings.sum(axis=1), np.ones(z.shape[0])):
        raise ContractError("every view needs exactly one sibling view")
    return _weighted_nll(_log_softmax_excluding_self(z, tau), siblings.astype(np.float64), reduction)


def loss_weights(cb, class_aware=True, reweight=True, weight_siblings=False):
    """Per-entry coefficients multiplying the log-softmax matrix.

    Row ``i`` is the target row with the diagonal removed, scaled by
    ``1 / (1 + |P(i)|)``.
    """
    w = target_matrix(cb, class_aware, reweight, weight_siblings)
    np.fill_diagonal(w, 0.0)
    coef = 1.0 / (1.0 + positive_counts(cb, class_aware))
    return coef[:, None] * w


def class_contrastive_loss(cb, reduction="sum", class_aware=True, reweight=True,
                           weight_siblings=False):
    """Class-aware contrastive loss L_c.

    With ``reduction="sum"`` this is the plain sum over all 2N anchors;
    ``"mean"`` divides by 2N. ``class_aware=False`` drops the cross-image
    positives (reducing to InfoNCE when ``reweight`` leaves siblings alone).
    """
    _check_tau(cb.tau)
    weights = loss_weights(cb, class_aware, reweight, weight_siblings)
    return _weighted_nll(_log_softmax_excluding_self(cb.z, cb.tau), weights, reduction)


def debug_record(cb, step=None, class_aware=True, reweight=True, weight_siblings=False):
    """JSON-serializable snapshot of every matrix feeding one L_c evaluation."""
    w_con = contrastive_matrix(cb.image_of)
    w_clacon = class_aware_matrix(cb) if class_aware else w_con
    w_target = reweight_target(w_clacon, cb, weight_siblings) if reweight else w_clacon
    with ad.no_grad():
        log_prob = _log_softmax_excluding_self(ad.Tensor(cb.z.data), cb.tau).data
    weights = loss_weights(cb, class_aware, reweight, weight_siblings)
    per_anchor = -(weights * log_prob).sum(axis=1)
    return {
        "step": step,
        "tau": cb.tau,
        "t_push": cb.t_push,
        "S": affinity_matrix(cb.z, cb.tau).tolist(),
        "W_con": w_con.tolist(),
        "W_clacon": w_clacon.tolist(),
        "W_target": w_target.tolist(),
        "P_size": positive_counts(cb, class_aware).tolist(),
        "L_c_terms": per_anchor.tolist(),
        "L_c": float(per_anchor.sum()),
    }
