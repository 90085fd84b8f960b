"""
Retrieval losses: batch-all triplet losses with Adamine weighting, the
IncMargin / AdaMargin schedules, the semantic (class) triplet loss and the
weighted total.

Distances are cosine distances d(x, y) = 1 - x.y on unit-norm embeddings,
so a triplet's hinge is [S(a, n) - S(a, p) + margin]+ with S the dot product.
"""
from dataclasses import dataclass

import numpy as np

from modules.errors import ConfigError, InputError
from modules.tensor import (
    Tensor, embedding_lookup, matmul, mul, no_grad, relu, reshape, sum_along_axis, transpose,
)

MARGIN_KINDS = ("fixed", "inc", "ada")


@dataclass(frozen=True)
class MarginPolicy:
    kind: str = "inc"
    alpha: float = 0.3
    alpha_inc_start: float = 0.05
    alpha_inc_step: float = 0.005
    clamp_min: float = 0.05
    clamp_max: float = 0.3

    def __post_init__(self):
        if self.kind not in MARGIN_KINDS:
            raise ConfigError(f"margin kind must be one of {MARGIN_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.clamp_min <= self.clamp_max:
            raise ConfigError(f"margin clamp bounds must satisfy 0 <= min <= max, got [{self.clamp_min}, {self.clamp_max}]")


@dataclass
class TripletBatchStats:
    delta_r: int = 0
    delta_v: int = 0
    triplets_r: int = 0
    triplets_v: int = 0


def triplet(d_ap, d_an, margin):
    return max(0.0, d_ap + margin - d_an)


def _clamp(value, policy):
    return min(max(value, policy.clamp_min), policy.clamp_max)


def margin_at(policy, epoch, delta=0):
    """
    Margin for an epoch. For "ada", `delta` is the active-triplet count of
    the batch measured at margin alpha.
    """
    if policy.kind == "fixed":
        return policy.alpha
    if policy.kind == "inc":
        # rounding removes the float drift of start + epoch * step
        return _clamp(round(policy.alpha_inc_start + epoch * policy.alpha_inc_step, 12), policy)
    return _clamp(policy.alpha / max(delta, 1), policy)


# ==============================
#  Batch-all triplets
# ==============================
def _batch_all(similarity, positives, negatives, margin, adamine):
    """
    Sum of hinges over every valid (anchor a, positive p, negative n).

    similarity[a, j] compares anchor a with candidate j of the other
    modality. Returns (loss, active count, candidate count).
    """
    batch, candidates = similarity.shape
    valid = positives[:, :, None] & negatives[:, None, :]
    hinge = relu(reshape(similarity, (batch, 1, candidates)) - reshape(similarity, (batch, candidates, 1)) + margin)
    total = sum_along_axis(mul(hinge, Tensor(valid.astype(np.float64))))
    active = int(((hinge.data > 0) & valid).sum())
    count = int(valid.sum())
    return total / max(active if adamine else count, 1), active, count


def _margins(margin):
    if isinstance(margin, (tuple, list)):
        return float(margin[0]), float(margin[1])
    return float(margin), float(margin)


def itc_loss(E_r, E_v, margin, adamine=True):
    """
    Bidirectional batch-all triplet loss on aligned rows.

    Each recipe anchor takes its paired image as positive and every other
    image as negative, and symmetrically for image anchors. `margin` is one
    value or a (recipe-anchor, image-anchor) pair. With adamine, each
    direction's sum is divided by its active-triplet count, otherwise by its
    triplet count.
    """
    batch = E_r.shape[0]
    if batch < 2:
        raise InputError(f"itc_loss needs a batch of at least 2, got {batch}")
    margin_r, margin_v = _margins(margin)
    similarity = matmul(E_r, transpose(E_v))
    same = np.eye(batch, dtype=bool)
    loss_r, delta_r, count_r = _batch_all(similarity, same, ~same, margin_r, adamine)
    loss_v, delta_v, count_v = _batch_all(transpose(similarity), same, ~same, margin_v, adamine)
    return loss_r + loss_v, TripletBatchStats(delta_r, delta_v, count_r, count_v)


def active_triplets(E_r, E_v, margin):
    """(delta_r, delta_v) at a given margin, without recording a graph."""
    with no_grad():
        _, stats = itc_loss(Tensor(E_r), Tensor(E_v), margin)
    return stats.delta_r, stats.delta_v


def semantic_loss(E_r, E_v, classes, margin, adamine=True):
    """
    Triplet loss where positives share the anchor's class.

    Only rows with a class label take part. For anchor i the positives are
    the other-modality rows j != i of the same class and the negatives the
    rows of a different class; anchors without a positive add nothing.
    """
    labeled = [i for i, c in enumerate(classes) if c is not None]
    if len(labeled) < 2:
        return Tensor(0.0)
    index = np.array(labeled)
    labels = np.array([classes[i] for i in labeled])
    same_class = labels[:, None] == labels[None, :]
    positives = same_class & ~np.eye(len(labeled), dtype=bool)
    negatives = ~same_class

    similarity = matmul(embedding_lookup(E_r, index), transpose(embedding_lookup(E_v, index)))
    loss_r, _, _ = _batch_all(similarity, positives, negatives, margin, adamine)
    loss_v, _, _ = _batch_all(transpose(similarity), positives, negatives, margin, adamine)
    return loss_r + loss_v


def total_loss(itc, sem, itm, lambda_sem=0.1, lambda_itm=1.0):
    return itc + sem * lambda_sem + itm * lambda_itm
