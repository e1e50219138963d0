"""
Objective functions: pairwise registration energy, template-free shape loss,
class-aware supervised contrastive loss, total CoRLD loss and the boosted
classifier's cross-entropy. Parameter regularization is applied by the
optimizer as decoupled weight decay, never inside these functions.
"""

from typing import Optional, Sequence, Tuple

import numpy as np

import gradcore as gc
from deform import DEFAULT_STEPS, VelocityField, exp_map, spatial_grad_norm, warp
from gradcore import Tensor
from models import LossWeights
from validators import DegenerateBatchError, ShapeError, ValidationError, validate_labels

CANDIDATE_SETS = ("all_others", "different_class_only")


def ssd(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences normalized by the number of pixels"""
    return gc.mean(gc.square(gc.sub(a, b)))


def registration_energy(S: Tensor, T: Tensor, v: VelocityField, w: LossWeights,
                        steps: int = DEFAULT_STEPS) -> Tensor:
    """(1/sigma^2) SSD(S o exp(v), T) + ||grad v||^2"""
    if S.shape != T.shape or S.shape[-2:] != v.values.shape[-2:]:
        raise ShapeError(f"registration_energy: S {S.shape}, T {T.shape}, v {v.values.shape}")
    deformed = warp(S, exp_map(v, steps))
    match = gc.scalar_mul(ssd(deformed, T), 1.0 / w.sigma ** 2)
    return gc.add(match, spatial_grad_norm(v))


def shape_loss(batch_images: Tensor, templates: Tensor, velocities: VelocityField, w: LossWeights,
               steps: int = DEFAULT_STEPS) -> Tensor:
    """Batch mean of (1/sigma^2) SSD(I, T o phi) + delta ||grad v||^2.

    Every sample has the same pixel count, so the mean over the batch of
    per-sample SSD equals the SSD over the whole batch.
    """
    if batch_images.shape[0] != templates.shape[0] or batch_images.shape[0] != velocities.values.shape[0]:
        raise ValidationError(
            f"label/template misalignment: {batch_images.shape[0]} images, "
            f"{templates.shape[0]} templates, {velocities.values.shape[0]} velocities"
        )
    if batch_images.shape != templates.shape:
        raise ShapeError(f"shape_loss: images {batch_images.shape} vs templates {templates.shape}")
    deformed = warp(templates, exp_map(velocities, steps))
    match = gc.scalar_mul(ssd(batch_images, deformed), 1.0 / w.sigma ** 2)
    smooth = gc.scalar_mul(spatial_grad_norm(velocities), w.delta)
    return gc.add(match, smooth)


def _contrastive_masks(labels: np.ndarray, candidate_set: str):
    if candidate_set not in CANDIDATE_SETS:
        raise ValidationError(f"unknown candidate_set {candidate_set!r}")
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    positives = same & ~eye
    candidates = ~eye if candidate_set == "all_others" else ~same
    anchors = positives.any(axis=1) & candidates.any(axis=1)
    return positives, candidates, anchors


def csr_loss(features: Tensor, labels: Sequence[int], tau: float,
             candidate_set: str = "all_others") -> Tensor:
    """Class-aware supervised contrastive loss over cosine similarities.

    Anchors without a positive partner are skipped; the result is the mean over
    the remaining anchors.
    """
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != len(labels):
        raise ShapeError(f"csr_loss: features {features.shape} vs {len(labels)} labels")
    if tau <= 0:
        raise ValidationError(f"csr_loss: tau must be positive, got {tau}")
    positives, candidates, anchors = _contrastive_masks(labels, candidate_set)
    if not anchors.any():
        raise DegenerateBatchError(f"degenerate batch: no anchor has a positive among labels {labels.tolist()}")

    z = gc.l2_normalize(features, axis=1)
    logits = gc.scalar_mul(gc.matmul(z, gc.transpose(z)), 1.0 / tau)

    # rows of skipped anchors get a harmless normalizer and zero weight
    mask = np.where(anchors[:, None], candidates, ~np.eye(len(labels), dtype=bool))
    lse = gc.logsumexp(logits, axis=1, mask=mask)

    dtype = features.dtype
    pos_weights = np.where(anchors[:, None], positives / np.maximum(positives.sum(axis=1, keepdims=True), 1), 0)
    pos_term = gc.sum(gc.mul(logits, Tensor(pos_weights.astype(dtype))), axis=1)
    per_anchor = gc.sub(lse, pos_term)
    anchor_weights = Tensor((anchors / anchors.sum()).astype(dtype))
    return gc.sum(gc.mul(per_anchor, anchor_weights))


def csr_loss_reference(features: np.ndarray, labels: Sequence[int], tau: float,
                       candidate_set: str = "all_others") -> float:
    """Plain double-loop evaluation of csr_loss, used as a test oracle"""
    labels = list(labels)
    z = np.asarray(features, dtype=np.float64)
    z = z / np.sqrt((z * z).sum(axis=1, keepdims=True) + gc.EPS)
    total, used = 0.0, 0
    for i in range(len(labels)):
        pos = [p for p in range(len(labels)) if p != i and labels[p] == labels[i]]
        if candidate_set == "all_others":
            cand = [a for a in range(len(labels)) if a != i]
        else:
            cand = [a for a in range(len(labels)) if labels[a] != labels[i]]
        if not pos or not cand:
            continue
        denom = sum(np.exp(np.dot(z[i], z[a]) / tau) for a in cand)
        total += -sum(np.log(np.exp(np.dot(z[i], z[p]) / tau) / denom) for p in pos) / len(pos)
        used += 1
    if not used:
        raise DegenerateBatchError("degenerate batch: no anchor has a positive")
    return total / used


def weighted_total(shape_term: Tensor, csr_term: Optional[Tensor], beta: float) -> Tensor:
    """L_shape + beta * L_CSR; beta = 0 or a missing contrastive term returns L_shape itself"""
    if csr_term is None or beta == 0:
        return shape_term
    return gc.add(shape_term, gc.scalar_mul(csr_term, beta))


def corld_terms(batch_images: Tensor, templates: Tensor, velocities: VelocityField,
                projected_features: Tensor, labels: Sequence[int], w: LossWeights,
                candidate_set: str = "all_others", steps: int = DEFAULT_STEPS,
                contrastive: bool = True) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """(total, shape, csr) terms of the CoRLD loss; csr is None when disabled"""
    shape_term = shape_loss(batch_images, templates, velocities, w, steps)
    csr_term = None
    if contrastive and w.beta != 0:
        csr_term = csr_loss(projected_features, labels, w.tau, candidate_set)
    return weighted_total(shape_term, csr_term, w.beta), shape_term, csr_term


def corld_loss(batch_images: Tensor, templates: Tensor, velocities: VelocityField,
               projected_features: Tensor, labels: Sequence[int], w: LossWeights,
               candidate_set: str = "all_others", steps: int = DEFAULT_STEPS) -> Tensor:
    """L_shape + beta * L_CSR"""
    total, _, _ = corld_terms(batch_images, templates, velocities, projected_features,
                              labels, w, candidate_set, steps)
    return total


def clf_loss(logits: Tensor, labels: Sequence[int], gamma: float) -> Tensor:
    """gamma * mean cross-entropy of softmax(logits) against labels"""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"clf_loss: logits must be [B,C] with C >= 2, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != logits.shape[0]:
        raise ShapeError(f"clf_loss: {logits.shape[0]} rows vs {len(labels)} labels")
    validate_labels(labels, logits.shape[1])
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    log_probs = gc.log_softmax(logits, axis=1)
    return gc.scalar_mul(gc.sum(gc.mul(log_probs, Tensor(onehot))), -gamma / len(labels))
