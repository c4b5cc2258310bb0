"""Supervision signals as differentiable losses over probability planes.

Every loss returns its value together with the exact gradient with respect to
the (1 + C_PL, H, W) probability array it was given.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import LabelMap, ProbMap, one_hot, union_mask
from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)

EPSILON = 1e-5
CE_CLAMP = 1e-12
LOSS_CSV_COLUMNS = ("epoch", "stage", "total", "marginal", "exclusion", "saturated")

ProbsLike = Union[ProbMap, np.ndarray]
LabelsLike = Union[LabelMap, np.ndarray]


@dataclass(frozen=True)
class LossReport:
    total: float
    marginal_term: float
    exclusion_term: float
    per_class_dice_terms: Tuple[float, ...] = ()
    saturated: bool = False

    def csv_row(self, epoch: int, stage: str) -> List[object]:
        """Flat CSV row with one column per term."""
        return [epoch, stage, repr(self.total), repr(self.marginal_term),
                repr(self.exclusion_term), int(self.saturated)]

    @staticmethod
    def mean(reports: Sequence["LossReport"]) -> "LossReport":
        """Average of a batch of reports; saturation is flagged if any sample saturated."""
        if not reports:
            raise InvalidInputError("Cannot average an empty list of loss reports")
        n = len(reports)
        per_class: Tuple[float, ...] = ()
        lengths = {len(r.per_class_dice_terms) for r in reports}
        if len(lengths) == 1 and 0 not in lengths:
            per_class = tuple(np.mean([r.per_class_dice_terms for r in reports], axis=0).tolist())
        return LossReport(
            total=sum(r.total for r in reports) / n,
            marginal_term=sum(r.marginal_term for r in reports) / n,
            exclusion_term=sum(r.exclusion_term for r in reports) / n,
            per_class_dice_terms=per_class,
            saturated=any(r.saturated for r in reports),
        )


def _as_probs(probs: ProbsLike) -> np.ndarray:
    array = probs.probs if isinstance(probs, ProbMap) else np.asarray(probs, dtype=np.float64)
    if array.ndim != 3:
        raise InvalidInputError(f"Expected (classes, H, W) probabilities, got shape {array.shape}")
    return array


def _as_labels(label: LabelsLike) -> np.ndarray:
    return label.labels if isinstance(label, LabelMap) else np.asarray(label, dtype=np.int64)


def _unannotated(num_channels: int, annotated: Iterable[int]) -> List[int]:
    annotated = set(annotated)
    return [k for k in range(1, num_channels) if k not in annotated]


def merge_channels(probs: ProbsLike, annotated: Iterable[int]) -> ProbsLike:
    """Fold every unannotated class plane into background.

    Output planes: [background + sum(unannotated), annotated classes ascending].
    """
    array = _as_probs(probs)
    annotated = sorted(set(annotated))
    if not annotated:
        raise InvalidInputError("merge_channels needs at least one annotated class")
    if annotated[-1] >= array.shape[0] or annotated[0] < 1:
        raise InvalidInputError(f"Annotated classes {annotated} outside {array.shape[0]} channels")

    unlabeled = _unannotated(array.shape[0], annotated)
    background = array[0] + array[unlabeled].sum(axis=0)
    merged = np.concatenate([background[None], array[annotated]], axis=0)
    return ProbMap(merged) if isinstance(probs, ProbMap) else merged


def _merge_backward(grad_merged: np.ndarray, annotated: Sequence[int], num_channels: int) -> np.ndarray:
    grad = np.empty((num_channels,) + grad_merged.shape[1:])
    grad[0] = grad_merged[0]
    for k in _unannotated(num_channels, annotated):
        grad[k] = grad_merged[0]
    for i, k in enumerate(sorted(annotated)):
        grad[k] = grad_merged[i + 1]
    return grad


def _dice_similarity(p: np.ndarray, t: np.ndarray) -> Tuple[float, np.ndarray]:
    """(2 sum(p t) + eps) / (sum p + sum t + eps) and its gradient w.r.t. p."""
    intersection = float((p * t).sum())
    denominator = float(p.sum() + t.sum()) + EPSILON
    numerator = 2.0 * intersection + EPSILON
    grad = 2.0 * t / denominator - numerator / denominator ** 2
    return numerator / denominator, grad


def soft_dice_loss(probs_k: np.ndarray, target_k: np.ndarray) -> Tuple[float, np.ndarray]:
    """1 - soft Dice between a probability plane and a binary target plane."""
    p = np.asarray(probs_k, dtype=np.float64)
    t = np.asarray(target_k, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidInputError(f"Dice shapes differ: {p.shape} vs {t.shape}")
    similarity, grad = _dice_similarity(p, t)
    return 1.0 - similarity, -grad


def cross_entropy_loss(
    probs: ProbsLike,
    target: LabelsLike,
    class_remap: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray, bool]:
    """Mean -log p_target over pixels, with p clamped at 1e-12.

    Returns (loss, gradient, saturated); clamped pixels get zero gradient.
    """
    array = _as_probs(probs)
    labels = _as_labels(target)
    if class_remap is not None:
        labels = np.asarray(class_remap)[labels]
    if labels.shape != array.shape[1:]:
        raise InvalidInputError(f"Target shape {labels.shape} vs probabilities {array.shape[1:]}")
    if labels.min() < 0 or labels.max() >= array.shape[0]:
        raise InvalidInputError("Target labels outside the probability channel range")

    num_pixels = labels.size
    p_target = np.take_along_axis(array, labels[None], axis=0)[0]
    clamped = p_target < CE_CLAMP
    safe = np.maximum(p_target, CE_CLAMP)
    loss = float(-np.log(safe).mean())

    grad = np.zeros_like(array)
    pixel_grad = np.where(clamped, 0.0, -1.0 / (num_pixels * safe))
    np.put_along_axis(grad, labels[None], pixel_grad[None], axis=0)
    return loss, grad, bool(clamped.any())


def _dice_ce(array: np.ndarray, labels: np.ndarray) -> Tuple[float, Tuple[float, ...], float, np.ndarray, bool]:
    """Dice (averaged over every channel) plus cross-entropy against integer labels."""
    channels = array.shape[0]
    targets = one_hot(labels, channels)
    grad = np.zeros_like(array)
    per_class = []
    for c in range(channels):
        loss_c, grad_c = soft_dice_loss(array[c], targets[c])
        per_class.append(loss_c)
        grad[c] = grad_c / channels
    dice_term = float(np.mean(per_class))
    ce, ce_grad, saturated = cross_entropy_loss(array, labels)
    return dice_term, tuple(per_class), ce, grad + ce_grad, saturated


def exclusion_loss(
    probs: ProbsLike,
    annotated: Iterable[int],
    mask_M: np.ndarray,
) -> Tuple[float, np.ndarray]:
    """Sum over unannotated classes u of soft-Dice overlap(p_u, M).

    Minimizing this pushes unlabeled-organ probability out of the labeled-organ union M.
    A sample with an empty M has no forbidden region and contributes 0.
    """
    array = _as_probs(probs)
    mask = np.asarray(mask_M, dtype=np.float64)
    if mask.shape != array.shape[1:]:
        raise InvalidInputError(f"Mask shape {mask.shape} vs probabilities {array.shape[1:]}")

    grad = np.zeros_like(array)
    unlabeled = _unannotated(array.shape[0], annotated)
    if not unlabeled or not mask.any():
        return 0.0, grad

    total = 0.0
    for u in unlabeled:
        overlap, overlap_grad = _dice_similarity(array[u], mask)
        total += overlap
        grad[u] = overlap_grad
    return total, grad


def stage1_loss(
    probs: ProbsLike,
    label: LabelsLike,
    annotated: Iterable[int],
    marginal_weight: float = 1.0,
    exclusion_weight: float = 1.0,
) -> Tuple[LossReport, np.ndarray]:
    """Marginal Dice+CE on channel-merged probabilities plus the exclusion term."""
    array = _as_probs(probs)
    labels = _as_labels(label)
    annotated = sorted(set(annotated))
    present = set(np.unique(labels).tolist()) - {0}
    if not present <= set(annotated):
        raise InvalidInputError(f"Label classes {sorted(present)} are not all annotated ({annotated})")

    remap = np.zeros(array.shape[0], dtype=np.int64)
    for i, k in enumerate(annotated):
        remap[k] = i + 1

    merged = merge_channels(array, annotated)
    dice_term, per_class, ce, merged_grad, saturated = _dice_ce(merged, remap[labels])
    marginal = marginal_weight * (dice_term + ce)
    grad = marginal_weight * _merge_backward(merged_grad, annotated, array.shape[0])

    mask = union_mask(label if isinstance(label, LabelMap) else LabelMap(labels))
    exclusion, exclusion_grad = exclusion_loss(array, annotated, mask)
    exclusion = exclusion_weight * exclusion
    grad = grad + exclusion_weight * exclusion_grad

    report = LossReport(marginal + exclusion, marginal, exclusion, per_class, saturated)
    return report, grad


def fulllabel_loss(probs: ProbsLike, merged_label: LabelsLike) -> Tuple[LossReport, np.ndarray]:
    """Dice+CE over all 1 + C_PL channels against a fully populated label map."""
    array = _as_probs(probs)
    labels = _as_labels(merged_label)
    dice_term, per_class, ce, grad, saturated = _dice_ce(array, labels)
    term = dice_term + ce
    return LossReport(term, term, 0.0, per_class, saturated), grad
