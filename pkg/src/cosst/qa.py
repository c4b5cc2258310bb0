"""Pseudo-label quality assessment by outlier detection in latent space.

Each organ of each training image is summarized by the centroid of its dense
features over the merged-label mask. All centroids are projected to two
dimensions with one PCA fit; per-class Gaussian models are fit from
ground-truth centroids only, and a pseudo label is flagged when its squared
Mahalanobis distance exceeds the chi-squared(df=2) quantile. An image is kept
only if none of its pseudo labels is flagged.
"""
import csv
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import pearsonr

from .core import parallel_map
from .exceptions import EmptyFilteredDatasetError, InvalidInputError, QaError
from .metrics import dice_binary
from .model import SegModel, forward
from .pseudo import PseudoSample

logger = logging.getLogger(__name__)

DEFAULT_TAU_QUANTILE = 0.999
MIN_DISTRIBUTION_COUNT = 3
QA_CSV_COLUMNS = ("sample_id", "class", "provenance", "z1", "z2", "d2", "threshold", "flagged", "oracle_dice")


class Provenance(str, Enum):
    """Where the mask behind an organ feature came from"""
    GROUND_TRUTH = "ground_truth"
    PSEUDO = "pseudo"


@dataclass(frozen=True)
class OrganFeature:
    sample_id: str
    class_k: int
    z_raw: np.ndarray
    provenance: Provenance
    z: Optional[np.ndarray] = None
    oracle_dice: Optional[float] = None


@dataclass(frozen=True)
class PcaProjector:
    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray

    def project(self, z_raw: np.ndarray) -> np.ndarray:
        """(m,) -> (2,) or (n, m) -> (n, 2)."""
        return (np.asarray(z_raw) - self.mean) @ self.basis.T


@dataclass(frozen=True)
class ClassDistribution:
    class_k: int
    mean: np.ndarray
    covariance: np.ndarray
    count: int
    usable: bool = True


@dataclass(frozen=True)
class QaVerdict:
    sample_id: str
    per_class_distance_sq: Dict[int, float]
    flagged_classes: FrozenSet[int]
    keep: bool


@dataclass
class QaReport:
    verdicts: List[QaVerdict]
    features: List[OrganFeature]
    distances: Dict[int, float]
    threshold: float
    tau_quantile: float
    projector: Optional[PcaProjector] = None
    distributions: Dict[int, ClassDistribution] = field(default_factory=dict)

    @property
    def kept_count(self) -> int:
        return sum(v.keep for v in self.verdicts)

    def flagged_pairs(self) -> FrozenSet[tuple]:
        return frozenset((v.sample_id, k) for v in self.verdicts for k in v.flagged_classes)


def organ_feature(features: np.ndarray, mask_k: np.ndarray) -> Optional[np.ndarray]:
    """Per-plane mean of an (m, H, W) feature raster over a binary mask; None for an empty mask."""
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask_k).astype(bool)
    if features.shape[1:] != mask.shape:
        raise InvalidInputError(f"Feature raster {features.shape} vs mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        return None
    return features[:, mask].sum(axis=1) / count


def fit_pca(features: Sequence[np.ndarray]) -> PcaProjector:
    """Top-2 principal axes from the eigendecomposition of the sample covariance."""
    data = np.asarray(features, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3 or data.shape[1] < 2:
        raise QaError(f"PCA needs at least 3 vectors of dimension >= 2, got shape {data.shape}")

    mean = data.mean(axis=0)
    covariance = np.cov(data, rowvar=False)
    values, vectors = np.linalg.eigh(covariance)
    order = np.argsort(values)[::-1][:2]
    basis = vectors[:, order].T.copy()
    explained = np.clip(values[order], 0.0, None)

    for row in basis:
        nonzero = np.flatnonzero(np.abs(row) > 1e-12)
        if nonzero.size and row[nonzero[0]] < 0:
            row *= -1.0

    if explained[1] <= 1e-12 * max(explained[0], 1.0):
        logger.warning("Organ features have rank < 2; second principal axis carries no variance")
        explained[1] = 0.0
    return PcaProjector(mean, basis, explained)


def fit_distribution(gt_features: Sequence[np.ndarray], class_k: int) -> ClassDistribution:
    """Mean and regularized unbiased covariance of a class's ground-truth embeddings."""
    points = np.asarray(gt_features, dtype=np.float64).reshape(-1, 2)
    count = points.shape[0]
    if count < MIN_DISTRIBUTION_COUNT:
        mean = points.mean(axis=0) if count else np.zeros(2)
        return ClassDistribution(class_k, mean, np.eye(2), count, usable=False)

    covariance = np.cov(points, rowvar=False)
    covariance = (covariance + covariance.T) / 2.0
    eps = 1e-8 * np.trace(covariance) / 2.0 + 1e-12
    return ClassDistribution(class_k, points.mean(axis=0), covariance + eps * np.eye(2), count)


def mahalanobis_sq(z: np.ndarray, dist: ClassDistribution) -> float:
    """(z - mu)^T C^-1 (z - mu)"""
    if not dist.usable:
        raise QaError(f"Distribution for class {dist.class_k} is unusable ({dist.count} samples)")
    diff = np.asarray(z, dtype=np.float64) - dist.mean
    return float(max(diff @ np.linalg.solve(dist.covariance, diff), 0.0))


def chi2_threshold(p: float) -> float:
    """Inverse chi-squared CDF with two degrees of freedom: -2 ln(1 - p)."""
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"Quantile must lie in (0, 1), got {p}")
    return float(-2.0 * np.log1p(-p))


def pseudo_label_dice(sample: PseudoSample, class_k: int) -> Optional[float]:
    """Dice of a merged-label class against the hidden full labels, when those are known."""
    if sample.oracle is None:
        return None
    return dice_binary(sample.merged_label.labels == class_k, sample.oracle.labels == class_k)


def extract_features(
    pseudo_samples: Sequence[PseudoSample],
    model: SegModel,
    workers: int = 1,
) -> List[List[OrganFeature]]:
    """Raw organ features for every class present in each sample's merged label."""

    def _extract(sample: PseudoSample) -> List[OrganFeature]:
        feats, _ = forward(model, sample.image)
        found = []
        for k in sorted(sample.gt_classes | sample.pseudo_classes):
            z_raw = organ_feature(feats, sample.merged_label.labels == k)
            if z_raw is None:
                continue
            provenance = Provenance.GROUND_TRUTH if k in sample.gt_classes else Provenance.PSEUDO
            oracle_dice = pseudo_label_dice(sample, k) if provenance == Provenance.PSEUDO else None
            found.append(OrganFeature(sample.sample_id, k, z_raw, provenance, oracle_dice=oracle_dice))
        return found

    return parallel_map(_extract, list(pseudo_samples), workers)


def assess_features(
    sample_ids: Sequence[str],
    per_sample: Sequence[Sequence[OrganFeature]],
    tau_quantile: float = DEFAULT_TAU_QUANTILE,
) -> QaReport:
    """Project, fit ground-truth distributions, score pseudo features and assemble verdicts."""
    if len(sample_ids) != len(per_sample):
        raise InvalidInputError("Every sample needs its own (possibly empty) feature list")
    threshold = chi2_threshold(tau_quantile)
    flat = [f for feats in per_sample for f in feats]
    if not flat:
        verdicts = [QaVerdict(sid, {}, frozenset(), True) for sid in sample_ids]
        return QaReport(verdicts, [], {}, threshold, tau_quantile)

    projector = fit_pca([f.z_raw for f in flat])
    projected = [[replace(f, z=projector.project(f.z_raw)) for f in feats] for feats in per_sample]

    by_class: Dict[int, List[np.ndarray]] = {}
    for feats in projected:
        for f in feats:
            if f.provenance == Provenance.GROUND_TRUTH:
                by_class.setdefault(f.class_k, []).append(f.z)
    classes = sorted({f.class_k for feats in projected for f in feats})
    distributions = {k: fit_distribution(by_class.get(k, []), k) for k in classes}
    for k, dist in distributions.items():
        if not dist.usable:
            logger.warning(f"Class {k} has {dist.count} ground-truth features; its pseudo labels are never flagged")

    verdicts: List[QaVerdict] = []
    distances: Dict[int, float] = {}
    index = 0
    for sample_id, feats in zip(sample_ids, projected):
        per_class: Dict[int, float] = {}
        flagged = set()
        for f in feats:
            if f.provenance == Provenance.PSEUDO and distributions[f.class_k].usable:
                d2 = mahalanobis_sq(f.z, distributions[f.class_k])
                per_class[f.class_k] = d2
                distances[index] = d2
                if d2 > threshold:
                    flagged.add(f.class_k)
            index += 1
        verdicts.append(QaVerdict(sample_id, per_class, frozenset(flagged), not flagged))

    features = [f for feats in projected for f in feats]
    report = QaReport(verdicts, features, distances, threshold, tau_quantile, projector, distributions)
    logger.info(
        f"QA at quantile {tau_quantile} (d2 > {threshold:.4f}): kept {report.kept_count}/{len(verdicts)} samples"
    )
    return report


def assess(
    pseudo_samples: Sequence[PseudoSample],
    model: SegModel,
    tau_quantile: float = DEFAULT_TAU_QUANTILE,
    workers: int = 1,
) -> QaReport:
    """Extract features for the pseudo samples and score them in one pass."""
    per_sample = extract_features(pseudo_samples, model, workers)
    return assess_features([s.sample_id for s in pseudo_samples], per_sample, tau_quantile)


def filter_dataset(
    pseudo_samples: Sequence[PseudoSample],
    verdicts: Sequence[QaVerdict],
    iteration: int = 0,
) -> List[PseudoSample]:
    """Keep exactly the samples whose verdict says keep."""
    if len(pseudo_samples) != len(verdicts):
        raise InvalidInputError(f"{len(verdicts)} verdicts for {len(pseudo_samples)} samples")
    kept = []
    for sample, verdict in zip(pseudo_samples, verdicts):
        if sample.sample_id != verdict.sample_id:
            raise InvalidInputError(f"Verdict for {verdict.sample_id} paired with sample {sample.sample_id}")
        if verdict.keep:
            kept.append(sample)
    if pseudo_samples and not kept:
        raise EmptyFilteredDatasetError(
            f"Iteration {iteration}: every one of {len(pseudo_samples)} pseudo samples was filtered",
            iteration=iteration,
            total_count=len(pseudo_samples),
        )
    return kept


def pearson_corr(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Pearson correlation coefficient; None when either sample has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise InvalidInputError("Pearson correlation needs at least 3 paired values")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return None
    return float(pearsonr(x, y).statistic)


def quality_correlation(report: QaReport) -> Dict[int, Optional[float]]:
    """Per-class correlation between d2 and the pseudo label's Dice against the hidden labels."""
    pairs: Dict[int, List[tuple]] = {}
    for index, f in enumerate(report.features):
        if index in report.distances and f.oracle_dice is not None:
            pairs.setdefault(f.class_k, []).append((report.distances[index], f.oracle_dice))
    result: Dict[int, Optional[float]] = {}
    for k, values in sorted(pairs.items()):
        if len(values) < 3:
            result[k] = None
            continue
        d2, dice = zip(*values)
        result[k] = pearson_corr(d2, dice)
    return result


def write_qa_report(path: Union[str, Path], report: QaReport) -> Path:
    """Write one row per sample and class with its distance and verdict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flagged = report.flagged_pairs()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(QA_CSV_COLUMNS)
        for index, feature in enumerate(report.features):
            d2 = report.distances.get(index)
            writer.writerow([
                feature.sample_id,
                feature.class_k,
                feature.provenance.value,
                repr(float(feature.z[0])),
                repr(float(feature.z[1])),
                "NA" if d2 is None else repr(d2),
                repr(report.threshold),
                int((feature.sample_id, feature.class_k) in flagged),
                "NA" if feature.oracle_dice is None else repr(feature.oracle_dice),
            ])
    return path
