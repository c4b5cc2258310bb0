"""Evaluation metrics: Dice, ASD, HD95 (pixel units), summaries and the Wilcoxon signed-rank test"""
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import norm, rankdata

from .core import LabelMap
from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 12
MIN_PAIRS = 5
UNDEFINED = "NA"
EVAL_CSV_COLUMNS = ("dataset", "sample_id", "class", "dice", "asd", "hd95", "evaluable")


@dataclass(frozen=True)
class EvalRow:
    sample_id: str
    class_k: int
    dice: Optional[float]
    asd: Optional[float]
    hd95: Optional[float]
    evaluable: bool
    dataset: str = ""

    def csv_row(self) -> List[str]:
        def fmt(value: Optional[float]) -> str:
            return UNDEFINED if value is None else repr(float(value))
        return [self.dataset, self.sample_id, str(self.class_k), fmt(self.dice),
                fmt(self.asd), fmt(self.hd95), str(int(self.evaluable))]


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_binary(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    pred, gt = _check_pair(pred, gt)
    total = int(pred.sum() + gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one background 4-neighbor; outside the grid counts as background."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def surface_distances(pred: np.ndarray, gt: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    """(ASD, HD95) between mask boundaries; (None, None) when either mask is empty."""
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        return None, None

    distances = cdist(np.argwhere(boundary(pred)), np.argwhere(boundary(gt)))
    pred_to_gt = distances.min(axis=1)
    gt_to_pred = distances.min(axis=0)
    asd = (pred_to_gt.mean() + gt_to_pred.mean()) / 2.0
    hd95 = np.percentile(np.concatenate([pred_to_gt, gt_to_pred]), 95)
    return float(asd), float(hd95)


def evaluate_labels(
    sample_id: str,
    pred: LabelMap,
    gt: LabelMap,
    annotated: Iterable[int],
    num_classes: int,
    dataset: str = "",
) -> List[EvalRow]:
    """One row per organ class; only classes annotated in the sample's dataset are evaluable."""
    annotated = set(annotated)
    rows = []
    for k in range(1, num_classes + 1):
        if k not in annotated:
            rows.append(EvalRow(sample_id, k, None, None, None, False, dataset))
            continue
        pred_k = pred.labels == k
        gt_k = gt.labels == k
        asd, hd95 = surface_distances(pred_k, gt_k)
        rows.append(EvalRow(sample_id, k, dice_binary(pred_k, gt_k), asd, hd95, True, dataset))
    return rows


@dataclass
class ClassSummary:
    dice: float
    asd: Optional[float]
    hd95: Optional[float]
    count: int
    undefined: int


@dataclass
class EvalSummary:
    per_class: Dict[int, ClassSummary]
    grand_dice: Optional[float]
    grand_asd: Optional[float]
    grand_hd95: Optional[float]
    absent_classes: List[int] = field(default_factory=list)
    undefined_count: int = 0

    def to_dict(self) -> Dict[str, object]:
        return {
            "per_class": {str(k): asdict(v) for k, v in sorted(self.per_class.items())},
            "grand_mean": {"dice": self.grand_dice, "asd": self.grand_asd, "hd95": self.grand_hd95},
            "absent_classes": self.absent_classes,
            "undefined_count": self.undefined_count,
        }


def _mean_or_none(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def summarize(rows: Sequence[EvalRow], num_classes: Optional[int] = None) -> EvalSummary:
    """Per-class means over evaluable rows and the unweighted grand mean of class means."""
    if not rows:
        raise InvalidInputError("Cannot summarize an empty list of evaluation rows")

    classes = range(1, (num_classes or max(r.class_k for r in rows)) + 1)
    per_class: Dict[int, ClassSummary] = {}
    absent: List[int] = []
    undefined_total = 0
    for k in classes:
        evaluable = [r for r in rows if r.class_k == k and r.evaluable]
        if not evaluable:
            absent.append(k)
            continue
        defined = [r for r in evaluable if r.asd is not None]
        undefined = len(evaluable) - len(defined)
        undefined_total += undefined
        per_class[k] = ClassSummary(
            dice=float(np.mean([r.dice for r in evaluable])),
            asd=_mean_or_none([r.asd for r in defined]),
            hd95=_mean_or_none([r.hd95 for r in defined]),
            count=len(evaluable),
            undefined=undefined,
        )

    if undefined_total:
        logger.info(f"{undefined_total} evaluable rows have undefined surface distances (empty mask)")
    return EvalSummary(
        per_class=per_class,
        grand_dice=_mean_or_none([s.dice for s in per_class.values()]),
        grand_asd=_mean_or_none([s.asd for s in per_class.values() if s.asd is not None]),
        grand_hd95=_mean_or_none([s.hd95 for s in per_class.values() if s.hd95 is not None]),
        absent_classes=absent,
        undefined_count=undefined_total,
    )


def write_eval_rows(path: Union[str, Path], rows: Sequence[EvalRow]) -> Path:
    """Write per-sample evaluation rows; undefined scores are written as NA."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_CSV_COLUMNS)
        writer.writerows(row.csv_row() for row in rows)
    return path


def read_eval_rows(path: Union[str, Path]) -> List[EvalRow]:
    def parse(value: str) -> Optional[float]:
        return None if value == UNDEFINED else float(value)

    with open(path, newline="", encoding="utf-8") as f:
        return [
            EvalRow(
                sample_id=record["sample_id"],
                class_k=int(record["class"]),
                dice=parse(record["dice"]),
                asd=parse(record["asd"]),
                hd95=parse(record["hd95"]),
                evaluable=record["evaluable"] == "1",
                dataset=record["dataset"],
            )
            for record in csv.DictReader(f)
        ]


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    method: str
    n: int


def _exact_p(ranks: np.ndarray, observed: float) -> float:
    n = ranks.size
    signs = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    positive_sums = signs @ ranks
    center = ranks.sum() / 2.0
    extreme = np.abs(positive_sums - center) >= abs(observed - center) - 1e-9
    return float(extreme.mean())


def _normal_p(abs_diffs: np.ndarray, observed: float) -> float:
    n = abs_diffs.size
    _, tie_counts = np.unique(abs_diffs, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    center = n * (n + 1) / 4.0
    z = max(abs(observed - center) - 0.5, 0.0) / np.sqrt(variance)
    return float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(xs: Sequence[float], ys: Sequence[float], method: str = "auto") -> WilcoxonResult:
    """Two-sided paired test; W is the sum of ranks of positive differences ys - xs.

    Zero differences are dropped and tied |differences| share average ranks.
    `method` is "auto" (exact up to 12 pairs), "exact" or "approx".
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidInputError("Wilcoxon test needs two paired 1-D samples of equal length")
    if method not in ("auto", "exact", "approx"):
        raise InvalidInputError(f"Unknown Wilcoxon method: {method}")

    diffs = ys - xs
    diffs = diffs[diffs != 0]
    n = diffs.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, "degenerate", 0)
    if n < MIN_PAIRS:
        raise InvalidInputError(f"Wilcoxon test needs at least {MIN_PAIRS} non-zero differences, got {n}")

    abs_diffs = np.abs(diffs)
    ranks = rankdata(abs_diffs)
    statistic = float(ranks[diffs > 0].sum())

    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        if n > 20:
            raise InvalidInputError(f"Exact enumeration over 2^{n} sign patterns is not supported")
        return WilcoxonResult(statistic, _exact_p(ranks, statistic), "exact", n)
    return WilcoxonResult(statistic, _normal_p(abs_diffs, statistic), "approx", n)
