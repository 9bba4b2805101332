"""
OsC toolkit - segmentation metrics
Dice, Jaccard, precision, recall and the 95th-percentile Hausdorff distance.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import UndefinedMetric
from geometry import exact_edt
from grid import BinaryMask, LabelMask, binary_from_labels, require_same_shape

logger = logging.getLogger(__name__)

CSV_HEADER = ["image_id", "class", "dsc", "jac", "pre", "rec", "hau95", "flags"]
HAUSDORFF_PERCENTILE = 95

FLAG_BOTH_EMPTY = "both_empty"
FLAG_PRE_EMPTY = "pre_empty_denominator"
FLAG_REC_EMPTY = "rec_empty_denominator"
FLAG_HAU_UNDEFINED = "hau95_undefined"


@dataclass(frozen=True)
class MetricsReport:
    dsc: float
    jac: float
    pre: float
    rec: float
    hau95: Optional[float]
    flags: Tuple[str, ...] = ()

    def to_csv_row(self, image_id: str, class_name) -> List[str]:
        return [
            str(image_id),
            str(class_name),
            f"{self.dsc:.6f}",
            f"{self.jac:.6f}",
            f"{self.pre:.6f}",
            f"{self.rec:.6f}",
            "" if self.hau95 is None else f"{self.hau95:.6f}",
            "|".join(self.flags),
        ]

    @classmethod
    def from_csv_row(cls, row: Sequence[str]) -> Tuple[str, str, "MetricsReport"]:
        image_id, class_name, dsc, jac, pre, rec, hau95, flags = row
        report = cls(
            dsc=float(dsc),
            jac=float(jac),
            pre=float(pre),
            rec=float(rec),
            hau95=float(hau95) if hau95 else None,
            flags=tuple(f for f in flags.split("|") if f),
        )
        return image_id, class_name, report


def _counts(pred: BinaryMask, truth: BinaryMask) -> Tuple[int, int, int]:
    require_same_shape(truth.shape, pred.shape, "prediction")
    p, t = pred.bits, truth.bits
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn


def confusion_metrics(pred: BinaryMask, truth: BinaryMask) -> Tuple[float, float, float, float, Tuple[str, ...]]:
    """(dsc, jac, pre, rec, flags) from TP/FP/FN counts.

    Empty denominators: dsc = jac = 1 when both masks are empty, rec = 1 when
    truth is empty, pre = 1 when nothing is predicted and truth is empty
    (0 when truth is not empty). Each convention adds a flag.
    """
    tp, fp, fn = _counts(pred, truth)
    flags: List[str] = []

    if tp + fp + fn == 0:
        dsc = jac = 1.0
        flags.append(FLAG_BOTH_EMPTY)
    else:
        dsc = 2.0 * tp / (2.0 * tp + fp + fn)
        jac = tp / float(tp + fp + fn)

    if tp + fp == 0:
        pre = 1.0 if fn == 0 else 0.0
        flags.append(FLAG_PRE_EMPTY)
    else:
        pre = tp / float(tp + fp)

    if tp + fn == 0:
        rec = 1.0
        flags.append(FLAG_REC_EMPTY)
    else:
        rec = tp / float(tp + fn)

    return dsc, jac, pre, rec, tuple(flags)


def boundary(mask: BinaryMask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; outside the image counts as background"""
    bits = np.pad(mask.bits, 1, mode="constant", constant_values=False)
    core = bits[1:-1, 1:-1]
    interior = bits[:-2, 1:-1] & bits[2:, 1:-1] & bits[1:-1, :-2] & bits[1:-1, 2:]
    return core & ~interior


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    ordered = np.sort(values)
    rank = max(1, int(math.ceil(percentile / 100.0 * len(ordered))))
    return float(ordered[rank - 1])


def surface_distances(a: BinaryMask, b: BinaryMask) -> np.ndarray:
    """Pooled boundary-to-boundary distances, a->b followed by b->a"""
    require_same_shape(a.shape, b.shape, "mask")
    if a.is_empty() or b.is_empty():
        raise UndefinedMetric("Hausdorff distance needs two non-empty masks")
    edge_a = boundary(a)
    edge_b = boundary(b)
    to_b = exact_edt(BinaryMask(edge_b)).values
    to_a = exact_edt(BinaryMask(edge_a)).values
    return np.concatenate([to_b[edge_a], to_a[edge_b]])


def hausdorff95(a: BinaryMask, b: BinaryMask) -> float:
    """Nearest-rank 95th percentile of the pooled symmetric surface distances"""
    return nearest_rank(surface_distances(a, b), HAUSDORFF_PERCENTILE)


def evaluate(pred: BinaryMask, truth: BinaryMask) -> MetricsReport:
    dsc, jac, pre, rec, flags = confusion_metrics(pred, truth)
    try:
        hau = hausdorff95(pred, truth)
    except UndefinedMetric:
        logger.warning("hau95 undefined: prediction or truth is empty")
        hau = None
        flags = flags + (FLAG_HAU_UNDEFINED,)
    return MetricsReport(dsc, jac, pre, rec, hau, flags)


def macro_average(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean over classes in class order; hau95 averages the defined values only"""
    if not reports:
        raise UndefinedMetric("nothing to average")
    defined = [r.hau95 for r in reports if r.hau95 is not None]
    flags = sorted({f for r in reports for f in r.flags})
    return MetricsReport(
        dsc=float(np.mean([r.dsc for r in reports])),
        jac=float(np.mean([r.jac for r in reports])),
        pre=float(np.mean([r.pre for r in reports])),
        rec=float(np.mean([r.rec for r in reports])),
        hau95=float(np.mean(defined)) if defined else None,
        flags=tuple(flags),
    )


def evaluate_labels(pred: LabelMask, truth: LabelMask) -> Tuple[Dict[int, MetricsReport], MetricsReport]:
    """Per-foreground-class reports (one-vs-rest) and their macro average"""
    require_same_shape(truth.shape, pred.shape, "prediction")
    num_classes = max(pred.num_classes, truth.num_classes)
    per_class = {
        c: evaluate(binary_from_labels(pred, c), binary_from_labels(truth, c))
        for c in range(1, num_classes)
    }
    return per_class, macro_average(list(per_class.values()))


def report_csv(image_id: str, per_class: Dict[int, MetricsReport],
               macro: Optional[MetricsReport] = None) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for c, report in per_class.items():
        writer.writerow(report.to_csv_row(image_id, c))
    if macro is not None:
        writer.writerow(macro.to_csv_row(image_id, "macro"))
    return buffer.getvalue()
