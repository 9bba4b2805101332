#!/usr/bin/env python3
"""
OsC toolkit - experiment report summary
Per-loss means over the rows of an experiment CSV
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from errors import InvalidConfig, IoFailure
from trainer import ExperimentRow, experiment_rows_from_csv

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("dsc", "jac", "pre", "rec", "hau95")


@dataclass(frozen=True)
class LossSummary:
    loss: str
    runs: int
    means: Dict[str, Optional[float]]
    # runs whose hau95 was undefined
    undefined_hau95: int


def _mean(values: List[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def summarize_rows(rows: Sequence[ExperimentRow]) -> Dict[str, LossSummary]:
    """Per-loss means, keyed in order of first appearance"""
    by_loss: Dict[str, List[ExperimentRow]] = defaultdict(list)
    for row in rows:
        by_loss[row.loss].append(row)

    summaries = {}
    for loss, group in by_loss.items():
        means = {}
        for column in METRIC_COLUMNS:
            values = [getattr(r, column) for r in group if getattr(r, column) is not None]
            means[column] = _mean(values)
        undefined = sum(1 for r in group if r.hau95 is None)
        summaries[loss] = LossSummary(loss, len(group), means, undefined)
    return summaries


def osc_vs_bce(summaries: Dict[str, LossSummary]) -> Optional[bool]:
    """Whether OsC's mean Dice exceeds BCE's; None when either is missing"""
    osc = summaries.get("osc")
    bce = summaries.get("bce")
    if osc is None or bce is None:
        return None
    return osc.means["dsc"] > bce.means["dsc"]


def all_tied(summaries: Dict[str, LossSummary], tolerance: float = 1e-9) -> bool:
    """Whether two or more losses share one mean Dice"""
    dice = [s.means["dsc"] for s in summaries.values() if s.means["dsc"] is not None]
    return len(dice) > 1 and max(dice) - min(dice) <= tolerance


def _cell(value: Optional[float]) -> str:
    return "   n/a" if value is None or math.isnan(value) else f"{value:6.4f}"


def format_summary(summaries: Dict[str, LossSummary], source: str = "") -> str:
    lines = [f"Experiment summary{' - ' + source if source else ''}", "=" * 50]
    if not summaries:
        lines.append("No runs recorded")
        return "\n".join(lines) + "\n"

    lines.append(f"{'loss':<8}{'runs':>6}" + "".join(f"{c:>9}" for c in METRIC_COLUMNS))
    for summary in summaries.values():
        cells = "".join(f"{_cell(summary.means[c]):>9}" for c in METRIC_COLUMNS)
        lines.append(f"{summary.loss:<8}{summary.runs:>6}{cells}")
        if summary.undefined_hau95:
            lines.append(f"  hau95 undefined in {summary.undefined_hau95} run(s)")

    lines.append("-" * 50)
    verdict = osc_vs_bce(summaries)
    if verdict is None:
        lines.append("OsC vs BCE: not compared (both losses are needed)")
    else:
        osc, bce = summaries["osc"].means["dsc"], summaries["bce"].means["dsc"]
        relation = "exceeds" if verdict else "does not exceed"
        lines.append(f"OsC mean Dice {osc:.4f} {relation} BCE mean Dice {bce:.4f}")
    if all_tied(summaries):
        lines.append("All losses tie on mean Dice; detached OsC on free logits fits the same masks "
                     'as the baselines (see phi_mode "soft")')
    return "\n".join(lines) + "\n"


def summarize_file(path: Union[str, Path]) -> str:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot read experiment report {path}: {e}") from e
    try:
        rows = experiment_rows_from_csv(text)
    except ValueError as e:
        raise InvalidConfig(f"{path}: malformed experiment row: {e}") from e
    logger.debug("summarising %d rows from %s", len(rows), path)
    return format_summary(summarize_rows(rows), str(path))
