"""Dice similarity coefficient and normalized surface distance."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .volume import LabelMap, ShapeMismatchError, load_labelmap

ArrayOrLabels = Union[np.ndarray, LabelMap]


def _as_bool(m: ArrayOrLabels) -> np.ndarray:
    arr = m.labels if isinstance(m, LabelMap) else np.asarray(m)
    return arr > 0


def _check_pair(a: ArrayOrLabels, b: ArrayOrLabels) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(a, LabelMap) and isinstance(b, LabelMap) and a.grid != b.grid:
        raise ShapeMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a: ArrayOrLabels, b: ArrayOrLabels) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    faces = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, faces, border_value=0)


def nsd(a: ArrayOrLabels, b: ArrayOrLabels, tolerance_mm: float, spacing: Optional[Sequence[float]] = None) -> float:
    """Fraction of both boundaries lying within ``tolerance_mm`` of the other boundary."""
    if tolerance_mm < 0:
        raise ValueError("tolerance_mm must be >= 0")
    if spacing is None:
        spacing = a.grid.spacing if isinstance(a, LabelMap) else (1.0,) * np.ndim(_as_bool(a))
    a, b = _check_pair(a, b)
    ba, bb = boundary(a), boundary(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    hits = int((dist_to_b[ba] <= tolerance_mm).sum()) + int((dist_to_a[bb] <= tolerance_mm).sum())
    return hits / (na + nb)


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    nsd: float


@dataclass
class MetricsReport:
    per_case: List[CaseMetrics]
    tolerance_mm: float
    mean_dsc: float = field(init=False)
    mean_nsd: float = field(init=False)

    def __post_init__(self):
        self.per_case = sorted(self.per_case, key=lambda c: c.case_id)
        self.mean_dsc = float(np.mean([c.dsc for c in self.per_case])) if self.per_case else float("nan")
        self.mean_nsd = float(np.mean([c.nsd for c in self.per_case])) if self.per_case else float("nan")

    def to_dict(self) -> dict:
        return {
            "tolerance_mm": self.tolerance_mm,
            "mean_dsc": self.mean_dsc,
            "mean_nsd": self.mean_nsd,
            "per_case": [{"case_id": c.case_id, "dsc": c.dsc, "nsd": c.nsd} for c in self.per_case],
        }

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["case_id", "dsc", "nsd"])
                for c in self.per_case:
                    w.writerow([c.case_id, repr(c.dsc), repr(c.nsd)])

    @classmethod
    def read(cls, json_path) -> "MetricsReport":
        d = json.loads(Path(json_path).read_text())
        return cls([CaseMetrics(**c) for c in d["per_case"]], d["tolerance_mm"])


def evaluate(
    predictions: Mapping[str, ArrayOrLabels],
    truths: Mapping[str, ArrayOrLabels],
    tolerance_mm: float = 1.0,
) -> MetricsReport:
    """Per-case DSC/NSD over every truth case; predictions may be LabelMaps or file paths."""
    rows = []
    for case_id in sorted(truths):
        if case_id not in predictions:
            raise KeyError(f"no prediction for case {case_id}")
        pred, truth = predictions[case_id], truths[case_id]
        if isinstance(pred, (str, Path)):
            pred = load_labelmap(pred)
        if isinstance(truth, (str, Path)):
            truth = load_labelmap(truth)
        rows.append(CaseMetrics(case_id, dice(pred, truth), nsd(pred, truth, tolerance_mm)))
    return MetricsReport(rows, tolerance_mm)
