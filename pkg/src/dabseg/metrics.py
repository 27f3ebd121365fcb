"""Evaluation metrics (hard Dice, HD95) and the per-case report container.

Conventions, applied uniformly and recorded in report metadata:
  - Dice of two empty masks is 1.0; exactly one empty gives 0.0.
  - HD95 of two empty masks is 0.0; exactly one empty returns the volume
    diagonal (in spacing units) as a sentinel.
  - HD95 pools both directed surface-distance multisets and takes the 95th
    percentile with linear interpolation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

REGIONS = ("et", "tc", "wt")

METRIC_CONVENTIONS = {
    "dice_both_empty": 1.0,
    "dice_one_empty": 0.0,
    "hd95_both_empty": 0.0,
    "hd95_one_empty": "volume diagonal (spacing units)",
    "hd95_percentile": "95th, linear interpolation, union of both directed multisets",
    "surface": "mask voxels with a 6-connected background neighbor (volume border counts)",
}


def dice_metric(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Hard Dice overlap 2|P∩G| / (|P| + |G|)."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p, g = int(pred.sum()), int(gt.sum())
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    return 2.0 * int((pred & gt).sum()) / (p + g)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected background neighbor;
    everything outside the volume counts as background."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    for axis in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        shifted_fwd = np.zeros_like(mask)
        shifted_bwd = np.zeros_like(mask)
        shifted_fwd[tuple(lo)] = mask[tuple(hi)]
        shifted_bwd[tuple(hi)] = mask[tuple(lo)]
        interior &= shifted_fwd & shifted_bwd
    return mask & ~interior


def volume_diagonal(shape, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.sqrt(sum((d * s) ** 2 for d, s in zip(shape, spacing))))


def hd95(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th-percentile symmetric surface distance between two binary masks."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p_empty, g_empty = not pred.any(), not gt.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return volume_diagonal(pred.shape, spacing)
    sp = surface_voxels(pred)
    sg = surface_voxels(gt)
    # distance_transform_edt gives each voxel's distance to the nearest True
    # voxel of the inverted mask argument
    dist_to_gt = distance_transform_edt(~sg, sampling=spacing)
    dist_to_pred = distance_transform_edt(~sp, sampling=spacing)
    distances = np.concatenate([dist_to_gt[sp], dist_to_pred[sg]])
    return float(np.percentile(distances, 95))


@dataclass
class CaseMetrics:
    case_id: str
    dice: dict[str, float]
    hd95: dict[str, float]

    def row(self) -> list:
        return (
            [self.case_id]
            + [self.dice[r] for r in REGIONS]
            + [self.hd95[r] for r in REGIONS]
        )


CSV_HEADER = ["case_id", "dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt"]


@dataclass
class EvalReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, dict[str, tuple[float, float]]]:
        """Per-region (mean, std) of Dice and HD95 across cases."""
        out: dict[str, dict[str, tuple[float, float]]] = {"dice": {}, "hd95": {}}
        for region in REGIONS:
            d = np.array([c.dice[region] for c in self.cases], dtype=np.float64)
            h = np.array([c.hd95[region] for c in self.cases], dtype=np.float64)
            out["dice"][region] = (float(d.mean()), float(d.std()))
            out["hd95"][region] = (float(h.mean()), float(h.std()))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for case in self.cases:
                writer.writerow(case.row())
            if self.cases:
                agg = self.aggregate()
                writer.writerow(
                    ["mean"]
                    + [agg["dice"][r][0] for r in REGIONS]
                    + [agg["hd95"][r][0] for r in REGIONS]
                )

    def to_json(self, path):
        agg = self.aggregate() if self.cases else {}
        payload = {
            "cases": [
                {"case_id": c.case_id, "dice": c.dice, "hd95": c.hd95} for c in self.cases
            ],
            "aggregate": {
                metric: {r: {"mean": v[0], "std": v[1]} for r, v in regions.items()}
                for metric, regions in agg.items()
            },
            "metadata": {**self.metadata, "conventions": METRIC_CONVENTIONS},
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        payload = json.loads(Path(path).read_text())
        cases = [
            CaseMetrics(case_id=c["case_id"], dice=c["dice"], hd95=c["hd95"])
            for c in payload["cases"]
        ]
        return cls(cases=cases, metadata=payload.get("metadata", {}))

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        cases = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected report header {header}")
            for row in reader:
                if row[0] == "mean":
                    continue
                values = [float(v) for v in row[1:]]
                cases.append(
                    CaseMetrics(
                        case_id=row[0],
                        dice=dict(zip(REGIONS, values[:3])),
                        hd95=dict(zip(REGIONS, values[3:])),
                    )
                )
        return cls(cases=cases)
