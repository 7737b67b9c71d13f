"""Evaluation metrics: per-structure Dice, 95th-percentile surface distance,
and Jacobian-based field-regularity measures.

Surface distances are symmetric: boundary voxels (6-connectivity, with the
outside of the array counting as background) of both masks are extracted,
directed nearest-distances are computed both ways in millimetres, pooled,
and the 95th percentile is taken with linear interpolation. SDlogJ and the
folding fraction are computed over interior voxels, where central
differences are valid; determinants are clamped at 1e-9 before the log.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ContractError, UndefinedMetricError
from .fieldops import DisplacementField, LabelVolume, jacobian_determinant, warp

log = logging.getLogger(__name__)

DET_FLOOR = 1e-9


def dice_score(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Hard Dice overlap 2|A^B| / (|A|+|B|) for one label; 1.0 when both
    masks lack the label, 0.0 when exactly one does."""
    if a.data.shape != b.data.shape:
        raise ContractError(f"mask shapes differ: {a.data.shape} vs {b.data.shape}")
    ma = a.data == label
    mb = b.data == label
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels of a binary mask under 6-connectivity; voxels on the
    array border count as surface."""
    structure = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def surface_distances(mask_a: np.ndarray, mask_b: np.ndarray, spacing) -> np.ndarray:
    """Pooled symmetric nearest surface distances in mm."""
    sp = np.asarray(spacing, dtype=float)
    pts_a = np.argwhere(surface_voxels(mask_a)) * sp
    pts_b = np.argwhere(surface_voxels(mask_b)) * sp
    if len(pts_a) == 0 or len(pts_b) == 0:
        raise UndefinedMetricError("surface distance of an empty mask is undefined")
    d_ab = cKDTree(pts_b).query(pts_a)[0]
    d_ba = cKDTree(pts_a).query(pts_b)[0]
    return np.concatenate([d_ab, d_ba])


def hd95(a: LabelVolume, b: LabelVolume, label: int, spacing=None) -> float:
    """95th percentile of the pooled symmetric surface distances, in mm."""
    if a.data.shape != b.data.shape:
        raise ContractError(f"mask shapes differ: {a.data.shape} vs {b.data.shape}")
    sp = spacing if spacing is not None else a.spacing
    dists = surface_distances(a.data == label, b.data == label, sp)
    return float(np.percentile(dists, 95))


def _interior_logdet(disp_field: DisplacementField):
    det = jacobian_determinant(disp_field)
    inner = det[1:-1, 1:-1, 1:-1]
    return inner, np.log(np.maximum(inner, DET_FLOOR))


def sdlogj(disp_field: DisplacementField) -> float:
    """Standard deviation of log |J| over interior voxels."""
    _, logdet = _interior_logdet(disp_field)
    return float(np.std(logdet))


def nonpositive_jacobian_fraction(disp_field: DisplacementField) -> float:
    """Fraction of interior voxels with det J <= 0 (folding)."""
    inner, _ = _interior_logdet(disp_field)
    return float(np.mean(inner <= 0.0))


@dataclass
class EvaluationReport:
    """Per-pair registration quality in the layout of the cohort table."""

    pair_id: str
    dice_per_class: dict[int, float]
    dice_avg: float
    hd95_per_class: dict[int, float]
    hd95_mm: float
    sdlogj: float
    nonpos_jac_frac: float
    skipped_hd95_classes: tuple[int, ...] = ()

    def row(self, class_ids) -> dict:
        out = {"pair_id": self.pair_id, "dice_avg": self.dice_avg}
        for k in class_ids:
            out[f"dice_c{k}"] = self.dice_per_class.get(k, math.nan)
        out["hd95_mm"] = self.hd95_mm
        out["sdlogj"] = self.sdlogj
        out["nonpos_jac_frac"] = self.nonpos_jac_frac
        return out


def evaluate_pair(
    fixed_mask: LabelVolume,
    moving_mask: LabelVolume,
    disp_field: DisplacementField,
    spacing=None,
    pair_id: str = "",
) -> EvaluationReport:
    """Warp the moving mask (nearest-neighbor), then score foreground Dice,
    HD95 (classes empty in either mask are excluded with a warning), and
    field regularity."""
    if fixed_mask.num_classes != moving_mask.num_classes:
        raise ContractError("masks disagree on class count")
    sp = spacing if spacing is not None else fixed_mask.spacing
    warped = warp(moving_mask, disp_field, interp="nearest")

    dice_pc: dict[int, float] = {}
    hd_pc: dict[int, float] = {}
    skipped = []
    for k in range(1, fixed_mask.num_classes):
        dice_pc[k] = dice_score(fixed_mask, warped, k)
        try:
            hd_pc[k] = hd95(fixed_mask, warped, k, spacing=sp)
        except UndefinedMetricError:
            skipped.append(k)
            log.warning("pair %s: HD95 undefined for class %d (empty mask), excluded", pair_id, k)

    return EvaluationReport(
        pair_id=pair_id,
        dice_per_class=dice_pc,
        dice_avg=float(np.mean(list(dice_pc.values()))),
        hd95_per_class=hd_pc,
        hd95_mm=float(np.mean(list(hd_pc.values()))) if hd_pc else math.nan,
        sdlogj=sdlogj(disp_field),
        nonpos_jac_frac=nonpositive_jacobian_fraction(disp_field),
        skipped_hd95_classes=tuple(skipped),
    )


def cohort_mean_row(reports, class_ids) -> dict:
    rows = [r.row(class_ids) for r in reports]
    out = {"pair_id": "mean"}
    for key in rows[0]:
        if key == "pair_id":
            continue
        vals = [r[key] for r in rows if not math.isnan(r[key])]
        out[key] = float(np.mean(vals)) if vals else math.nan
    return out


def write_report_csv(reports, path, num_classes: int):
    """One row per pair plus a cohort-mean row; columns: pair_id, dice_avg,
    dice_c1..cK, hd95_mm, sdlogj, nonpos_jac_frac."""
    class_ids = list(range(1, num_classes))
    fieldnames = (
        ["pair_id", "dice_avg"]
        + [f"dice_c{k}" for k in class_ids]
        + ["hd95_mm", "sdlogj", "nonpos_jac_frac"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for r in reports:
            writer.writerow({k: _fmt(v) for k, v in r.row(class_ids).items()})
        writer.writerow({k: _fmt(v) for k, v in cohort_mean_row(reports, class_ids).items()})


def write_report_json(reports, path, num_classes: int, extra: dict | None = None):
    class_ids = list(range(1, num_classes))
    payload = {
        "pairs": [r.row(class_ids) for r in reports],
        "mean": cohort_mean_row(reports, class_ids),
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
