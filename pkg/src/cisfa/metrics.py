"""Volume-level segmentation metrics (dice, average symmetric surface
distance) and their cross-validation aggregation into a per-class table.

ASSD uses 6-connected boundary voxels (a voxel is surface when any of its six
face neighbors is outside the mask or the array border) and physical
distances in mm. When either mask is empty the distance is undefined and is
reported as the UNDEFINED sentinel (NaN), excluded from aggregation with an
explicit count rather than imputed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .errors import ShapeMismatch

UNDEFINED = float("nan")


def is_defined(x: float) -> bool:
    return math.isfinite(x)


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / (p + g)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (n x 3) of mask voxels with a 6-neighbor outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    structure = generate_binary_structure(mask.ndim, 1)
    interior = binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def assd(pred: np.ndarray, gt: np.ndarray, spacing_mm) -> float:
    """Average symmetric surface distance in mm, UNDEFINED (NaN) when either
    mask is empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return UNDEFINED
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    surf_p = surface_voxels(pred) * spacing
    surf_g = surface_voxels(gt) * spacing
    d_pg, _ = cKDTree(surf_g).query(surf_p)
    d_gp, _ = cKDTree(surf_p).query(surf_g)
    return float((d_pg.sum() + d_gp.sum()) / (len(surf_p) + len(surf_g)))


@dataclass
class VolumeMetrics:
    volume_id: str
    class_names: list
    dice: dict              # class name -> value in [0, 1]
    assd_mm: dict           # class name -> mm or UNDEFINED


def volume_metrics(pred: np.ndarray, gt: np.ndarray, spacing_mm, class_names,
                   volume_id: str = "") -> VolumeMetrics:
    """Per-class dice and ASSD between integer label volumes."""
    dice, dist = {}, {}
    for c, name in enumerate(class_names, start=1):
        dice[name] = dice_score(pred == c, gt == c)
        dist[name] = assd(pred == c, gt == c, spacing_mm)
    return VolumeMetrics(volume_id=volume_id, class_names=list(class_names),
                         dice=dice, assd_mm=dist)


def evaluate_checkpoint(ckpt, volumes, plane: str = "transverse",
                        class_names=None) -> list[VolumeMetrics]:
    """Run the checkpointed segmenter slice-wise over held-out target
    volumes, restack the argmax masks to 3D and score per class per volume.
    ``ckpt`` is a checkpoint directory or an already-loaded bundle."""
    from . import data as data_mod
    from .trainer import ModelBundle, segment_slices

    bundle = ModelBundle.load(ckpt) if not hasattr(ckpt, "Seg") else ckpt
    n_classes = bundle.cfg.n_classes
    names = list(class_names or [f"class{c}" for c in range(1, n_classes + 1)])
    axis = data_mod.PLANE_AXES[plane]
    results = []
    for vol in volumes:
        if vol.labels is None:
            raise ShapeMismatch(f"volume {vol.id} has no evaluation labels")
        slices = [s.image for s in data_mod.decompose_slices(vol, plane)]
        pred = segment_slices(bundle.Seg, slices)
        gt = np.moveaxis(vol.labels, axis, 0)
        order = [axis] + [a for a in range(3) if a != axis]
        spacing = [vol.spacing[o] for o in order]
        results.append(volume_metrics(pred, gt, spacing, names, volume_id=vol.id))
    return results


# ---------------------------------------------------------------------------
# cross-validation aggregation
# ---------------------------------------------------------------------------

@dataclass
class CvReport:
    """Per-class and average mean +/- population std across folds."""

    class_names: list
    fold_dice: np.ndarray           # n_folds x n_classes
    fold_assd: np.ndarray           # n_folds x n_classes, NaN where undefined
    undefined_counts: dict          # class name -> volumes with undefined assd
    single_fold: bool = False

    def _stats(self, table):
        per_mean = np.nanmean(table, axis=0)
        per_std = np.sqrt(np.nanmean((table - per_mean) ** 2, axis=0))
        avg_per_fold = np.nanmean(table, axis=1)
        avg_mean = float(np.nanmean(avg_per_fold))
        avg_std = float(np.sqrt(np.nanmean((avg_per_fold - avg_mean) ** 2)))
        return per_mean, per_std, avg_mean, avg_std

    def rows(self):
        """(metric, class name, mean, std) tuples including the avg column."""
        out = []
        for metric, table, scale in (("dice", self.fold_dice, 100.0),
                                     ("assd_mm", self.fold_assd, 1.0)):
            with np.errstate(invalid="ignore"):
                per_mean, per_std, avg_mean, avg_std = self._stats(table * scale)
            for name, m, s in zip(self.class_names, per_mean, per_std):
                out.append((metric, name, float(m), float(s)))
            out.append((metric, "avg", avg_mean, avg_std))
        return out

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "class", "mean", "std", "n_undefined"])
            for metric, name, m, s in self.rows():
                n_undef = self.undefined_counts.get(name, 0) if metric == "assd_mm" else 0
                writer.writerow([metric, name,
                                 "" if math.isnan(m) else f"{m:.6f}",
                                 "" if math.isnan(s) else f"{s:.6f}", n_undef])

    def to_text(self) -> str:
        cols = self.class_names + ["avg"]
        rows = self.rows()

        def cell(metric, name):
            for m, n, mean, std in rows:
                if m == metric and n == name:
                    if math.isnan(mean):
                        return "-"
                    return f"{mean:.2f}±{std:.2f}"
            return "-"

        width = max(12, max(len(c) for c in cols) + 2)
        header = "metric".ljust(10) + "".join(c.rjust(width) for c in cols)
        lines = [header, "-" * len(header)]
        for metric, label in (("dice", "dice%"), ("assd_mm", "assd(mm)")):
            lines.append(label.ljust(10) + "".join(cell(metric, c).rjust(width) for c in cols))
        if self.undefined_counts:
            total = sum(self.undefined_counts.values())
            if total:
                lines.append(f"(assd undefined for {total} class-volume pairs, "
                             f"excluded from the means)")
        if self.single_fold:
            lines.append("(single fold: std is 0 by construction)")
        return "\n".join(lines)


def aggregate_cv(fold_results) -> CvReport:
    """Aggregate per-volume metrics: mean over volumes within each fold, then
    mean +/- population std across folds. Undefined ASSD values are excluded
    with their count reported."""
    if not fold_results:
        raise ValueError("need at least one fold")
    class_names = fold_results[0][0].class_names
    n_folds, n_classes = len(fold_results), len(class_names)
    fold_dice = np.zeros((n_folds, n_classes))
    fold_assd = np.full((n_folds, n_classes), np.nan)
    undefined = {name: 0 for name in class_names}
    for f, fold in enumerate(fold_results):
        for c, name in enumerate(class_names):
            fold_dice[f, c] = float(np.mean([vm.dice[name] for vm in fold]))
            vals = [vm.assd_mm[name] for vm in fold]
            defined = [v for v in vals if is_defined(v)]
            undefined[name] += len(vals) - len(defined)
            if defined:
                fold_assd[f, c] = float(np.mean(defined))
    return CvReport(class_names=list(class_names), fold_dice=fold_dice,
                    fold_assd=fold_assd, undefined_counts=undefined,
                    single_fold=(n_folds == 1))
