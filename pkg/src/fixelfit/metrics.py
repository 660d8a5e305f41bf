"""Evaluation of fitted fiber populations against ground truth.

Angular comparisons are antipodally symmetric throughout: the distance
between two axes is arccos(|d1 . d2|). Detection counts use greedy
one-to-one matching within an angular tolerance, which for K <= 3 fibers
is indistinguishable from optimal assignment in practice.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import objective


@dataclass
class Peak:
    direction: np.ndarray
    fraction: float


# Detection defaults, reported alongside every metric.
F_DETECT = 0.05
ANGLE_TOL_DEG = 25.0
MERGE_DEG = 5.0


def angular_distance_deg(d1: np.ndarray, d2: np.ndarray) -> float:
    dot = abs(float(np.dot(d1, d2)))
    return float(np.degrees(np.arccos(min(1.0, dot))))


def extract_peaks_voxel(wm_fractions, directions, f_detect: float = F_DETECT,
                        merge_deg: float = MERGE_DEG) -> list[Peak]:
    """Detected peaks for one voxel: fibers at or above the fraction
    threshold, with near-duplicates (closer than merge_deg) merged into a
    single fraction-weighted peak. Sorted by descending fraction."""
    if not (0.0 < f_detect < 1.0):
        raise ValueError("f_detect must be in (0, 1)")
    f = np.asarray(wm_fractions, dtype=np.float64).reshape(-1)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    order = np.argsort(-f, kind="stable")
    peaks: list[Peak] = []
    for k in order:
        if f[k] < f_detect:
            continue
        dk = d[k] / max(np.linalg.norm(d[k]), 1e-12)
        merged = False
        for p in peaks:
            if angular_distance_deg(p.direction, dk) < merge_deg:
                # align signs before fraction-weighted averaging
                sign = 1.0 if np.dot(p.direction, dk) >= 0 else -1.0
                combined = p.direction * p.fraction + sign * dk * f[k]
                p.direction = combined / max(np.linalg.norm(combined), 1e-12)
                p.fraction += float(f[k])
                merged = True
                break
        if not merged:
            peaks.append(Peak(direction=dk, fraction=float(f[k])))
    peaks.sort(key=lambda p: -p.fraction)
    return peaks


def extract_peaks(wm_fractions: np.ndarray, directions: np.ndarray,
                  f_detect: float = F_DETECT, merge_deg: float = MERGE_DEG) -> list[list[Peak]]:
    """Peaks per voxel; spatial grids are flattened in C order."""
    k = directions.shape[-2]
    f = np.asarray(wm_fractions).reshape(-1, k)
    d = np.asarray(directions).reshape(-1, k, 3)
    return [extract_peaks_voxel(f[i], d[i], f_detect, merge_deg) for i in range(f.shape[0])]


def best_match_error(gt_dirs, pred_peaks: list[Peak]) -> float:
    """Mean over ground-truth fibers of the angle to the closest predicted
    peak, in degrees. NaN when there are no predicted peaks (the voxel is
    excluded from error averages and counted as a miss)."""
    gt = np.atleast_2d(np.asarray(gt_dirs, dtype=np.float64))
    if gt.shape[0] == 0:
        raise ValueError("ground truth must contain at least one fiber")
    if not pred_peaks:
        return float("nan")
    errs = [
        min(angular_distance_deg(g, p.direction) for p in pred_peaks)
        for g in gt
    ]
    return float(np.mean(errs))


def _greedy_matches(gt, peaks: list[Peak], angle_tol: float) -> int:
    """Number of one-to-one matches within angle_tol, assigned greedily in
    ascending angular-distance order."""
    pairs = []
    for i, g in enumerate(np.atleast_2d(gt)):
        for j, p in enumerate(peaks):
            a = angular_distance_deg(g, p.direction)
            if a <= angle_tol:
                pairs.append((a, i, j))
    pairs.sort(key=lambda t: (t[0], t[1], t[2]))
    used_g, used_p = set(), set()
    tp = 0
    for _, i, j in pairs:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        tp += 1
    return tp


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def detection_prf(gt_dirs_per_voxel, peaks_per_voxel, angle_tol: float = ANGLE_TOL_DEG):
    """Pooled precision/recall/F1 over voxels. Returns (p, r, f1, counts)."""
    if angle_tol <= 0:
        raise ValueError("angle_tol must be positive")
    counts = DetectionCounts()
    for gt, peaks in zip(gt_dirs_per_voxel, peaks_per_voxel):
        gt = np.atleast_2d(np.asarray(gt))
        tp = _greedy_matches(gt, peaks, angle_tol)
        counts.tp += tp
        counts.fn += gt.shape[0] - tp
        counts.fp += len(peaks) - tp
    return counts.precision, counts.recall, counts.f1, counts


def sigma_recovery(sigma_fit: float, sigma_true: float) -> float:
    """Relative error of the fitted noise level."""
    if sigma_true <= 0:
        raise ValueError("true sigma must be positive")
    return abs(sigma_fit - sigma_true) / sigma_true


def reconstruction_mse(y_hat, y, mask) -> float:
    """Mean squared residual over masked pairs; same computation as the
    MSE data term, exposed for reporting."""
    return float(objective.mse_loss(y_hat, y, mask))


@dataclass
class AngleGroupRow:
    label: str
    n_voxels: int
    mean_error_deg: float
    recall: float
    precision: float
    f1: float
    n_missed: int


def evaluate_against_truth(truth, peaks_per_voxel, angle_tol: float = ANGLE_TOL_DEG,
                           f_detect: float = F_DETECT) -> dict:
    """Per-angle and overall metrics table for a benchmark fit.

    Voxels with no detected peaks are excluded from error averages and
    reported as misses. The thresholds used are echoed into the report.
    """
    groups: dict[str, list[int]] = {}
    for i, ang in enumerate(truth.angles_deg):
        key = "single" if ang is None else f"{ang:g}"
        groups.setdefault(key, []).append(i)

    rows: list[AngleGroupRow] = []
    for label, idxs in groups.items():
        errs = [best_match_error(truth.directions[i], peaks_per_voxel[i]) for i in idxs]
        errs = np.asarray(errs)
        missed = int(np.isnan(errs).sum())
        p, r, f1, _ = detection_prf(
            [truth.directions[i] for i in idxs],
            [peaks_per_voxel[i] for i in idxs],
            angle_tol,
        )
        rows.append(AngleGroupRow(
            label=label,
            n_voxels=len(idxs),
            mean_error_deg=float(np.nanmean(errs)) if missed < len(idxs) else float("nan"),
            recall=r, precision=p, f1=f1, n_missed=missed,
        ))

    all_errs = np.asarray([
        best_match_error(truth.directions[i], peaks_per_voxel[i])
        for i in range(truth.n_voxels)
    ])
    p, r, f1, counts = detection_prf(truth.directions, peaks_per_voxel, angle_tol)
    return {
        "angle_tol_deg": angle_tol,
        "f_detect": f_detect,
        "overall": {
            "n_voxels": truth.n_voxels,
            "mean_error_deg": float(np.nanmean(all_errs)),
            "recall": r,
            "precision": p,
            "f1": f1,
            "n_missed": int(np.isnan(all_errs).sum()),
            "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
        },
        "per_angle": [row.__dict__ for row in rows],
    }


def write_metrics_json(report: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=1)


def write_metrics_csv(report: dict, path: str) -> None:
    """Flat per-angle CSV mirroring the JSON report."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["angle", "n_voxels", "mean_error_deg", "recall", "precision", "f1", "n_missed"])
        for row in report["per_angle"]:
            w.writerow([row["label"], row["n_voxels"], f"{row['mean_error_deg']:.4f}",
                        f"{row['recall']:.4f}", f"{row['precision']:.4f}",
                        f"{row['f1']:.4f}", row["n_missed"]])
        o = report["overall"]
        w.writerow(["overall", o["n_voxels"], f"{o['mean_error_deg']:.4f}",
                    f"{o['recall']:.4f}", f"{o['precision']:.4f}",
                    f"{o['f1']:.4f}", o["n_missed"]])
