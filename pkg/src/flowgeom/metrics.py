"""Evaluation metrics: pose (RRA/RTA/AUC, RPE, ATE), geometry (accuracy,
completeness, Chamfer, MSE, F-score), and flow (AEPE, EPE@5px).

Pure numpy, float64, never part of any gradient path.  All pose metrics are
invariant to a global similarity transform of the predictions; geometry
metrics align predictions to ground truth with a similarity Umeyama first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DegenerateGeometry, Pose, geodesic_angle, relative_pose, umeyama_align

CSV_HEADER = ("variant,dataset,n_seq,RRA30,RTA30,AUC30,RPE_trans,RPE_rot,ATE,"
              "acc,comp,CD,MSE,f2,f5,AEPE,EPE5")

METRIC_COLUMNS = CSV_HEADER.split(",")[3:]


@dataclass
class PoseMetricReport:
    rra: dict            # threshold deg -> fraction in [0,1]
    rta: dict
    auc30: float
    rpe_trans: float
    rpe_rot: float       # degrees
    ate: float


@dataclass
class GeomMetricReport:
    accuracy: float
    completeness: float
    chamfer: float
    mse: float
    fscore: dict         # relative threshold -> value in [0,1]


@dataclass
class FlowMetricReport:
    aepe: float
    epe5: float


def _direction_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two directions; 90 deg when the prediction is (near) zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12:
        return 90.0
    cosv = np.clip(np.dot(a / na, b / nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosv)))


def _baseline_in_cam_i(pose_i: Pose, pose_j: Pose) -> np.ndarray:
    """Relative translation direction target: R_i (c_j - c_i)."""
    return pose_i.rotation @ (pose_j.center() - pose_i.center())


def pairwise_pose_errors(pred_poses: list[Pose], gt_poses: list[Pose]):
    """Rotation / translation-direction errors (degrees) over ordered pairs.

    Translation error is the angle between relative-translation (baseline)
    directions.  Pairs whose ground-truth baseline is below 1e-6 x scene
    scale have no defined direction and get trans_err = NaN (excluded from
    RTA).
    """
    n = len(gt_poses)
    if n < 2 or len(pred_poses) != n:
        raise ValueError("need >= 2 views and equal-length pose lists")
    centers = np.stack([p.center() for p in gt_poses])
    scale = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).mean())
    rot_errs, trans_errs = [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            # camera-to-camera relative rotations R_i R_j^T are invariant to
            # the (arbitrary) world gauge of either pose set
            rel_rot_gt = gt_poses[i].rotation @ gt_poses[j].rotation.T
            rel_rot_pred = pred_poses[i].rotation @ pred_poses[j].rotation.T
            rot_errs.append(np.degrees(geodesic_angle(rel_rot_gt, rel_rot_pred)))
            base_gt = _baseline_in_cam_i(gt_poses[i], gt_poses[j])
            if np.linalg.norm(base_gt) < 1e-6 * max(scale, 1e-12):
                trans_errs.append(np.nan)
            else:
                trans_errs.append(_direction_angle_deg(
                    _baseline_in_cam_i(pred_poses[i], pred_poses[j]), base_gt))
    return np.array(rot_errs), np.array(trans_errs)


def pose_accuracy(pred_poses, gt_poses, thresholds=(5.0, 15.0, 30.0)):
    """RRA@tau / RTA@tau over ordered pairs plus AUC@30.

    AUC@30 integrates, at 1-degree steps, the fraction of pairs whose
    max(rotation, translation) error falls below the threshold; pairs with
    an undefined translation direction contribute their rotation error only.
    """
    rot_errs, trans_errs = pairwise_pose_errors(pred_poses, gt_poses)
    defined = ~np.isnan(trans_errs)
    rra = {float(t): float(np.mean(rot_errs < t)) for t in thresholds}
    if defined.any():
        rta = {float(t): float(np.mean(trans_errs[defined] < t)) for t in thresholds}
    else:
        rta = {float(t): 0.0 for t in thresholds}
    joint = np.where(defined, np.maximum(rot_errs, np.where(defined, trans_errs, 0.0)),
                     rot_errs)
    steps = np.arange(1, 31, dtype=np.float64)
    auc = float(np.mean([np.mean(joint < s) for s in steps]))
    return rra, rta, auc


def rpe_ate(pred_poses: list[Pose], gt_poses: list[Pose]):
    """Similarity-aligned trajectory errors.

    ATE is the RMSE of aligned camera centers; RPE is computed over
    consecutive frame pairs (translation: norm of the s*-scaled relative
    translation difference; rotation: geodesic angle, degrees).
    """
    if len(pred_poses) != len(gt_poses):
        raise ValueError("trajectory lengths differ")
    if len(gt_poses) < 2:
        raise ValueError("need >= 2 frames")
    pred_c = np.stack([p.center() for p in pred_poses])
    gt_c = np.stack([p.center() for p in gt_poses])
    try:
        r_s, t_s, s = umeyama_align(pred_c, gt_c, with_scale=True)
    except DegenerateGeometry:
        r_s, s = np.eye(3), 1.0
        t_s = gt_c.mean(axis=0) - pred_c.mean(axis=0)
    aligned = s * (pred_c @ r_s.T) + t_s
    ate = float(np.sqrt(np.mean(np.sum((aligned - gt_c) ** 2, axis=1))))

    rpe_t, rpe_r = [], []
    for k in range(len(gt_poses) - 1):
        rel_rot_gt = gt_poses[k].rotation @ gt_poses[k + 1].rotation.T
        rel_rot_pred = pred_poses[k].rotation @ pred_poses[k + 1].rotation.T
        rpe_t.append(np.linalg.norm(s * _baseline_in_cam_i(pred_poses[k], pred_poses[k + 1])
                                    - _baseline_in_cam_i(gt_poses[k], gt_poses[k + 1])))
        rpe_r.append(np.degrees(geodesic_angle(rel_rot_gt, rel_rot_pred)))
    return float(np.mean(rpe_t)), float(np.mean(rpe_r)), ate


def point_metrics(pred_points: np.ndarray, gt_points: np.ndarray,
                  thresholds=(0.02, 0.05), align: bool = True) -> GeomMetricReport:
    """Paired-cloud geometry metrics.

    With align on, predictions are similarity-aligned to ground truth first.
    Scene scale is the mean ground-truth distance to the centroid; MSE is
    normalized by its square, and F-score thresholds are fractions of it.
    """
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("point clouds must be non-empty")
    if align:
        try:
            r_s, t_s, s = umeyama_align(pred, gt, with_scale=True)
            pred = s * (pred @ r_s.T) + t_s
        except DegenerateGeometry:
            pass
    scale = float(np.linalg.norm(gt - gt.mean(axis=0), axis=1).mean())
    scale = max(scale, 1e-12)

    d_pred_to_gt = cKDTree(gt).query(pred, k=1)[0]
    d_gt_to_pred = cKDTree(pred).query(gt, k=1)[0]
    acc = float(d_pred_to_gt.mean())
    comp = float(d_gt_to_pred.mean())
    mse = float(np.mean(np.sum((pred - gt) ** 2, axis=1))) / (scale * scale)

    fs = {}
    for th in thresholds:
        lim = th * scale
        precision = float(np.mean(d_pred_to_gt < lim))
        recall = float(np.mean(d_gt_to_pred < lim))
        fs[float(th)] = 0.0 if precision + recall == 0 else \
            2 * precision * recall / (precision + recall)
    return GeomMetricReport(accuracy=acc, completeness=comp,
                            chamfer=(acc + comp) / 2.0, mse=mse, fscore=fs)


def flow_metrics(pred_flow: np.ndarray, gt_flow: np.ndarray,
                 validity: np.ndarray) -> FlowMetricReport:
    """AEPE and the EPE@5px inlier rate over valid pixels."""
    v = np.asarray(validity, dtype=bool)
    if not v.any():
        raise ValueError("flow metrics need at least one valid pixel")
    err = np.linalg.norm(np.asarray(pred_flow, dtype=np.float64)
                         - np.asarray(gt_flow, dtype=np.float64), axis=-1)[v]
    return FlowMetricReport(aepe=float(err.mean()), epe5=float(np.mean(err < 5.0)))


# ---------------------------------------------------------------------------
# aggregation and the fixed CSV schema

def sequence_row(pose: PoseMetricReport, geom: GeomMetricReport,
                 flow: FlowMetricReport | None) -> dict:
    row = {
        "RRA30": pose.rra[30.0], "RTA30": pose.rta[30.0], "AUC30": pose.auc30,
        "RPE_trans": pose.rpe_trans, "RPE_rot": pose.rpe_rot, "ATE": pose.ate,
        "acc": geom.accuracy, "comp": geom.completeness, "CD": geom.chamfer,
        "MSE": geom.mse, "f2": geom.fscore[0.02], "f5": geom.fscore[0.05],
    }
    if flow is None:
        row["AEPE"] = float("nan")
        row["EPE5"] = float("nan")
    else:
        row["AEPE"] = flow.aepe
        row["EPE5"] = flow.epe5
    return row


def aggregate(rows: list[dict]) -> dict:
    """Unweighted per-metric mean over sequence rows, with the count."""
    if not rows:
        raise ValueError("nothing to aggregate")
    out = {"n_seq": len(rows)}
    for col in METRIC_COLUMNS:
        vals = [r[col] for r in rows]
        out[col] = float(np.mean(vals))
    return out


def format_csv(rows: list[dict]) -> str:
    """Render aggregate rows (with variant/dataset/n_seq) deterministically."""
    lines = [CSV_HEADER]
    for row in rows:
        cells = [str(row["variant"]), str(row["dataset"]), str(row["n_seq"])]
        for col in METRIC_COLUMNS:
            cells.append(f"{row[col]:.9g}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if lines[0] != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    out = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row = {"variant": cells[0], "dataset": cells[1], "n_seq": int(cells[2])}
        for col, cell in zip(METRIC_COLUMNS, cells[3:]):
            row[col] = float(cell)
        out.append(row)
    return out
