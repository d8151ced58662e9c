"""Training objectives: supervised camera/geometry losses for both backbone
variants plus the covisibility-weighted robust flow loss.

All losses are traced tensor expressions; ground truth enters as constants.
Alignment transforms (R*, t*, s*) are computed from detached predictions and
treated as constants during backpropagation: the first-order contribution of
the argmin vanishes at the optimum and differentiating through the SVD is
numerically fragile.

The rotation term uses the clamped arccos, which gives it a resolution floor
of about 4.5e-4 rad: exactly-equal rotations score that value, not 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import DegenerateGeometry, Pose, optimal_scale, relative_pose, umeyama_align
from .tensor import Tensor

VARIANTS = ("pi3", "vggt")


@dataclass
class LossWeights:
    lam_cam: float = 1.0
    lam_geo: float = 1.0
    lam_flow: float = 1.0
    lam_trans: float = 1.0
    alpha: float = 0.2           # log-confidence weight of the depth loss
    beta: float = 0.1            # origin-drift regularizer weight
    charbonnier_a: float = 0.5
    charbonnier_eps: float = 1e-3
    huber_delta: float = 0.1

    def validate(self):
        for name in ("lam_cam", "lam_geo", "lam_flow", "lam_trans", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0 < self.charbonnier_a <= 2):
            raise ValueError("charbonnier exponent must lie in (0, 2]")
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier eps must be > 0")


@dataclass
class LossReport:
    """Per-term values and the weighted total; total is the left-fold sum of
    weight * term in `order`, evaluated in tape dtype."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    order: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    total: float = 0.0

    def record(self, name, value, weight, source):
        self.terms[name] = value
        self.weights[name] = weight
        self.order.append(name)
        self.provenance[name] = source

    def to_json(self) -> dict:
        return {"terms": self.terms, "weights": self.weights, "total": self.total,
                "skipped": self.skipped, "provenance": self.provenance}


# ---------------------------------------------------------------------------
# individual objectives

def loss_flow_charbonnier(pred_flow: Tensor, target_flow: np.ndarray,
                          covis: np.ndarray, a: float = 0.5,
                          eps: float = 1e-3) -> Tensor | None:
    """Covisibility-weighted generalized Charbonnier on endpoint distances.

    l(r) = (r^2 + eps^2)^(a/2) - eps^a, exactly zero at r = 0; normalized by
    the covisibility mass.  Returns None when the mask is empty.
    """
    tape = pred_flow.tape
    c = np.asarray(covis, dtype=tape.dtype.type)
    csum = float(c.sum())
    if csum <= 0:
        return None
    diff = pred_flow - tape.constant(np.asarray(target_flow))
    d2 = T.sum_axes(diff * diff, axis=-1)
    e2 = tape.dtype.type(eps) * tape.dtype.type(eps)
    offset = float(np.power(e2, tape.dtype.type(a / 2.0)))
    ell = T.power(d2 + float(e2), a / 2.0) - offset
    return T.sum_axes(ell * c) * (1.0 / csum)


def loss_camera_relative(rots: Tensor, trans: Tensor, gt_poses: list[Pose],
                         huber_delta: float = 0.1, s_star: float = 1.0):
    """Pairwise relative-pose supervision over all ordered view pairs.

    Returns (rot_mean, trans_mean): geodesic rotation distance and a Huber
    penalty on the s*-scaled relative-translation error, each averaged over
    the N(N-1) ordered pairs.
    """
    n = len(gt_poses)
    if n < 2:
        raise ValueError("camera loss needs at least two views")
    tape = rots.tape
    rot_sum = None
    trans_sum = None
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            # camera-to-camera relative rotation R_i R_j^T: invariant to the
            # arbitrary world gauge of the predictions (R_i^T R_j is not)
            rel_rot_gt = gt_poses[i].rotation @ gt_poses[j].rotation.T
            r_rel = T.matmul(rots[i], T.transpose(rots[j], (1, 0)))
            # sum of the elementwise product equals Tr(R_gt^T R_pred)
            tr = T.sum_axes(tape.constant(rel_rot_gt) * r_rel)
            ang = T.arccos((tr - 1.0) * 0.5)
            rot_sum = ang if rot_sum is None else rot_sum + ang

            # baseline vector R_i (c_j - c_i) = t_i - R_i R_j^T t_j: the
            # meaningful relative translation under the world-to-camera
            # convention (T_i^-1 T_j's translation is jitter-sized for
            # inward-facing rigs)
            t_hat = T.reshape(trans[i], (1, 3)) - T.matmul(
                T.reshape(trans[j], (1, 3)),
                T.transpose(T.matmul(rots[i], T.transpose(rots[j], (1, 0))), (1, 0)))
            t_gt = gt_poses[i].translation - \
                gt_poses[i].rotation @ gt_poses[j].rotation.T @ gt_poses[j].translation
            resid = T.vecnorm(t_hat * float(s_star)
                              - tape.constant(t_gt.reshape(1, 3)), axis=-1)
            h = T.huber(resid, huber_delta)
            trans_sum = h if trans_sum is None else trans_sum + h
    k = 1.0 / (n * (n - 1))
    return rot_sum * k, T.reshape(trans_sum, ()) * k


def loss_point_aligned(pred_points: Tensor, gt_points: np.ndarray):
    """Mean L2 distance after an optimal rigid alignment of the predictions.

    pred_points/gt_points are (K,3); the alignment is a constant in backward.
    Returns None when the prediction cloud is degenerate.
    """
    pred_np = np.asarray(pred_points.data, dtype=np.float64)
    try:
        r_star, t_star = umeyama_align(pred_np, gt_points)
    except DegenerateGeometry:
        return None
    tape = pred_points.tape
    aligned = T.matmul(pred_points, tape.constant(r_star.T)) + tape.constant(t_star)
    return T.mean_axes(T.vecnorm(aligned - tape.constant(gt_points), axis=-1))


def loss_point_scale_l1(pred_cam: Tensor, gt_cam: np.ndarray, gt_depth: np.ndarray,
                        valid: np.ndarray):
    """Scale-invariant inverse-depth-weighted L1 on camera-local pointmaps.

    (1 / 3NHW) sum_i sum_u (1 / D_i(u)) ||s* pred - gt||_1 over valid pixels,
    with s* the closed-form least-squares scale (constant in backward).
    """
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return None
    mask = valid[..., None]
    pred_np = np.asarray(pred_cam.data, dtype=np.float64)
    s_star = optimal_scale(pred_np[valid], gt_cam[valid])
    tape = pred_cam.tape
    w = np.where(valid, 1.0 / np.maximum(gt_depth, 1e-9), 0.0)[..., None]
    resid = T.absolute(pred_cam * float(s_star) - tape.constant(gt_cam))
    total = T.sum_axes(resid * tape.constant(np.broadcast_to(w, pred_cam.shape).copy()))
    return total * (1.0 / (3.0 * np.prod(np.asarray(valid.shape))))


def loss_center(centers: Tensor, gt_centers: np.ndarray):
    """Mean L1 on camera centers after optimal rigid pre-alignment; falls
    back to translation-only alignment for near-collinear center sets."""
    pred_np = np.asarray(centers.data, dtype=np.float64)
    try:
        r_star, t_star = umeyama_align(pred_np, gt_centers)
    except DegenerateGeometry:
        r_star = np.eye(3)
        t_star = gt_centers.mean(axis=0) - pred_np.mean(axis=0)
    tape = centers.tape
    aligned = T.matmul(centers, tape.constant(r_star.T)) + tape.constant(t_star)
    l1 = T.sum_axes(T.absolute(aligned - tape.constant(gt_centers)), axis=-1)
    return T.mean_axes(l1)


def loss_point_rigid_l2(pred_points: Tensor, gt_points: np.ndarray):
    """Aligned L2 point loss on clouds pre-normalized by their mean distance
    to the centroid (the implicit scene scale); alignment constant in
    backward, normalization traced."""
    tape = pred_points.tape
    centroid = T.mean_axes(pred_points, axis=0, keepdims=True)
    scale = T.mean_axes(T.vecnorm(pred_points - centroid, axis=-1))
    if float(scale.data) < 1e-9:
        return None
    pred_n = pred_points * T.power(scale, -1.0)

    gt_centroid = gt_points.mean(axis=0)
    gt_scale = np.linalg.norm(gt_points - gt_centroid, axis=-1).mean()
    if gt_scale < 1e-12:
        return None
    gt_n = gt_points / gt_scale

    try:
        r_star, t_star = umeyama_align(np.asarray(pred_n.data, dtype=np.float64), gt_n)
    except DegenerateGeometry:
        return None
    aligned = T.matmul(pred_n, tape.constant(r_star.T)) + tape.constant(t_star)
    return T.mean_axes(T.vecnorm(aligned - tape.constant(gt_n), axis=-1))


def loss_reg(pred_points: Tensor):
    """Norm of the mean predicted point: keeps the cloud centered at the origin."""
    return T.vecnorm(T.mean_axes(pred_points, axis=0), axis=-1)


def loss_depth_conf(pred_depth: Tensor, conf: Tensor, gt_depth: np.ndarray,
                    valid: np.ndarray, alpha: float = 0.2):
    """Confidence-weighted depth regression, averaged over views and valid
    pixels: mean_u [ conf_u * |pred_u - gt_u| - alpha * log conf_u ].

    The per-pixel product form keeps the objective well posed (per-pixel
    optimum conf* = alpha / |residual|); a single whole-image norm against a
    per-pixel log bonus lets the confidence run away.
    """
    tape = pred_depth.tape
    n = pred_depth.shape[0]
    v = np.asarray(valid, dtype=tape.dtype.type).reshape(n, -1)
    counts = np.maximum(v.sum(axis=1), 1.0)
    resid = T.absolute(T.reshape(pred_depth - tape.constant(gt_depth), (n, -1)))
    cflat = T.reshape(conf, (n, -1))
    per_pixel = (cflat * resid - T.log(cflat) * alpha) * tape.constant(v)
    per_view = T.sum_axes(per_pixel, axis=1) * tape.constant(1.0 / counts)
    return T.mean_axes(per_view)


# ---------------------------------------------------------------------------
# assembly

def total_loss(preds, sample, weights: LossWeights, variant: str,
               flow_outputs: dict | None, use_teacher_flow: bool,
               supervise_3d: bool = True):
    """Combine the per-term objectives per the configured backbone variant.

    Labeled samples (supervise_3d) get the variant's camera/geometry terms;
    flow terms come from `flow_outputs` (pair -> (flow tensor, validity)),
    supervised against oracle or teacher correspondences.  Returns
    (total tensor or None, LossReport).
    """
    weights.validate()
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    report = LossReport()
    source = "labeled" if sample.labeled else "unlabeled"
    parts = []

    def push(name, tensor, weight):
        if tensor is None:
            report.skipped.append(name)
            return
        report.record(name, float(tensor.data), weight, source)
        parts.append(tensor * float(weight))

    if supervise_3d and sample.labeled:
        valid = sample.valid
        if variant == "pi3":
            pred_np = np.asarray(preds.pointmap_cam.data, dtype=np.float64)
            s_star = optimal_scale(pred_np[valid], sample.pointmap_cam[valid])
            rot, trans = loss_camera_relative(
                preds.rots, preds.trans, sample.poses,
                huber_delta=weights.huber_delta, s_star=s_star)
            push("rot", rot, weights.lam_cam)
            push("trans", trans, weights.lam_cam * weights.lam_trans)
            push("points", loss_point_scale_l1(
                preds.pointmap_cam, sample.pointmap_cam, sample.depth, valid),
                weights.lam_geo)
        else:
            rot, _ = loss_camera_relative(
                preds.rots, preds.trans, sample.poses,
                huber_delta=weights.huber_delta, s_star=1.0)
            push("rot", rot, weights.lam_cam)
            gt_centers = np.stack([p.center() for p in sample.poses])
            push("center", loss_center(preds.centers(), gt_centers), weights.lam_cam)
            world = preds.world_pointmap()
            n, h, w = sample.depth.shape
            mask = valid.reshape(-1)
            pred_pts = T.reshape(world, (n * h * w, 3))[mask]
            gt_pts = sample.pointmap_world.reshape(-1, 3)[mask]
            push("point", loss_point_rigid_l2(pred_pts, gt_pts), weights.lam_geo)
            push("reg", loss_reg(pred_pts), weights.lam_geo * weights.beta)
            push("depth", loss_depth_conf(preds.depth, preds.conf, sample.depth,
                                          valid, alpha=weights.alpha),
                 weights.lam_geo)

    if flow_outputs:
        per_pair = []
        for pair, (flow, head_valid) in flow_outputs.items():
            if use_teacher_flow:
                target = sample.teacher_flows[pair]
                mask = sample.teacher_valid[pair]
            else:
                target = sample.flows[pair]
                mask = sample.covis[pair]
            mask = mask * head_valid
            term = loss_flow_charbonnier(flow, target, mask,
                                         a=weights.charbonnier_a,
                                         eps=weights.charbonnier_eps)
            if term is not None:
                per_pair.append(term)
        if per_pair:
            flow_term = per_pair[0]
            for t in per_pair[1:]:
                flow_term = flow_term + t
            flow_term = flow_term * (1.0 / len(per_pair))
            push("flow", flow_term, weights.lam_flow)
        else:
            report.skipped.append("flow")

    if not parts:
        report.total = 0.0
        return None, report
    total = parts[0]
    for t in parts[1:]:
        total = total + t
    report.total = float(total.data)
    return total, report
