"""Exact projective geometry: poses, projection, alignment, flow, covisibility.

Everything here is plain numpy (no tape), pure and thread-safe.  The pose
convention, fixed project-wide, is world-to-camera: ``x_cam = R @ x_world + t``.
Depth maps store the Euclidean distance from the camera center to the surface
point (ray length, not the z coordinate); unprojection therefore multiplies
unit ray directions by depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_MIN = 1e-4          # points with camera z below this are invalid for projection
COVIS_Z_TOL = 0.02    # default relative depth-agreement tolerance


class DegenerateGeometry(ValueError):
    """Point configuration too degenerate for the requested estimate."""


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray     # (3,3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        R = self.rotation
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World points (...,3) -> camera-frame points."""
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self @ other as transforms: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @staticmethod
    def from_matrix(k: np.ndarray) -> "Intrinsics":
        k = np.asarray(k, dtype=np.float64)
        return Intrinsics(float(k[0, 0]), float(k[1, 1]), float(k[0, 2]), float(k[1, 2]))


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H,W,2) array of (x, y) pixel coordinates; x runs along columns."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def project(points_cam: np.ndarray, K: Intrinsics, z_min: float = Z_MIN):
    """Perspective-project camera-frame points (...,3) to pixels (...,2).

    Returns (pixels, valid).  Points with z <= z_min are marked invalid
    rather than raising; their pixel values are unusable.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2]
    valid = z > z_min
    zs = np.where(valid, z, 1.0)
    u = K.fx * points_cam[..., 0] / zs + K.cx
    v = K.fy * points_cam[..., 1] / zs + K.cy
    return np.stack([u, v], axis=-1), valid


def unproject(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Lift a distance-valued depth map (H,W) to camera-frame points (H,W,3)."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    grid = pixel_grid(h, w)
    dirs = np.stack([(grid[..., 0] - K.cx) / K.fx,
                     (grid[..., 1] - K.cy) / K.fy,
                     np.ones((h, w))], axis=-1)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs * depth[..., None]


def relative_pose(T_i: Pose, T_j: Pose) -> Pose:
    """Relative pose defined by T_i @ T_rel = T_j."""
    return T_i.inverse().compose(T_j)


def geodesic_angle(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Angle in [0, pi] of the relative rotation between two orientations."""
    tr = np.trace(np.asarray(R_a).T @ np.asarray(R_b))
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = False,
                  weights: np.ndarray | None = None):
    """Least-squares rigid (optionally similarity) alignment of paired points.

    Minimizes  sum_k w_k || s * R @ src_k + t - dst_k ||^2  over R in SO(3),
    t, and (if requested) s > 0.  Reflections are resolved by flipping the
    smallest singular direction so det(R) = +1.

    Returns (R, t) or (R, t, s).  Raises DegenerateGeometry when the weighted
    point cloud is too close to a point or a line (covariance rank < 2).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateGeometry(f"need >= 3 points, got {src.shape[0]}")
    if weights is None:
        w = np.ones(src.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be >= 0 and not all zero")
    wsum = w.sum()
    wn = w / wsum

    mu_s = wn @ src
    mu_d = wn @ dst
    src_c = src - mu_s
    dst_c = dst - mu_d
    cov = (dst_c * wn[:, None]).T @ src_c
    U, D, Vt = np.linalg.svd(cov)
    scale_ref = max(D[0], 1e-30)
    if D[1] / scale_ref < 1e-9:
        raise DegenerateGeometry(
            "source/target covariance has rank < 2 (points collinear or coincident)")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = float(np.sum(wn * np.sum(src_c * src_c, axis=1)))
        if var_s <= 0:
            raise DegenerateGeometry("source cloud has zero variance")
        s = float(np.trace(np.diag(D) @ S)) / var_s
        t = mu_d - s * (R @ mu_s)
        return R, t, s
    t = mu_d - R @ mu_s
    return R, t


def optimal_scale(pred: np.ndarray, gt: np.ndarray,
                  weights: np.ndarray | None = None) -> float:
    """Closed-form least-squares scale s* minimizing sum w ||s*pred - gt||^2.

    s* = sum w <pred, gt> / sum w ||pred||^2.  Falls back to 1.0 when the
    predictions have (numerically) zero energy, so early-training all-zero
    outputs do not divide by zero.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0:
        raise DegenerateGeometry("no valid points for scale estimation")
    if weights is None:
        w = np.ones(pred.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.sum() <= 0:
        raise DegenerateGeometry("all scale weights are zero")
    denom = float(np.sum(w * np.sum(pred * pred, axis=1)))
    if denom < 1e-18:
        return 1.0
    return float(np.sum(w * np.sum(pred * gt, axis=1))) / denom


def projective_flow(pointmap_world_i: np.ndarray, valid_i: np.ndarray,
                    T_j: Pose, K_j: Intrinsics, z_min: float = Z_MIN):
    """Project view-i world points into camera j: Eq. of the explicit flow path.

    Returns (flow, valid): flow holds absolute target-pixel coordinates
    (H,W,2); valid is false where the source pixel is invalid or the point
    lands behind camera j.
    """
    pts_cam_j = T_j.apply(np.asarray(pointmap_world_i, dtype=np.float64))
    flow, in_front = project(pts_cam_j, K_j, z_min)
    return flow, np.asarray(valid_i, dtype=bool) & in_front


def covisibility(pointmap_world_i: np.ndarray, valid_i: np.ndarray,
                 depth_j: np.ndarray, T_j: Pose, K_j: Intrinsics,
                 z_tol: float = COVIS_Z_TOL) -> np.ndarray:
    """Mask of view-i pixels whose 3D point is visible in view j.

    A pixel is covisible when its reprojection lands in-frame, in front of
    camera j, and the point's distance to camera j agrees with view j's
    depth at the (nearest-integer) landing pixel within relative z_tol.
    """
    depth_j = np.asarray(depth_j, dtype=np.float64)
    h, w = depth_j.shape
    pts = np.asarray(pointmap_world_i, dtype=np.float64)
    flow, ok = projective_flow(pts, valid_i, T_j, K_j)
    u = np.round(flow[..., 0]).astype(np.int64)
    v = np.round(flow[..., 1]).astype(np.int64)
    in_frame = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    ok = ok & in_frame
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    dist_to_j = np.linalg.norm(pts - T_j.center(), axis=-1)
    ref = depth_j[vc, uc]
    agree = np.abs(dist_to_j - ref) <= z_tol * np.maximum(ref, 1e-12)
    return (ok & agree).astype(np.float64)
