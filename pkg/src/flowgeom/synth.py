"""Procedural multi-view sequence generator with exact ground truth.

Scenes are collections of textured primitives (planes, spheres, boxes) inside
a large inward-facing dome, rendered by per-pixel ray casting.  A subset of
objects may follow per-frame rigid trajectories (dynamic scenes).  Every
sequence carries images, distance-valued depth, pointmaps, poses, intrinsics,
pairwise oracle flow and covisibility, plus a noisy "teacher" flow channel
standing in for an external 2D correspondence model.

Determinism: every sequence derives its own RNG stream from
(master seed, sequence index), so parallel and serial generation agree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fga import read_fga, write_fga
from .geometry import Intrinsics, Pose, covisibility, pixel_grid, projective_flow, unproject

BACKGROUND_DEPTH = 60.0
_RAY_TMIN = 1e-5


# ---------------------------------------------------------------------------
# textures

@dataclass
class Texture:
    """Multi-frequency sinusoids plus cell noise over 2D surface coordinates."""

    amps: np.ndarray      # (3, K) per-channel sinusoid amplitudes
    freqs: np.ndarray     # (3, K)
    angles: np.ndarray    # (3, K)
    phases: np.ndarray    # (3, K)
    cell_scale: float
    cell_amp: float
    cell_seed: int

    @staticmethod
    def sample(rng: np.random.Generator, freq_range) -> "Texture":
        k = 3
        return Texture(
            amps=rng.uniform(0.3, 1.0, size=(3, k)),
            freqs=rng.uniform(freq_range[0], freq_range[1], size=(3, k)),
            angles=rng.uniform(0, np.pi, size=(3, k)),
            phases=rng.uniform(0, 2 * np.pi, size=(3, k)),
            cell_scale=float(rng.uniform(2.0, 6.0)),
            cell_amp=float(rng.uniform(0.2, 0.8)),
            cell_seed=int(rng.integers(0, 2**31)),
        )

    def shade(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """(...,) surface coords -> (...,3) colors in [0,1]."""
        out = np.zeros(u.shape + (3,))
        cells = _hash01(np.floor(u * self.cell_scale), np.floor(v * self.cell_scale),
                        self.cell_seed)
        for c in range(3):
            val = np.zeros_like(u)
            for i in range(self.amps.shape[1]):
                a = self.angles[c, i]
                val += self.amps[c, i] * np.sin(
                    2 * np.pi * self.freqs[c, i] * (u * np.cos(a) + v * np.sin(a))
                    + self.phases[c, i])
            val += self.cell_amp * (cells - 0.5) * (c + 1)
            out[..., c] = 0.5 + 0.45 * np.tanh(val)
        return np.clip(out, 0.0, 1.0)


def _hash01(ix, iy, seed: int) -> np.ndarray:
    a = (ix.astype(np.int64) & 0xFFFFFFFF).astype(np.uint64)
    b = (iy.astype(np.int64) & 0xFFFFFFFF).astype(np.uint64)
    h = (a * np.uint64(73856093) ^ b * np.uint64(19349663) ^ np.uint64(seed)) & np.uint64(0xFFFFFFFF)
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5BD1E995) & np.uint64(0xFFFFFFFF)
    h = h ^ (h >> np.uint64(15))
    return h.astype(np.float64) / float(2**32)


# ---------------------------------------------------------------------------
# primitives

@dataclass
class PlanePrim:
    """Plane through `point` with unit `normal`; bounded when half extents set."""

    point: np.ndarray
    normal: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    half_u: float | None
    half_v: float | None
    texture: Texture

    def intersect(self, o, d):
        dn = d @ self.normal
        denom = np.where(np.abs(dn) < 1e-12, 1.0, dn)
        t = ((self.point - o) @ self.normal) / denom
        hit = (np.abs(dn) >= 1e-12) & (t > _RAY_TMIN)
        if self.half_u is not None:
            p = o + t[:, None] * d - self.point
            hit &= (np.abs(p @ self.e1) <= self.half_u) & (np.abs(p @ self.e2) <= self.half_v)
        return np.where(hit, t, np.inf)

    def surface_uv(self, pts):
        rel = pts - self.point
        return rel @ self.e1, rel @ self.e2

    def clearance(self, c) -> float:
        if self.half_u is None:
            return abs(float((c - self.point) @ self.normal))
        return float(np.linalg.norm(c - self.point)) - max(self.half_u, self.half_v)


@dataclass
class SpherePrim:
    center: np.ndarray
    radius: float
    texture: Texture

    def intersect(self, o, d):
        oc = o - self.center
        b = d @ oc
        disc = b * b - (oc @ oc - self.radius**2)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        t = np.where(t1 > _RAY_TMIN, t1, t2)
        return np.where(ok & (t > _RAY_TMIN), t, np.inf)

    def surface_uv(self, pts):
        rel = (pts - self.center) / self.radius
        theta = np.arctan2(rel[:, 1], rel[:, 0])
        phi = np.arccos(np.clip(rel[:, 2], -1.0, 1.0))
        return theta * self.radius, phi * self.radius

    def clearance(self, c) -> float:
        # distance to the surface; cameras may sit inside (dome) or outside
        return abs(float(np.linalg.norm(c - self.center)) - self.radius)


@dataclass
class BoxPrim:
    """Axis-aligned box around `center` (in its defining frame)."""

    center: np.ndarray
    half_extents: np.ndarray
    texture: Texture

    def intersect(self, o, d):
        rel = o - self.center
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t_lo = (-self.half_extents - rel) * inv
            t_hi = (self.half_extents - rel) * inv
        tn = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
        tf = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
        t = np.where(tn > _RAY_TMIN, tn, tf)
        hit = (tn <= tf) & (t > _RAY_TMIN)
        return np.where(hit, t, np.inf)

    def surface_uv(self, pts):
        rel = (pts - self.center) / self.half_extents
        face = np.argmax(np.abs(rel), axis=1)
        u = np.choose(face, [rel[:, 1], rel[:, 2], rel[:, 0]])
        v = np.choose(face, [rel[:, 2], rel[:, 0], rel[:, 1]])
        scale = np.choose(face, np.broadcast_to(self.half_extents[:, None], (3, len(face))))
        return u * scale + 3.0 * face, v * scale

    def clearance(self, c) -> float:
        return float(np.linalg.norm(c - self.center)) - float(np.linalg.norm(self.half_extents))


@dataclass
class ScenePrim:
    """A primitive plus, when dynamic, its object-to-world pose per frame.

    Static primitives (motion None) are defined directly in world coordinates.
    Dynamic primitives are defined in a local object frame; motion[f] maps
    object to world at frame f.
    """

    geom: object
    motion: list[Pose] | None = None

    @property
    def dynamic(self) -> bool:
        return self.motion is not None

    def intersect(self, origin, dirs, frame: int):
        if self.motion is None:
            return self.geom.intersect(origin, dirs)
        inv = self.motion[frame].inverse()
        o_loc = inv.apply(origin)
        d_loc = dirs @ inv.rotation.T
        return self.geom.intersect(o_loc, d_loc)

    def shade(self, pts_world, frame: int):
        pts = pts_world
        if self.motion is not None:
            pts = self.motion[frame].inverse().apply(pts_world)
        u, v = self.geom.surface_uv(pts)
        return self.geom.texture.shade(u, v)

    def clearance(self, camera_center, frame: int) -> float:
        c = camera_center
        if self.motion is not None:
            c = self.motion[frame].inverse().apply(camera_center)
        return self.geom.clearance(c)


@dataclass
class Scene:
    prims: list[ScenePrim]
    lookat: np.ndarray
    dynamic: bool

    def dynamic_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.prims) if p.dynamic]


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TeacherNoise:
    sigma_px: float = 1.0
    outlier_rate: float = 0.02
    outlier_mag_px: float = 12.0
    valid_dropout: float = 0.05

    def validate(self):
        if self.sigma_px < 0 or not (0 <= self.outlier_rate <= 1):
            raise ValueError("invalid teacher noise parameters")
        if not (0 <= self.valid_dropout <= 1):
            raise ValueError("invalid teacher dropout")


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    n_views: int = 4
    baseline: float = 0.9               # radial jitter of the camera ring, meters
    view_spread_deg: float = 100.0      # azimuth arc covered by the trajectory
    fraction_dynamic: float = 0.0
    speed_range: tuple = (0.10, 0.30)   # meters per frame for dynamic objects
    spin_range_deg: tuple = (2.0, 9.0)  # object rotation per frame
    texture_freq_range: tuple = (0.8, 3.5)
    n_objects_range: tuple = (3, 6)
    focal_range: tuple = (0.85, 1.15)   # focal length as a fraction of width
    teacher: TeacherNoise = field(default_factory=TeacherNoise)
    seed: int = 0

    def validate(self):
        if self.height <= 0 or self.width <= 0 or self.n_views < 2:
            raise ValueError("image size must be positive and n_views >= 2")
        for lo, hi in (self.speed_range, self.texture_freq_range,
                       self.focal_range, self.spin_range_deg):
            if lo > hi or lo < 0:
                raise ValueError("ranges must be non-empty and non-negative")
        if not (0 <= self.fraction_dynamic <= 1):
            raise ValueError("fraction_dynamic must lie in [0,1]")
        if self.n_objects_range[0] < 1 or self.n_objects_range[0] > self.n_objects_range[1]:
            raise ValueError("n_objects_range must be a non-empty positive range")
        self.teacher.validate()


# ---------------------------------------------------------------------------
# scene sampling

def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    K = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def sample_scene(config: GenConfig, rng: np.random.Generator) -> Scene:
    """Draw a textured scene; dynamic objects appear iff the per-scene draw
    falls under config.fraction_dynamic."""
    config.validate()
    lookat = np.array([0.0, 0.0, 0.9])
    prims: list[ScenePrim] = []

    dome = SpherePrim(center=lookat + np.array([0.0, 0.0, 0.1]), radius=11.0,
                      texture=Texture.sample(rng, (0.2, 0.9)))
    floor = PlanePrim(point=np.zeros(3), normal=np.array([0.0, 0.0, 1.0]),
                      e1=np.array([1.0, 0.0, 0.0]), e2=np.array([0.0, 1.0, 0.0]),
                      half_u=None, half_v=None,
                      texture=Texture.sample(rng, config.texture_freq_range))
    prims.append(ScenePrim(dome))
    prims.append(ScenePrim(floor))

    is_dynamic = bool(rng.random() < config.fraction_dynamic)
    n_obj = int(rng.integers(config.n_objects_range[0], config.n_objects_range[1] + 1))
    object_slots = []
    for _ in range(n_obj):
        pos = np.array([rng.uniform(-1.4, 1.4), rng.uniform(-1.4, 1.4),
                        rng.uniform(0.45, 1.9)])
        tex = Texture.sample(rng, config.texture_freq_range)
        if rng.random() < 0.5:
            geom = SpherePrim(center=np.zeros(3), radius=float(rng.uniform(0.25, 0.55)),
                              texture=tex)
        else:
            geom = BoxPrim(center=np.zeros(3),
                           half_extents=rng.uniform(0.18, 0.45, size=3), texture=tex)
        object_slots.append((geom, pos))

    n_dyn = int(rng.integers(1, min(2, n_obj) + 1)) if is_dynamic else 0
    dyn_ids = set(rng.choice(n_obj, size=n_dyn, replace=False).tolist()) if n_dyn else set()

    for k, (geom, pos) in enumerate(object_slots):
        if k in dyn_ids:
            speed = rng.uniform(*config.speed_range)
            vel_dir = rng.normal(size=3)
            vel_dir[2] *= 0.3
            vel_dir /= np.linalg.norm(vel_dir)
            spin_axis = rng.normal(size=3)
            spin = np.deg2rad(rng.uniform(*config.spin_range_deg))
            motion = []
            for f in range(config.n_views):
                R = _rotation_about(spin_axis, spin * f)
                motion.append(Pose(R, pos + speed * f * vel_dir))
            prims.append(ScenePrim(geom, motion=motion))
        else:
            # bake the position into world-frame geometry for exact static handling
            if isinstance(geom, SpherePrim):
                baked = SpherePrim(center=pos, radius=geom.radius, texture=geom.texture)
            else:
                baked = BoxPrim(center=pos, half_extents=geom.half_extents,
                                texture=geom.texture)
            prims.append(ScenePrim(baked))
    return Scene(prims=prims, lookat=lookat, dynamic=is_dynamic)


# ---------------------------------------------------------------------------
# rendering

def _camera_rays(pose: Pose, K: Intrinsics, h: int, w: int):
    grid = pixel_grid(h, w).reshape(-1, 2)
    dirs_cam = np.stack([(grid[:, 0] - K.cx) / K.fx,
                         (grid[:, 1] - K.cy) / K.fy,
                         np.ones(h * w)], axis=-1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    dirs_w = dirs_cam @ pose.rotation          # R^T applied row-wise
    return pose.center(), dirs_w


def render(scene: Scene, pose: Pose, K: Intrinsics, frame: int, h: int, w: int):
    """Ray-cast one frame.  Returns (image, depth, prim_id, valid).

    depth holds ray distance; background pixels get BACKGROUND_DEPTH with
    valid 0 and black color.  prim_id is -1 at background.
    """
    origin, dirs = _camera_rays(pose, K, h, w)
    n = h * w
    if not scene.prims:
        img = np.zeros((h, w, 3))
        return (img, np.full((h, w), BACKGROUND_DEPTH),
                np.full((h, w), -1, dtype=np.int64), np.zeros((h, w), dtype=bool))
    ts = np.full((len(scene.prims), n), np.inf)
    for idx, prim in enumerate(scene.prims):
        ts[idx] = prim.intersect(origin, dirs, frame)
    best = np.argmin(ts, axis=0)
    t = ts[best, np.arange(n)]
    valid = np.isfinite(t)
    depth = np.where(valid, t, BACKGROUND_DEPTH)

    image = np.zeros((n, 3))
    pts = origin + depth[:, None] * dirs
    for idx, prim in enumerate(scene.prims):
        mask = valid & (best == idx)
        if not mask.any():
            continue
        image[mask] = prim.shade(pts[mask], frame)
    prim_id = np.where(valid, best, -1)
    return (image.reshape(h, w, 3), depth.reshape(h, w),
            prim_id.reshape(h, w), valid.reshape(h, w))


# ---------------------------------------------------------------------------
# sequences

@dataclass
class SequenceSample:
    images: np.ndarray            # (N,H,W,3) in [0,1]
    depth: np.ndarray             # (N,H,W) ray distance
    pointmap_cam: np.ndarray      # (N,H,W,3) camera frame
    pointmap_world: np.ndarray    # (N,H,W,3)
    valid: np.ndarray             # (N,H,W) bool
    poses: list                   # world-to-camera Pose per view
    intrinsics: list              # Intrinsics per view
    flows: dict                   # (i,j) -> (H,W,2) absolute target coords
    covis: dict                   # (i,j) -> (H,W) weights in [0,1]
    teacher_flows: dict           # (i,j) -> (H,W,2)
    teacher_valid: dict           # (i,j) -> (H,W)
    labeled: bool
    dynamic: bool
    seed: int

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def image_hw(self):
        return self.images.shape[1], self.images.shape[2]

    def pairs(self):
        n = self.n_views
        return [(i, j) for i in range(n) for j in range(n) if i != j]


class TrajectoryError(RuntimeError):
    pass


def _look_at(position: np.ndarray, target: np.ndarray, roll: float = 0.0) -> Pose:
    """World-to-camera pose with +z toward target (x right, y down)."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up_w = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up_w)
    nr = np.linalg.norm(right)
    if nr < 1e-8:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    if roll != 0.0:
        cr, sr = np.cos(roll), np.sin(roll)
        R = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]]) @ R
    return Pose(R, -R @ position)


def _sample_trajectory(scene: Scene, config: GenConfig, rng: np.random.Generator):
    n = config.n_views
    for _ in range(50):
        base_az = rng.uniform(0, 2 * np.pi)
        arc = np.deg2rad(config.view_spread_deg)
        radius = rng.uniform(2.3, 2.3 + config.baseline)
        elev = np.deg2rad(rng.uniform(12.0, 38.0))
        poses = []
        ok = True
        for k in range(n):
            az = base_az + arc * (k / max(n - 1, 1)) + rng.normal(0, 0.02)
            r_k = radius + rng.normal(0, 0.05 * config.baseline)
            el_k = elev + rng.normal(0, 0.03)
            pos = scene.lookat + r_k * np.array(
                [np.cos(az) * np.cos(el_k), np.sin(az) * np.cos(el_k), np.sin(el_k)])
            target = scene.lookat + rng.normal(0, 0.1, size=3)
            pose = _look_at(pos, target, roll=rng.normal(0, 0.03))
            poses.append(pose)
            for prim in scene.prims:
                for f in range(n):
                    if prim.clearance(pose.center(), f) < 0.3:
                        ok = False
            if pose.center()[2] < 0.2:
                ok = False
        if ok:
            return poses
    raise TrajectoryError("could not place a camera trajectory clear of all primitives")


def make_sequence(scene: Scene, config: GenConfig, rng: np.random.Generator,
                  labeled: bool = True, seed: int = 0) -> SequenceSample:
    """Render an N-view sequence with complete ground truth channels."""
    config.validate()
    h, w = config.height, config.width
    n = config.n_views
    poses = _sample_trajectory(scene, config, rng)
    focal = rng.uniform(*config.focal_range) * w
    K = Intrinsics(fx=focal, fy=focal, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)
    intrinsics = [K] * n

    images = np.zeros((n, h, w, 3))
    depth = np.zeros((n, h, w))
    valid = np.zeros((n, h, w), dtype=bool)
    prim_ids = np.zeros((n, h, w), dtype=np.int64)
    for i in range(n):
        images[i], depth[i], prim_ids[i], valid[i] = render(scene, poses[i], K, i, h, w)

    pointmap_cam = np.stack([unproject(depth[i], K) for i in range(n)])
    pointmap_world = np.stack([poses[i].inverse().apply(pointmap_cam[i]) for i in range(n)])

    dyn = scene.dynamic_indices()
    flows, covis = {}, {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            pts = pointmap_world[i]
            if dyn:
                pts = pts.copy()
                for d_idx in dyn:
                    mask = prim_ids[i] == d_idx
                    if mask.any():
                        prim = scene.prims[d_idx]
                        move = prim.motion[j].compose(prim.motion[i].inverse())
                        pts[mask] = move.apply(pts[mask])
            flow, fvalid = projective_flow(pts, valid[i], poses[j], K)
            cmask = covisibility(pts, valid[i], depth[j], poses[j], K)
            flow = np.where(fvalid[..., None], flow, 0.0)
            flows[(i, j)] = flow
            covis[(i, j)] = cmask

    sample = SequenceSample(
        images=images, depth=depth, pointmap_cam=pointmap_cam,
        pointmap_world=pointmap_world, valid=valid, poses=poses,
        intrinsics=intrinsics, flows=flows, covis=covis,
        teacher_flows={}, teacher_valid={}, labeled=labeled,
        dynamic=scene.dynamic, seed=seed)
    add_teacher_flow(sample, config.teacher, rng)

    if not scene.dynamic:
        for (i, j), flow in sample.flows.items():
            ref, _ = projective_flow(pointmap_world[i], valid[i], poses[j], K)
            mask = covis[(i, j)] > 0
            assert np.array_equal(flow[mask], ref[mask]), \
                "static oracle flow must equal projective flow of ground truth"
    return sample


def add_teacher_flow(sample: SequenceSample, noise: TeacherNoise,
                     rng: np.random.Generator) -> None:
    """Simulate an external 2D flow teacher: oracle + Gaussian noise + sparse
    gross outliers; validity = oracle covisibility with random dropout."""
    h, w = sample.image_hw
    for key, flow in sample.flows.items():
        t_flow = flow + rng.normal(0.0, noise.sigma_px, size=flow.shape)
        if noise.outlier_rate > 0:
            hit = rng.random((h, w)) < noise.outlier_rate
            jump = rng.uniform(-noise.outlier_mag_px, noise.outlier_mag_px, size=(h, w, 2))
            t_flow = np.where(hit[..., None], t_flow + jump, t_flow)
        t_val = sample.covis[key].copy()
        if noise.valid_dropout > 0:
            keep = rng.random((h, w)) >= noise.valid_dropout
            t_val = t_val * keep
        sample.teacher_flows[key] = t_flow
        sample.teacher_valid[key] = t_val


# ---------------------------------------------------------------------------
# on-disk layout (FGA1 blobs + manifest.json per sequence directory)

def save_sequence(sample: SequenceSample, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = sample.image_hw
    manifest = {
        "format": "FGA1",
        "height": h,
        "width": w,
        "n_views": sample.n_views,
        "labeled": bool(sample.labeled),
        "dynamic": bool(sample.dynamic),
        "seed": int(sample.seed),
        "background_depth": BACKGROUND_DEPTH,
        "pairs": [[i, j] for (i, j) in sorted(sample.flows.keys())],
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    write_fga(out / "images.fga", sample.images)
    write_fga(out / "depth.fga", sample.depth)
    write_fga(out / "pointmap_world.fga", sample.pointmap_world)
    write_fga(out / "poses.fga", np.stack([p.matrix() for p in sample.poses]))
    write_fga(out / "intrinsics.fga", np.stack([k.matrix() for k in sample.intrinsics]))
    for (i, j) in sample.flows:
        write_fga(out / f"flow_{i}_{j}.fga", sample.flows[(i, j)])
        write_fga(out / f"covis_{i}_{j}.fga", sample.covis[(i, j)])
        write_fga(out / f"teacher_flow_{i}_{j}.fga", sample.teacher_flows[(i, j)])
        write_fga(out / f"teacher_valid_{i}_{j}.fga", sample.teacher_valid[(i, j)])


def load_sequence(seq_dir) -> SequenceSample:
    seq = Path(seq_dir)
    with open(seq / "manifest.json") as f:
        manifest = json.load(f)
    images = read_fga(seq / "images.fga").astype(np.float64)
    depth = read_fga(seq / "depth.fga").astype(np.float64)
    pointmap_world = read_fga(seq / "pointmap_world.fga").astype(np.float64)
    pose_mats = read_fga(seq / "poses.fga").astype(np.float64)
    intr = read_fga(seq / "intrinsics.fga").astype(np.float64)
    poses, intrinsics = [], []
    for m in pose_mats:
        # re-orthonormalize: float32 storage erodes the orthonormality invariant
        u, _, vt = np.linalg.svd(m[:3, :3])
        poses.append(Pose(u @ vt, m[:3, 3]))
    for k in intr:
        intrinsics.append(Intrinsics.from_matrix(k))
    far = manifest.get("background_depth", BACKGROUND_DEPTH)
    valid = depth < 0.5 * far
    n = manifest["n_views"]
    pointmap_cam = np.stack([unproject(depth[i], intrinsics[i]) for i in range(n)])
    flows, covis, tflows, tvalid = {}, {}, {}, {}
    for i, j in manifest["pairs"]:
        key = (i, j)
        flows[key] = read_fga(seq / f"flow_{i}_{j}.fga").astype(np.float64)
        covis[key] = read_fga(seq / f"covis_{i}_{j}.fga").astype(np.float64)
        tflows[key] = read_fga(seq / f"teacher_flow_{i}_{j}.fga").astype(np.float64)
        tvalid[key] = read_fga(seq / f"teacher_valid_{i}_{j}.fga").astype(np.float64)
    return SequenceSample(
        images=images, depth=depth, pointmap_cam=pointmap_cam,
        pointmap_world=pointmap_world, valid=valid, poses=poses,
        intrinsics=intrinsics, flows=flows, covis=covis,
        teacher_flows=tflows, teacher_valid=tvalid,
        labeled=bool(manifest["labeled"]), dynamic=bool(manifest["dynamic"]),
        seed=int(manifest["seed"]))


def sequence_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent per-sequence stream so generation order never matters."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((master_seed, index))))


def generate_sequence(config: GenConfig, master_seed: int, index: int,
                      labeled: bool = True) -> SequenceSample:
    rng = sequence_rng(master_seed, index)
    scene = sample_scene(config, rng)
    return make_sequence(scene, config, rng, labeled=labeled, seed=master_seed)
