"""Toy visual geometry network: patch encoder, alternating frame/global
multi-view transformer, camera/geometry heads, and three flow heads
(tracking, projective, factored).

Parameters live as plain float32 numpy arrays in ``Model.params``; each
forward pass binds them as leaves on a caller-supplied Tape, so independent
samples can run on independent tapes while sharing one parameter store.
Every parameter is initialized from its own named RNG stream, which keeps
the backbone initialization identical across model variants that differ
only in which heads exist.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .fga import read_fga, write_fga
from .geometry import Z_MIN, Intrinsics, Pose, pixel_grid, unproject
from .tensor import Tape, Tensor

FLOW_KINDS = ("factored", "tracking", "projective", "none")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8          # divisible by 4: the decoder upsamples 2x twice
    embed_dim: int = 128
    depth_pairs: int = 4         # frame/global block pairs (transformer depth = 2x this)
    n_heads: int = 4
    mlp_ratio: float = 2.0
    head_width: int = 64         # dense-decoder base channels
    flow_head: str = "factored"
    flow_agg_layers: int = 2     # trailing block-pair outputs fed to the flow head
    strict_target_only: bool = False  # factored fusion without source camera features
    corr_temperature: float = 0.1
    corr_dim: int = 64
    refine_dim: int = 16

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.patch_size % 4 != 0:
            raise ValueError("patch size must be divisible by 4")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed dim must be divisible by the head count")
        if self.flow_head not in FLOW_KINDS:
            raise ValueError(f"flow head must be one of {FLOW_KINDS}")
        if not (1 <= self.flow_agg_layers <= self.depth_pairs):
            raise ValueError("flow_agg_layers must lie in [1, depth_pairs]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class Predictions:
    """Per-view decoded quantities plus the latents the flow heads consume."""

    quats: Tensor            # (N,4) unit quaternions
    rots: Tensor             # (N,3,3)
    trans: Tensor            # (N,3)
    focal: Tensor            # (N,)
    pointmap_cam: Tensor | None   # (N,H,W,3)
    depth: Tensor | None     # (N,H,W)
    conf: Tensor | None      # (N,H,W)
    cam_feats: Tensor        # (N,D) final camera tokens
    g_agg: Tensor            # (N,P,D*agg) aggregated patch latents
    c_agg: Tensor            # (N,D*agg) aggregated camera latents
    image_hw: tuple

    def poses(self) -> list[Pose]:
        out = []
        for k in range(self.rots.shape[0]):
            R = np.asarray(self.rots.data[k], dtype=np.float64)
            u, _, vt = np.linalg.svd(R)
            out.append(Pose(u @ vt, np.asarray(self.trans.data[k], dtype=np.float64)))
        return out

    def intrinsics(self) -> list[Intrinsics]:
        h, w = self.image_hw
        return [Intrinsics(float(f), float(f), (w - 1) / 2.0, (h - 1) / 2.0)
                for f in self.focal.data]

    def world_pointmap(self) -> Tensor:
        """Camera-local pointmaps mapped through the predicted poses."""
        n = self.rots.shape[0]
        h, w = self.image_hw
        pc = T.reshape(self.pointmap_cam, (n, h * w, 3))
        shifted = pc - T.reshape(self.trans, (n, 1, 3))
        world = T.matmul(shifted, self.rots)      # row-vector form of R^T (x - t)
        return T.reshape(world, (n, h, w, 3))

    def centers(self) -> Tensor:
        """Camera centers -R^T t as an (N,3) tensor."""
        t3 = T.reshape(self.trans, (self.trans.shape[0], 1, 3))
        c = T.matmul(t3, self.rots)
        return T.reshape(c, (self.trans.shape[0], 3)) * (-1.0)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32)


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, np.ndarray] = {}
        self._build_params()
        # constants shared by all tapes
        s = config.image_size
        self._base_grid = pixel_grid(s, s).astype(np.float32)
        self._ray_grid = unproject(np.ones((s, s)), Intrinsics(
            0.8 * s, 0.8 * s, (s - 1) / 2.0, (s - 1) / 2.0)).astype(np.float32)
        g, p = config.grid, config.patch_size
        centers = np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"),
                           axis=-1).reshape(-1, 2)[:, ::-1]  # (P,2) as (x,y)
        self._patch_centers = (centers * p + (p - 1) / 2.0).astype(np.float32)
        self._upmat = _bilinear_upsample_matrix(g, s).astype(np.float32)
        self._conv_idx = _conv3x3_indices(s)

    # -- parameter construction -------------------------------------------

    def _rng_for(self, name: str) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((self.seed, zlib.crc32(name.encode())))))

    def _add_linear(self, name: str, fan_in: int, fan_out: int, zero: bool = False):
        if zero:
            self.params[f"{name}.w"] = np.zeros((fan_in, fan_out), dtype=np.float32)
        else:
            self.params[f"{name}.w"] = _linear_init(self._rng_for(name), fan_in, fan_out)
        self.params[f"{name}.b"] = np.zeros(fan_out, dtype=np.float32)

    def _add_ln(self, name: str, dim: int):
        self.params[f"{name}.g"] = np.ones(dim, dtype=np.float32)
        self.params[f"{name}.b"] = np.zeros(dim, dtype=np.float32)

    def _add_decoder(self, name: str, d_in: int, d_out: int):
        c0 = self.config.head_width
        c1, c2 = c0 // 2, c0 // 4
        cp = self.config.patch_size // 4
        self._add_linear(f"{name}.inp", d_in, cp * cp * c0)
        self._add_linear(f"{name}.up1", c0, 4 * c1)
        self._add_linear(f"{name}.up2", c1, 4 * c2)
        self._add_linear(f"{name}.out", c2, d_out, zero=True)

    def _build_params(self):
        cfg = self.config
        d = cfg.embed_dim
        hidden = int(d * cfg.mlp_ratio)
        patch_in = cfg.patch_size * cfg.patch_size * 3

        self._add_linear("embed", patch_in, d)
        self.params["pos"] = (0.02 * self._rng_for("pos").standard_normal(
            (cfg.n_patches, d))).astype(np.float32)
        self.params["cam_token"] = (0.02 * self._rng_for("cam_token").standard_normal(d)
                                    ).astype(np.float32)

        for layer in range(cfg.depth_pairs):
            for kind in ("f", "g"):
                base = f"trunk.{layer}.{kind}"
                self._add_ln(f"{base}.ln1", d)
                self._add_linear(f"{base}.qkv", d, 3 * d)
                self._add_linear(f"{base}.proj", d, d)
                self._add_ln(f"{base}.ln2", d)
                self._add_linear(f"{base}.mlp1", d, hidden)
                self._add_linear(f"{base}.mlp2", hidden, d)

        self._add_linear("cam.fc", d, d)
        self._add_linear("cam.out", d, 8, zero=True)

        self._add_decoder("point", d, 3)
        self._add_decoder("depthc", d, 2)

        agg = cfg.flow_agg_layers * d
        if cfg.flow_head == "factored":
            fuse_in = agg * (2 if cfg.strict_target_only else 3)
            self._add_linear("flow.fuse1", fuse_in, d)
            self._add_linear("flow.fuse2", d, d)
            self._add_decoder("flow.dec", d, 2)
        elif cfg.flow_head == "tracking":
            self._add_linear("flow.corr", agg, cfg.corr_dim)
            self._add_linear("flow.rfeat", agg, cfg.refine_dim)
            rc = cfg.refine_dim + 2
            self._add_linear("flow.conv1", 9 * rc, cfg.refine_dim)
            self._add_linear("flow.conv2", 9 * cfg.refine_dim, 2, zero=True)

    def flow_param_names(self) -> set[str]:
        return {k for k in self.params if k.startswith("flow.")}

    def bind(self, tape: Tape, trainable=None) -> dict[str, Tensor]:
        """Create tape leaves for all parameters.

        ``trainable``: None for everything, or a set of names; the rest are
        bound as constants (frozen: they receive no gradients).
        """
        bound = {}
        for name, value in self.params.items():
            grad = trainable is None or name in trainable
            bound[name] = tape.leaf(value, requires_grad=grad, name=name)
        return bound

    # -- forward pieces ------------------------------------------------------

    def _linear(self, p, name, x):
        return T.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]

    def _ln_affine(self, p, name, x):
        return T.layernorm(x) * p[f"{name}.g"] + p[f"{name}.b"]

    def _block(self, p, base, x):
        """Pre-LN transformer block over (B,T,D)."""
        cfg = self.config
        b, t, d = x.shape
        nh = cfg.n_heads
        dh = d // nh
        h = self._ln_affine(p, f"{base}.ln1", x)
        qkv = self._linear(p, f"{base}.qkv", h)
        q, k, v = qkv[:, :, :d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:]

        def heads(z):
            return T.transpose(T.reshape(z, (b, t, nh, dh)), (0, 2, 1, 3))

        att = T.attention(heads(q), heads(k), heads(v))
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, t, d))
        x = x + self._linear(p, f"{base}.proj", att)
        h2 = self._ln_affine(p, f"{base}.ln2", x)
        return x + self._linear(p, f"{base}.mlp2", T.gelu(self._linear(p, f"{base}.mlp1", h2)))

    def encode(self, p, images: Tensor) -> Tensor:
        """(N,H,W,3) images -> (N,P,D) patch tokens with positional encoding."""
        cfg = self.config
        n = images.shape[0]
        g, ps = cfg.grid, cfg.patch_size
        x = T.reshape(images, (n, g, ps, g, ps, 3))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (n, g * g, ps * ps * 3))
        return self._linear(p, "embed", x) + p["pos"]

    def multiview(self, p, tokens: Tensor, disable_global: bool = False) -> list[Tensor]:
        """Alternating frame-wise / global attention; returns one (N,1+P,D)
        snapshot per block pair (camera token at index 0)."""
        cfg = self.config
        n, pn, d = tokens.shape
        tape = tokens.tape
        ones = tape.constant(np.ones((n, 1, 1), dtype=tape.dtype))
        cam = ones * T.reshape(p["cam_token"], (1, 1, d))
        x = T.concat([cam, tokens], axis=1)
        t = pn + 1
        snapshots = []
        for layer in range(cfg.depth_pairs):
            x = self._block(p, f"trunk.{layer}.f", x)
            if not disable_global:
                x = T.reshape(x, (1, n * t, d))
            x = self._block(p, f"trunk.{layer}.g", x)
            x = T.reshape(x, (n, t, d))
            snapshots.append(x)
        return snapshots

    def camera_head(self, p, cam_feats: Tensor):
        """(N,D) camera tokens -> unit quaternion, R, t, focal."""
        cfg = self.config
        n = cam_feats.shape[0]
        h = T.gelu(self._linear(p, "cam.fc", T.layernorm(cam_feats)))
        out = self._linear(p, "cam.out", h)
        tape = cam_feats.tape
        qbase = tape.constant(np.array([[1.0, 0, 0, 0]], dtype=tape.dtype))
        q_raw = out[:, 0:4] + qbase
        q = q_raw / T.vecnorm(q_raw, axis=-1, keepdims=True)
        rot = _quat_to_matrix(q)
        trans = out[:, 4:7]
        focal = T.softplus(out[:, 7]) * float(cfg.image_size)
        return q, rot, trans, focal

    def _decode_dense(self, p, name, feats: Tensor) -> Tensor:
        """(B,P,Din) -> (B,H,W,out) via per-patch linear + two 2x upsamplings."""
        cfg = self.config
        b = feats.shape[0]
        g = cfg.grid
        cp = cfg.patch_size // 4
        c0 = cfg.head_width
        c1, c2 = c0 // 2, c0 // 4

        x = self._linear(p, f"{name}.inp", feats)
        x = _pixel_unshuffle(x, b, g, g, cp, c0)
        x = T.gelu(x)
        h = g * cp
        x = self._linear(p, f"{name}.up1", x)
        x = _pixel_unshuffle(x, b, h, h, 2, c1)
        x = T.gelu(x)
        h *= 2
        x = self._linear(p, f"{name}.up2", x)
        x = _pixel_unshuffle(x, b, h, h, 2, c2)
        x = T.gelu(x)
        return self._linear(p, f"{name}.out", x)

    def geometry_heads(self, p, g_final: Tensor):
        """Patch latents -> (camera-local pointmap, depth, confidence)."""
        tape = g_final.tape
        pm = self._decode_dense(p, "point", g_final)
        pm = pm + tape.constant(self._ray_grid[None])
        dc = self._decode_dense(p, "depthc", g_final)
        depth = T.softplus(dc[..., 0])
        conf = T.softplus(dc[..., 1]) + 1e-3
        return pm, depth, conf

    def forward(self, tape: Tape, images: np.ndarray, trainable=None,
                params=None, with_geometry: bool = True,
                disable_global: bool = False) -> tuple[Predictions, dict]:
        """Run the full network on (N,H,W,3) images.

        Returns (Predictions, bound-params).  ``with_geometry`` skips the
        dense decoders when only poses/latents are needed.
        """
        cfg = self.config
        p = params if params is not None else self.bind(tape, trainable)
        imgs = tape.constant(np.asarray(images, dtype=tape.dtype))
        tokens = self.encode(p, imgs)
        snaps = self.multiview(p, tokens, disable_global=disable_global)

        cam_feats = snaps[-1][:, 0, :]
        g_final = snaps[-1][:, 1:, :]
        agg = snaps[-cfg.flow_agg_layers:]
        g_agg = T.concat([s[:, 1:, :] for s in agg], axis=-1)
        c_agg = T.concat([s[:, 0, :] for s in agg], axis=-1)

        q, rot, trans, focal = self.camera_head(p, cam_feats)
        pm = depth = conf = None
        if with_geometry:
            pm, depth, conf = self.geometry_heads(p, g_final)
        preds = Predictions(
            quats=q, rots=rot, trans=trans, focal=focal,
            pointmap_cam=pm, depth=depth, conf=conf, cam_feats=cam_feats,
            g_agg=g_agg, c_agg=c_agg,
            image_hw=(cfg.image_size, cfg.image_size))
        return preds, p

    # -- flow heads ------------------------------------------------------

    def flow_factored(self, p, preds: Predictions, pairs: list) -> dict:
        """Decode flow i->j from source patch latents modulated by the
        target view's pooled camera latents (plus source camera latents,
        unless configured to the strict target-only form)."""
        cfg = self.config
        tape = preds.g_agg.tape
        n, pn, da = preds.g_agg.shape
        src = np.array([i for i, _ in pairs])
        dst = np.array([j for _, j in pairs])
        b = len(pairs)
        g_i = T.gather(preds.g_agg, src, axis=0)
        ones = tape.constant(np.ones((1, pn, 1), dtype=tape.dtype))
        c_j = T.reshape(T.gather(preds.c_agg, dst, axis=0), (b, 1, da)) * ones
        parts = [g_i]
        if not cfg.strict_target_only:
            c_i = T.reshape(T.gather(preds.c_agg, src, axis=0), (b, 1, da)) * ones
            parts.append(c_i)
        parts.append(c_j)
        fused = T.concat(parts, axis=-1)
        fused = T.gelu(self._linear(p, "flow.fuse1", fused))
        fused = T.gelu(self._linear(p, "flow.fuse2", fused))
        raw = self._decode_dense(p, "flow.dec", fused)
        flow = raw + tape.constant(self._base_grid[None])
        valid = {pr: np.ones((cfg.image_size, cfg.image_size), dtype=bool) for pr in pairs}
        return {pr: (flow[k], valid[pr]) for k, pr in enumerate(pairs)}

    def flow_tracking(self, p, preds: Predictions, pairs: list) -> dict:
        """Correlation + soft-argmax over target patch centers, upsampled and
        refined with two 3x3 convolutions."""
        cfg = self.config
        tape = preds.g_agg.tape
        s = cfg.image_size
        src = np.array([i for i, _ in pairs])
        dst = np.array([j for _, j in pairs])
        feats = self._linear(p, "flow.corr", preds.g_agg)           # (N,P,Dc)
        sq = T.sum_axes(feats * feats, axis=-1, keepdims=True)
        feats = feats * T.power(sq + 1e-8, -0.5)
        f_i = T.gather(feats, src, axis=0)
        f_j = T.gather(feats, dst, axis=0)
        corr = T.matmul(f_i, T.transpose(f_j, (0, 2, 1)))           # (B,P,P)
        w = T.softmax(corr * (1.0 / cfg.corr_temperature), axis=-1)
        centers = tape.constant(self._patch_centers)                # (P,2)
        coarse = T.matmul(w, centers)                               # (B,P,2)

        up = tape.constant(self._upmat)                             # (HW,P)
        dense = T.matmul(up, coarse)                                # (B,HW,2)
        rfeat = T.matmul(up, T.gather(self._linear(p, "flow.rfeat", preds.g_agg),
                                      src, axis=0))                 # (B,HW,cr)
        base = tape.constant(self._base_grid.reshape(1, -1, 2))
        disp = (dense - base) * (1.0 / s)
        x = T.concat([disp, rfeat], axis=-1)
        x = T.gelu(self._conv3x3(p, "flow.conv1", x))
        res = self._conv3x3(p, "flow.conv2", x)
        flow = T.reshape(dense + res * float(s), (len(pairs), s, s, 2))
        valid = {pr: np.ones((s, s), dtype=bool) for pr in pairs}
        return {pr: (flow[k], valid[pr]) for k, pr in enumerate(pairs)}

    def _conv3x3(self, p, name, x: Tensor) -> Tensor:
        """3x3 conv over (B,HW,C) flattened rasters with replicate padding."""
        b, hw, c = x.shape
        patches = T.gather(x, self._conv_idx, axis=1)   # (B, HW*9, C)
        patches = T.reshape(patches, (b, hw, 9 * c))
        return self._linear(p, name, patches)

    def flow_projective(self, p, preds: Predictions, pairs: list) -> dict:
        """Explicit flow: project view-i predicted world points through the
        predicted camera of view j; differentiable end to end."""
        cfg = self.config
        s = cfg.image_size
        world = T.reshape(preds.world_pointmap(), (preds.rots.shape[0], s * s, 3))
        out = {}
        for (i, j) in pairs:
            xw = world[i]
            r_j = preds.rots[j]
            cam = T.matmul(xw, T.transpose(r_j, (1, 0))) + T.reshape(preds.trans[j], (1, 3))
            z = cam[:, 2:3]
            z_safe = T.clamp(z, lo=Z_MIN)
            f = T.reshape(preds.focal[j], (1, 1))
            u = f * (cam[:, 0:1] / z_safe) + (s - 1) / 2.0
            v = f * (cam[:, 1:2] / z_safe) + (s - 1) / 2.0
            flow = T.reshape(T.concat([u, v], axis=-1), (s, s, 2))
            valid = (np.asarray(z.data) > Z_MIN).reshape(s, s)
            out[(i, j)] = (flow, valid)
        return out

    def flow(self, p, preds: Predictions, pairs: list, kind: str | None = None) -> dict:
        kind = kind or self.config.flow_head
        if kind == "factored":
            return self.flow_factored(p, preds, pairs)
        if kind == "tracking":
            return self.flow_tracking(p, preds, pairs)
        if kind == "projective":
            return self.flow_projective(p, preds, pairs)
        raise ValueError(f"no flow path for kind {kind!r}")

    # -- checkpoints -------------------------------------------------------

    def save(self, out_dir, extra: dict | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index = {}
        for name, value in sorted(self.params.items()):
            fname = name.replace(".", "_") + ".fga"
            write_fga(out / fname, value)
            index[name] = fname
        manifest = {"config": asdict(self.config), "seed": self.seed, "params": index}
        if extra:
            manifest.update(extra)
        with open(out / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)

    @staticmethod
    def load(ckpt_dir) -> "Model":
        ckpt = Path(ckpt_dir)
        with open(ckpt / "manifest.json") as f:
            manifest = json.load(f)
        cfg = ModelConfig(**manifest["config"])
        model = Model(cfg, seed=manifest.get("seed", 0))
        for name, fname in manifest["params"].items():
            expected = model.params[name].shape
            value = read_fga(ckpt / fname)
            if tuple(value.shape) != tuple(expected):
                raise ValueError(f"checkpoint param {name} has shape {value.shape}, "
                                 f"model expects {expected}")
            model.params[name] = value.astype(np.float32)
        return model

    @staticmethod
    def load_manifest(ckpt_dir) -> dict:
        with open(Path(ckpt_dir) / "manifest.json") as f:
            return json.load(f)


# ---------------------------------------------------------------------------
# helpers

def _quat_to_matrix(q: Tensor) -> Tensor:
    """(N,4) unit quaternions (w,x,y,z) -> (N,3,3) rotation matrices."""
    n = q.shape[0]
    w, x, y, z = q[:, 0:1], q[:, 1:2], q[:, 2:3], q[:, 3:4]
    two = 2.0
    r00 = 1.0 - two * (y * y + z * z)
    r01 = two * (x * y - w * z)
    r02 = two * (x * z + w * y)
    r10 = two * (x * y + w * z)
    r11 = 1.0 - two * (x * x + z * z)
    r12 = two * (y * z - w * x)
    r20 = two * (x * z - w * y)
    r21 = two * (y * z + w * x)
    r22 = 1.0 - two * (x * x + y * y)
    rows = T.concat([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=-1)
    return T.reshape(rows, (n, 3, 3))


def _pixel_unshuffle(x: Tensor, b: int, gh: int, gw: int, r: int, c: int) -> Tensor:
    """(B, gh*gw, r*r*c) or (B,gh,gw,r*r*c) -> (B, gh*r, gw*r, c)."""
    x = T.reshape(x, (b, gh, gw, r, r, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, gh * r, gw * r, c))


def _bilinear_upsample_matrix(grid: int, size: int) -> np.ndarray:
    """(size*size, grid*grid) interpolation weights from patch centers to pixels."""
    p = size // grid
    centers = np.arange(grid) * p + (p - 1) / 2.0
    out = np.zeros((size * size, grid * grid))
    coords = np.arange(size, dtype=np.float64)

    def weights(c):
        pos = np.clip((c - centers[0]) / p, 0.0, grid - 1.0)
        i0 = np.clip(np.floor(pos).astype(int), 0, grid - 2)
        frac = pos - i0
        return i0, frac

    i0x, fx = weights(coords)
    for yy in range(size):
        iy, fy = weights(np.array([coords[yy]]))
        iy, fy = int(iy[0]), float(fy[0])
        for xx in range(size):
            ix, fxx = int(i0x[xx]), float(fx[xx])
            row = yy * size + xx
            out[row, iy * grid + ix] += (1 - fy) * (1 - fxx)
            out[row, iy * grid + ix + 1] += (1 - fy) * fxx
            out[row, (iy + 1) * grid + ix] += fy * (1 - fxx)
            out[row, (iy + 1) * grid + ix + 1] += fy * fxx
    return out


def _conv3x3_indices(size: int) -> np.ndarray:
    """Flattened gather indices implementing 3x3 neighborhoods with replicate
    padding over a size x size raster: output (size*size*9,)."""
    ys, xs = np.mgrid[0:size, 0:size]
    idx = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yy = np.clip(ys + dy, 0, size - 1)
            xx = np.clip(xs + dx, 0, size - 1)
            idx.append(yy * size + xx)
    # (9,H,W) -> (H*W, 9) -> flat so that reshape(B,HW,9C) groups per pixel
    return np.stack(idx, axis=-1).reshape(-1)
