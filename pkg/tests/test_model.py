"""Network structure: encoder/transformer contracts, head decode conventions,
flow-head semantics, equivariance, and checkpoint round-trips."""

import numpy as np
import pytest

from flowgeom import tensor as T
from flowgeom import geometry as G
from flowgeom.model import Model, ModelConfig, _quat_to_matrix
from flowgeom.tensor import Tape, grad_check

TINY = ModelConfig(image_size=16, patch_size=8, embed_dim=32, depth_pairs=2,
                   n_heads=2, head_width=16, flow_head="factored")


def rand_images(n, size, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, size, size, 3)).astype(np.float32)


# ---------------------------------------------------------------------------
# config and encoder

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=60, patch_size=8).validate()
    with pytest.raises(ValueError):
        ModelConfig(patch_size=6).validate()
    with pytest.raises(ValueError):
        ModelConfig(flow_head="bogus").validate()
    with pytest.raises(ValueError):
        ModelConfig(depth_pairs=2, flow_agg_layers=3).validate()


def test_encode_token_count():
    m = Model(ModelConfig(image_size=64, patch_size=8), seed=0)
    tape = Tape(np.float32)
    p = m.bind(tape, trainable=set())
    tokens = m.encode(p, tape.constant(rand_images(2, 64)))
    assert tokens.shape == (2, 64, 128)


def test_encode_zero_image_gives_pos_plus_bias():
    m = Model(TINY, seed=0)
    tape = Tape(np.float64)
    p = m.bind(tape, trainable=set())
    tokens = m.encode(p, tape.constant(np.zeros((1, 16, 16, 3))))
    expected = m.params["pos"].astype(np.float64) + m.params["embed.b"].astype(np.float64)
    assert np.allclose(tokens.data[0], expected, atol=1e-12)


def test_encode_is_per_view():
    m = Model(TINY, seed=0)
    imgs = rand_images(3, 16, seed=1)
    tape = Tape(np.float64)
    p = m.bind(tape, trainable=set())
    out = np.asarray(m.encode(p, tape.constant(imgs)).data)
    perm = [2, 0, 1]
    out_p = np.asarray(m.encode(p, tape.constant(imgs[perm])).data)
    assert np.array_equal(out_p, out[perm])


# ---------------------------------------------------------------------------
# multiview transformer

def test_block_with_zero_weights_is_identity():
    m = Model(TINY, seed=0)
    for name in list(m.params):
        if name.startswith("trunk."):
            m.params[name] = np.zeros_like(m.params[name])
            if name.endswith("ln1.g") or name.endswith("ln2.g"):
                m.params[name] = np.ones_like(m.params[name])
    tape = Tape(np.float64)
    p = m.bind(tape, trainable=set())
    x = tape.constant(np.random.default_rng(2).normal(size=(2, 5, 32)))
    out = m._block(p, "trunk.0.f", x)
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_view_permutation_equivariance_64bit():
    m = Model(TINY, seed=3)
    # give the zero-init head outputs structure so the test is not vacuous
    rng = np.random.default_rng(4)
    for name in ("cam.out.w", "point.out.w", "depthc.out.w"):
        m.params[name] = (0.02 * rng.standard_normal(m.params[name].shape)
                          ).astype(np.float32)
    imgs = rand_images(3, 16, seed=5).astype(np.float64)
    tape = Tape(np.float64)
    preds, _ = m.forward(tape, imgs)
    perm = [1, 2, 0]
    tape2 = Tape(np.float64)
    preds_p, _ = m.forward(tape2, imgs[perm])
    for field in ("quats", "trans", "focal", "depth", "conf", "pointmap_cam"):
        a = np.asarray(getattr(preds, field).data)[perm]
        b = np.asarray(getattr(preds_p, field).data)
        assert np.max(np.abs(a - b)) < 1e-12, field
    assert np.max(np.abs(np.asarray(preds.g_agg.data)[perm]
                         - np.asarray(preds_p.g_agg.data))) < 1e-12


def test_disabling_global_attention_decouples_views():
    m = Model(TINY, seed=6)
    imgs = rand_images(2, 16, seed=7)
    imgs2 = imgs.copy()
    imgs2[1] = np.random.default_rng(8).uniform(0, 1, imgs2[1].shape)
    tape = Tape(np.float64)
    a, _ = m.forward(tape, imgs, disable_global=True)
    tape2 = Tape(np.float64)
    b, _ = m.forward(tape2, imgs2, disable_global=True)
    assert np.array_equal(np.asarray(a.g_agg.data)[0], np.asarray(b.g_agg.data)[0])
    assert not np.array_equal(np.asarray(a.g_agg.data)[1], np.asarray(b.g_agg.data)[1])


# ---------------------------------------------------------------------------
# heads

def test_camera_head_zero_features_decode_identity():
    m = Model(TINY, seed=9)
    tape = Tape(np.float64)
    p = m.bind(tape, trainable=set())
    q, rot, trans, focal = m.camera_head(p, tape.constant(np.zeros((3, 32))))
    assert np.allclose(q.data, [[1, 0, 0, 0]] * 3, atol=0)
    assert np.allclose(rot.data, np.stack([np.eye(3)] * 3), atol=0)
    assert np.allclose(trans.data, 0, atol=0)
    assert np.allclose(focal.data, np.log(2.0) * 16, atol=1e-12)  # softplus(0)*S


def test_camera_head_quaternion_always_unit():
    m = Model(TINY, seed=10)
    m.params["cam.out.w"] = np.random.default_rng(11).normal(
        size=m.params["cam.out.w"].shape).astype(np.float32)
    tape = Tape(np.float64)
    p = m.bind(tape, trainable=set())
    feats = np.random.default_rng(12).normal(size=(8, 32))
    q, rot, _, focal = m.camera_head(p, tape.constant(feats))
    norms = np.linalg.norm(q.data, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-6
    assert (np.asarray(focal.data) > 0).all()
    for R in np.asarray(rot.data):
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
        assert np.linalg.det(R) > 0


def test_quat_to_matrix_matches_scipy():
    from scipy.spatial.transform import Rotation
    rng = np.random.default_rng(13)
    q = rng.normal(size=(6, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    tape = Tape(np.float64)
    R = np.asarray(_quat_to_matrix(tape.constant(q)).data)
    ref = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()  # scipy uses xyzw
    assert np.max(np.abs(R - ref)) < 1e-12


def test_geometry_heads_shapes_and_bounds():
    m = Model(TINY, seed=14)
    rng = np.random.default_rng(15)
    for name in ("point.out.w", "depthc.out.w"):
        m.params[name] = rng.normal(size=m.params[name].shape).astype(np.float32)
    tape = Tape(np.float32)
    preds, _ = m.forward(tape, rand_images(2, 16, seed=16))
    assert preds.pointmap_cam.shape == (2, 16, 16, 3)
    assert preds.depth.shape == (2, 16, 16)
    assert np.asarray(preds.depth.data).min() > 0
    assert np.asarray(preds.conf.data).min() >= 1e-3


def test_camera_head_gradient_matches_finite_differences():
    m = Model(TINY, seed=17)
    gt = G.Pose(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
                np.array([0.1, -0.2, 0.3]))
    feats = np.random.default_rng(18).normal(size=(1, 32))

    def fn(xs):
        tape = xs[0].tape
        p = {"cam.fc.w": xs[0], "cam.fc.b": tape.constant(m.params["cam.fc.b"]),
             "cam.out.w": xs[1], "cam.out.b": tape.constant(m.params["cam.out.b"])}
        _, rot, trans, _ = m.camera_head(p, tape.constant(feats))
        tr = T.sum_axes(tape.constant(gt.rotation) * rot[0])
        ang = T.arccos((tr - 1.0) * 0.5)
        return ang + T.sum_axes((trans[0] - tape.constant(gt.translation)) ** 2.0)

    w_out = 0.1 * np.random.default_rng(19).normal(size=m.params["cam.out.w"].shape)
    res = grad_check(fn, [m.params["cam.fc.w"].astype(np.float64), w_out], step=1e-5)
    assert res.max_rel_err < 1e-4


def test_dense_decoder_gradient_on_tiny_grid():
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth_pairs=1,
                      n_heads=2, head_width=8, flow_head="none", flow_agg_layers=1)
    m = Model(cfg, seed=20)
    feats = np.random.default_rng(21).normal(size=(1, 4, 8))

    def fn(xs):
        tape = xs[0].tape
        p = {}
        for name, val in m.params.items():
            if name == "point.inp.w":
                p[name] = xs[0]
            elif name == "point.out.w":
                p[name] = xs[1]
            else:
                p[name] = tape.constant(val)
        out = m._decode_dense(p, "point", tape.constant(feats))
        return T.sum_axes(out * out)

    w_out = 0.3 * np.random.default_rng(22).normal(size=m.params["point.out.w"].shape)
    res = grad_check(fn, [m.params["point.inp.w"].astype(np.float64), w_out],
                     step=1e-5)
    assert res.max_rel_err < 1e-4


# ---------------------------------------------------------------------------
# flow heads

def _preds_with_latents(m, imgs, dtype=np.float64):
    tape = Tape(dtype)
    preds, params = m.forward(tape, imgs)
    return tape, preds, params


def test_factored_flow_shape_and_identity_at_init():
    m = Model(TINY, seed=23)
    tape, preds, params = _preds_with_latents(m, rand_images(2, 16, seed=24))
    out = m.flow_factored(params, preds, [(0, 1), (1, 0)])
    flow, valid = out[(0, 1)]
    assert flow.shape == (16, 16, 2)
    assert valid.all()
    # zero-init decoder -> flow starts at the identity map
    assert np.max(np.abs(np.asarray(flow.data) - G.pixel_grid(16, 16))) < 1e-9


def test_factored_flow_ignores_target_patch_latents():
    m = Model(TINY, seed=25)
    tape, preds, params = _preds_with_latents(m, rand_images(2, 16, seed=26))
    m.params["flow.dec.out.w"] = np.random.default_rng(27).normal(
        size=m.params["flow.dec.out.w"].shape).astype(np.float32)
    tape, preds, params = _preds_with_latents(m, rand_images(2, 16, seed=26))
    base = np.asarray(m.flow_factored(params, preds, [(0, 1)])[(0, 1)][0].data)

    # inject different target-view patch latents with identical camera latents
    g_mod = np.asarray(preds.g_agg.data).copy()
    g_mod[1] += np.random.default_rng(28).normal(size=g_mod[1].shape)
    preds.g_agg = preds.g_agg.tape.constant(g_mod)
    again = np.asarray(m.flow_factored(params, preds, [(0, 1)])[(0, 1)][0].data)
    assert np.array_equal(base, again)


def test_factored_strict_form_drops_source_camera_features():
    cfg = ModelConfig(**{**TINY.__dict__, "strict_target_only": True})
    m = Model(cfg, seed=29)
    agg = cfg.flow_agg_layers * cfg.embed_dim
    assert m.params["flow.fuse1.w"].shape[0] == 2 * agg


def test_tracking_flow_identical_views_peak_at_own_patch():
    cfg = ModelConfig(**{**TINY.__dict__, "flow_head": "tracking",
                         "corr_temperature": 1e-4})
    m = Model(cfg, seed=30)
    imgs = rand_images(1, 16, seed=31)
    imgs = np.concatenate([imgs, imgs])  # two identical views
    tape, preds, params = _preds_with_latents(m, imgs)
    flow, _ = m.flow_tracking(params, preds, [(0, 1)])[(0, 1)]
    # refinement is zero-init and the sharp soft-argmax picks each patch's
    # own center, so the dense field is the upsampled identity coarse map
    expected = (m._upmat.astype(np.float64) @ m._patch_centers.astype(np.float64)
                ).reshape(16, 16, 2)
    assert np.max(np.abs(np.asarray(flow.data) - expected)) < 0.05


def test_tracking_flow_one_hot_limit_hits_best_patch_center():
    cfg = ModelConfig(**{**TINY.__dict__, "flow_head": "tracking",
                         "corr_temperature": 1e-4})
    m = Model(cfg, seed=32)
    imgs = rand_images(2, 16, seed=33)
    tape, preds, params = _preds_with_latents(m, imgs)
    # one-hot limit: soft-argmax equals the argmax patch center exactly
    feats = np.asarray(T.matmul(preds.g_agg,
                                tape.constant(m.params["flow.corr.w"].astype(np.float64))
                                ).data) + m.params["flow.corr.b"].astype(np.float64)
    feats = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    corr = feats[0] @ feats[1].T
    best = corr.argmax(axis=1)
    coarse_expected = m._patch_centers[best].astype(np.float64)
    expected = (m._upmat.astype(np.float64) @ coarse_expected).reshape(16, 16, 2)
    flow, _ = m.flow_tracking(params, preds, [(0, 1)])[(0, 1)]
    assert np.max(np.abs(np.asarray(flow.data) - expected)) < 1e-3


def test_tracking_flow_gradient_through_correlation():
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth_pairs=1,
                      n_heads=2, head_width=8, flow_head="tracking",
                      corr_dim=6, refine_dim=4, corr_temperature=0.5,
                      flow_agg_layers=1)
    m = Model(cfg, seed=34)
    imgs = rand_images(2, 8, seed=35)
    target = np.random.default_rng(36).uniform(0, 8, size=(8, 8, 2))

    def fn(xs):
        tape = xs[0].tape
        p = {name: (xs[0] if name == "flow.corr.w" else tape.constant(val))
             for name, val in m.params.items()}
        preds, _ = m.forward(tape, imgs, params=p)
        flow, _ = m.flow_tracking(p, preds, [(0, 1)])[(0, 1)]
        return T.mean_axes((flow - tape.constant(target)) ** 2.0)

    res = grad_check(fn, [m.params["flow.corr.w"].astype(np.float64)], step=1e-5)
    assert res.max_rel_err < 1e-4


def test_projective_flow_matches_exact_geometry_with_gt_injection():
    m = Model(ModelConfig(**{**TINY.__dict__, "flow_head": "projective"}), seed=37)
    from flowgeom.synth import GenConfig, generate_sequence
    sample = generate_sequence(GenConfig(height=16, width=16, n_views=2, seed=1), 1, 0)

    tape = Tape(np.float64)
    n = sample.n_views
    rots = tape.constant(np.stack([p.rotation for p in sample.poses]))
    trans = tape.constant(np.stack([p.translation for p in sample.poses]))
    quats = tape.constant(np.zeros((n, 4)))
    focal = tape.constant(np.array([k.fx for k in sample.intrinsics]))
    pm = tape.constant(sample.pointmap_cam)
    from flowgeom.model import Predictions
    preds = Predictions(quats=quats, rots=rots, trans=trans, focal=focal,
                        pointmap_cam=pm, depth=None, conf=None,
                        cam_feats=None, g_agg=None, c_agg=None,
                        image_hw=sample.image_hw)
    out = m.flow_projective({}, preds, [(0, 1)])
    flow, valid = out[(0, 1)]
    ref, ref_valid = G.projective_flow(sample.pointmap_world[0], sample.valid[0],
                                       sample.poses[1], sample.intrinsics[1])
    m_ok = valid & ref_valid
    assert m_ok.any()
    assert np.max(np.abs(np.asarray(flow.data)[m_ok] - ref[m_ok])) < 1e-9

    # i = j with self-consistent predictions: the identity map
    out_self = m.flow_projective({}, preds, [(0, 0)])
    flow_self, valid_self = out_self[(0, 0)]
    grid = G.pixel_grid(16, 16)
    assert np.max(np.abs(np.asarray(flow_self.data)[valid_self]
                         - grid[valid_self])) < 1e-6


def test_projective_flow_gradient_wrt_translation():
    from flowgeom.synth import GenConfig, generate_sequence
    from flowgeom.model import Predictions
    m = Model(ModelConfig(**{**TINY.__dict__, "flow_head": "projective"}), seed=38)
    sample = generate_sequence(GenConfig(height=16, width=16, n_views=2, seed=2), 2, 0)
    target = sample.flows[(0, 1)]
    covis = sample.covis[(0, 1)]

    def fn(xs):
        tape = xs[0].tape
        rots = tape.constant(np.stack([p.rotation for p in sample.poses]))
        preds = Predictions(
            quats=None, rots=rots, trans=xs[0],
            focal=tape.constant(np.array([k.fx for k in sample.intrinsics])),
            pointmap_cam=tape.constant(sample.pointmap_cam), depth=None,
            conf=None, cam_feats=None, g_agg=None, c_agg=None,
            image_hw=sample.image_hw)
        flow, _ = m.flow_projective({}, preds, [(0, 1)])[(0, 1)]
        diff = (flow - tape.constant(target)) * tape.constant(covis[..., None])
        return T.mean_axes(diff * diff)

    trans = np.stack([p.translation for p in sample.poses]) + 0.01
    res = grad_check(fn, [trans], step=1e-5)
    assert res.max_rel_err < 1e-4


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    m = Model(TINY, seed=39)
    rng = np.random.default_rng(40)
    for name in m.params:
        m.params[name] = rng.normal(size=m.params[name].shape).astype(np.float32)
    m.save(tmp_path / "ckpt", extra={"step": 7})
    back = Model.load(tmp_path / "ckpt")
    assert back.config == m.config
    for name in m.params:
        assert np.array_equal(back.params[name], m.params[name])
    assert Model.load_manifest(tmp_path / "ckpt")["step"] == 7


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    m = Model(TINY, seed=41)
    m.save(tmp_path / "ckpt")
    import json
    from flowgeom.fga import write_fga
    write_fga(tmp_path / "ckpt" / "pos.fga", np.zeros((3, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="shape"):
        Model.load(tmp_path / "ckpt")


def test_backbone_init_identical_across_variants():
    params = {}
    for kind in ("none", "factored", "tracking", "projective"):
        cfg = ModelConfig(**{**TINY.__dict__, "flow_head": kind})
        params[kind] = Model(cfg, seed=42).params
    base = params["none"]
    for kind, p in params.items():
        for name, val in base.items():
            assert np.array_equal(p[name], val), (kind, name)
