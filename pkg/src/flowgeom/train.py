"""Two-stage training loop: gradient evaluation on per-sequence tapes,
deterministic batch scheduling, clipping, cosine step-size decay, periodic
evaluation, and checkpointing.

Stage 1 binds only flow-head parameters as trainable (backbone frozen);
stage 2 unfreezes everything.  Per-step gradients are summed in a fixed
sequence order so repeated seed-pinned runs are bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, config_hash
from .losses import total_loss
from .metrics import (aggregate, flow_metrics, point_metrics, pose_accuracy,
                      rpe_ate, sequence_row, PoseMetricReport)
from .model import Model, ModelConfig
from .synth import SequenceSample
from .tensor import Tape


class NumericalFailure(RuntimeError):
    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class Optimizer:
    """Momentum-accumulator gradient descent ('sgdm') or Adam, with linear
    warmup into cosine step-size decay."""

    def __init__(self, cfg, total_steps: int):
        self.cfg = cfg
        self.total_steps = max(total_steps, 1)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def lr_at(self, step: int) -> float:
        base = self.cfg.lr
        if self.cfg.warmup_steps and step < self.cfg.warmup_steps:
            return base * (step + 1) / self.cfg.warmup_steps
        span = max(self.total_steps - self.cfg.warmup_steps, 1)
        progress = min(max(step - self.cfg.warmup_steps, 0) / span, 1.0)
        return base * 0.5 * (1.0 + np.cos(np.pi * progress))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             step_idx: int) -> float:
        norm_sq = 0.0
        for g in grads.values():
            norm_sq += float(np.sum(g.astype(np.float64) ** 2))
        gnorm = float(np.sqrt(norm_sq))
        scale = 1.0
        if gnorm > self.cfg.clip_norm:
            scale = self.cfg.clip_norm / gnorm
        lr = self.lr_at(step_idx)
        self.t += 1
        for name in sorted(grads):
            g = grads[name] * scale
            if self.cfg.kind == "sgdm":
                m = self.m.get(name)
                m = g if m is None else self.cfg.momentum * m + g
                self.m[name] = m
                params[name] = (params[name] - lr * m).astype(np.float32)
            else:
                b1, b2 = self.cfg.momentum, self.cfg.beta2
                m = self.m.get(name, np.zeros_like(g))
                v = self.v.get(name, np.zeros_like(g))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.m[name], self.v[name] = m, v
                mh = m / (1 - b1 ** self.t)
                vh = v / (1 - b2 ** self.t)
                params[name] = (params[name]
                                - lr * mh / (np.sqrt(vh) + self.cfg.eps)).astype(np.float32)
        return gnorm


def _shuffled_cycle(n: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        yield from order.tolist()


class BatchSchedule:
    """Deterministic labeled/unlabeled interleave; the labeled stream depends
    only on (seed, n_labeled), so variants sharing a seed consume identical
    labeled sequences."""

    def __init__(self, n_labeled: int, n_unlabeled: int, seed: int):
        self._lab = _shuffled_cycle(n_labeled, np.random.default_rng(
            np.random.SeedSequence((seed, 0x1ab)))) if n_labeled else None
        self._unlab = _shuffled_cycle(n_unlabeled, np.random.default_rng(
            np.random.SeedSequence((seed, 0xdada)))) if n_unlabeled else None
        self.labeled_consumed: list[int] = []

    def draw(self, n_lab: int, n_unlab: int):
        lab = [next(self._lab) for _ in range(n_lab)] if self._lab else []
        unlab = [next(self._unlab) for _ in range(n_unlab)] if self._unlab else []
        self.labeled_consumed.extend(lab)
        return lab, unlab

    def labeled_hash(self) -> str:
        payload = np.asarray(self.labeled_consumed, dtype=np.int64).tobytes()
        return hashlib.sha256(payload).hexdigest()[:16]


def backbone_hash(model: Model) -> str:
    h = hashlib.sha256()
    flow_names = model.flow_param_names()
    for name in sorted(model.params):
        if name in flow_names:
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()[:16]


def _sample_pairs(n_views: int, k: int, rng: np.random.Generator):
    all_pairs = [(i, j) for i in range(n_views) for j in range(n_views) if i != j]
    if k >= len(all_pairs):
        return all_pairs
    idx = rng.choice(len(all_pairs), size=k, replace=False)
    return [all_pairs[i] for i in sorted(idx)]


class Trainer:
    def __init__(self, cfg: ExperimentConfig, labeled: list[SequenceSample],
                 unlabeled: list[SequenceSample], eval_set: list[SequenceSample],
                 out_dir, quiet: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.quiet = quiet
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)

        if cfg.train.use_labeled is not None:
            labeled = labeled[:cfg.train.use_labeled]
        if cfg.train.use_unlabeled is not None:
            unlabeled = unlabeled[:cfg.train.use_unlabeled]
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.eval_set = eval_set

        self.warnings: list[str] = []
        self.uses_flow = cfg.flow_head_kind() != "none"
        self.unlab_per_step = cfg.train.unlabeled_per_step
        if not self.uses_flow and self.unlab_per_step > 0:
            self.warnings.append("3d-sup ignores the unlabeled split")
            self.unlab_per_step = 0
        if self.uses_flow and not self.unlabeled:
            self.unlab_per_step = 0

        model_cfg_dict = dict(cfg.model.__dict__)
        model_cfg_dict["flow_head"] = cfg.flow_head_kind()
        self.model = Model(ModelConfig(**model_cfg_dict), seed=cfg.seed)
        total = cfg.train.head_only_steps + cfg.train.main_steps
        self.optimizer = Optimizer(cfg.optim, total)
        self.schedule = BatchSchedule(len(self.labeled), len(self.unlabeled), cfg.seed)
        self.pair_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x9a17)))

    # -- single-sequence gradient -------------------------------------------

    def _sequence_loss(self, sample: SequenceSample, trainable, pairs):
        tape = Tape(np.float32)
        want_flow = self.uses_flow and (not sample.labeled or self.cfg.train.flow_on_labeled)
        with_geom = sample.labeled or self.cfg.flow_head_kind() == "projective"
        preds, params = self.model.forward(tape, sample.images.astype(np.float32),
                                           trainable=trainable, with_geometry=with_geom)
        flow_out = None
        if want_flow:
            flow_out = self.model.flow(params, preds, pairs)
        total, report = total_loss(
            preds, sample, self.cfg.loss, self.cfg.loss_variant,
            flow_out, use_teacher_flow=not sample.labeled, supervise_3d=sample.labeled)
        grads = {}
        if total is not None and trainable:
            tape.backward(total)
            for name, leaf in params.items():
                if leaf.requires_grad:
                    grads[name] = leaf.grad
        return report, grads

    def _accumulate(self, into: dict, grads: dict, weight: float):
        for name, g in grads.items():
            if name in into:
                into[name] = into[name] + g * weight
            else:
                into[name] = g * weight

    # -- main loop ------------------------------------------------------------

    def run(self) -> dict:
        cfg = self.cfg
        t_cfg = cfg.train
        total_steps = t_cfg.head_only_steps + t_cfg.main_steps
        flow_names = self.model.flow_param_names()
        record = {
            "config": cfg.to_dict(),
            "config_hash": config_hash(cfg),
            "warnings": self.warnings,
            "eval_snapshots": [],
            "checkpoints": {},
        }
        log_path = self.out / "train_log.jsonl"
        log_f = open(log_path, "w")
        pre_stage1 = backbone_hash(self.model)

        try:
            for step in range(total_steps):
                stage = 1 if step < t_cfg.head_only_steps else 2
                trainable = (flow_names if stage == 1 else set(self.model.params))
                if stage == 1 and not flow_names:
                    trainable = set()

                lab_idx, unlab_idx = self.schedule.draw(
                    t_cfg.labeled_per_step if self.labeled else 0, self.unlab_per_step)
                batch = [self.labeled[i] for i in lab_idx]
                batch += [self.unlabeled[i] for i in unlab_idx]
                if not batch:
                    raise NumericalFailure("no training data available")
                pairs = _sample_pairs(batch[0].n_views, t_cfg.flow_pairs_per_step,
                                      self.pair_rng)

                grads: dict[str, np.ndarray] = {}
                reports = []
                for sample in batch:
                    report, g = self._sequence_loss(sample, trainable, pairs)
                    reports.append(report)
                    self._accumulate(grads, g, 1.0 / len(batch))

                terms = {}
                for rep in reports:
                    for name, val in rep.terms.items():
                        terms.setdefault(name, []).append(val)
                step_terms = {k: float(np.mean(v)) for k, v in sorted(terms.items())}
                step_total = float(np.sum([r.total for r in reports]) / len(batch))
                if not np.isfinite(step_total):
                    bad = [k for k, v in step_terms.items() if not np.isfinite(v)]
                    diag = {"step": step, "terms": step_terms,
                            "offending": bad, "reports": [r.to_json() for r in reports]}
                    with open(self.out / "diagnostics.json", "w") as f:
                        json.dump(diag, f, indent=1)
                    raise NumericalFailure(f"non-finite loss at step {step}", diag)

                gnorm = 0.0
                if grads:
                    gnorm = self.optimizer.step(self.model.params, grads, step)

                log_f.write(json.dumps({
                    "step": step, "stage": stage, "total": step_total,
                    "terms": step_terms, "grad_norm": gnorm,
                    "lr": self.optimizer.lr_at(step), "wall_time": time.time(),
                }) + "\n")

                boundary = (step + 1 == t_cfg.head_only_steps)
                if boundary:
                    post = backbone_hash(self.model)
                    record["stage1_backbone_hash"] = {"before": pre_stage1, "after": post}
                    ck = self.out / "ckpt_stage1"
                    self._save_ckpt(ck, step + 1)
                    record["checkpoints"]["stage1"] = str(ck)
                if t_cfg.checkpoint_every and (step + 1) % t_cfg.checkpoint_every == 0 \
                        and step + 1 != total_steps:
                    ck = self.out / f"ckpt_step{step + 1}"
                    self._save_ckpt(ck, step + 1)
                    record["checkpoints"][f"step{step + 1}"] = str(ck)
                if t_cfg.eval_every and (step + 1) % t_cfg.eval_every == 0 and self.eval_set:
                    rows = [evaluate_sample(self.model, s,
                                            max_points=t_cfg.eval_max_points)
                            for s in self.eval_set]
                    snap = aggregate(rows)
                    snap["step"] = step + 1
                    record["eval_snapshots"].append(snap)
                    if not self.quiet:
                        print(f"[{cfg.variant}] step {step + 1} "
                              f"total={step_total:.4f} RRA30={snap['RRA30']:.3f}")
        finally:
            log_f.close()

        if t_cfg.head_only_steps == 0:
            record["stage1_backbone_hash"] = {"before": pre_stage1, "after": pre_stage1}
        final = self.out / "ckpt_final"
        self._save_ckpt(final, total_steps)
        record["checkpoints"]["final"] = str(final)
        record["labeled_batch_hash"] = self.schedule.labeled_hash()

        if self.eval_set:
            rows = [evaluate_sample(self.model, s, max_points=t_cfg.eval_max_points)
                    for s in self.eval_set]
            record["final_metrics"] = aggregate(rows)
        with open(self.out / "run_record.json", "w") as f:
            json.dump(record, f, indent=1, sort_keys=True)
        return record

    def _save_ckpt(self, path, step: int):
        self.model.save(path, extra={
            "step": step,
            "variant": self.cfg.variant,
            "config_hash": config_hash(self.cfg),
            "image_size": self.cfg.model.image_size,
        })


# ---------------------------------------------------------------------------
# evaluation

def predict_sample(model: Model, sample: SequenceSample):
    """Deterministic forward pass returning numpy poses / pointmaps / flows."""
    tape = Tape(np.float32)
    preds, params = model.forward(tape, sample.images.astype(np.float32),
                                  trainable=set())
    poses = preds.poses()
    world = np.asarray(preds.world_pointmap().data, dtype=np.float64)
    flows = {}
    if model.config.flow_head != "none":
        out = model.flow(params, preds, sample.pairs())
        for pair, (flow, valid) in out.items():
            flows[pair] = (np.asarray(flow.data, dtype=np.float64), valid)
    return poses, world, flows


def evaluate_sample(model: Model | None, sample: SequenceSample,
                    max_points: int = 1024, gt_inject: bool = False) -> dict:
    """Metric row for one sequence; gt_inject scores the ground truth against
    itself (upper-bound sanity mode)."""
    if gt_inject:
        poses = sample.poses
        world = sample.pointmap_world
        flows = {pair: (sample.flows[pair], np.ones(sample.image_hw, dtype=bool))
                 for pair in sample.pairs()}
    else:
        poses, world, flows = predict_sample(model, sample)

    rra, rta, auc = pose_accuracy(poses, sample.poses)
    rpe_t, rpe_r, ate = rpe_ate(poses, sample.poses)
    pose_rep = PoseMetricReport(rra=rra, rta=rta, auc30=auc,
                                rpe_trans=rpe_t, rpe_rot=rpe_r, ate=ate)

    flat_valid = np.flatnonzero(sample.valid.reshape(-1))
    n_views = sample.n_views
    stride = max(1, int(np.ceil(len(flat_valid) / (max_points * n_views))))
    sel = flat_valid[::stride]
    pred_pts = world.reshape(-1, 3)[sel]
    gt_pts = sample.pointmap_world.reshape(-1, 3)[sel]
    geom_rep = point_metrics(pred_pts, gt_pts)

    flow_rep = None
    if flows:
        aepes, epes = [], []
        for pair, (flow, head_valid) in flows.items():
            v = (sample.covis[pair] > 0) & head_valid
            if not v.any():
                continue
            rep = flow_metrics(flow, sample.flows[pair], v)
            aepes.append(rep.aepe)
            epes.append(rep.epe5)
        if aepes:
            from .metrics import FlowMetricReport
            flow_rep = FlowMetricReport(aepe=float(np.mean(aepes)),
                                        epe5=float(np.mean(epes)))
    return sequence_row(pose_rep, geom_rep, flow_rep)
