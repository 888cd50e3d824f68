"""Single-experiment runner: teacher training, student (KD) training, eval.

Training is single-threaded and fully seeded; identical configs produce
identical results (wall-clock fields aside).  A shared ``TeacherAssets``
object caches frozen-teacher forwards per scene so suite cells reuse them.
"""

from __future__ import annotations

import json
import os
import time
from types import SimpleNamespace

import numpy as np

from .. import nn
from ..detector import Detector, DetectorConfig, build, detection_loss
from ..efficiency import cpr_report, profile
from ..evalmetrics import decode, mean_average_precision, nms
from ..kd import (
    FeatureAdapter,
    channel_l1_norms,
    feature_kd_loss,
    label_kd_merge,
    logit_kd_loss,
    make_mask,
    merged_targets,
    total_loss,
    write_channel_norms_csv,
)
from ..kd.recipe import resolve_recipe
from ..optim import Adam
from ..scenes import SceneConfig, assign_targets, grid_side, make_corpus, rasterize, stack_targets
from ..tensor import ConfigurationError, Tensor, no_grad
from . import config as cfgmod

RESULT_VERSION = 1
TEACHER_DECODE_THRESH = 0.05  # raw decoding floor; recipes filter further
TEACHER_NMS_SCORE = 0.3  # GID-F critical-region confidence floor


def build_corpus(spec):
    return make_corpus(spec.n_scenes, spec.base_seed, SceneConfig(extent=spec.extent))


def evaluate_detector(detector, scenes, eval_spec):
    """toy-mAP of a detector over a scene corpus (decode + NMS + AP)."""
    was_training = detector.training
    detector.eval()
    dets = []
    gts = []
    voxel_out = detector.cfg.voxel_size_out
    with no_grad():
        for scene in scenes:
            out = detector(rasterize(scene, detector.cfg.voxel_size))
            found = decode(out, voxel_out, eval_spec.score_thresh, eval_spec.max_dets)
            for d in nms(found, eval_spec.nms_iou):
                dets.append((scene.seed, d))
            for b in scene.boxes:
                gts.append((scene.seed, b))
    detector.train(was_training)
    return mean_average_precision(dets, gts, detector.cfg.num_classes)


class TeacherAssets:
    """Frozen teacher plus per-scene caches of everything recipes consume."""

    def __init__(self, teacher, eval_spec):
        teacher.eval().freeze()
        self.teacher = teacher
        self.eval_spec = eval_spec
        self.voxel_out = teacher.cfg.voxel_size_out
        self._outputs = {}
        self._dets = {}

    def outputs(self, scene):
        """(p_cls, p_reg, feature) arrays on the teacher output grid."""
        if scene.seed not in self._outputs:
            with no_grad():
                out = self.teacher(rasterize(scene, self.teacher.cfg.voxel_size))
            self._outputs[scene.seed] = (out.p_cls.data, out.p_reg.data, out.bfe_feature.data)
        return self._outputs[scene.seed]

    def detections(self, scene):
        """Raw (un-NMS'd) decoded teacher boxes, descending score."""
        if scene.seed not in self._dets:
            p_cls, p_reg, _ = self.outputs(scene)
            out = SimpleNamespace(p_cls=Tensor(p_cls), p_reg=Tensor(p_reg))
            self._dets[scene.seed] = decode(
                out, self.voxel_out, TEACHER_DECODE_THRESH, self.eval_spec.max_dets
            )
        return self._dets[scene.seed]

    def nms_detections(self, scene):
        strong = [d for d in self.detections(scene) if d.score >= TEACHER_NMS_SCORE]
        return nms(strong, self.eval_spec.nms_iou)

    def out_side(self, extent):
        return self.teacher.output_side(grid_side(extent, self.teacher.cfg.voxel_size))


def _scene_assets(scene, student_cfg, resolved, teacher_assets):
    """Everything the training loop needs for one scene, precomputed once."""
    recipe = resolved.recipe if resolved else None
    a = SimpleNamespace()
    a.grid = rasterize(scene, student_cfg.voxel_size).grid.data
    side_out = grid_side(scene.extent, student_cfg.voxel_size_out)
    num_classes = student_cfg.num_classes

    if recipe and recipe.label_kd == "on":
        merged = label_kd_merge(
            scene.boxes,
            teacher_assets.detections(scene),
            recipe.tau,
            recipe.label_variant,
            side_out,
            student_cfg.voxel_size_out,
        )
        a.targets = merged_targets(merged, side_out, student_cfg.voxel_size_out, num_classes)
    else:
        a.targets = assign_targets(scene.boxes, side_out, student_cfg.voxel_size_out, num_classes)

    if recipe and (recipe.logit != "none" or recipe.feature != "none"):
        p_cls, p_reg, feat = teacher_assets.outputs(scene)
        a.teacher_p_cls, a.teacher_p_reg, a.teacher_feat = p_cls, p_reg, feat
        t_side = p_cls.shape[-1]
        teacher_targets = None
        if recipe.logit in ("gid_l", "pp_gaussian") or recipe.feature == "fg":
            teacher_targets = assign_targets(
                scene.boxes, t_side, teacher_assets.voxel_out, num_classes
            )
        if recipe.logit != "none":
            a.mask = make_mask(
                recipe.logit,
                teacher_p_cls=p_cls,
                target_heatmap=teacher_targets.heatmap.data if teacher_targets else None,
                tau_pp=recipe.tau_pp,
                k=resolved.k_rank,
            )
        if recipe.feature == "fg":
            hm = teacher_targets.heatmap.data
            a.fg_mask = (hm.max(axis=1, keepdims=True) > 0.0).astype(np.float64)
        if recipe.feature in ("mimic", "gid_f"):
            a.gt_boxes = list(scene.boxes)
            a.teacher_boxes = teacher_assets.nms_detections(scene)
    return a


def _train(student, scenes, train_spec, recipe=None, teacher_assets=None, adapter=None, lam=2.0):
    """Seeded mini-batch training; returns per-epoch mean loss parts."""
    resolved = None
    if recipe is not None and teacher_assets is not None:
        t_side = teacher_assets.out_side(scenes[0].extent)
        s_side = grid_side(scenes[0].extent, student.cfg.voxel_size_out)
        resolved = resolve_recipe(
            recipe,
            t_side,
            s_side,
            teacher_assets.teacher.cfg.channels()["bfe"],
            student.cfg.channels()["bfe"],
        )
        lam = recipe.lam

    assets = [_scene_assets(s, student.cfg, resolved, teacher_assets) for s in scenes]
    params = student.parameters() + (adapter.parameters() if adapter else [])
    opt = Adam(params, lr=train_spec.lr, weight_decay=train_spec.weight_decay)
    rng = np.random.default_rng(train_spec.seed)
    student.train(True)
    if adapter:
        adapter.train(True)

    curve = []
    counters = {}
    for _epoch in range(train_spec.epochs):
        order = rng.permutation(len(assets))
        epoch_parts = []
        for start in range(0, len(order), train_spec.batch_size):
            batch = [assets[i] for i in order[start : start + train_spec.batch_size]]
            x = Tensor(np.concatenate([b.grid for b in batch], axis=0))
            targets = stack_targets([b.targets for b in batch])
            out = student(x)
            det_parts = detection_loss(out, targets, lam=lam)

            l_cls_kd = Tensor(0.0)
            l_reg_kd = Tensor(0.0)
            l_feat_kd = Tensor(0.0)
            alpha1 = alpha2 = alpha3 = 0.0
            if resolved is not None:
                r = resolved.recipe
                if r.logit != "none":
                    teacher_out = SimpleNamespace(
                        p_cls=Tensor(np.concatenate([b.teacher_p_cls for b in batch], axis=0)),
                        p_reg=Tensor(np.concatenate([b.teacher_p_reg for b in batch], axis=0)),
                    )
                    mask = np.concatenate([b.mask for b in batch], axis=0)
                    l_cls_kd, l_reg_kd = logit_kd_loss(
                        out, teacher_out, mask, r.alpha1, resolved.alpha2, resolved.reg_support
                    )
                    alpha1, alpha2 = r.alpha1, resolved.alpha2
                if r.feature != "none":
                    teacher_feat = np.concatenate([b.teacher_feat for b in batch], axis=0)
                    kwargs = {}
                    if r.feature == "fg":
                        kwargs["fg_mask"] = np.concatenate([b.fg_mask for b in batch], axis=0)
                    if r.feature in ("mimic", "gid_f"):
                        gt_boxes = []
                        teacher_boxes = []
                        for bi, b in enumerate(batch):
                            gt_boxes += [(bi, box) for box in b.gt_boxes]
                            teacher_boxes += [(bi, box) for box in b.teacher_boxes]
                        kwargs["gt_boxes"] = gt_boxes
                        kwargs["teacher_boxes"] = teacher_boxes
                    l_feat_kd = feature_kd_loss(
                        r.feature,
                        out.bfe_feature,
                        teacher_feat,
                        adapter,
                        student_voxel_out=student.cfg.voxel_size_out,
                        teacher_voxel_out=teacher_assets.voxel_out,
                        relation_weight=r.relation_weight,
                        counters=counters,
                        **kwargs,
                    )
                    alpha3 = resolved.alpha3

            total, parts = total_loss(det_parts, l_cls_kd, l_reg_kd, l_feat_kd, lam, alpha1, alpha2, alpha3)
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_parts.append(parts)
        curve.append({k: float(np.mean([p[k] for p in epoch_parts])) for k in epoch_parts[0]})
    return curve, counters


def train_teacher(det_cfg, train_corpus_spec, eval_corpus_spec, train_spec, eval_spec, ckpt_path):
    """Train a teacher from scratch; write checkpoint + sidecar meta JSON."""
    corpus = build_corpus(train_corpus_spec)
    teacher = build(det_cfg, seed=train_spec.seed)
    t0 = time.perf_counter()
    curve, _ = _train(teacher, corpus, train_spec)
    wall = time.perf_counter() - t0
    eval_scenes = build_corpus(eval_corpus_spec)
    result = evaluate_detector(teacher, eval_scenes, eval_spec)
    side = grid_side(train_corpus_spec.extent, det_cfg.voxel_size)
    eff = profile(teacher, side)
    nn.save_checkpoint(teacher, ckpt_path)
    meta = {
        "version": RESULT_VERSION,
        "config": cfgmod.to_dict(
            cfgmod.ExperimentConfig(name="teacher", student=det_cfg,
                                    train_corpus=train_corpus_spec, eval_corpus=eval_corpus_spec,
                                    train=train_spec, eval=eval_spec)
        ),
        "toy_map": result,
        "efficiency": eff.to_dict(),
        "loss_curve": curve,
        "wall_clock_s": wall,
    }
    with open(_meta_path(ckpt_path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
    return teacher, meta


def _meta_path(ckpt_path):
    return ckpt_path[: -len(".json")] + ".meta.json" if ckpt_path.endswith(".json") else ckpt_path + ".meta.json"


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def load_teacher(det_cfg, ckpt_path):
    teacher = build(det_cfg, seed=0)
    nn.load_checkpoint(teacher, ckpt_path)
    return teacher


def run(config, root_dir, force=False, teacher_cache=None):
    """Execute one experiment cell; idempotent per config hash.

    Results land in ``root_dir/runs/<hash>/result.json``.  An existing result
    with the same hash is returned as-is; a result file whose embedded hash
    differs is never overwritten unless ``force`` is set.
    """
    config.validate()
    digest = cfgmod.config_hash(config)
    run_dir = os.path.join(root_dir, "runs", digest)
    result_path = os.path.join(run_dir, "result.json")
    if os.path.exists(result_path):
        with open(result_path) as fh:
            existing = json.load(fh)
        if existing.get("config_hash") == digest and not force:
            return existing
        if existing.get("config_hash") != digest and not force:
            raise ConfigurationError(
                f"{result_path} holds a result for a different config "
                f"({existing.get('config_hash')} != {digest}); use force to overwrite"
            )
    os.makedirs(run_dir, exist_ok=True)

    recipe = config.recipe
    teacher_assets = None
    teacher_meta = None
    if config.teacher is not None and config.teacher_checkpoint:
        ckpt = os.path.join(root_dir, config.teacher_checkpoint)
        if recipe.needs_teacher and not os.path.exists(ckpt):
            raise ConfigurationError(f"teacher checkpoint {ckpt} missing; train the teacher first")
        if recipe.needs_teacher:
            key = (config.teacher_checkpoint, cfgmod.config_hash(
                cfgmod.ExperimentConfig(name="t", student=config.teacher)))
            if teacher_cache is not None and key in teacher_cache:
                teacher_assets = teacher_cache[key]
            else:
                teacher_assets = TeacherAssets(load_teacher(config.teacher, ckpt), config.eval)
                if teacher_cache is not None:
                    teacher_cache[key] = teacher_assets
        meta_file = _meta_path(ckpt)
        if os.path.exists(meta_file):
            with open(meta_file) as fh:
                teacher_meta = json.load(fh)

    t0 = time.perf_counter()
    train_scenes = build_corpus(config.train_corpus)
    eval_scenes = build_corpus(config.eval_corpus)
    student = build(config.student, seed=config.train.seed)

    tgi_report = None
    if recipe.tgi != "none":
        from ..kd import tgi_remap

        teacher_state = nn.state_dict(teacher_assets.teacher)
        tgi_report = tgi_remap(teacher_state, student, recipe.tgi)

    adapter = None
    if recipe.feature != "none":
        cs = student.cfg.channels()["bfe"]
        ct = teacher_assets.teacher.cfg.channels()["bfe"]
        if cs != ct:
            adapter = FeatureAdapter(cs, ct, np.random.default_rng(config.train.seed + 7919))

    curve = []
    counters = {}
    if config.train.epochs > 0:
        curve, counters = _train(
            student,
            train_scenes,
            config.train,
            recipe=recipe if recipe.any_active else None,
            teacher_assets=teacher_assets,
            adapter=adapter,
            lam=recipe.lam,
        )

    result_map = evaluate_detector(student, eval_scenes, config.eval)
    side = grid_side(config.eval_corpus.extent, config.student.voxel_size)
    eff = profile(student, side)

    cpr_doc = None
    teacher_ref = None
    if teacher_meta is not None:
        t_map = teacher_meta["toy_map"]["mean"]
        t_acts = teacher_meta["efficiency"]["acts"]
        teacher_ref = {"map_mean": t_map, "acts": t_acts}
        if t_map > 0:
            rep = cpr_report(eff.acts, t_acts, result_map["mean"], t_map)
            cpr_doc = {"cpr": rep["cpr"], "in_range": rep["in_range"], "warnings": rep["warnings"]}

    norms = channel_l1_norms(student, eval_scenes)
    norms_file = os.path.join(run_dir, "channel_norms.csv")
    write_channel_norms_csv(norms_file, norms, label=config.name)

    result = {
        "version": RESULT_VERSION,
        "name": config.name,
        "config": cfgmod.to_dict(config),
        "config_hash": digest,
        "code_version": cfgmod.CODE_VERSION,
        "seed": config.train.seed,
        "toy_map": result_map,
        "efficiency": eff.to_dict(),
        "cpr": cpr_doc,
        "teacher_ref": teacher_ref,
        "loss_curve": curve,
        "counters": counters,
        "tgi": tgi_report,
        "channel_norms_csv": "channel_norms.csv",
        "wall_clock_s": time.perf_counter() - t0,
    }
    with open(result_path, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True, default=_json_default)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfgmod.to_dict(config), fh, indent=2, sort_keys=True)
    return result
