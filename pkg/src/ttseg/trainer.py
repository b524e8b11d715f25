"""Joint training: segmentation cross-entropy plus 2D->3D feature
distillation over sampled point-pixel pairs, AdamW with a one-cycle
schedule. Deterministic in the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BN_TRAIN
from .errors import NumericError
from .model import SegModel
from .optim import AdamW, one_cycle_lr
from .scene import Scene
from .synth import AugmentConfig, augment
from .teacher import TeacherFeatureMap, teacher_maps_for_scene


@dataclass
class KDPair:
    point_index: int
    image_index: int
    u: int
    v: int


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_scenes: int = 2
    max_lr: float = 0.005
    div_initial: float = 10.0
    div_final: float = 1000.0
    pct_warm: float = 0.3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    label_smoothing: float = 0.2
    kd_budget: int = 2048
    w_label: float = 1.0
    w_kd: float = 1.0
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.kd_budget < 1:
            raise ValueError("kd budget must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label smoothing must be in [0, 1)")


def pair_rows(scene: Scene):
    """All valid (point, image, u, v) correspondence rows as a (P, 4) array."""
    blocks = []
    for img, corr in enumerate(scene.correspondences):
        if corr.size == 0:
            continue
        blocks.append(np.column_stack([corr[:, 0], np.full(corr.shape[0], img, dtype=np.int64), corr[:, 1], corr[:, 2]]))
    if not blocks:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate(blocks)


def sample_pair_rows(rows, budget: int, rng) -> np.ndarray:
    """Uniform sample without replacement; everything (seeded order) when the
    budget covers the whole pair set."""
    p = rows.shape[0]
    if p == 0:
        return rows
    if budget >= p:
        return rows[rng.permutation(p)]
    return rows[rng.choice(p, size=budget, replace=False)]


def sample_kd_pairs(scene: Scene, budget: int, seed) -> list:
    """Sampled distillation pairs for one scene; empty when the scene has no
    correspondences (such scenes contribute to the label loss only)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows = sample_pair_rows(pair_rows(scene), budget, rng)
    return [KDPair(int(r[0]), int(r[1]), int(r[2]), int(r[3])) for r in rows]


def kd_targets(rows, maps: list) -> np.ndarray:
    """Teacher feature per (point, image, u, v) row, nearest-cell lookup."""
    if rows.shape[0] == 0:
        dim = maps[0].dim if maps else 0
        return np.zeros((0, dim), dtype=np.float32)
    out = np.zeros((rows.shape[0], maps[0].dim), dtype=np.float32)
    for img in np.unique(rows[:, 1]):
        m: TeacherFeatureMap = maps[img]
        sel = rows[:, 1] == img
        out[sel] = m.grid[rows[sel, 3] // m.stride, rows[sel, 2] // m.stride]
    return out


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # (epoch, loss_label, loss_kd, lr)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss_label,loss_kd,lr\n")
            for epoch, ly, lkd, lr in self.epochs:
                fh.write(f"{epoch},{ly:.6f},{lkd:.6f},{lr:.8f}\n")


def joint_train(dataset: list, model: SegModel, teacher, config: TrainConfig) -> TrainLog:
    """Optimize all three parameter groups on w_label * CE + w_kd * distill.

    The distillation pairs are sampled (and the term computed) even at
    w_kd = 0 so that the RNG stream and the loss graph layout match between
    single-task and joint runs.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    for scene in dataset:
        if scene.teacher_maps is None:
            scene.teacher_maps = teacher_maps_for_scene(teacher, scene)

    opt = AdamW(lr=config.max_lr, betas=config.betas, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_scenes)
    total_steps = config.epochs * steps_per_epoch
    log = TrainLog()

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        ep_label, ep_kd, last_lr = [], [], 0.0
        for start in range(0, len(dataset), config.batch_scenes):
            batch_ids = order[start : start + config.batch_scenes]
            lr = one_cycle_lr(step, total_steps, config.max_lr, config.div_initial,
                              config.div_final, config.pct_warm)

            ce_terms, kd_terms = [], []
            total_points, total_pairs = 0, 0
            for sid in batch_ids:
                partner = None
                if config.augment.mix_prob > 0:
                    partner = dataset[int(rng.integers(len(dataset)))]
                scene = augment(dataset[sid], config.augment, rng, partner=partner)

                neighbors = model.neighbor_indices(scene.points)
                f3d = model.backbone_forward(scene.points, scene.feats, BN_TRAIN, neighbors)
                logits = model.project_labels(f3d)
                ce = ad.cross_entropy(logits, scene.labels, smoothing=config.label_smoothing)
                ce_terms.append((ce, scene.n_points))
                total_points += scene.n_points

                rows = sample_pair_rows(pair_rows(scene), config.kd_budget, rng)
                if rows.shape[0] == 0:
                    continue
                pred = model.project_kd(ad.take_rows(f3d, rows[:, 0]))
                kd = ad.cosine_distill(pred, kd_targets(rows, scene.teacher_maps))
                kd_terms.append((kd, rows.shape[0]))
                total_pairs += rows.shape[0]

            loss_label = _weighted_pool(ce_terms, total_points)
            loss_kd = _weighted_pool(kd_terms, total_pairs)
            loss = ad.add(
                ad.mul(loss_label, ad.const(config.w_label)),
                ad.mul(loss_kd, ad.const(config.w_kd)),
            )
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite loss at step {step}: label={float(loss_label.data)}, kd={float(loss_kd.data)}"
                )
            ad.backward(loss)
            grads = model.params.grads()
            if lr > 0.0:
                opt.step(model.params.params(), grads, model.params.frozen_names(), lr=lr)
            model.params.zero_grad()

            ep_label.append(float(loss_label.data))
            ep_kd.append(float(loss_kd.data))
            last_lr = lr
            step += 1
        log.epochs.append((epoch, float(np.mean(ep_label)), float(np.mean(ep_kd)), last_lr))
    return log


def _weighted_pool(terms, total):
    """Pool per-scene means into a batch mean weighted by element counts."""
    if not terms:
        return ad.const(0.0)
    acc = None
    for value, count in terms:
        term = ad.mul(value, ad.const(count / total))
        acc = term if acc is None else ad.add(acc, term)
    return acc
