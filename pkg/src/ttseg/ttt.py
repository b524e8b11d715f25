"""Test-time adaptation: per-scene offline adaptation on the distillation
objective, online streaming adaptation with stride, rotation-ensembled
inference, and entropy-minimization / statistics-blending baselines.

No function here may read scene labels; the tests audit that with the
scene's label-access counter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BN_BATCH, BN_EVAL, BN_FROZEN, BN_TRAIN
from .errors import ConfigError, DegenerateFeatureError
from .model import GROUP_KD, GROUP_LABEL, SegModel
from .optim import SGD
from .scene import Scene, rotate_up
from .teacher import teacher_maps_for_scene
from .trainer import kd_targets, pair_rows, sample_pair_rows


@dataclass
class TTTConfig:
    variant: str = "offline"
    steps: int = 100  # gradient steps per rotation (online runs typically use 1)
    lr: float = 0.1
    rotations: int = 8
    budget: int = 16384  # distillation pairs per step, capped at the available pairs
    stride: int = 1  # online: adapt every `stride`-th scene; 0 means never
    seed: int = 0
    online_steps_total: bool = False  # force a single step per scene instead of one per rotation
    tent_lr: float = 1e-3
    dua_momentum: float = 0.1
    dua_decay: float = 1.0
    dua_floor: float = 0.005

    def validate(self):
        if self.variant not in ("offline", "online"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.rotations < 1:
            raise ConfigError(f"rotations must be >= 1, got {self.rotations}")
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.stride < 0:
            raise ConfigError(f"stride must be >= 1 (or 0 for never), got {self.stride}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")


@dataclass
class AdaptationTrace:
    kd_losses: list = field(default_factory=list)  # rotation-major per-step loss values
    rotation_logits: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    update_steps: int = 0
    warning: str | None = None


def rotation_ensemble(model: SegModel, scene: Scene, rotations: int, predict_fn=None):
    """Sum of per-rotation logits at `rotations` evenly spaced up-axis angles."""
    if rotations < 1:
        raise ConfigError(f"rotations must be >= 1, got {rotations}")
    if predict_fn is None:
        predict_fn = lambda s: model.logits(s.points, s.feats, BN_EVAL).data
    total = None
    for r in range(rotations):
        rotated = rotate_up(scene, 2.0 * np.pi * r / rotations)
        logits = np.asarray(predict_fn(rotated), dtype=np.float32)
        total = logits.copy() if total is None else total + logits
    return total


def _kd_step(model: SegModel, scene: Scene, neighbors, rows, targets, opt: SGD,
             rotation: int, step: int, trace: AdaptationTrace):
    t0 = time.perf_counter()
    f3d = model.backbone_forward(scene.points, scene.feats, BN_FROZEN, neighbors)
    pred = model.project_kd(ad.take_rows(f3d, rows[:, 0]))
    try:
        loss = ad.cosine_distill(pred, targets)
    except DegenerateFeatureError as exc:
        raise DegenerateFeatureError(
            f"{exc} (rotation {rotation}, step {step})", rotation=rotation, step=step
        ) from None
    ad.backward(loss)
    grads = model.params.grads()  # trainable only; frozen-group grads are discarded
    opt.step(model.params.params(), grads, model.params.frozen_names())
    model.params.zero_grad()
    trace.kd_losses.append(float(loss.data))
    trace.step_seconds.append(time.perf_counter() - t0)
    trace.update_steps += 1


def ttt_offline(model: SegModel, scene: Scene, teacher, config: TTTConfig):
    """Adapt on one scene, predict, then discard the parameter updates.

    Updates accumulate across the rotations of the scene and are rolled back
    before returning, so every scene starts from the same trained weights.
    """
    config.validate()
    opt = SGD(lr=config.lr)
    snapshot = model.snapshot(opt)
    trace = AdaptationTrace()
    rng = np.random.default_rng(config.seed)

    rows_all = pair_rows(scene)
    if rows_all.shape[0] == 0:
        trace.warning = "scene has no correspondences; plain ensembled inference"
        logits = rotation_ensemble(model, scene, config.rotations)
        model.restore(snapshot, opt)
        return logits, trace

    maps = scene.teacher_maps or teacher_maps_for_scene(teacher, scene)
    model.params.set_freeze({GROUP_LABEL, GROUP_KD}, True)
    try:
        total = None
        for r in range(config.rotations):
            rotated = rotate_up(scene, 2.0 * np.pi * r / config.rotations)
            neighbors = model.neighbor_indices(rotated.points)
            for step in range(config.steps):
                rows = sample_pair_rows(rows_all, config.budget, rng)
                targets = kd_targets(rows, maps)
                _kd_step(model, rotated, neighbors, rows, targets, opt, r, step, trace)
            logits = model.logits(rotated.points, rotated.feats, BN_EVAL, neighbors).data
            trace.rotation_logits.append(logits.copy())
            total = logits.copy() if total is None else total + logits
    finally:
        model.restore(snapshot, opt)
    return total, trace


@dataclass
class OnlineState:
    """Streaming adaptation state: the adapted model and its optimizer persist
    between scenes."""

    model: SegModel
    opt: SGD
    rng: np.random.Generator
    trace: AdaptationTrace

    @staticmethod
    def from_model(model: SegModel, config: TTTConfig) -> "OnlineState":
        clone = model.clone()
        clone.params.set_freeze({GROUP_LABEL, GROUP_KD}, True)
        return OnlineState(
            model=clone,
            opt=SGD(lr=config.lr),
            rng=np.random.default_rng(config.seed),
            trace=AdaptationTrace(),
        )


def ttt_online(state: OnlineState, scene: Scene, teacher, config: TTTConfig, scene_counter: int):
    """One streamed scene: adapt (when the stride says so) then predict.
    Parameter updates and optimizer state persist in the returned state."""
    config.validate()
    model = state.model
    trace = state.trace
    adapt = config.stride > 0 and scene_counter % config.stride == 0

    rows_all = pair_rows(scene)
    if rows_all.shape[0] == 0:
        adapt = False
        trace.warning = "scene without correspondences; inference only"
    maps = None
    if adapt:
        maps = scene.teacher_maps or teacher_maps_for_scene(teacher, scene)

    total = None
    for r in range(config.rotations):
        rotated = rotate_up(scene, 2.0 * np.pi * r / config.rotations)
        neighbors = model.neighbor_indices(rotated.points)
        if adapt and (r == 0 or not config.online_steps_total):
            steps = 1 if config.online_steps_total else config.steps
            for step in range(steps):
                rows = sample_pair_rows(rows_all, config.budget, state.rng)
                targets = kd_targets(rows, maps)
                _kd_step(model, rotated, neighbors, rows, targets, state.opt, r, step, trace)
        logits = model.logits(rotated.points, rotated.feats, BN_EVAL, neighbors).data
        total = logits.copy() if total is None else total + logits
    return total, state


# ---------------------------------------------------------------------------
# reference adaptation baselines


def baseline_tent(model: SegModel, scene: Scene, config: TTTConfig):
    """Entropy minimization on the scene's own batch statistics, updating only
    the normalization scale/shift parameters. Mutates the model in place (the
    caller owns the stream)."""
    config.validate()
    opt = SGD(lr=config.tent_lr)
    affine = set(model.bn_affine_names())
    total = None
    for r in range(config.rotations):
        rotated = rotate_up(scene, 2.0 * np.pi * r / config.rotations)
        neighbors = model.neighbor_indices(rotated.points)
        logits = model.logits(rotated.points, rotated.feats, BN_BATCH, neighbors)
        entropy = ad.softmax_entropy(logits)
        ad.backward(entropy)
        grads = {n: g for n, g in model.params.grads().items() if n in affine}
        opt.step(model.params.params(), grads, model.params.frozen_names())
        model.params.zero_grad()
        pred = model.logits(rotated.points, rotated.feats, BN_BATCH, neighbors).data
        total = pred.copy() if total is None else total + pred
    return total


@dataclass
class DuaState:
    model: SegModel
    momentum: float

    @staticmethod
    def from_model(model: SegModel, config: TTTConfig) -> "DuaState":
        return DuaState(model=model.clone(), momentum=config.dua_momentum)


def baseline_dua(state: DuaState, scene: Scene, config: TTTConfig):
    """Blend the normalization running statistics toward the scene's batch
    statistics; no gradients, weights stay untouched. Stats persist across
    scenes through the returned state."""
    config.validate()
    model = state.model
    if state.momentum > 0.0:
        neighbors = model.neighbor_indices(scene.points)
        model.backbone_forward(scene.points, scene.feats, BN_TRAIN, neighbors, bn_momentum=state.momentum)
        model.params.zero_grad()
    logits = rotation_ensemble(model, scene, config.rotations)
    if config.dua_decay < 1.0:
        state.momentum = max(config.dua_floor, state.momentum * config.dua_decay)
    return logits, state
