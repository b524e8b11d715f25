"""Seeded end-to-end shift benchmark: generate source/target scenes, train
single-task and joint models over several seeds, then compare adaptation
methods on the shifted target set.

This is the desk-scale harness behind the acceptance suite and the `bench`
CLI subcommand; everything is deterministic in the configured seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .experiment import evaluate_method
from .model import BackboneConfig, SegModel
from .scene import Scene
from .synth import AugmentConfig, SceneSpec, apply_shift, generate_scene, shift_preset
from .teacher import SyntheticTeacher, SyntheticTeacherConfig, teacher_maps_for_scene
from .trainer import TrainConfig, joint_train
from .ttt import TTTConfig, ttt_offline


@dataclass
class BenchmarkConfig:
    n_source: int = 40
    n_target: int = 20
    shift: str = "sensor-A"
    seeds: tuple = (0, 1, 2)
    scene_spec: SceneSpec = field(default_factory=SceneSpec)
    teacher: SyntheticTeacherConfig = field(default_factory=SyntheticTeacherConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=18, batch_scenes=2))
    ttt: TTTConfig = field(default_factory=lambda: TTTConfig(steps=25, lr=0.1, rotations=4, budget=16384))
    source_seed_base: int = 1000
    target_seed_base: int = 2000
    shift_seed_base: int = 3000


def build_scene_sets(cfg: BenchmarkConfig):
    """(source, target_clean, target_shifted) scene lists."""
    profile = shift_preset(cfg.shift)
    source = [generate_scene(cfg.scene_spec, cfg.source_seed_base + i) for i in range(cfg.n_source)]
    target_clean = [generate_scene(cfg.scene_spec, cfg.target_seed_base + i) for i in range(cfg.n_target)]
    target_shift = [apply_shift(s, profile, cfg.shift_seed_base + i) for i, s in enumerate(target_clean)]
    for i, scene in enumerate(target_clean):
        scene.scene_id = f"target{i:03d}"
    for i, scene in enumerate(target_shift):
        scene.scene_id = f"target{i:03d}-shift"
    return source, target_clean, target_shift


def train_models(cfg: BenchmarkConfig, source_scenes, teacher, seed: int):
    """Single-task and joint models for one seed; identical pipelines except
    for the distillation loss weight."""
    def fresh():
        return SegModel(BackboneConfig(), num_classes=cfg.scene_spec.num_classes,
                        teacher_dim=cfg.teacher.dim, seed=seed)

    src_cfg = TrainConfig(**{**vars(cfg.train), "w_kd": 0.0, "seed": seed})
    joint_cfg = TrainConfig(**{**vars(cfg.train), "seed": seed})
    source_model = fresh()
    joint_train(source_scenes, source_model, teacher, src_cfg)
    joint_model = fresh()
    joint_train(source_scenes, joint_model, teacher, joint_cfg)
    return source_model, joint_model


def run_benchmark(cfg: BenchmarkConfig | None = None, verbose: bool = False) -> dict:
    """Full pipeline; returns per-seed mIoU tables, seed means, and the
    per-(scene, seed) early distillation-loss traces on the shifted set."""
    cfg = cfg or BenchmarkConfig()
    t0 = time.perf_counter()
    source, target_clean, target_shift = build_scene_sets(cfg)
    teacher = SyntheticTeacher(cfg.teacher)
    for scene in source + target_clean + target_shift:
        scene.teacher_maps = teacher_maps_for_scene(teacher, scene)

    methods = ("source-only", "joint-train", "tent", "dua", "ttt-kd", "ttt-kd-o")
    per_seed = {m: [] for m in methods}
    per_seed_id = {"joint-train": [], "ttt-kd": []}
    descent = []  # (seed, scene_index, first-10 losses) on the shifted set

    from .experiment import score_method

    mask = list(range(cfg.scene_spec.num_classes))
    for seed in cfg.seeds:
        source_model, joint_model = train_models(cfg, source, teacher, seed)
        if verbose:
            print(f"[bench] seed {seed}: models trained at {time.perf_counter() - t0:.1f}s")
        for method in methods:
            if method == "ttt-kd":
                # run directly so the adaptation traces can be kept
                logits = []
                for i, scene in enumerate(target_shift):
                    lg, trace = ttt_offline(joint_model, scene, teacher, cfg.ttt)
                    logits.append(lg)
                    descent.append((seed, i, trace.kd_losses[:10]))
                res = score_method(logits, target_shift, mask)
            else:
                res = evaluate_method(method, target_shift, source_model, joint_model, teacher, cfg.ttt, None)
            per_seed[method].append(res["miou"])
        for method in ("joint-train", "ttt-kd"):
            res = evaluate_method(method, target_clean, source_model, joint_model, teacher, cfg.ttt, None)
            per_seed_id[method].append(res["miou"])
        if verbose:
            print(f"[bench] seed {seed}: evaluation done at {time.perf_counter() - t0:.1f}s")

    result = {
        "per_seed_shifted": per_seed,
        "per_seed_clean": per_seed_id,
        "mean_shifted": {m: float(np.mean(v)) for m, v in per_seed.items()},
        "mean_clean": {m: float(np.mean(v)) for m, v in per_seed_id.items()},
        "descent_traces": descent,
        "seconds": time.perf_counter() - t0,
        "seeds": list(cfg.seeds),
    }
    return result


def descent_fraction(descent_traces, tol: float = 1e-9) -> float:
    """Fraction of (scene, seed) traces whose first ten losses never increase."""
    ok = 0
    for _seed, _scene, losses in descent_traces:
        diffs = np.diff(np.asarray(losses))
        ok += bool((diffs <= tol).all())
    return ok / max(1, len(descent_traces))
