"""Experiment orchestration: evaluate methods over scene sets, build reports,
emit plot CSVs for the ablation sweeps."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import accumulate_confusion, iou_per_class, miou
from .model import BackboneConfig, SegModel, model_from_checkpoint
from .scene import Scene, limit_images, load_scene_dir
from .teacher import CachedTeacher, SyntheticTeacher, SyntheticTeacherConfig
from .ttt import (
    DuaState,
    OnlineState,
    TTTConfig,
    baseline_dua,
    baseline_tent,
    rotation_ensemble,
    ttt_offline,
    ttt_online,
)

METHODS = ("source-only", "joint-train", "tent", "dua", "ttt-kd", "ttt-kd-o")
_SOURCE_METHODS = {"source-only", "tent", "dua"}


@dataclass
class ExperimentConfig:
    methods: list
    scenes_dir: str
    teacher: str = "synthetic"  # cache directory or "synthetic"
    source_ckpt: str | None = None
    joint_ckpt: str | None = None
    mask: list | None = None  # class ids; None = all classes
    label_map: dict | None = None  # optional gt remap for cross-palette eval
    backbone_k: int = 8
    ttt: TTTConfig = field(default_factory=TTTConfig)
    teacher_config: SyntheticTeacherConfig = field(default_factory=SyntheticTeacherConfig)

    def validate(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; known: {list(METHODS)}")
        missing = []
        if not os.path.isdir(self.scenes_dir):
            missing.append(self.scenes_dir)
        if self.teacher != "synthetic" and not os.path.isdir(self.teacher):
            missing.append(self.teacher)
        if any(m in _SOURCE_METHODS for m in self.methods):
            if not self.source_ckpt or not os.path.isfile(self.source_ckpt):
                missing.append(self.source_ckpt or "<source checkpoint unset>")
        if any(m not in _SOURCE_METHODS for m in self.methods):
            if not self.joint_ckpt or not os.path.isfile(self.joint_ckpt):
                missing.append(self.joint_ckpt or "<joint checkpoint unset>")
        if missing:
            raise ConfigError("missing artifact paths: " + ", ".join(str(m) for m in missing))


@dataclass
class EvalReport:
    methods: dict
    config: dict
    scene_count: int
    timing: dict = field(default_factory=dict)  # wall-clock; excluded from determinism
    sweeps: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "methods": self.methods,
            "config": self.config,
            "scene_count": self.scene_count,
            "timing": self.timing,
            "sweeps": self.sweeps,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        payload = json.loads(text)
        return EvalReport(
            methods=payload["methods"],
            config=payload["config"],
            scene_count=payload["scene_count"],
            timing=payload.get("timing", {}),
            sweeps=payload.get("sweeps", {}),
        )

    def __eq__(self, other):
        return isinstance(other, EvalReport) and (
            self.methods,
            self.config,
            self.scene_count,
            self.timing,
            self.sweeps,
        ) == (other.methods, other.config, other.scene_count, other.timing, other.sweeps)


def make_teacher(config: ExperimentConfig):
    if config.teacher == "synthetic":
        return SyntheticTeacher(config.teacher_config)
    return CachedTeacher(config.teacher)


def evaluate_method(method: str, scenes: list, source_model, joint_model, teacher,
                    ttt_config: TTTConfig, mask, label_map=None):
    """Per-scene logits for one method plus its update-step count."""
    num_classes = scenes[0].num_classes
    mask = list(range(num_classes)) if mask is None else list(mask)
    per_scene_logits = []
    updates = 0

    if method == "source-only":
        for scene in scenes:
            per_scene_logits.append(rotation_ensemble(source_model, scene, ttt_config.rotations))
    elif method == "joint-train":
        for scene in scenes:
            per_scene_logits.append(rotation_ensemble(joint_model, scene, ttt_config.rotations))
    elif method == "tent":
        model = source_model.clone()
        for scene in scenes:
            per_scene_logits.append(baseline_tent(model, scene, ttt_config))
            updates += ttt_config.rotations
    elif method == "dua":
        state = DuaState.from_model(source_model, ttt_config)
        for scene in scenes:
            logits, state = baseline_dua(state, scene, ttt_config)
            per_scene_logits.append(logits)
    elif method == "ttt-kd":
        for scene in scenes:
            logits, trace = ttt_offline(joint_model, scene, teacher, ttt_config)
            per_scene_logits.append(logits)
            updates += trace.update_steps
    elif method == "ttt-kd-o":
        state = OnlineState.from_model(joint_model, ttt_config)
        for counter, scene in enumerate(scenes):
            logits, state = ttt_online(state, scene, teacher, ttt_config, counter)
            per_scene_logits.append(logits)
        updates = state.trace.update_steps
    else:
        raise ConfigError(f"unknown method {method!r}")

    return score_method(per_scene_logits, scenes, mask, label_map) | {"update_steps": updates}


def score_method(per_scene_logits, scenes, mask, label_map=None):
    """Aggregate confusion over scenes; labels are only read here, after all
    predictions were produced."""
    num_classes = scenes[0].num_classes
    total = None
    per_scene_miou = []
    for logits, scene in zip(per_scene_logits, scenes):
        pred = np.argmax(logits, axis=1)
        gt = scene.labels
        if label_map:
            gt = np.array([label_map.get(int(g), int(g)) for g in gt], dtype=np.int64)
        cm = accumulate_confusion(pred, gt, mask, num_classes)
        total = cm if total is None else total.add(cm)
        per_scene_miou.append(miou(cm, mask))
    per_class = {str(c): v for c, v in iou_per_class(total, mask).items()}
    return {
        "miou": miou(total, mask),
        "per_class_iou": per_class,
        "per_scene_miou": per_scene_miou,
    }


def run_experiment(config: ExperimentConfig) -> EvalReport:
    config.validate()
    scenes = load_scene_dir(config.scenes_dir)
    teacher = make_teacher(config)
    backbone = BackboneConfig(k=config.backbone_k)
    source_model = model_from_checkpoint(config.source_ckpt, backbone) if config.source_ckpt else None
    joint_model = model_from_checkpoint(config.joint_ckpt, backbone) if config.joint_ckpt else None

    methods = {}
    timing = {}
    for method in config.methods:
        t0 = time.perf_counter()
        methods[method] = evaluate_method(
            method, scenes, source_model, joint_model, teacher, config.ttt, config.mask, config.label_map
        )
        timing[method] = time.perf_counter() - t0

    echo = {
        "methods": list(config.methods),
        "scenes_dir": str(config.scenes_dir),
        "teacher": str(config.teacher),
        "source_ckpt": config.source_ckpt,
        "joint_ckpt": config.joint_ckpt,
        "mask": config.mask,
        "label_map": config.label_map,
        "backbone_k": config.backbone_k,
        "ttt": asdict(config.ttt),
    }
    return EvalReport(methods=methods, config=echo, scene_count=len(scenes), timing=timing)


def per_scene_csv(report: EvalReport, path):
    with open(path, "w") as fh:
        fh.write("method,scene,miou\n")
        for method, entry in sorted(report.methods.items()):
            for i, value in enumerate(entry["per_scene_miou"]):
                fh.write(f"{method},{i},{value:.6f}\n")


# ---------------------------------------------------------------------------
# ablation sweeps and their plot CSVs

_SWEEP_KINDS = {"steps-curve": "steps", "stride-curve": "stride", "images-curve": "images"}


def emit_plot_data(report: EvalReport, kind: str, path):
    """Two-column CSV (sweep value, mIoU) for one sweep dimension."""
    if kind not in _SWEEP_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; known: {sorted(_SWEEP_KINDS)}")
    dim = _SWEEP_KINDS[kind]
    if dim not in report.sweeps:
        raise ConfigError(f"report has no {dim!r} sweep; available: {sorted(report.sweeps)}")
    rows = report.sweeps[dim]
    with open(path, "w") as fh:
        fh.write(f"{dim},miou\n")
        for x, y in rows:
            fh.write(f"{x},{y:.6f}\n")
    return path


def run_sweep(config: ExperimentConfig, kind: str, values) -> EvalReport:
    """Offline-adaptation mIoU as a function of steps, stride or image count."""
    if kind not in _SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; known: {sorted(_SWEEP_KINDS)}")
    dim = _SWEEP_KINDS[kind]
    config.validate()
    scenes = load_scene_dir(config.scenes_dir)
    teacher = make_teacher(config)
    backbone = BackboneConfig(k=config.backbone_k)
    joint_model = model_from_checkpoint(config.joint_ckpt, backbone)
    mask = config.mask if config.mask is not None else list(range(scenes[0].num_classes))

    rows = []
    for value in values:
        value = int(value)
        if dim == "steps":
            if value == 0:
                logits = [rotation_ensemble(joint_model, s, config.ttt.rotations) for s in scenes]
                score = score_method(logits, scenes, mask, config.label_map)
            else:
                cfg = _ttt_with(config.ttt, steps=value)
                logits = [ttt_offline(joint_model, s, teacher, cfg)[0] for s in scenes]
                score = score_method(logits, scenes, mask, config.label_map)
        elif dim == "stride":
            cfg = _ttt_with(config.ttt, stride=value, steps=1)
            state = OnlineState.from_model(joint_model, cfg)
            logits = []
            for counter, scene in enumerate(scenes):
                lg, state = ttt_online(state, scene, teacher, cfg, counter)
                logits.append(lg)
            score = score_method(logits, scenes, mask, config.label_map)
        else:  # images
            limited = [limit_images(s, value) for s in scenes]
            logits = [ttt_offline(joint_model, s, teacher, config.ttt)[0] for s in limited]
            score = score_method(logits, limited, mask, config.label_map)
        rows.append([value, score["miou"]])

    echo = {"kind": kind, "values": [int(v) for v in values], "ttt": asdict(config.ttt)}
    return EvalReport(methods={}, config=echo, scene_count=len(scenes), sweeps={dim: rows})


def _ttt_with(base: TTTConfig, **overrides) -> TTTConfig:
    data = asdict(base)
    data.update(overrides)
    return TTTConfig(**data)
