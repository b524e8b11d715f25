"""Command-line entry points.

Subcommands: gen-scenes, shift, teacher, train, ttt, eval, sweep,
grad-check, bench. Exit codes: 0 success, 2 configuration error,
3 numeric failure, 4 I/O or data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .bench import BenchmarkConfig, run_benchmark
from .config import build_dataclass, load_config_file, parse_like
from .errors import ConfigError, DataError, NumericError, TtsegError
from .experiment import (
    ExperimentConfig,
    emit_plot_data,
    per_scene_csv,
    run_experiment,
    run_sweep,
)
from .model import BackboneConfig, SegModel, model_from_checkpoint, save_checkpoint
from .scene import load_scene, load_scene_dir, save_scene
from .synth import SceneSpec, apply_shift, generate_scene, shift_preset, spec_preset
from .teacher import (
    CachedTeacher,
    SyntheticTeacher,
    SyntheticTeacherConfig,
    save_feature_cache,
    teacher_maps_for_scene,
)
from .trainer import TrainConfig, joint_train
from .ttt import OnlineState, TTTConfig, ttt_offline, ttt_online


@dataclass
class ModelConfig:
    k: int = 8
    widths: tuple = (6, 64, 64, 128)
    agg_blocks: int = 2
    hidden: int = 128
    seed: int = 0


def _section(cfg, name):
    return cfg.get(name, {}) if cfg else {}


def _load_cfg(path):
    return load_config_file(path) if path else {}


def _make_teacher(arg: str, cfg) -> SyntheticTeacher | CachedTeacher:
    if arg == "synthetic":
        tc = build_dataclass(SyntheticTeacherConfig, _section(cfg, "teacher"))
        return SyntheticTeacher(tc)
    return CachedTeacher(arg)


def cmd_gen_scenes(args):
    cfg = _load_cfg(args.config)
    if args.preset:
        spec = spec_preset(args.preset)
    else:
        spec = build_dataclass(SceneSpec, _section(cfg, "scene"))
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        scene = generate_scene(spec, args.seed + i)
        scene.scene_id = f"scene_{i:04d}"
        save_scene(os.path.join(args.out, f"scene_{i:04d}.ttts"), scene)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_shift(args):
    profile = shift_preset(args.profile)
    os.makedirs(args.out, exist_ok=True)
    names = sorted(f for f in os.listdir(args.inp) if f.endswith(".ttts"))
    if not names:
        raise DataError(f"no .ttts scenes in {args.inp}")
    for i, name in enumerate(names):
        scene = load_scene(os.path.join(args.inp, name))
        shifted = apply_shift(scene, profile, args.seed + i)
        save_scene(os.path.join(args.out, name), shifted)
    print(f"shifted {len(names)} scenes with profile {args.profile!r} into {args.out}")
    return 0


def cmd_teacher(args):
    cfg = _load_cfg(args.config)
    teacher = SyntheticTeacher(build_dataclass(SyntheticTeacherConfig, _section(cfg, "teacher")))
    os.makedirs(args.out, exist_ok=True)
    scenes = load_scene_dir(args.scenes)
    count = 0
    for scene in scenes:
        for i in range(len(scene.images)):
            fmap = teacher.feature_map(scene, i)
            save_feature_cache(os.path.join(args.out, f"{scene.scene_id}_img{i:02d}.tttf"), fmap)
            count += 1
    print(f"wrote {count} feature maps to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args.config)
    from .synth import AugmentConfig

    overrides = {"seed": args.seed, "epochs": args.epochs, "w_kd": args.w_kd}
    tc = build_dataclass(TrainConfig, _section(cfg, "train"), overrides)
    tc.augment = build_dataclass(AugmentConfig, _section(cfg, "augment"))
    mc = build_dataclass(ModelConfig, _section(cfg, "model"))
    scenes = load_scene_dir(args.scenes)
    teacher = _make_teacher(args.teacher, cfg)
    model = SegModel(
        BackboneConfig(widths=tuple(mc.widths), k=mc.k, agg_blocks=mc.agg_blocks),
        num_classes=scenes[0].num_classes,
        teacher_dim=teacher.dim,
        hidden=mc.hidden,
        seed=mc.seed if args.seed is None else args.seed,
    )
    log = joint_train(scenes, model, teacher, tc)
    save_checkpoint(args.out, model.snapshot())
    if args.log:
        log.to_csv(args.log)
    final = log.epochs[-1]
    print(f"trained {tc.epochs} epochs; final label loss {final[1]:.4f}, distill loss {final[2]:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _ttt_config(args, cfg) -> TTTConfig:
    overrides = {
        "variant": args.variant,
        "steps": args.steps,
        "lr": args.lr,
        "rotations": args.rotations,
        "stride": args.stride,
        "budget": args.budget,
        "seed": args.seed,
    }
    if args.online_steps_total:
        overrides["online_steps_total"] = True
    tc = build_dataclass(TTTConfig, _section(cfg, "ttt"), overrides)
    if tc.variant == "online" and args.steps is None and "steps" not in _section(cfg, "ttt"):
        tc.steps = 1
    return tc


def cmd_ttt(args):
    cfg = _load_cfg(args.config)
    tc = _ttt_config(args, cfg)
    tc.validate()
    mc = build_dataclass(ModelConfig, _section(cfg, "model"))
    model = model_from_checkpoint(args.model, BackboneConfig(k=mc.k, agg_blocks=mc.agg_blocks))
    scenes = load_scene_dir(args.scenes)
    teacher = _make_teacher(args.teacher, cfg)

    trace_rows = []
    report_scenes = []
    if tc.variant == "offline":
        for scene in scenes:
            logits, trace = ttt_offline(model, scene, teacher, tc)
            for j, loss in enumerate(trace.kd_losses):
                trace_rows.append((scene.scene_id, j // tc.steps, j % tc.steps, loss))
            report_scenes.append(_scene_entry(scene, logits, trace))
    else:
        state = OnlineState.from_model(model, tc)
        for counter, scene in enumerate(scenes):
            before = len(state.trace.kd_losses)
            logits, state = ttt_online(state, scene, teacher, tc, counter)
            new = state.trace.kd_losses[before:]
            for j, loss in enumerate(new):
                trace_rows.append((scene.scene_id, j, 0, loss))
            report_scenes.append(
                {
                    "scene": scene.scene_id,
                    "update_steps": len(new),
                    "kd_loss_first": new[0] if new else None,
                    "kd_loss_last": new[-1] if new else None,
                    "predicted_class_histogram": np.bincount(
                        np.argmax(logits, axis=1), minlength=scene.num_classes
                    ).tolist(),
                }
            )

    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write("scene,rotation,step,kd_loss\n")
            for scene_id, rot, step, loss in trace_rows:
                fh.write(f"{scene_id},{rot},{step},{loss:.6f}\n")
    report = {
        "variant": tc.variant,
        "scenes": report_scenes,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(tc).items()},
    }
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"adapted {len(scenes)} scenes ({tc.variant}); report at {args.report}")
    return 0


def _scene_entry(scene, logits, trace):
    return {
        "scene": scene.scene_id,
        "update_steps": trace.update_steps,
        "kd_loss_first": trace.kd_losses[0] if trace.kd_losses else None,
        "kd_loss_last": trace.kd_losses[-1] if trace.kd_losses else None,
        "warning": trace.warning,
        "predicted_class_histogram": np.bincount(
            np.argmax(logits, axis=1), minlength=scene.num_classes
        ).tolist(),
    }


def _experiment_config(args, cfg) -> ExperimentConfig:
    section = _section(cfg, "eval")
    methods = args.methods.split(",") if args.methods else parse_like(section.get("methods", ""), [""])
    methods = [m for m in methods if m]
    if not methods:
        raise ConfigError("no methods requested; set --methods or [eval] methods")
    mask = None
    if args.mask:
        mask = [int(x) for x in args.mask.split(",")]
    elif "mask" in section:
        mask = parse_like(section["mask"], [0])
    label_map = None
    raw_map = args.label_map or section.get("label_map")
    if raw_map:
        label_map = {}
        for pair in raw_map.replace(",", " ").split():
            src, dst = pair.split(":")
            label_map[int(src)] = int(dst)
    ttt = build_dataclass(TTTConfig, _section(cfg, "ttt"))
    teacher_cfg = build_dataclass(SyntheticTeacherConfig, _section(cfg, "teacher"))
    mc = build_dataclass(ModelConfig, _section(cfg, "model"))
    return ExperimentConfig(
        methods=methods,
        scenes_dir=args.scenes or section.get("scenes", ""),
        teacher=args.teacher or section.get("teacher", "synthetic"),
        source_ckpt=args.source_ckpt or section.get("source_ckpt"),
        joint_ckpt=args.joint_ckpt or section.get("joint_ckpt"),
        mask=mask,
        label_map=label_map,
        backbone_k=mc.k,
        ttt=ttt,
        teacher_config=teacher_cfg,
    )


def cmd_eval(args):
    cfg = _load_cfg(args.config)
    exp = _experiment_config(args, cfg)
    report = run_experiment(exp)
    with open(args.report, "w") as fh:
        fh.write(report.to_json())
    if args.per_scene:
        per_scene_csv(report, args.per_scene)
    for method in exp.methods:
        print(f"{method:12s} mIoU {report.methods[method]['miou']:.4f}")
    print(f"report at {args.report}")
    return 0


def cmd_sweep(args):
    cfg = _load_cfg(args.config)
    exp = _experiment_config(args, cfg)
    values = [int(v) for v in args.values.split(",")]
    report = run_sweep(exp, args.kind, values)
    emit_plot_data(report, args.kind, args.out)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_json())
    print(f"sweep CSV at {args.out}")
    return 0


def cmd_grad_check(args):
    from .checks import gradient_suite

    results = gradient_suite(n_seeds=args.seeds, eps=args.eps)
    worst = 0.0
    for name, err in sorted(results.items()):
        print(f"{name:20s} max relative error {err:.3e}")
        worst = max(worst, err)
    if worst >= args.tolerance:
        raise NumericError(f"gradient check failed: worst error {worst:.3e} >= {args.tolerance:.0e}")
    print(f"all gradients within {args.tolerance:.0e}")
    return 0


def cmd_bench(args):
    cfg = BenchmarkConfig()
    if args.quick:
        cfg.n_source, cfg.n_target, cfg.seeds = 8, 4, (0,)
        cfg.train.epochs = 6
        cfg.ttt.steps = 5
    result = run_benchmark(cfg, verbose=True)
    print(f"\nseed-mean mIoU on shifted target ({cfg.shift}):")
    for method, value in result["mean_shifted"].items():
        print(f"  {method:12s} {value:.4f}")
    print("seed-mean mIoU on clean target:")
    for method, value in result["mean_clean"].items():
        print(f"  {method:12s} {value:.4f}")
    if args.report:
        payload = {k: v for k, v in result.items() if k != "descent_traces"}
        with open(args.report, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        print(f"report at {args.report}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ttseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate synthetic scenes")
    p.add_argument("--spec", dest="config", help="config file with a [scene] section")
    p.add_argument("--preset", help="scene preset: default, single-cam, floor-only")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("shift", help="apply a named shift profile to a scene directory")
    p.add_argument("--profile", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_shift)

    p = sub.add_parser("teacher", help="precompute teacher feature caches")
    p.add_argument("--scenes", required=True)
    p.add_argument("--config", help="config file with a [teacher] section")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_teacher)

    p = sub.add_parser("train", help="joint training on a scene directory")
    p.add_argument("--config", help="config file with [train]/[model]/[augment] sections")
    p.add_argument("--scenes", required=True)
    p.add_argument("--teacher", default="synthetic", help="feature cache dir or 'synthetic'")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-epoch loss CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--w-kd", dest="w_kd", type=float, help="distillation weight (0 = single-task)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ttt", help="test-time adaptation over a scene directory")
    p.add_argument("--model", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--teacher", default="synthetic")
    p.add_argument("--config")
    p.add_argument("--variant", choices=("offline", "online"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rotations", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--online-steps-total", action="store_true",
                   help="online: one update per scene instead of one per rotation")
    p.add_argument("--report", required=True)
    p.add_argument("--trace", help="per-step loss CSV")
    p.set_defaults(fn=cmd_ttt)

    p = sub.add_parser("eval", help="evaluate methods and write a report")
    p.add_argument("--config")
    p.add_argument("--methods", help="comma list, e.g. source-only,ttt-kd")
    p.add_argument("--scenes")
    p.add_argument("--teacher")
    p.add_argument("--source-ckpt", dest="source_ckpt")
    p.add_argument("--joint-ckpt", dest="joint_ckpt")
    p.add_argument("--mask", help="comma list of class ids to evaluate")
    p.add_argument("--label-map", dest="label_map", help="gt remap pairs src:dst,...")
    p.add_argument("--report", required=True)
    p.add_argument("--per-scene", dest="per_scene", help="per-scene mIoU CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="mIoU sweeps over steps / stride / image count")
    p.add_argument("--config")
    p.add_argument("--kind", required=True, choices=("steps-curve", "stride-curve", "images-curve"))
    p.add_argument("--values", required=True, help="comma list of sweep values")
    p.add_argument("--methods", default="ttt-kd")
    p.add_argument("--scenes")
    p.add_argument("--teacher")
    p.add_argument("--source-ckpt", dest="source_ckpt")
    p.add_argument("--joint-ckpt", dest="joint_ckpt")
    p.add_argument("--mask")
    p.add_argument("--label-map", dest="label_map")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("bench", help="run the seeded shift benchmark")
    p.add_argument("--quick", action="store_true", help="tiny sizes for a smoke run")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except TtsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
