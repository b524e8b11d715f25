"""Point-cloud semantic segmentation with test-time training via 2D->3D
feature distillation from a frozen image teacher, benchmarked on synthetic
scenes under controllable distribution shift."""

from .autodiff import Tensor, backward, grad_check
from .model import BackboneConfig, SegModel
from .scene import Scene, load_scene, save_scene
from .synth import SceneSpec, ShiftProfile, apply_shift, augment, generate_scene
from .teacher import SyntheticTeacher, SyntheticTeacherConfig
from .trainer import TrainConfig, joint_train
from .ttt import TTTConfig, ttt_offline, ttt_online

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "BackboneConfig",
    "SegModel",
    "Scene",
    "load_scene",
    "save_scene",
    "SceneSpec",
    "ShiftProfile",
    "apply_shift",
    "augment",
    "generate_scene",
    "SyntheticTeacher",
    "SyntheticTeacherConfig",
    "TrainConfig",
    "joint_train",
    "TTTConfig",
    "ttt_offline",
    "ttt_online",
    "__version__",
]
