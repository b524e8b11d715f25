"""3D segmentation model: point backbone with kNN max-pool aggregation, a
label projector and a distillation projector, plus parameter grouping,
freezing and snapshot/restore with a binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BN_EVAL, Tensor
from .errors import CheckpointError, ConfigError, ShapeError

GROUP_BACKBONE = "backbone"
GROUP_LABEL = "proj_label"
GROUP_KD = "proj_kd"
GROUPS = (GROUP_BACKBONE, GROUP_LABEL, GROUP_KD)

_TAG = {GROUP_BACKBONE: 0, GROUP_LABEL: 1, GROUP_KD: 2, "buffer": 3}
_TAG_INV = {v: k for k, v in _TAG.items()}

CKPT_MAGIC = b"TTTC"
CKPT_VERSION = 1


class ParamStore:
    """Named tensors partitioned into the three trainable groups plus
    non-trainable buffers (BN running statistics)."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self._group: dict[str, str] = {}
        self._buffers: set[str] = set()
        self.frozen: set[str] = set()

    def add_param(self, name, array, group):
        if group not in GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        if name in self.tensors:
            raise ConfigError(f"duplicate tensor name {name!r}")
        self.tensors[name] = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self._group[name] = group

    def add_buffer(self, name, array, group=GROUP_BACKBONE):
        if name in self.tensors:
            raise ConfigError(f"duplicate tensor name {name!r}")
        self.tensors[name] = Tensor(np.asarray(array, dtype=np.float32), requires_grad=False)
        self._group[name] = group
        self._buffers.add(name)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def group_of(self, name):
        return "buffer" if name in self._buffers else self._group[name]

    def is_buffer(self, name):
        return name in self._buffers

    def set_freeze(self, groups, frozen: bool = True):
        for g in groups:
            if g not in GROUPS:
                raise ConfigError(f"unknown parameter group {g!r}")
        if frozen:
            self.frozen |= set(groups)
        else:
            self.frozen -= set(groups)

    def frozen_names(self):
        return {n for n in self.tensors if not self.is_buffer(n) and self._group[n] in self.frozen}

    def trainable_names(self):
        return [n for n in self.tensors if not self.is_buffer(n) and self._group[n] not in self.frozen]

    def params(self):
        return {n: t for n, t in self.tensors.items() if not self.is_buffer(n)}

    def grads(self, names=None):
        """Collect gradients for the given (default: trainable) parameters;
        gradients of frozen groups are computed by backward but discarded here."""
        names = self.trainable_names() if names is None else names
        out = {}
        for n in names:
            t = self.tensors[n]
            if t.grad is not None:
                out[n] = t.grad
        return out

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def bytes_of(self, names):
        return b"".join(self.tensors[n].data.tobytes() for n in sorted(names))

    def group_names(self, group):
        if group == "buffer":
            return sorted(self._buffers)
        return sorted(n for n in self.tensors if n not in self._buffers and self._group[n] == group)


@dataclass
class BackboneConfig:
    widths: tuple = (6, 64, 64, 128)
    k: int = 8
    agg_blocks: int = 2  # kNN aggregation before each of the last `agg_blocks` linears

    def validate(self):
        if any(w <= 0 for w in self.widths) or len(self.widths) < 2:
            raise ConfigError(f"bad backbone widths {self.widths}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.agg_blocks <= len(self.widths) - 1:
            raise ConfigError(f"agg_blocks {self.agg_blocks} exceeds layer count")


@dataclass
class Checkpoint:
    """Deep value copy of a ParamStore (+ optional optimizer state)."""

    arrays: dict  # name -> (group_tag_name, ndarray)
    frozen: frozenset
    opt_state: dict | None = None


class SegModel:
    """Backbone + label projector + distillation projector over a ParamStore."""

    def __init__(self, backbone: BackboneConfig | None = None, num_classes: int = 8,
                 teacher_dim: int = 64, hidden: int = 128, seed: int = 0,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        self.backbone_config = backbone or BackboneConfig()
        self.backbone_config.validate()
        self.num_classes = num_classes
        self.teacher_dim = teacher_dim
        self.hidden = hidden
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.params = ParamStore()
        self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        widths = self.backbone_config.widths
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params.add_param(f"backbone.lin{i}.W", w, GROUP_BACKBONE)
            self.params.add_param(f"backbone.lin{i}.b", np.zeros(fan_out), GROUP_BACKBONE)
            self.params.add_param(f"backbone.bn{i}.gamma", np.ones(fan_out), GROUP_BACKBONE)
            self.params.add_param(f"backbone.bn{i}.beta", np.zeros(fan_out), GROUP_BACKBONE)
            self.params.add_buffer(f"backbone.bn{i}.mean", np.zeros(fan_out))
            self.params.add_buffer(f"backbone.bn{i}.var", np.ones(fan_out))
        feat_dim = widths[-1]
        for group, out_dim in ((GROUP_LABEL, self.num_classes), (GROUP_KD, self.teacher_dim)):
            dims = (feat_dim, self.hidden, out_dim)
            for i in range(2):
                w = rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1]))
                self.params.add_param(f"{group}.lin{i}.W", w, group)
                self.params.add_param(f"{group}.lin{i}.b", np.zeros(dims[i + 1]), group)

    # ------------------------------------------------------------------ forward

    def neighbor_indices(self, coords):
        """Backbone neighborhoods: ties broken by neighbor coordinates so that
        the result is independent of point ordering."""
        return ad.knn_indices(coords, self.backbone_config.k, tie="lex")

    def backbone_forward(self, coords, feats, bn_mode: str = BN_EVAL, neighbors=None,
                         bn_momentum: float | None = None) -> Tensor:
        cfg = self.backbone_config
        n = np.asarray(coords).shape[0]
        if n < cfg.k:
            raise ShapeError(f"scene has {n} points but the backbone needs at least k={cfg.k}")
        feats = np.asarray(feats, dtype=np.float32)
        if feats.shape != (n, cfg.widths[0]):
            raise ShapeError(f"feats shape {feats.shape} does not match backbone input {(n, cfg.widths[0])}")
        if neighbors is None:
            neighbors = self.neighbor_indices(coords)
        momentum = self.bn_momentum if bn_momentum is None else bn_momentum

        p = self.params
        x = Tensor(feats)
        n_layers = len(cfg.widths) - 1
        for i in range(n_layers):
            if i >= n_layers - cfg.agg_blocks:
                x = ad.knn_aggregate(coords, x, cfg.k, neighbors=neighbors)
            x = ad.linear(x, p[f"backbone.lin{i}.W"], p[f"backbone.lin{i}.b"])
            x = ad.batchnorm(
                x,
                p[f"backbone.bn{i}.gamma"],
                p[f"backbone.bn{i}.beta"],
                p[f"backbone.bn{i}.mean"],
                p[f"backbone.bn{i}.var"],
                mode=bn_mode,
                momentum=momentum,
                eps=self.bn_eps,
            )
            x = ad.relu(x)
        return x

    def project_labels(self, f3d: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.linear(f3d, p["proj_label.lin0.W"], p["proj_label.lin0.b"]))
        return ad.linear(h, p["proj_label.lin1.W"], p["proj_label.lin1.b"])

    def project_kd(self, f3d: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.linear(f3d, p["proj_kd.lin0.W"], p["proj_kd.lin0.b"]))
        return ad.linear(h, p["proj_kd.lin1.W"], p["proj_kd.lin1.b"])

    def logits(self, coords, feats, bn_mode: str = BN_EVAL, neighbors=None) -> Tensor:
        return self.project_labels(self.backbone_forward(coords, feats, bn_mode, neighbors))

    def bn_affine_names(self):
        return [n for n in self.params.names() if ".bn" in n and (n.endswith("gamma") or n.endswith("beta"))]

    def bn_buffer_names(self):
        return [n for n in self.params.names() if self.params.is_buffer(n)]

    # ----------------------------------------------------------- snapshot/restore

    def snapshot(self, optimizer=None) -> Checkpoint:
        arrays = {n: (self.params.group_of(n), self.params[n].data.copy()) for n in self.params.names()}
        opt_state = optimizer.state_dict() if optimizer is not None else None
        return Checkpoint(arrays=arrays, frozen=frozenset(self.params.frozen), opt_state=opt_state)

    def restore(self, ckpt: Checkpoint, optimizer=None):
        if set(ckpt.arrays) != set(self.params.names()):
            missing = set(self.params.names()) ^ set(ckpt.arrays)
            raise CheckpointError(f"checkpoint/model tensor names differ: {sorted(missing)}")
        for name, (_tag, arr) in ckpt.arrays.items():
            t = self.params[name]
            if t.data.shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name!r}: model {t.data.shape}, checkpoint {arr.shape}")
            t.data[...] = arr
            t.grad = None
        self.params.frozen = set(ckpt.frozen)
        if optimizer is not None and ckpt.opt_state is not None:
            optimizer.load_state_dict(ckpt.opt_state)

    def clone(self) -> "SegModel":
        other = SegModel(
            backbone=BackboneConfig(**vars(self.backbone_config)),
            num_classes=self.num_classes,
            teacher_dim=self.teacher_dim,
            hidden=self.hidden,
            bn_momentum=self.bn_momentum,
            bn_eps=self.bn_eps,
        )
        other.restore(self.snapshot())
        return other


# ---------------------------------------------------------------------------
# checkpoint files: magic "TTTC", version u32, tensor count u32, per tensor:
# name u16-length + bytes, group tag u8, rank u8 + dims u32, f32 payload;
# optimizer state appended in the same framing with tag 255.


def _write_entry(fh, name: str, tag: int, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", tag))
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_entry(raw, off):
    (name_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    name = raw[off : off + name_len].decode("utf-8")
    off += name_len
    tag, rank = struct.unpack_from("<BB", raw, off)
    off += 2
    dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
    off += 4 * rank
    count = int(np.prod(dims)) if dims else 1
    nbytes = count * 4
    if off + nbytes > len(raw):
        raise CheckpointError("truncated checkpoint payload")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims).copy()
    off += nbytes
    return name, tag, arr, off


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            tag_name, arr = ckpt.arrays[name]
            _write_entry(fh, name, _TAG[tag_name], arr)
        frozen = ",".join(sorted(ckpt.frozen)).encode("utf-8")
        fh.write(struct.pack("<H", len(frozen)))
        fh.write(frozen)
        opt = ckpt.opt_state
        if opt is None:
            fh.write(struct.pack("<B", 0))
        else:
            kind = {"sgd": 1, "adamw": 2}[opt["kind"]]
            fh.write(struct.pack("<B", kind))
            fh.write(struct.pack("<Q", int(opt["step"])))
            if opt["kind"] == "sgd":
                fh.write(struct.pack("<d", float(opt["lr"])))
                fh.write(struct.pack("<I", 0))
            else:
                fh.write(
                    struct.pack(
                        "<5d",
                        float(opt["lr"]),
                        float(opt["betas"][0]),
                        float(opt["betas"][1]),
                        float(opt["eps"]),
                        float(opt["weight_decay"]),
                    )
                )
                moments = opt["moments"]
                fh.write(struct.pack("<I", 2 * len(moments)))
                for pname in sorted(moments):
                    _write_entry(fh, "m:" + pname, 255, moments[pname]["m"])
                    _write_entry(fh, "v:" + pname, 255, moments[pname]["v"])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", raw, 8)
    off = 12
    arrays = {}
    for _ in range(count):
        name, tag, arr, off = _read_entry(raw, off)
        if tag not in _TAG_INV:
            raise CheckpointError(f"{path}: unknown group tag {tag} for {name!r}")
        arrays[name] = (_TAG_INV[tag], arr)
    (frozen_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    frozen_txt = raw[off : off + frozen_len].decode("utf-8")
    off += frozen_len
    frozen = frozenset(g for g in frozen_txt.split(",") if g)
    (kind,) = struct.unpack_from("<B", raw, off)
    off += 1
    opt_state = None
    if kind == 1:
        (step,) = struct.unpack_from("<Q", raw, off)
        off += 8
        (lr,) = struct.unpack_from("<d", raw, off)
        off += 8
        off += 4  # empty moment count
        opt_state = {"kind": "sgd", "step": step, "lr": lr, "moments": {}}
    elif kind == 2:
        (step,) = struct.unpack_from("<Q", raw, off)
        off += 8
        lr, b1, b2, eps, wd = struct.unpack_from("<5d", raw, off)
        off += 40
        (n_moments,) = struct.unpack_from("<I", raw, off)
        off += 4
        moments: dict = {}
        for _ in range(n_moments):
            name, _tag, arr, off = _read_entry(raw, off)
            prefix, pname = name.split(":", 1)
            moments.setdefault(pname, {})[prefix] = arr
        opt_state = {
            "kind": "adamw",
            "step": step,
            "lr": lr,
            "betas": (b1, b2),
            "eps": eps,
            "weight_decay": wd,
            "moments": moments,
        }
    elif kind != 0:
        raise CheckpointError(f"{path}: unknown optimizer kind {kind}")
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(arrays=arrays, frozen=frozen, opt_state=opt_state)


def model_from_checkpoint(path, backbone: BackboneConfig | None = None, hidden: int = 128) -> SegModel:
    """Rebuild a model around a checkpoint; widths and head sizes are taken
    from the stored shapes, k must come from the backbone config."""
    ckpt = load_checkpoint(path)
    widths = []
    i = 0
    while f"backbone.lin{i}.W" in ckpt.arrays:
        w = ckpt.arrays[f"backbone.lin{i}.W"][1]
        if i == 0:
            widths.append(w.shape[0])
        widths.append(w.shape[1])
        i += 1
    if not widths:
        raise CheckpointError(f"{path}: no backbone tensors found")
    num_classes = ckpt.arrays["proj_label.lin1.W"][1].shape[1]
    teacher_dim = ckpt.arrays["proj_kd.lin1.W"][1].shape[1]
    hidden = ckpt.arrays["proj_label.lin0.W"][1].shape[1]
    cfg = backbone or BackboneConfig()
    cfg = BackboneConfig(widths=tuple(widths), k=cfg.k, agg_blocks=cfg.agg_blocks)
    model = SegModel(backbone=cfg, num_classes=num_classes, teacher_dim=teacher_dim, hidden=hidden)
    model.restore(ckpt)
    return model
