"""Synthetic indoor scene generation, distribution-shift profiles and
training-time augmentations.

Scenes are rooms (floor, walls, ceiling) furnished with box-built objects;
points are sampled on surfaces with outward normals and class colors, and
cameras render them by nearest-point z-buffer splatting. Everything is a
pure function of (inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AugmentError, ConfigError, ShiftError
from .scene import Camera, Scene, zbuffer_visible

CLASS_NAMES = ("floor", "wall", "ceiling", "table", "chair", "cabinet", "sofa", "clutter")

CLASS_COLORS = np.array(
    [
        [0.45, 0.33, 0.22],  # floor
        [0.82, 0.80, 0.74],  # wall
        [0.93, 0.93, 0.90],  # ceiling
        [0.55, 0.36, 0.18],  # table
        [0.75, 0.15, 0.16],  # chair
        [0.18, 0.30, 0.65],  # cabinet
        [0.16, 0.52, 0.25],  # sofa
        [0.72, 0.62, 0.15],  # clutter
    ],
    dtype=np.float64,
)

# object class draw weights per generation style
OBJECT_WEIGHTS = {
    "standard": {"table": 0.22, "chair": 0.26, "cabinet": 0.16, "sofa": 0.16, "clutter": 0.20},
    "sparse": {"table": 0.10, "chair": 0.15, "cabinet": 0.30, "sofa": 0.30, "clutter": 0.15},
    "cluttered": {"table": 0.15, "chair": 0.20, "cabinet": 0.10, "sofa": 0.10, "clutter": 0.45},
}

# per-class anisotropic restyle factors used by the "style-shift" profile
STYLE_RESTYLE = {
    "boxy": {3: (1.25, 1.25, 0.7), 4: (1.3, 1.3, 0.8), 5: (0.8, 0.8, 1.3), 6: (1.25, 0.9, 0.75), 7: (1.4, 1.4, 1.4)},
}


@dataclass
class SceneSpec:
    extent_x: tuple = (3.2, 5.0)
    extent_y: tuple = (3.2, 5.0)
    extent_z: tuple = (2.5, 3.0)
    n_points: tuple = (700, 900)
    n_objects: tuple = (3, 6)
    num_classes: int = 8
    style: str = "standard"
    layout: str = "room"  # "room" or "floor" (single plane, for forced-geometry tests)
    cameras: int = 4
    image_size: int = 64
    focal: float = 44.0
    color_mode: str = "rgb"  # "none" zeroes colors (single-sensor, coords-only preset)
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.cameras < 1:
            raise ConfigError(f"need at least one camera, got {self.cameras}")
        if min(self.extent_x) <= 0 or min(self.extent_y) <= 0 or min(self.extent_z) <= 0:
            raise ConfigError("room extents must be positive")
        if self.n_points[0] < 16 or self.n_points[1] < self.n_points[0]:
            raise ConfigError(f"bad point count range {self.n_points}")
        if self.style not in OBJECT_WEIGHTS:
            raise ConfigError(f"unknown style {self.style!r}; known: {sorted(OBJECT_WEIGHTS)}")
        if self.layout not in ("room", "floor"):
            raise ConfigError(f"unknown layout {self.layout!r}")


def spec_preset(name: str) -> SceneSpec:
    """Named scene-spec presets checked into the code for reproducible runs."""
    if name == "default":
        return SceneSpec()
    if name == "single-cam":
        # single camera, geometry-only features: the sparse outdoor-like setting
        return SceneSpec(cameras=1, color_mode="none")
    if name == "floor-only":
        return SceneSpec(layout="floor", n_objects=(0, 0))
    raise ConfigError(f"unknown scene preset {name!r}; known: default, single-cam, floor-only")


# ---------------------------------------------------------------------------
# geometry: rectangles with outward normals, boxes built from them

_FaceList = list  # of (origin, edge_a, edge_b, normal, class_id)


def _rect(origin, ea, eb, normal, cls) -> tuple:
    return (np.asarray(origin, float), np.asarray(ea, float), np.asarray(eb, float), np.asarray(normal, float), cls)


def _box_faces(lo, hi, cls, include_bottom=False) -> _FaceList:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dx, dy, dz = hi - lo
    faces = [
        _rect(lo + [0, 0, dz], [dx, 0, 0], [0, dy, 0], [0, 0, 1], cls),  # top
        _rect(lo, [dx, 0, 0], [0, 0, dz], [0, -1, 0], cls),
        _rect(lo + [0, dy, 0], [dx, 0, 0], [0, 0, dz], [0, 1, 0], cls),
        _rect(lo, [0, dy, 0], [0, 0, dz], [-1, 0, 0], cls),
        _rect(lo + [dx, 0, 0], [0, dy, 0], [0, 0, dz], [1, 0, 0], cls),
    ]
    if include_bottom:
        faces.append(_rect(lo, [dx, 0, 0], [0, dy, 0], [0, 0, -1], cls))
    return faces


def _face_area(face):
    _, ea, eb, _, _ = face
    return float(np.linalg.norm(np.cross(ea, eb)))


def _make_object(kind: str, rng, room) -> _FaceList:
    lx, ly, _ = room
    px = rng.uniform(0.4, lx - 0.4)
    py = rng.uniform(0.4, ly - 0.4)
    if kind == "table":
        w, d = rng.uniform(0.8, 1.5), rng.uniform(0.6, 1.1)
        h = rng.uniform(0.62, 0.78)
        faces = _box_faces([px - w / 2, py - d / 2, h - 0.06], [px + w / 2, py + d / 2, h], 3)
        for sx in (-1, 1):
            for sy in (-1, 1):
                cx, cy = px + sx * (w / 2 - 0.06), py + sy * (d / 2 - 0.06)
                faces += _box_faces([cx - 0.03, cy - 0.03, 0], [cx + 0.03, cy + 0.03, h - 0.06], 3)
        return faces
    if kind == "chair":
        s = rng.uniform(0.4, 0.5)
        h = rng.uniform(0.4, 0.5)
        faces = _box_faces([px - s / 2, py - s / 2, h - 0.05], [px + s / 2, py + s / 2, h], 4)
        faces += _box_faces([px - s / 2, py - s / 2, h], [px + s / 2, py - s / 2 + 0.05, h + rng.uniform(0.35, 0.5)], 4)
        return faces
    if kind == "cabinet":
        w, d = rng.uniform(0.5, 1.2), rng.uniform(0.3, 0.5)
        h = rng.uniform(1.0, 1.9)
        return _box_faces([px - w / 2, py - d / 2, 0], [px + w / 2, py + d / 2, h], 5)
    if kind == "sofa":
        w, d = rng.uniform(1.4, 2.0), rng.uniform(0.75, 0.95)
        faces = _box_faces([px - w / 2, py - d / 2, 0], [px + w / 2, py + d / 2, rng.uniform(0.38, 0.45)], 6)
        faces += _box_faces([px - w / 2, py - d / 2, 0], [px + w / 2, py - d / 2 + 0.2, rng.uniform(0.7, 0.85)], 6)
        return faces
    if kind == "clutter":
        s = rng.uniform(0.12, 0.4)
        z0 = 0.0
        return _box_faces([px - s / 2, py - s / 2, z0], [px + s / 2, py + s / 2, z0 + rng.uniform(0.1, 0.5)], 7)
    raise ConfigError(f"unknown object kind {kind!r}")


def _room_faces(room) -> _FaceList:
    lx, ly, lz = room
    return [
        _rect([0, 0, 0], [lx, 0, 0], [0, ly, 0], [0, 0, 1], 0),  # floor
        _rect([0, 0, lz], [lx, 0, 0], [0, ly, 0], [0, 0, -1], 2),  # ceiling
        _rect([0, 0, 0], [lx, 0, 0], [0, 0, lz], [0, 1, 0], 1),
        _rect([0, ly, 0], [lx, 0, 0], [0, 0, lz], [0, -1, 0], 1),
        _rect([0, 0, 0], [0, ly, 0], [0, 0, lz], [1, 0, 0], 1),
        _rect([lx, 0, 0], [0, ly, 0], [0, 0, lz], [-1, 0, 0], 1),
    ]


def _allocate(weights, total):
    """Largest-remainder allocation of `total` items proportional to weights."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _look_at(position, target):
    forward = np.asarray(target, float) - np.asarray(position, float)
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def camera_rig(spec: SceneSpec, room) -> list:
    lx, ly, lz = room
    center = np.array([lx / 2, ly / 2, 0.45 * lz])
    cams = []
    for i in range(spec.cameras):
        theta = 2.0 * np.pi * i / spec.cameras + 0.5
        pos = np.array([lx / 2 + 0.40 * lx * np.cos(theta), ly / 2 + 0.40 * ly * np.sin(theta), 0.8 * lz])
        cams.append(
            Camera(
                rotation=_look_at(pos, center),
                position=pos,
                fx=spec.focal,
                fy=spec.focal,
                cx=spec.image_size / 2,
                cy=spec.image_size / 2,
                width=spec.image_size,
                height=spec.image_size,
            )
        )
    return cams


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Deterministic scene from (spec, seed): geometry, renders, correspondences."""
    spec.validate()
    rng = np.random.default_rng(seed)
    room = (
        rng.uniform(*spec.extent_x),
        rng.uniform(*spec.extent_y),
        rng.uniform(*spec.extent_z),
    )

    if spec.layout == "floor":
        faces = [_room_faces(room)[0]]
    else:
        faces = _room_faces(room)
        kinds = list(OBJECT_WEIGHTS[spec.style])
        probs = np.array([OBJECT_WEIGHTS[spec.style][k] for k in kinds])
        n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1)) if spec.n_objects[1] > 0 else 0
        for _ in range(n_obj):
            kind = kinds[rng.choice(len(kinds), p=probs / probs.sum())]
            faces += _make_object(kind, rng, room)

    total = int(rng.integers(spec.n_points[0], spec.n_points[1] + 1))
    # object surfaces are small; oversample them relative to bare area
    areas = np.array([_face_area(f) for f in faces])
    weights = areas * np.where(np.array([f[4] for f in faces]) >= 3, 3.0, 1.0)
    counts = _allocate(weights, total)

    pts, normals, labels = [], [], []
    for face, count in zip(faces, counts):
        if count == 0:
            continue
        origin, ea, eb, normal, cls = face
        ab = rng.random((count, 2))
        pts.append(origin + ab[:, :1] * ea + ab[:, 1:] * eb)
        normals.append(np.broadcast_to(normal, (count, 3)).copy())
        labels.append(np.full(count, cls, dtype=np.int64))
    points = np.concatenate(pts)
    normals = np.concatenate(normals)
    labels = np.concatenate(labels)

    colors = CLASS_COLORS[labels] + rng.uniform(-0.05, 0.05, size=(labels.size, 3))
    colors = np.clip(colors, 0.0, 1.0)
    if spec.color_mode == "none":
        colors[:] = 0.0

    feats = np.concatenate([normals, colors], axis=1).astype(np.float32)
    cams = camera_rig(spec, room)
    images, correspondences = [], []
    for cam in cams:
        idx, ui, vi = zbuffer_visible(points, cam)
        image = np.zeros((cam.height, cam.width, 3), dtype=np.float32)
        image[vi, ui] = colors[idx].astype(np.float32)
        images.append(image)
        correspondences.append(np.column_stack([idx, ui, vi]))

    return Scene(points.astype(np.float32), feats, labels, images, correspondences,
                 spec.num_classes, scene_id=f"seed{seed}")


# ---------------------------------------------------------------------------
# distribution shift


@dataclass
class ShiftProfile:
    coord_sigma: float = 0.0
    color_gain: tuple = (1.0, 1.0, 1.0)
    color_bias: tuple = (0.0, 0.0, 0.0)
    hue_rot: float = 0.0  # radians, about the gray axis
    density: float = 1.0
    normal_sigma: float = 0.0
    style: str | None = None

    def validate(self):
        if not (0.0 < self.density <= 4.0):
            raise ShiftError(f"density factor must be in (0, 4], got {self.density}")
        if self.coord_sigma < 0 or self.normal_sigma < 0:
            raise ShiftError("noise sigmas must be >= 0")
        if self.style is not None and self.style not in STYLE_RESTYLE:
            raise ShiftError(f"unknown restyle {self.style!r}; known: {sorted(STYLE_RESTYLE)}")

    def is_identity(self):
        return (
            self.coord_sigma == 0.0
            and tuple(self.color_gain) == (1.0, 1.0, 1.0)
            and tuple(self.color_bias) == (0.0, 0.0, 0.0)
            and self.hue_rot == 0.0
            and self.density == 1.0
            and self.normal_sigma == 0.0
            and self.style is None
        )


SHIFT_PRESETS = {
    "identity": ShiftProfile(),
    "sensor-A": ShiftProfile(
        coord_sigma=0.025,
        color_gain=(0.55, 0.85, 1.30),
        color_bias=(0.16, -0.06, 0.08),
        hue_rot=0.7,
        density=0.8,
        normal_sigma=0.25,
    ),
    "sensor-B": ShiftProfile(
        coord_sigma=0.05,
        color_gain=(1.25, 0.6, 0.7),
        color_bias=(-0.05, 0.12, 0.0),
        hue_rot=-0.9,
        density=1.5,
        normal_sigma=0.4,
    ),
    "style-shift": ShiftProfile(style="boxy", coord_sigma=0.01),
}


def shift_preset(name: str) -> ShiftProfile:
    if name not in SHIFT_PRESETS:
        raise ConfigError(f"unknown shift preset {name!r}; known: {sorted(SHIFT_PRESETS)}")
    return SHIFT_PRESETS[name]


def _hue_rotation_matrix(angle: float):
    axis = np.ones(3) / np.sqrt(3.0)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def apply_shift(scene: Scene, profile: ShiftProfile, seed: int) -> Scene:
    """Corrupt a scene per the profile. Labels ride along with their points;
    images stay as captured (the shift models the 3D acquisition, not the
    cameras), and correspondences keep their pixels, reindexed when points
    are dropped."""
    profile.validate()
    out = scene.copy()
    if profile.is_identity():
        return out
    rng = np.random.default_rng(seed)

    n = out.n_points
    target = int(round(n * profile.density))
    if target < 16:
        raise ShiftError(f"density {profile.density} would leave {target} < 16 points")
    if profile.density < 1.0:
        keep = np.sort(rng.choice(n, size=target, replace=False))
        remap = np.full(n, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        out.points = out.points[keep]
        out.feats = out.feats[keep]
        out._labels = out._labels[keep]
        corr2 = []
        for corr in out.correspondences:
            if corr.size == 0:
                corr2.append(corr)
                continue
            new_idx = remap[corr[:, 0]]
            alive = new_idx >= 0
            kept = corr[alive].copy()
            kept[:, 0] = new_idx[alive]
            corr2.append(kept)
        out.correspondences = corr2
    elif profile.density > 1.0:
        extra = target - n
        dup = rng.integers(0, n, size=extra)
        jitter = rng.normal(0.0, 0.005, size=(extra, 3)).astype(np.float32)
        out.points = np.concatenate([out.points, out.points[dup] + jitter])
        out.feats = np.concatenate([out.feats, out.feats[dup]])
        out._labels = np.concatenate([out._labels, out._labels[dup]])

    if profile.style is not None:
        factors = STYLE_RESTYLE[profile.style]
        pts = out.points.astype(np.float64)
        normals = out.feats[:, :3].astype(np.float64)
        for cls, s in factors.items():
            mask = out._labels == cls
            if not mask.any():
                continue
            s = np.asarray(s, dtype=np.float64)
            centroid = pts[mask].mean(axis=0)
            pts[mask] = centroid + (pts[mask] - centroid) * s
            normals[mask] = normals[mask] / s
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        out.points = pts.astype(np.float32)
        out.feats[:, :3] = (normals / np.maximum(norms, 1e-12)).astype(np.float32)

    if profile.coord_sigma > 0:
        out.points = out.points + rng.normal(0.0, profile.coord_sigma, size=out.points.shape).astype(np.float32)

    if profile.normal_sigma > 0:
        normals = out.feats[:, :3].astype(np.float64)
        normals += rng.normal(0.0, profile.normal_sigma, size=normals.shape)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        out.feats[:, :3] = (normals / np.maximum(norms, 1e-12)).astype(np.float32)

    gain = np.asarray(profile.color_gain, dtype=np.float64)
    bias = np.asarray(profile.color_bias, dtype=np.float64)
    if profile.hue_rot != 0.0 or (gain != 1.0).any() or (bias != 0.0).any():
        rgb = out.feats[:, 3:6].astype(np.float64)
        if profile.hue_rot != 0.0:
            rgb = rgb @ _hue_rotation_matrix(profile.hue_rot).T
        rgb = rgb * gain + bias
        out.feats[:, 3:6] = np.clip(rgb, 0.0, 1.0).astype(np.float32)

    return out


# ---------------------------------------------------------------------------
# training augmentations


@dataclass
class AugmentConfig:
    mirror_x: bool = True
    mirror_y: bool = True
    rotate: bool = True
    scale: tuple = (0.9, 1.1)
    translate: float = 0.2
    jitter_sigma: float = 0.005
    crop_min: float = 0.0  # 0 disables; otherwise keep-box fraction lower bound
    brightness: float = 0.1
    contrast: float = 0.1
    rgb_shift: float = 0.05
    mix_prob: float = 0.5

    @staticmethod
    def identity() -> "AugmentConfig":
        return AugmentConfig(
            mirror_x=False, mirror_y=False, rotate=False, scale=(1.0, 1.0), translate=0.0,
            jitter_sigma=0.0, crop_min=0.0, brightness=0.0, contrast=0.0, rgb_shift=0.0, mix_prob=0.0,
        )

    def is_identity(self):
        return self == AugmentConfig.identity()


def mix_scenes(a: Scene, b: Scene) -> Scene:
    """Concatenate two scenes; the second scene's correspondences are
    reindexed past the first scene's points."""
    if a.num_classes != b.num_classes:
        raise ConfigError("cannot mix scenes with different class palettes")
    offset = a.n_points
    corr_b = [np.column_stack([c[:, 0] + offset, c[:, 1], c[:, 2]]) if c.size else c.copy()
              for c in b.correspondences]
    maps = None
    if a.teacher_maps is not None and b.teacher_maps is not None:
        maps = list(a.teacher_maps) + list(b.teacher_maps)
    return Scene(
        np.concatenate([a.points, b.points]),
        np.concatenate([a.feats, b.feats]),
        np.concatenate([a._labels, b._labels]),
        a.images + b.images,
        a.correspondences + corr_b,
        a.num_classes,
        scene_id=f"{a.scene_id}+{b.scene_id}",
        teacher_maps=maps,
    )


def _drop_points(scene: Scene, keep_mask) -> Scene:
    keep = np.nonzero(keep_mask)[0]
    remap = np.full(scene.n_points, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    corr2 = []
    for corr in scene.correspondences:
        if corr.size == 0:
            corr2.append(corr)
            continue
        new_idx = remap[corr[:, 0]]
        alive = new_idx >= 0
        kept = corr[alive].copy()
        kept[:, 0] = new_idx[alive]
        corr2.append(kept)
    return Scene(scene.points[keep], scene.feats[keep], scene._labels[keep], scene.images,
                 corr2, scene.num_classes, scene_id=scene.scene_id, teacher_maps=scene.teacher_maps)


def augment(scene: Scene, config: AugmentConfig, seed, partner: Scene | None = None) -> Scene:
    """Seeded training augmentation; labels are transported with their points."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if config.is_identity():
        return scene.copy()

    out = scene
    if partner is not None and config.mix_prob > 0 and rng.random() < config.mix_prob:
        out = mix_scenes(out, partner)
    else:
        out = out.copy()

    pts = out.points.astype(np.float64)
    normals = out.feats[:, :3].astype(np.float64)

    if config.mirror_x and rng.random() < 0.5:
        pts[:, 0] *= -1.0
        normals[:, 0] *= -1.0
    if config.mirror_y and rng.random() < 0.5:
        pts[:, 1] *= -1.0
        normals[:, 1] *= -1.0
    if config.rotate:
        ang = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(ang), np.sin(ang)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        centroid = pts.mean(axis=0)
        pts = (pts - centroid) @ rot.T + centroid
        normals = normals @ rot.T
    if config.scale != (1.0, 1.0):
        s = rng.uniform(*config.scale)
        centroid = pts.mean(axis=0)
        pts = centroid + (pts - centroid) * s
    if config.translate > 0:
        pts += rng.uniform(-config.translate, config.translate, size=3)
    if config.jitter_sigma > 0:
        pts += rng.normal(0.0, config.jitter_sigma, size=pts.shape)

    out.points = pts.astype(np.float32)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    out.feats[:, :3] = (normals / np.maximum(norms, 1e-12)).astype(np.float32)

    if config.crop_min > 0:
        lo, hi = out.points.min(axis=0), out.points.max(axis=0)
        frac = rng.uniform(config.crop_min, 1.0)
        cropped = None
        for attempt in range(8):
            f = min(1.0, frac + attempt * (1.0 - frac) / 8.0)
            size = (hi - lo) * f
            origin = lo + rng.uniform(0.0, 1.0, size=3) * (hi - lo - size)
            inside = np.all((out.points >= origin) & (out.points <= origin + size), axis=1)
            if inside.sum() >= 16:
                cropped = _drop_points(out, inside)
                break
        if cropped is None:
            raise AugmentError("crop kept fewer than 16 points in 8 attempts")
        out = cropped

    if config.brightness > 0 or config.contrast > 0 or config.rgb_shift > 0:
        rgb = out.feats[:, 3:6].astype(np.float64)
        if config.brightness > 0:
            rgb += rng.uniform(-config.brightness, config.brightness)
        if config.contrast > 0:
            factor = rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)
            mean = rgb.mean()
            rgb = (rgb - mean) * factor + mean
        if config.rgb_shift > 0:
            rgb += rng.uniform(-config.rgb_shift, config.rgb_shift, size=3)
        out.feats[:, 3:6] = np.clip(rgb, 0.0, 1.0).astype(np.float32)

    return out
