"""Frozen 2D feature teacher.

Two providers: a deterministic synthetic teacher that emits class-prototype
features with appearance mixing and nuisance noise (a desk-scale stand-in
for a large pretrained image model), and a file cache of precomputed maps,
which is the seam for plugging in features exported from any real model.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .scene import Scene

FEATURE_MAGIC = b"TTTF"
FEATURE_VERSION = 1


@dataclass
class TeacherFeatureMap:
    """H'xW'xD feature grid at `stride` pixels per cell."""

    grid: np.ndarray
    stride: int

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3:
            raise DataError(f"feature grid must be H'xW'xD, got {self.grid.shape}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")

    @property
    def dim(self):
        return self.grid.shape[2]


def sample_feature(fmap: TeacherFeatureMap, u: int, v: int):
    """Nearest-cell lookup; never interpolates."""
    gh, gw, _ = fmap.grid.shape
    row, col = int(v) // fmap.stride, int(u) // fmap.stride
    if u < 0 or v < 0 or row >= gh or col >= gw:
        raise ConfigError(f"pixel ({u}, {v}) outside the {gh * fmap.stride}x{gw * fmap.stride} feature extent")
    return fmap.grid[row, col]


def sample_features(fmap: TeacherFeatureMap, us, vs):
    """Vectorized nearest-cell lookup."""
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    rows, cols = vs // fmap.stride, us // fmap.stride
    gh, gw, _ = fmap.grid.shape
    if us.size and (us.min() < 0 or vs.min() < 0 or rows.max() >= gh or cols.max() >= gw):
        raise ConfigError("pixel coordinates outside the feature extent")
    return fmap.grid[rows, cols]


@dataclass
class SyntheticTeacherConfig:
    dim: int = 64
    stride: int = 4
    noise_sigma: float = 0.08
    appearance_alpha: float = 0.25
    smooth_radius: int = 1
    num_classes: int = 8
    seed: int = 7

    def validate(self):
        if self.dim < 8:
            raise ConfigError(f"feature dim must be >= 8, got {self.dim}")
        if not 0.0 <= self.appearance_alpha < 1.0:
            raise ConfigError(f"appearance alpha must be in [0, 1), got {self.appearance_alpha}")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


def class_prototypes(config: SyntheticTeacherConfig):
    """C+1 unit prototypes (last one for cells with no visible point),
    pairwise |cosine| < 0.5."""
    rng = np.random.default_rng(config.seed)
    protos = []
    for _ in range(config.num_classes + 1):
        for _attempt in range(256):
            v = rng.normal(size=config.dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ p) < 0.5 for p in protos):
                protos.append(v)
                break
        else:
            raise ConfigError("could not draw well-separated prototypes; increase dim")
    return np.stack(protos).astype(np.float64)


def _box_smooth(grid, radius):
    if radius <= 0:
        return grid
    h, w, _ = grid.shape
    padded = np.pad(grid, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(grid)
    count = (2 * radius + 1) ** 2
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out += padded[dy : dy + h, dx : dx + w]
    return out / count


class SyntheticTeacher:
    """Deterministic feature teacher; frozen, no trainable state."""

    def __init__(self, config: SyntheticTeacherConfig | None = None):
        self.config = config or SyntheticTeacherConfig()
        self.config.validate()
        self.prototypes = class_prototypes(self.config)
        rng = np.random.default_rng(self.config.seed + 1)
        # fixed RGB -> feature embedding for the appearance component
        self.appearance_proj = rng.normal(size=(3, self.config.dim)) / np.sqrt(3.0)

    def features_from_arrays(self, image, class_map) -> TeacherFeatureMap:
        """Feature map from an image and its per-pixel class map (-1 = empty)."""
        cfg = self.config
        h, w = image.shape[:2]
        if class_map.shape != (h, w):
            raise ConfigError(f"class map {class_map.shape} does not align with image {(h, w)}")
        gh = -(-h // cfg.stride)
        gw = -(-w // cfg.stride)

        cell_class = np.full((gh, gw), cfg.num_classes, dtype=np.int64)
        cell_rgb = np.zeros((gh, gw, 3), dtype=np.float64)
        for r in range(gh):
            for c in range(gw):
                ys, xs = r * cfg.stride, c * cfg.stride
                patch_cls = class_map[ys : ys + cfg.stride, xs : xs + cfg.stride]
                patch_rgb = image[ys : ys + cfg.stride, xs : xs + cfg.stride]
                cell_rgb[r, c] = patch_rgb.reshape(-1, 3).mean(axis=0)
                labeled = patch_cls[patch_cls >= 0]
                if labeled.size:
                    counts = np.bincount(labeled, minlength=cfg.num_classes)
                    cell_class[r, c] = counts.argmax()  # majority, ties to lower id

        appearance = cell_rgb @ self.appearance_proj
        appearance = _box_smooth(appearance, cfg.smooth_radius)
        norms = np.linalg.norm(appearance, axis=2, keepdims=True)
        appearance = appearance / np.maximum(norms, 1e-12)

        grid = (1.0 - cfg.appearance_alpha) * self.prototypes[cell_class] + cfg.appearance_alpha * appearance
        if cfg.noise_sigma > 0:
            content = zlib.crc32(image.tobytes()) ^ zlib.crc32(class_map.tobytes())
            noise_rng = np.random.default_rng((cfg.seed << 32) ^ content)
            grid = grid + noise_rng.normal(0.0, cfg.noise_sigma, size=grid.shape)
        norms = np.linalg.norm(grid, axis=2, keepdims=True)
        grid = grid / np.maximum(norms, 1e-12)
        return TeacherFeatureMap(grid.astype(np.float32), cfg.stride)

    def feature_map(self, scene: Scene, image_index: int) -> TeacherFeatureMap:
        return self.features_from_arrays(scene.images[image_index], scene.render_class_map(image_index))

    @property
    def dim(self):
        return self.config.dim


class CachedTeacher:
    """Loads precomputed feature maps from `<scene_id>_img<i>.tttf` files."""

    def __init__(self, directory):
        import os

        self.directory = str(directory)
        if not os.path.isdir(self.directory):
            raise DataError(f"teacher cache directory not found: {self.directory}")
        self._dim = None
        self._cache = {}

    def feature_map(self, scene: Scene, image_index: int) -> TeacherFeatureMap:
        import os

        if not scene.scene_id:
            raise ConfigError("cached teacher needs scenes with a scene_id")
        key = (scene.scene_id, image_index)
        if key not in self._cache:
            path = os.path.join(self.directory, f"{scene.scene_id}_img{image_index:02d}.tttf")
            self._cache[key] = load_feature_cache(path)
        fmap = self._cache[key]
        if self._dim is None:
            self._dim = fmap.dim
        return fmap

    @property
    def dim(self):
        if self._dim is None:
            import os

            names = sorted(f for f in os.listdir(self.directory) if f.endswith(".tttf"))
            if not names:
                raise DataError(f"no .tttf files in {self.directory}")
            self._dim = load_feature_cache(os.path.join(self.directory, names[0])).dim
        return self._dim


def teacher_maps_for_scene(teacher, scene: Scene) -> list:
    return [teacher.feature_map(scene, i) for i in range(len(scene.images))]


# ---------------------------------------------------------------------------
# cache files: magic "TTTF", version u32, H' u32, W' u32, D u32, stride u32,
# payload f32 row-major


def save_feature_cache(path, fmap: TeacherFeatureMap):
    gh, gw, d = fmap.grid.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIII", FEATURE_VERSION, gh, gw, d, fmap.stride))
        fh.write(fmap.grid.astype("<f4").tobytes())


def load_feature_cache(path) -> TeacherFeatureMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    try:
        version, gh, gw, d, stride = struct.unpack_from("<IIIII", raw, 4)
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = 24 + gh * gw * d * 4
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw) - 24} bytes, expected {gh}x{gw}x{d} f32")
    grid = np.frombuffer(raw, dtype="<f4", offset=24).reshape(gh, gw, d)
    if not np.isfinite(grid).all():
        raise DataError(f"{path}: payload contains non-finite values")
    return TeacherFeatureMap(grid.copy(), stride)
