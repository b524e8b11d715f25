"""Scene data model: points, per-point features, labels, camera renders and
point<->pixel correspondences, plus the binary scene file format.

A point carries a 6-dim feature row (unit normal xyz, RGB in [0,1]). Labels
are read through the ``labels`` property, which counts accesses; the
adaptation code paths must never touch it (audited in the tests). Internal
scene transforms move labels through ``_labels`` — they transport the array,
they do not consume it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

SCENE_MAGIC = b"TTTS"
SCENE_VERSION = 1


@dataclass
class Camera:
    """Pinhole camera: world -> camera rotation, camera position, intrinsics."""

    rotation: np.ndarray  # (3,3) world->camera
    position: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


def project_point(point, cam: Camera):
    """Project a world point; returns (u, v, depth) or None when outside the frustum."""
    p = cam.rotation @ (np.asarray(point, dtype=np.float64) - cam.position)
    depth = p[2]
    if depth <= 1e-9:
        return None
    u = cam.fx * p[0] / depth + cam.cx
    v = cam.fy * p[1] / depth + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return u, v, depth


def project_points(points, cam: Camera):
    """Vectorized projection. Returns (u, v, depth, valid) arrays."""
    p = (np.asarray(points, dtype=np.float64) - cam.position) @ cam.rotation.T
    depth = p[:, 2]
    safe = np.where(depth > 1e-9, depth, 1.0)
    u = cam.fx * p[:, 0] / safe + cam.cx
    v = cam.fy * p[:, 1] / safe + cam.cy
    valid = (depth > 1e-9) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, depth, valid


def zbuffer_visible(points, cam: Camera):
    """Visible point per pixel cell: the nearest in-frustum point wins its cell.

    Returns (indices, u_cells, v_cells) of the winners, ordered by pixel.
    Ties on depth break toward the lower point index.
    """
    u, v, depth, valid = project_points(points, cam)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return idx, idx, idx
    ui = np.floor(u[idx]).astype(np.int64)
    vi = np.floor(v[idx]).astype(np.int64)
    cell = vi * cam.width + ui
    order = np.lexsort((idx, depth[idx], cell))
    cell_sorted = cell[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    win = order[first]
    return idx[win], ui[win], vi[win]


class Scene:
    """One sample: geometry, per-point features, labels, renders, correspondences."""

    def __init__(self, points, feats, labels, images, correspondences, num_classes,
                 scene_id: str = "", teacher_maps=None):
        self.points = np.ascontiguousarray(points, dtype=np.float32)
        self.feats = np.ascontiguousarray(feats, dtype=np.float32)
        self._labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.images = [np.ascontiguousarray(im, dtype=np.float32) for im in images]
        self.correspondences = [np.ascontiguousarray(c, dtype=np.int64).reshape(-1, 3) for c in correspondences]
        self.num_classes = int(num_classes)
        self.scene_id = scene_id
        self.teacher_maps = teacher_maps  # optional pipeline cache, never serialized
        self.label_reads = 0
        self._validate()

    def _validate(self):
        n = self.points.shape[0]
        if self.points.shape != (n, 3):
            raise DataError(f"points must be Nx3, got {self.points.shape}")
        if self.feats.shape != (n, 6):
            raise DataError(f"feats must be Nx6, got {self.feats.shape}")
        if self._labels.shape != (n,):
            raise DataError(f"labels must be length N={n}, got {self._labels.shape}")
        if n and (self._labels.min() < 0 or self._labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if len(self.images) != len(self.correspondences):
            raise DataError("images and correspondences lists differ in length")
        for im, corr in zip(self.images, self.correspondences):
            if im.ndim != 3 or im.shape[2] != 3:
                raise DataError(f"image must be HxWx3, got {im.shape}")
            if corr.size and corr[:, 0].max() >= n:
                raise DataError("correspondence point index out of range")

    @property
    def labels(self):
        self.label_reads += 1
        return self._labels

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def image_size(self):
        if self.images:
            return self.images[0].shape[0], self.images[0].shape[1]
        return 0, 0

    def copy(self) -> "Scene":
        return Scene(
            self.points.copy(),
            self.feats.copy(),
            self._labels.copy(),
            [im.copy() for im in self.images],
            [c.copy() for c in self.correspondences],
            self.num_classes,
            scene_id=self.scene_id,
            teacher_maps=None if self.teacher_maps is None else list(self.teacher_maps),
        )

    def render_class_map(self, image_index: int):
        """Per-pixel class ids of an image, -1 where no point is visible.

        This reconstructs a render product of scene generation (the z-buffer
        winner's class per pixel); it reads labels through the private field
        because it is part of the 2D capture, not of any adaptation path.
        """
        h, w = self.images[image_index].shape[:2]
        cmap = np.full((h, w), -1, dtype=np.int16)
        corr = self.correspondences[image_index]
        if corr.size:
            cmap[corr[:, 2], corr[:, 1]] = self._labels[corr[:, 0]].astype(np.int16)
        return cmap

    def total_pairs(self):
        return int(sum(c.shape[0] for c in self.correspondences))


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Bitwise equality of all stored arrays."""
    if a.num_classes != b.num_classes or len(a.images) != len(b.images):
        return False
    if a.points.tobytes() != b.points.tobytes() or a.feats.tobytes() != b.feats.tobytes():
        return False
    if a._labels.tobytes() != b._labels.tobytes():
        return False
    for ia, ib in zip(a.images, b.images):
        if ia.shape != ib.shape or ia.tobytes() != ib.tobytes():
            return False
    for ca, cb in zip(a.correspondences, b.correspondences):
        if ca.shape != cb.shape or ca.tobytes() != cb.tobytes():
            return False
    return True


def rotate_up(scene: Scene, angle: float) -> Scene:
    """Rotate points and normals about +z through the scene centroid.

    Colors, labels, images and correspondences are untouched: only the 3D
    input pose changes, the 2D side stays as captured.
    """
    if not np.isfinite(angle):
        raise ConfigError(f"rotation angle must be finite, got {angle}")
    out = scene.copy()
    if angle == 0.0:
        return out
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=np.float64)
    centroid = scene.points.astype(np.float64).mean(axis=0)
    pts = (scene.points.astype(np.float64) - centroid) @ rot.T + centroid
    out.points = pts.astype(np.float32)
    normals = scene.feats[:, :3].astype(np.float64) @ rot.T
    out.feats[:, :3] = normals.astype(np.float32)
    return out


def limit_images(scene: Scene, count: int) -> Scene:
    """Keep only the first `count` images (and their correspondences)."""
    if count < 0:
        raise ConfigError(f"image count must be >= 0, got {count}")
    out = scene.copy()
    out.images = out.images[:count]
    out.correspondences = out.correspondences[:count]
    if out.teacher_maps is not None:
        out.teacher_maps = out.teacher_maps[:count]
    return out


# ---------------------------------------------------------------------------
# binary scene files
#
# layout (little-endian): magic "TTTS", version u32, N u32, C u32,
# image count u32, H u32, W u32, points f32*3N, feats f32*6N, labels u16*N,
# each image f32*3HW, then per image: count u32 + (u32 idx, u16 u, u16 v).


def save_scene(path, scene: Scene):
    h, w = scene.image_size
    n = scene.n_points
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<IIIIII", SCENE_VERSION, n, scene.num_classes, len(scene.images), h, w))
        fh.write(scene.points.astype("<f4").tobytes())
        fh.write(scene.feats.astype("<f4").tobytes())
        fh.write(scene._labels.astype("<u2").tobytes())
        for im in scene.images:
            fh.write(im.astype("<f4").tobytes())
        rec = np.dtype([("idx", "<u4"), ("u", "<u2"), ("v", "<u2")])
        for corr in scene.correspondences:
            fh.write(struct.pack("<I", corr.shape[0]))
            packed = np.zeros(corr.shape[0], dtype=rec)
            packed["idx"], packed["u"], packed["v"] = corr[:, 0], corr[:, 1], corr[:, 2]
            fh.write(packed.tobytes())


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SCENE_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {SCENE_MAGIC!r}")
    try:
        version, n, c, n_images, h, w = struct.unpack_from("<IIIIII", raw, 4)
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    if version != SCENE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = 4 + 24

    def take(count, dtype):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(raw):
            raise DataError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    points = take(3 * n, "<f4").reshape(n, 3)
    feats = take(6 * n, "<f4").reshape(n, 6)
    labels = take(n, "<u2").astype(np.int64)
    images = [take(3 * h * w, "<f4").reshape(h, w, 3) for _ in range(n_images)]
    rec = np.dtype([("idx", "<u4"), ("u", "<u2"), ("v", "<u2")])
    correspondences = []
    for _ in range(n_images):
        if off + 4 > len(raw):
            raise DataError(f"{path}: truncated correspondence block")
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        packed = take(count, rec)
        rows = np.column_stack(
            [packed["idx"].astype(np.int64), packed["u"].astype(np.int64), packed["v"].astype(np.int64)]
        ) if count else np.zeros((0, 3), dtype=np.int64)
        correspondences.append(rows)
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    import os

    scene_id = os.path.splitext(os.path.basename(str(path)))[0]
    return Scene(points, feats, labels, images, correspondences, c, scene_id=scene_id)


def load_scene_dir(path):
    """All .ttts scenes in a directory, sorted by file name."""
    import os

    names = sorted(f for f in os.listdir(path) if f.endswith(".ttts"))
    if not names:
        raise DataError(f"no .ttts scenes found in {path}")
    return [load_scene(os.path.join(path, name)) for name in names]
