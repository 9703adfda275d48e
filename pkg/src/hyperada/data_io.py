"""Bit-exact file formats and deterministic synthetic dataset generators.

Clouds use the SemanticKITTI layout: points as little-endian float32
(x, y, z, intensity) quadruples, labels as little-endian uint32 words with
the semantic class in the low 16 bits and the instance id in the high 16.
Tensors use a small self-describing container (magic, dtype tag, rank,
shape, row-major payload).  All generators are pure functions of
(seed, scene index).
"""

import json
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from hyperada.containers import UNLABELED, LabeledCloud, LabeledImage

TENSOR_MAGIC = b"HYTNSR01"
CHECKPOINT_MAGIC = b"HYCKPT01"
_DTYPE_TAGS = {0: "<f4", 1: "<f8", 2: "|u1", 3: "<u4"}
_TAG_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1,
            np.dtype("uint8"): 2, np.dtype("uint32"): 3}


class FormatError(ValueError):
    """Malformed file content; the message names the offending byte offset."""


@dataclass(frozen=True)
class CloudFilePair:
    points_path: Path
    labels_path: Path

    def __post_init__(self):
        object.__setattr__(self, "points_path", Path(self.points_path))
        object.__setattr__(self, "labels_path", Path(self.labels_path))


def _parse_points(raw, name="points file"):
    if len(raw) % 16 != 0:
        offset = len(raw) - (len(raw) % 16)
        raise FormatError(
            f"{name}: size {len(raw)} is not a multiple of 16 "
            f"(truncated record at offset {offset})"
        )
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(pts)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError(f"{name}: non-finite value at offset {idx * 4}")
    return pts.astype(np.float64)


def _parse_labels(raw, n_points, name="labels file"):
    if len(raw) % 4 != 0:
        offset = len(raw) - (len(raw) % 4)
        raise FormatError(
            f"{name}: size {len(raw)} is not a multiple of 4 "
            f"(truncated record at offset {offset})"
        )
    words = np.frombuffer(raw, dtype="<u4")
    if words.shape[0] != n_points:
        raise FormatError(
            f"{name}: {words.shape[0]} labels for {n_points} points "
            f"(mismatch detected at offset {len(raw)})"
        )
    semantic = (words & 0xFFFF).astype(np.int64)
    instance = (words >> 16).astype(np.int64)
    return semantic, instance


def read_cloud(pair):
    """Parse a points/labels file pair into a LabeledCloud."""
    raw_points = Path(pair.points_path).read_bytes()
    raw_labels = Path(pair.labels_path).read_bytes()
    pts = _parse_points(raw_points, str(pair.points_path))
    semantic, instance = _parse_labels(raw_labels, pts.shape[0], str(pair.labels_path))
    return LabeledCloud(pts, semantic, instance)


def write_cloud(cloud, pair):
    """Write a LabeledCloud in the binary cloud layout."""
    if np.any(cloud.labels < 0) or np.any(cloud.labels > 0xFFFF):
        raise ValueError("semantic labels must fit in 16 bits to be written")
    inst = cloud.instance_ids
    if inst is None:
        inst = np.zeros(cloud.n_points, dtype=np.int64)
    if np.any(inst < 0) or np.any(inst > 0xFFFF):
        raise ValueError("instance ids must fit in 16 bits to be written")
    Path(pair.points_path).write_bytes(
        np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
    )
    words = (inst.astype(np.uint32) << 16) | cloud.labels.astype(np.uint32)
    Path(pair.labels_path).write_bytes(words.astype("<u4").tobytes())


def write_tensor(array, path):
    """Write an array in the tensor container format."""
    arr = np.asarray(array)
    if arr.dtype not in _TAG_FOR:
        raise ValueError(f"unsupported tensor dtype {arr.dtype}")
    tag = _TAG_FOR[arr.dtype]
    header = TENSOR_MAGIC + struct.pack("<BB", tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag]).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path):
    """Read an array from the tensor container format."""
    raw = Path(path).read_bytes()
    name = str(path)
    if len(raw) < 10:
        raise FormatError(f"{name}: header truncated at offset {len(raw)}")
    if raw[:8] != TENSOR_MAGIC:
        raise FormatError(f"{name}: bad magic at offset 0")
    tag, rank = struct.unpack_from("<BB", raw, 8)
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{name}: unknown dtype tag {tag} at offset 8")
    if rank > 8:
        raise FormatError(f"{name}: implausible rank {rank} at offset 9")
    shape_end = 10 + 8 * rank
    if len(raw) < shape_end:
        raise FormatError(f"{name}: shape truncated at offset {len(raw)}")
    shape = struct.unpack_from(f"<{rank}Q", raw, 10) if rank else ()
    count = int(np.prod(shape, dtype=np.float64)) if rank else 1
    if count > 10**9:
        raise FormatError(f"{name}: implausible element count at offset 10")
    dtype = np.dtype(_DTYPE_TAGS[tag])
    expected = shape_end + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{name}: payload length {len(raw) - shape_end} does not match "
            f"shape {tuple(shape)} (expected end at offset {expected})"
        )
    return np.frombuffer(raw[shape_end:], dtype=dtype).reshape(shape).copy()


# -- class maps ----------------------------------------------------------------

@dataclass
class ClassMap:
    name: str
    mapping: dict
    ignore_ids: list

    def apply(self, raw_labels):
        """Map raw label ids to training ids; ignored/unknown ids become the
        unlabeled sentinel."""
        raw = np.asarray(raw_labels, dtype=np.int64)
        out = np.full(raw.shape, UNLABELED, dtype=np.int64)
        for raw_id, train_id in self.mapping.items():
            out[raw == raw_id] = train_id
        for raw_id in self.ignore_ids:
            out[raw == raw_id] = UNLABELED
        return out


def load_class_map(path):
    doc = json.loads(Path(path).read_text())
    for key in ("name", "mapping", "ignore_ids"):
        if key not in doc:
            raise FormatError(f"{path}: class map missing key {key!r}")
    mapping = {int(k): int(v) for k, v in doc["mapping"].items()}
    return ClassMap(name=doc["name"], mapping=mapping,
                    ignore_ids=[int(i) for i in doc["ignore_ids"]])


def save_class_map(class_map, path):
    doc = {
        "name": class_map.name,
        "mapping": {str(k): int(v) for k, v in sorted(class_map.mapping.items())},
        "ignore_ids": sorted(int(i) for i in class_map.ignore_ids),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


# -- synthetic worlds -----------------------------------------------------------

RGB_CLASSES = ("road", "sky", "building", "car", "pole")
LIDAR_CLASSES = ("ground", "car", "person", "trunk")


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Scene sizes plus the domain-shift knobs that separate target from
    source; source and target differ only through the knobs."""

    seed: int = 0
    scan_count: int = 4
    eval_count: int = 2
    height: int = 24
    width: int = 32
    points_per_scan: int = 2048
    noise_scale: float = 0.0
    hue_shift: float = 0.0
    thin_dropout: float = 0.0
    density_factor: float = 1.0
    beam_warp: float = 0.0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("image size must be at least 8x8")
        if self.points_per_scan < 64:
            raise ValueError("need at least 64 points per scan")
        if self.scan_count < 1 or self.eval_count < 1:
            raise ValueError("scan counts must be >= 1")
        if not 0 < self.density_factor <= 1:
            raise ValueError("density factor must lie in (0, 1]")
        if not 0 <= self.thin_dropout <= 1:
            raise ValueError("thin_dropout must lie in [0, 1]")


@dataclass
class WorldSplit:
    source: list
    target: list
    target_eval: list
    class_names: tuple


_RGB_BASE_COLORS = np.array([
    [0.35, 0.35, 0.38],  # road
    [0.55, 0.70, 0.95],  # sky
    [0.60, 0.45, 0.35],  # building
    [0.80, 0.15, 0.15],  # car
    [0.90, 0.85, 0.30],  # pole
])


def _rgb_scene_layout(cfg, scene_rng):
    """Label map for one scene: sky band, road band, buildings, cars, poles."""
    h, w = cfg.height, cfg.width
    labels = np.full((h, w), 1, dtype=np.int64)  # sky
    road_top = int(h * 0.65)
    labels[road_top:, :] = 0  # road
    n_buildings = int(scene_rng.integers(2, 4))
    for _ in range(n_buildings):
        bw = int(scene_rng.integers(w // 6, w // 3))
        bh = int(scene_rng.integers(h // 4, road_top - 2))
        x0 = int(scene_rng.integers(0, w - bw))
        labels[road_top - bh:road_top, x0:x0 + bw] = 2
    n_cars = int(scene_rng.integers(1, 3))
    for _ in range(n_cars):
        cw = max(3, w // 8)
        ch = max(2, h // 10)
        x0 = int(scene_rng.integers(0, w - cw))
        y0 = road_top - ch // 2
        labels[y0:y0 + ch, x0:x0 + cw] = 3
    n_poles = int(scene_rng.integers(2, 5))
    pole_cols = scene_rng.choice(w, size=n_poles, replace=False)
    pole_top = int(h * 0.25)
    for col in pole_cols:
        labels[pole_top:road_top + 1, col] = 4
    return labels


def _render_rgb(labels, scene_rng):
    base = _RGB_BASE_COLORS[labels]
    noise = scene_rng.normal(scale=0.02, size=base.shape)
    return np.clip(base + noise, 0.0, 1.0)


def _shift_rgb(image, cfg, shift_rng):
    """Apply the target-domain knobs: pole thinning, hue shift, noise."""
    labels = image.labels.copy()
    if cfg.thin_dropout > 0:
        pole_cols = np.unique(np.nonzero(labels == 4)[1])
        for col in pole_cols:
            if shift_rng.random() < cfg.thin_dropout:
                rows = labels[:, col] == 4
                neighbor = labels[:, col - 1] if col > 0 else labels[:, col + 1]
                labels[rows, col] = neighbor[rows]
    channels = _RGB_BASE_COLORS[labels] + (image.channels - _RGB_BASE_COLORS[image.labels])
    if cfg.hue_shift > 0:
        rolled = np.roll(channels, 1, axis=2)
        channels = (1 - cfg.hue_shift) * channels + cfg.hue_shift * rolled
    if cfg.noise_scale > 0:
        channels = channels + shift_rng.normal(scale=cfg.noise_scale, size=channels.shape)
    return LabeledImage(np.clip(channels, 0.0, 1.0), labels)


def generate_rgb_world(cfg):
    """Paired source/target image sets plus a target-style eval set."""
    def scene(index):
        scene_rng = np.random.default_rng([cfg.seed, index])
        labels = _rgb_scene_layout(cfg, scene_rng)
        return LabeledImage(_render_rgb(labels, scene_rng), labels)

    source, target = [], []
    for i in range(cfg.scan_count):
        img = scene(i)
        source.append(img.copy())
        shift_rng = np.random.default_rng([cfg.seed, i, 1])
        target.append(_shift_rgb(img, cfg, shift_rng))
    target_eval = []
    for i in range(cfg.eval_count):
        img = scene(10_000 + i)
        shift_rng = np.random.default_rng([cfg.seed, 10_000 + i, 1])
        target_eval.append(_shift_rgb(img, cfg, shift_rng))
    return WorldSplit(source, target, target_eval, RGB_CLASSES)


# LiDAR scene: ground plane plus boxes (cars) and cylinders (people, trunks)
# sampled by a multi-beam scanner at the origin.

_SENSOR_HEIGHT = 1.2
_MAX_RANGE = 30.0
_INTENSITY = {0: 0.2, 1: 0.7, 2: 0.5, 3: 0.35}


def _polar_spot(scene_rng, r_min, r_max):
    radius = scene_rng.uniform(r_min, r_max)
    angle = scene_rng.uniform(0.0, 2 * np.pi)
    return radius * np.cos(angle), radius * np.sin(angle)


def _lidar_scene_objects(scene_rng):
    objects = []
    for _ in range(int(scene_rng.integers(3, 6))):  # cars
        cx, cy = _polar_spot(scene_rng, 5.0, 11.0)
        objects.append(("box", 1, (cx, cy, 1.8, 0.9, 1.5)))
    for _ in range(int(scene_rng.integers(2, 5))):  # people
        cx, cy = _polar_spot(scene_rng, 4.0, 10.0)
        objects.append(("cyl", 2, (cx, cy, 0.3, 1.7)))
    for _ in range(int(scene_rng.integers(2, 5))):  # trunks
        cx, cy = _polar_spot(scene_rng, 4.0, 11.0)
        objects.append(("cyl", 3, (cx, cy, 0.25, 2.8)))
    return objects


def _ray_hits(dirs, objects):
    """Nearest hit distance and label per ray for the scene geometry."""
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    labels = np.full(n, -1, dtype=np.int64)
    inst = np.zeros(n, dtype=np.int64)
    dz = dirs[:, 2]
    down = dz < -1e-9
    t_ground = np.where(down, -_SENSOR_HEIGHT / np.where(down, dz, 1.0), np.inf)
    hit = t_ground < t_best
    t_best[hit] = t_ground[hit]
    labels[hit] = 0
    for obj_index, (kind, label, params) in enumerate(objects):
        if kind == "box":
            cx, cy, hx, hy, hz = params
            lo = np.array([cx - hx, cy - hy, 0.0])
            hi = np.array([cx + hx, cy + hy, hz])
            origin = np.array([0.0, 0.0, _SENSOR_HEIGHT])
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - origin) / dirs
                t2 = (hi - origin) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            t_obj = np.where((tmax >= tmin) & (tmax > 0), np.maximum(tmin, 1e-6), np.inf)
        else:
            cx, cy, radius, height = params
            ox, oy, oz = 0.0, 0.0, _SENSOR_HEIGHT
            a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
            b = 2 * (dirs[:, 0] * (ox - cx) + dirs[:, 1] * (oy - cy))
            cc = (ox - cx) ** 2 + (oy - cy) ** 2 - radius ** 2
            disc = b * b - 4 * a * cc
            ok = (disc >= 0) & (a > 1e-12)
            sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
            t_obj = np.where(ok, (-b - sqrt_disc) / (2 * np.where(a > 1e-12, a, 1.0)), np.inf)
            z_at = oz + t_obj * dirs[:, 2]
            t_obj = np.where((t_obj > 1e-6) & (z_at >= 0) & (z_at <= height), t_obj, np.inf)
        closer = t_obj < t_best
        t_best[closer] = t_obj[closer]
        labels[closer] = label
        inst[closer] = obj_index + 1
    valid = (t_best < _MAX_RANGE) & (labels >= 0)
    return t_best, labels, inst, valid


def _scan_cloud(cfg, scene_rng, objects, beam_warp=0.0, range_noise=0.0,
                density=1.0, shift_rng=None):
    n_beams = 16
    n_az = cfg.points_per_scan // n_beams
    elev = np.linspace(np.deg2rad(-22.0), np.deg2rad(4.0), n_beams)
    if beam_warp > 0:
        elev = elev + beam_warp * np.sin(2.0 * elev)
    az = np.linspace(0.0, 2 * np.pi, n_az, endpoint=False)
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([
        np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)
    ], axis=-1).reshape(-1, 3)
    t, labels, inst, valid = _ray_hits(dirs, objects)
    if range_noise > 0 and shift_rng is not None:
        t = t + shift_rng.normal(scale=range_noise, size=t.shape)
    origin = np.array([0.0, 0.0, _SENSOR_HEIGHT])
    pts = origin + np.where(valid, t, 0.0)[:, None] * dirs
    pts = pts[valid]
    labels = labels[valid]
    inst = inst[valid]
    intensity = np.array([_INTENSITY[k] for k in labels])
    intensity = np.clip(intensity + scene_rng.normal(scale=0.02, size=intensity.shape), 0, 1)
    cloud = np.column_stack([pts, intensity])
    if density < 1.0 and shift_rng is not None:
        keep_n = int(np.floor(density * cloud.shape[0]))
        keep = np.sort(shift_rng.permutation(cloud.shape[0])[:keep_n])
        cloud, labels, inst = cloud[keep], labels[keep], inst[keep]
    return LabeledCloud(cloud, labels, inst)


def generate_lidar_world(cfg):
    """Paired source/target cloud sets plus a target-style eval set."""
    def scene(index, shifted):
        scene_rng = np.random.default_rng([cfg.seed, index])
        objects = _lidar_scene_objects(scene_rng)
        intensity_rng = np.random.default_rng([cfg.seed, index, 2])
        if not shifted:
            return _scan_cloud(cfg, intensity_rng, objects)
        shift_rng = np.random.default_rng([cfg.seed, index, 3])
        return _scan_cloud(
            cfg, intensity_rng, objects,
            beam_warp=cfg.beam_warp, range_noise=cfg.noise_scale,
            density=cfg.density_factor, shift_rng=shift_rng,
        )

    source = [scene(i, shifted=False) for i in range(cfg.scan_count)]
    target = [scene(i, shifted=True) for i in range(cfg.scan_count)]
    target_eval = [scene(10_000 + i, shifted=True) for i in range(cfg.eval_count)]
    return WorldSplit(source, target, target_eval, LIDAR_CLASSES)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, arrays, meta):
    """Versioned binary checkpoint: magic, JSON header, raw array payloads."""
    names = sorted(arrays)
    header = {
        "version": 1,
        "meta": meta,
        "arrays": [
            {
                "name": name,
                "dtype": str(np.asarray(arrays[name]).dtype),
                "shape": list(np.asarray(arrays[name]).shape),
            }
            for name in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    for name in names:
        out.append(np.ascontiguousarray(arrays[name]).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    name = str(path)
    if len(raw) < 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{name}: bad checkpoint magic at offset 0")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + blob_len:
        raise FormatError(f"{name}: header truncated at offset {len(raw)}")
    header = json.loads(raw[12:12 + blob_len])
    if header.get("version") != 1:
        raise FormatError(f"{name}: unsupported checkpoint version")
    offset = 12 + blob_len
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{name}: array payload truncated at offset {offset}")
        arrays[spec["name"]] = np.frombuffer(
            raw[offset:offset + nbytes], dtype=dtype
        ).reshape(spec["shape"]).copy()
        offset += nbytes
    return arrays, header["meta"]
