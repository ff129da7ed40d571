"""Synthetic aerial-like scenes, overlapping patch crops, and flip/rotate augmentation.

Scenes stand in for real VHR tiles: roads are long thin strips, buildings
are roof-coloured rectangles (one roof colour is close to asphalt), cars
are small blobs on roads, and vegetation is a textured green region over
bare ground. Car-coloured clutter blobs lying off the roads are labelled
background, so telling them from cars needs surrounding context. Images are
float32 (3, H, W) in [0, 1]; label maps are uint8 (H, W).
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from scasnet.model import ConfigError, _from_dict

CLASS_NAMES = ("background", "building", "road", "car", "vegetation")
BACKGROUND, BUILDING, ROAD, CAR, VEGETATION = range(5)
AUGMENTATIONS = ("id", "hflip", "vflip", "rot90", "rot180", "rot270")
SUPERSAMPLE = 4

_GROUND = np.array([0.58, 0.52, 0.40])
_ROAD = np.array([0.33, 0.33, 0.35])
_VEG = np.array([0.22, 0.50, 0.18])
_ROOFS = np.array([[0.72, 0.33, 0.26], [0.80, 0.78, 0.74], [0.52, 0.36, 0.30], [0.40, 0.40, 0.43]])
_CARS = np.array([[0.15, 0.28, 0.85], [0.90, 0.82, 0.15], [0.10, 0.75, 0.80]])


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    # inclusive (min, max) object counts
    buildings: tuple = (2, 5)
    roads: tuple = (1, 2)
    cars: tuple = (2, 5)
    vegetation: tuple = (1, 3)
    clutter: tuple = (1, 3)
    noise: float = 0.04
    seed: int = 0

    @property
    def num_classes(self):
        return len(CLASS_NAMES)


def _coverage(mask_fn, h, w):
    """Anti-aliased coverage in [0, 1] of a shape given on a supersampled grid."""
    s = SUPERSAMPLE
    yy, xx = np.mgrid[0:h * s, 0:w * s]
    ys = (yy + 0.5) / s
    xs = (xx + 0.5) / s
    m = mask_fn(ys, xs).astype(np.float32)
    return m.reshape(h, s, w, s).mean(axis=(1, 3))


def _paint(image, labels, cov, color, cls):
    color = np.asarray(color, dtype=np.float32)
    if color.ndim == 1:
        color = color[:, None, None]
    image[...] = image * (1 - cov) + color * cov
    labels[cov >= 0.5] = cls


def _count(rng, lo_hi):
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1)) if hi > 0 else 0


def generate_scene(spec):
    """Return ``(image, labels)`` for one seeded scene.

    Shapes are drawn vegetation -> roads -> buildings -> clutter -> cars; a
    later shape overwrites earlier ones where it covers at least half a
    pixel.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    low = ndimage.gaussian_filter(rng.standard_normal((h, w)), 6) * 3.0
    image = (_GROUND[:, None, None] * (1 + 0.08 * low)[None]).astype(np.float32)
    labels = np.zeros((h, w), dtype=np.uint8)

    for _ in range(_count(rng, spec.vegetation)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(10, 26, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)

        def blob(ys, xs, cy=cy, cx=cx, ry=ry, rx=rx, phase=phase):
            ang = np.arctan2(ys - cy, xs - cx)
            wobble = 1 + 0.15 * np.sin(3 * ang + phase[0]) + 0.1 * np.sin(5 * ang + phase[1])
            return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= wobble ** 2

        tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0) * 2.5
        color = _VEG[:, None, None] * (1 + 0.25 * tex)[None]
        _paint(image, labels, _coverage(blob, h, w), color, VEGETATION)

    road_lines = []
    for _ in range(_count(rng, spec.roads)):
        vertical = bool(rng.integers(0, 2))
        extent = w if vertical else h
        c = rng.uniform(0.15 * extent, 0.85 * extent)
        half = rng.uniform(3.0, 5.0)
        road_lines.append((vertical, c, half))

        def strip(ys, xs, vertical=vertical, c=c, half=half):
            return np.abs((xs if vertical else ys) - c) <= half

        _paint(image, labels, _coverage(strip, h, w), _ROAD * rng.uniform(0.9, 1.1), ROAD)

    for _ in range(_count(rng, spec.buildings)):
        bh, bw = rng.uniform(14, 34, size=2)
        y0, x0 = rng.uniform(-4, h - bh + 4), rng.uniform(-4, w - bw + 4)
        roof = _ROOFS[rng.integers(len(_ROOFS))] * rng.uniform(0.92, 1.08)

        def rect(ys, xs, y0=y0, x0=x0, bh=bh, bw=bw):
            return (ys >= y0) & (ys < y0 + bh) & (xs >= x0) & (xs < x0 + bw)

        _paint(image, labels, _coverage(rect, h, w), np.clip(roof, 0, 1), BUILDING)

    def blob_params(on_road):
        long_, short = rng.uniform(14, 20), rng.uniform(8, 11)
        if on_road:
            vertical, c, _half = road_lines[rng.integers(len(road_lines))]
            along = rng.uniform(0, h if vertical else w)
            cy, cx = (along, c) if vertical else (c, along)
        else:
            vertical = bool(rng.integers(0, 2))
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = (long_ / 2, short / 2) if vertical else (short / 2, long_ / 2)

        def shape(ys, xs):
            return (np.abs(ys - cy) / ry) ** 4 + (np.abs(xs - cx) / rx) ** 4 <= 1.0

        return shape, _CARS[rng.integers(len(_CARS))]

    for _ in range(_count(rng, spec.clutter)):
        for _attempt in range(20):
            shape, color = blob_params(False)
            cov = _coverage(shape, h, w)
            if not np.any((cov > 0) & (labels == ROAD)):
                _paint(image, labels, cov, color * rng.uniform(0.9, 1.05), BACKGROUND)
                break

    for _ in range(_count(rng, spec.cars)):
        shape, color = blob_params(bool(road_lines))
        _paint(image, labels, _coverage(shape, h, w), color, CAR)

    image += rng.normal(0.0, spec.noise, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def normalize(image):
    """Map [0, 1] RGB to the roughly zero-mean network input range."""
    return (np.asarray(image, dtype=np.float32) - 0.5) * 4.0


# --------------------------------------------------------------------- patches


@dataclass
class Patch:
    image: np.ndarray
    labels: np.ndarray
    source: str = ""
    offset: tuple = (0, 0)
    aug: str = "id"


def crop_starts(length, patch, stride):
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] + patch < length:
        starts.append(length - patch)
    return starts


def crop_patches(image, labels, patch, overlap, source=""):
    """Grid crops with stride ``patch - overlap``; the last row/column is
    shifted inward so the whole image is covered."""
    h, w = labels.shape
    if patch < 1 or patch > h or patch > w:
        raise ValueError(f"patch size {patch} does not fit image {h}x{w}")
    if not 0 <= overlap < patch:
        raise ValueError(f"overlap must lie in [0, {patch}), got {overlap}")
    stride = patch - overlap
    out = []
    for y in crop_starts(h, patch, stride):
        for x in crop_starts(w, patch, stride):
            out.append(Patch(
                image[:, y:y + patch, x:x + patch].copy(),
                labels[y:y + patch, x:x + patch].copy(),
                source, (y, x), "id",
            ))
    return out


def apply_augmentation(arr, tag):
    """Apply ``tag`` to the last two axes of ``arr``."""
    if tag == "id":
        return arr.copy()
    if tag == "hflip":
        return np.ascontiguousarray(arr[..., ::-1])
    if tag == "vflip":
        return np.ascontiguousarray(arr[..., ::-1, :])
    if tag.startswith("rot"):
        return np.ascontiguousarray(np.rot90(arr, int(tag[3:]) // 90, axes=(-2, -1)))
    raise ValueError(f"unknown augmentation {tag!r}")


def augment(patches):
    """Original, horizontal flip, vertical flip, and 90/180/270 degree
    counterclockwise rotations of every patch."""
    out = []
    for p in patches:
        if p.labels.shape[0] != p.labels.shape[1]:
            raise ValueError(f"rotation needs square patches, got {p.labels.shape}")
        for tag in AUGMENTATIONS:
            out.append(Patch(apply_augmentation(p.image, tag), apply_augmentation(p.labels, tag), p.source, p.offset, tag))
    return out


# ------------------------------------------------------------------ file I/O


def _write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def write_ppm(path, image):
    rgb = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    rgb = np.ascontiguousarray(rgb.transpose(1, 2, 0))
    h, w = rgb.shape[:2]
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm(path, labels):
    lab = np.ascontiguousarray(np.asarray(labels, dtype=np.uint8))
    h, w = lab.shape
    _write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + lab.tobytes())


def _read_netpbm(path, magic):
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return buf[pos + 1:], h, w


def read_ppm(path):
    data, h, w = _read_netpbm(path, b"P6")
    rgb = np.frombuffer(data, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return (rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_pgm(path):
    data, h, w = _read_netpbm(path, b"P5")
    return np.frombuffer(data, dtype=np.uint8, count=h * w).reshape(h, w).copy()


# ------------------------------------------------------------------- datasets


@dataclass
class DataConfig:
    scene_size: int = 128
    train_scenes: int = 64
    val_scenes: int = 16
    test_scenes: int = 16
    patch_size: int = 64
    overlap: int = 16
    augment: bool = True
    buildings: list = field(default_factory=lambda: [2, 5])
    roads: list = field(default_factory=lambda: [1, 2])
    cars: list = field(default_factory=lambda: [2, 5])
    vegetation: list = field(default_factory=lambda: [1, 3])
    clutter: list = field(default_factory=lambda: [1, 3])
    noise: float = 0.04
    seed: int = 0

    @classmethod
    def from_dict(cls, data, where="data"):
        return _from_dict(cls, data, where)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.train_scenes < 1:
            raise ConfigError("train_scenes must be >= 1")
        if self.val_scenes < 0 or self.test_scenes < 0:
            raise ConfigError("val_scenes and test_scenes must be >= 0")
        if not 8 <= self.patch_size <= self.scene_size:
            raise ConfigError("patch_size must lie in [8, scene_size]")
        if not 0 <= self.overlap < self.patch_size:
            raise ConfigError("overlap must lie in [0, patch_size)")
        for name in ("buildings", "roads", "cars", "vegetation", "clutter"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} must be a [min, max] pair with 0 <= min <= max")
        return self

    def scene_spec(self, seed):
        return SceneSpec(
            self.scene_size, self.scene_size, tuple(self.buildings), tuple(self.roads),
            tuple(self.cars), tuple(self.vegetation), tuple(self.clutter), self.noise, seed,
        )


SPLITS = ("train", "val", "test")


def scene_seed(base, split, index):
    return int(np.random.SeedSequence([base, SPLITS.index(split), index]).generate_state(1)[0])


def write_dataset(cfg, out_dir):
    """Generate scenes for every split and augmented training patches.

    Returns the manifest dict (also written to ``manifest.json``).
    """
    cfg.validate()
    out = Path(out_dir)
    splits, train_patches = {}, []
    for split in SPLITS:
        count = getattr(cfg, f"{split}_scenes")
        sdir = out / "scenes" / split
        sdir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(count):
            image, labels = generate_scene(cfg.scene_spec(scene_seed(cfg.seed, split, i)))
            stem = f"scenes/{split}/{i:04d}"
            write_ppm(out / f"{stem}.ppm", image)
            write_pgm(out / f"{stem}.pgm", labels)
            entries.append({"id": f"{split}/{i:04d}", "image": f"{stem}.ppm", "label": f"{stem}.pgm"})
            if split == "train":
                # crop the quantized image so patches match what is on disk
                pset = crop_patches(read_ppm(out / f"{stem}.ppm"), labels, cfg.patch_size, cfg.overlap, f"train/{i:04d}")
                train_patches.extend(augment(pset) if cfg.augment else pset)
        splits[split] = entries
    pdir = out / "patches" / "train"
    pdir.mkdir(parents=True, exist_ok=True)
    pentries = []
    for j, p in enumerate(train_patches):
        stem = f"patches/train/{j:05d}"
        write_ppm(out / f"{stem}.ppm", p.image)
        write_pgm(out / f"{stem}.pgm", p.labels)
        pentries.append({
            "image": f"{stem}.ppm", "label": f"{stem}.pgm",
            "source": p.source, "offset": list(p.offset), "aug": p.aug,
        })
    manifest = {
        "format_version": 1,
        "classes": list(CLASS_NAMES),
        "config": cfg.to_dict(),
        "splits": splits,
        "patches": {"train": pentries},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    for key in ("classes", "splits", "patches"):
        if key not in manifest:
            raise ValueError(f"dataset manifest {path} lacks {key!r}")
    return manifest


def load_patches(data_dir, manifest=None):
    """Stack the training patches: images [N, 3, P, P] float32, labels [N, P, P]."""
    manifest = manifest or read_manifest(data_dir)
    root = Path(data_dir)
    entries = manifest["patches"]["train"]
    if not entries:
        raise ValueError("dataset has no training patches")
    images = np.stack([read_ppm(root / e["image"]) for e in entries])
    labels = np.stack([read_pgm(root / e["label"]) for e in entries]).astype(np.int64)
    return images, labels


def load_split(data_dir, split, manifest=None):
    """Return a list of ``(id, image, labels)`` scenes for ``split``."""
    manifest = manifest or read_manifest(data_dir)
    root = Path(data_dir)
    return [
        (e["id"], read_ppm(root / e["image"]), read_pgm(root / e["label"]))
        for e in manifest["splits"][split]
    ]
