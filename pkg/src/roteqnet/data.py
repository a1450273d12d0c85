"""Synthetic oriented-shapes dataset, tiling and band stacking.

Patches show discs, bars, L-shapes and rings on a textured background,
each object at an independent uniformly drawn orientation.  Bars and
L-shapes share one colour and discs and rings another, so telling the
members of a pair apart takes shape, not colour.  Labels and pixels are
rendered from the same geometry (pixel-centre inside tests).

On-disk layout::

    DIR/manifest.json
    DIR/train/patch_00000.rtqt          image (bands, h, w), raw values
    DIR/train/patch_00000_labels.rtqt   labels (h, w) as float32 ids
    DIR/val/...

Images are stored un-normalised.  ``load_split`` z-scores each band with
the training statistics recorded in the manifest.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .serialization import atomic_write, canonical_json, load_rtqt, save_rtqt

MANIFEST_VERSION = 1
IGNORE_ID = 255
CLASS_NAMES = ["background", "disc", "bar", "lshape", "ring"]
PALETTE = [(40, 110, 40), (220, 60, 50), (250, 220, 40), (60, 90, 230), (200, 80, 220)]
IGNORE_COLOR = (0, 0, 0)
# per class base colour; paired classes deliberately share colours
_COLORS = {
    0: (0.35, 0.45, 0.30),
    1: (0.75, 0.35, 0.30),
    2: (0.30, 0.35, 0.75),
    3: (0.30, 0.35, 0.75),
    4: (0.75, 0.35, 0.30),
}
_HEIGHTS = {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0}


class OvercrowdedError(ValueError):
    """Raised when objects cannot be placed within the allowed overlap."""


@dataclass
class SyntheticShapesConfig:
    classes: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    objects_min: int = 2
    objects_max: int = 5
    scale_jitter: float = 0.15
    texture_noise: float = 0.08
    pixel_noise: float = 0.03
    color_jitter: float = 0.05
    height_band: bool = False
    max_overlap: float = 0.0
    placement_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        unknown = set(self.classes) - set(CLASS_NAMES)
        if unknown or self.classes[0] != "background":
            raise ValueError(f"classes must start with 'background' and be drawn from {CLASS_NAMES}")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError(f"invalid object count range [{self.objects_min}, {self.objects_max}]")
        if not 0.0 <= self.max_overlap <= 0.5:
            raise ValueError(f"max_overlap must lie in [0, 0.5], got {self.max_overlap}")
        if not 0.0 <= self.scale_jitter < 0.5:
            raise ValueError(f"scale_jitter must lie in [0, 0.5), got {self.scale_jitter}")

    @property
    def n_bands(self) -> int:
        return 4 if self.height_band else 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticShapesConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Patch:
    image: np.ndarray  # (bands, h, w)
    labels: np.ndarray  # (h, w) integer ids, IGNORE_ID for unlabeled pixels

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} differ spatially")


@dataclass
class ShapeSpec:
    class_name: str
    center: tuple[float, float]  # (row, col)
    orientation: float  # degrees, counter-clockwise
    scale: float

    @property
    def radius(self) -> float:
        return {"disc": 6.0, "ring": 7.5, "bar": 13.0, "lshape": 11.5}[self.class_name] * self.scale

    def inside(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Pixel-centre membership test for the given coordinates."""
        gx = cols - self.center[1]
        gy = self.center[0] - rows
        t = np.deg2rad(self.orientation)
        lx = np.cos(t) * gx + np.sin(t) * gy
        ly = -np.sin(t) * gx + np.cos(t) * gy
        s = self.scale
        if self.class_name == "disc":
            return lx**2 + ly**2 <= (6.0 * s) ** 2
        if self.class_name == "ring":
            r2 = lx**2 + ly**2
            return (r2 <= (7.5 * s) ** 2) & (r2 >= (4.0 * s) ** 2)
        if self.class_name == "bar":
            return (np.abs(lx) <= 12.0 * s) & (np.abs(ly) <= 2.0 * s)
        if self.class_name == "lshape":
            arm, width = 16.0 * s, 6.0 * s
            px, py = lx + arm / 2, ly + arm / 2
            return ((px >= 0) & (px <= arm) & (py >= 0) & (py <= width)) | (
                (px >= 0) & (px <= width) & (py >= 0) & (py <= arm)
            )
        raise ValueError(f"no geometry for class {self.class_name!r}")


def sample_objects(cfg: SyntheticShapesConfig, rng: np.random.Generator, size: int) -> list[ShapeSpec]:
    """Draw the object list of one patch (class, centre, orientation, scale)."""
    shapes = [c for c in cfg.classes if c != "background"]
    count = int(rng.integers(cfg.objects_min, cfg.objects_max + 1)) if shapes else 0
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    occupied = np.zeros((size, size), dtype=bool)
    placed = []
    for _ in range(count):
        name = shapes[int(rng.integers(len(shapes)))]
        for _attempt in range(cfg.placement_attempts):
            scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
            spec = ShapeSpec(name, (0.0, 0.0), float(rng.uniform(0.0, 360.0)), float(scale))
            margin = spec.radius + 1.0
            if 2 * margin >= size:
                raise OvercrowdedError(f"a {name} does not fit into a {size}x{size} patch")
            spec.center = (float(rng.uniform(margin, size - 1 - margin)), float(rng.uniform(margin, size - 1 - margin)))
            mask = spec.inside(rows, cols)
            area = mask.sum()
            if area == 0:
                continue
            if (mask & occupied).sum() <= cfg.max_overlap * area:
                occupied |= mask
                placed.append(spec)
                break
        else:
            raise OvercrowdedError(
                f"could not place object {len(placed) + 1} of {count} within overlap {cfg.max_overlap} "
                f"after {cfg.placement_attempts} attempts"
            )
    return placed


def render_patch(cfg: SyntheticShapesConfig, rng: np.random.Generator, size: int) -> tuple[Patch, list[ShapeSpec]]:
    objects = sample_objects(cfg, rng, size)
    ids = {name: i for i, name in enumerate(cfg.classes)}
    labels = np.zeros((size, size), dtype=np.int64)
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    bands = cfg.n_bands
    image = np.empty((bands, size, size))
    texture = gaussian_filter(rng.normal(size=(3, size, size)), sigma=(0, 3, 3))
    texture /= texture.std() + 1e-12
    for b in range(3):
        image[b] = _COLORS[0][b] + cfg.texture_noise * texture[b]
    if cfg.height_band:
        image[3] = 0.1 * gaussian_filter(rng.normal(size=(size, size)), 4)
    for spec in objects:
        mask = spec.inside(rows, cols)
        cid = ids[spec.class_name]
        labels[mask] = cid
        tone = np.array(_COLORS[CLASS_NAMES.index(spec.class_name)]) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
        for b in range(3):
            image[b][mask] = tone[b]
        if cfg.height_band:
            image[3][mask] = _HEIGHTS[CLASS_NAMES.index(spec.class_name)] * (1.0 + 0.1 * rng.uniform(-1, 1))
    image += cfg.pixel_noise * rng.normal(size=image.shape)
    return Patch(image.astype(np.float32), labels), objects


def _stratified_split(keys: list[tuple], n_val: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean validation mask with class-presence signatures spread proportionally."""
    n = len(keys)
    order = rng.permutation(n)
    groups: dict[tuple, list[int]] = {}
    for i in order:
        groups.setdefault(keys[i], []).append(int(i))
    is_val = np.zeros(n, dtype=bool)
    quotas = {k: len(v) * n_val / n for k, v in groups.items()}
    taken = {k: int(np.floor(q)) for k, q in quotas.items()}
    remaining = n_val - sum(taken.values())
    for k in sorted(groups, key=lambda k: (-(quotas[k] - taken[k]), sorted(groups).index(k)))[:remaining]:
        taken[k] += 1
    for k, members in groups.items():
        for i in members[: taken[k]]:
            is_val[i] = True
    return is_val


def generate_synthetic(
    cfg: SyntheticShapesConfig, n_train: int, n_val: int, size: int, out_dir, workers: int = 1
) -> dict:
    """Render a dataset to ``out_dir`` and return its manifest."""
    if size % 64:
        raise ValueError(f"patch size must be divisible by 64, got {size}")
    cfg.validate()
    total = n_train + n_val
    children = np.random.SeedSequence(cfg.seed).spawn(total + 1)

    def one(i):
        return render_patch(cfg, np.random.default_rng(children[i]), size)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            patches = list(pool.map(one, range(total)))
    else:
        patches = [one(i) for i in range(total)]
    n_cls = len(cfg.classes)
    keys = [tuple(np.bincount(p.labels.ravel(), minlength=n_cls) > 0) for p in patches]
    is_val = _stratified_split(keys, n_val, np.random.default_rng(children[total]))

    out = Path(out_dir)
    counts = {"train": np.zeros(n_cls, dtype=np.int64), "val": np.zeros(n_cls, dtype=np.int64)}
    index = {"train": 0, "val": 0}
    train_images = []
    for patch, val in zip(patches, is_val):
        split = "val" if val else "train"
        stem = out / split / f"patch_{index[split]:05d}"
        save_rtqt(f"{stem}.rtqt", patch.image)
        save_rtqt(f"{stem}_labels.rtqt", patch.labels.astype(np.float32))
        counts[split] += np.bincount(patch.labels.ravel(), minlength=n_cls)
        index[split] += 1
        if not val:
            train_images.append(patch.image)
    stats = band_statistics(np.stack(train_images)) if train_images else {"mean": [0.0] * cfg.n_bands, "std": [1.0] * cfg.n_bands}
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "size": size,
        "n_train": n_train,
        "n_val": n_val,
        "class_names": list(cfg.classes),
        "palette": [list(PALETTE[CLASS_NAMES.index(c)]) for c in cfg.classes],
        "ignore_id": IGNORE_ID,
        "band_stats": stats,
        "class_pixel_counts": {k: v.tolist() for k, v in counts.items()},
    }
    atomic_write(out / "manifest.json", (canonical_json(manifest) + "\n").encode("utf-8"))
    return manifest


def read_manifest(data_dir) -> dict:
    manifest = json.loads((Path(data_dir) / "manifest.json").read_text())
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest schema {manifest.get('schema_version')!r}")
    return manifest


def band_statistics(images: np.ndarray) -> dict:
    """Per-band mean and std over a (n, bands, h, w) stack, as float64 lists."""
    images = np.asarray(images, dtype=np.float64)
    return {"mean": images.mean(axis=(0, 2, 3)).tolist(), "std": images.std(axis=(0, 2, 3)).tolist()}


def zscore(images: np.ndarray, stats: dict, eps: float = 1e-8) -> np.ndarray:
    mean = np.asarray(stats["mean"])[:, None, None]
    std = np.maximum(np.asarray(stats["std"]), eps)[:, None, None]
    return ((images - mean) / std).astype(np.float32)


def load_split(data_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Z-scored images (n, bands, h, w) float32 and labels (n, h, w) int64 of one split."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    files = sorted(p for p in (data_dir / split).glob("patch_*.rtqt") if not p.name.endswith("_labels.rtqt"))
    if not files:
        raise FileNotFoundError(f"no patches in {data_dir / split}")
    images = np.stack([zscore(load_rtqt(f), manifest["band_stats"]) for f in files])
    labels = np.stack([load_rtqt(f.with_name(f.stem + "_labels.rtqt")).astype(np.int64) for f in files])
    return images, labels


def stack_height_band(optical: np.ndarray, height: np.ndarray, stats: dict | None = None) -> tuple[np.ndarray, dict]:
    """Append the height band after the optical bands and z-score every band.

    ``stats`` (per-band mean/std, normally from the training split) is
    computed from the inputs when omitted.  Returns the stacked array and
    the statistics used.
    """
    optical = np.asarray(optical)
    height = np.asarray(height)
    if optical.ndim != 4 or height.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) inputs, got {optical.shape} and {height.shape}")
    if optical.shape[0] != height.shape[0] or optical.shape[2:] != height.shape[2:]:
        raise ValueError(f"optical {optical.shape} and height {height.shape} dims do not match")
    stacked = np.concatenate([optical, height], axis=1).astype(np.float64)
    if stats is None:
        stats = band_statistics(stacked)
    mean = np.asarray(stats["mean"])[None, :, None, None]
    std = np.maximum(np.asarray(stats["std"]), 1e-8)[None, :, None, None]
    return (stacked - mean) / std, stats


def tile_image(image: np.ndarray, labels: np.ndarray, tile: int, stride: int, ignore_id: int = IGNORE_ID) -> list[Patch]:
    """Cut an image into ``tile``-sized patches; edge tiles are reflect-padded with ignored labels."""
    bands, h, w = image.shape
    if tile > h or tile > w:
        raise ValueError(f"tile {tile} larger than image {h}x{w}")

    def starts(n):
        pos = list(range(0, n - tile + 1, stride))
        if pos[-1] + tile < n:
            pos.append(pos[-1] + stride)
        return pos

    patches = []
    for r in starts(h):
        for c in starts(w):
            img = image[:, r : r + tile, c : c + tile]
            lab = labels[r : r + tile, c : c + tile]
            ph, pw = tile - img.shape[1], tile - img.shape[2]
            if ph or pw:
                img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
                lab = np.pad(lab, ((0, ph), (0, pw)), constant_values=ignore_id)
            patches.append(Patch(np.ascontiguousarray(img), np.ascontiguousarray(lab)))
    return patches


def export_label_png(labels: np.ndarray, palette: list, path, ignore_id: int = IGNORE_ID) -> None:
    """Write a palette-indexed PNG, one palette slot per class id."""
    from PIL import Image

    arr = np.asarray(labels).astype(np.int64)
    out = np.where(arr == ignore_id, 255, arr).astype(np.uint8)
    flat = [0] * (256 * 3)
    for i, color in enumerate(palette):
        flat[3 * i : 3 * i + 3] = list(color)
    flat[3 * 255 : 3 * 256] = list(IGNORE_COLOR)
    img = Image.fromarray(out, mode="P")
    img.putpalette(flat)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
