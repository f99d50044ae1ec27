"""Datasets: a seeded synthetic shape generator and a VOC-style directory reader.

Both produce the same on-disk layout::

    root/
      JPEGImages/<id>.jpg|.png
      SegmentationClass/<id>.png     (palette masks, optional for train)
      ImageSets/Segmentation/<split>.txt
      image_labels.txt               (<id> <class> <class> ...)
      classes.txt                    (foreground class names, optional)

Dense masks are only ever opened through :func:`open_mask`, which reports
every access to the registered audit hooks.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml
from PIL import Image

from pcc.errors import FormatError
from pcc.pseudo import load_label_map, save_label_map

VOC_CLASSES = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
]
IMAGE_EXTS = (".jpg", ".jpeg", ".png")

_mask_hooks: list[Callable[[Path], None]] = []


def add_mask_access_hook(hook: Callable[[Path], None]) -> Callable[[], None]:
    """Register ``hook(path)`` to run before any mask is opened. Returns an unregister function."""
    _mask_hooks.append(hook)
    return lambda: _mask_hooks.remove(hook)


def open_mask(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    for hook in list(_mask_hooks):
        hook(path)
    return load_label_map(path)


def load_image(path: str | os.PathLike, side: int | None = None) -> np.ndarray:
    """RGB image as float32 ``(h, w, 3)`` in [0, 1], optionally resized to ``side x side``."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if side is not None and img.size != (side, side):
            img = img.resize((side, side), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


@dataclass
class ManifestEntry:
    identifier: str
    image_path: str
    labels: list[str] = field(default_factory=list)
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    split: str
    root: str
    class_names: list[str]  # foreground only; background is index 0 elsewhere
    entries: list[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def all_classes(self) -> list[str]:
        return ["background", *self.class_names]

    @property
    def has_masks(self) -> bool:
        return bool(self.entries) and all(e.mask_path for e in self.entries)

    def to_dict(self, relative: bool = False) -> dict:
        """Plain dict; ``relative=True`` stores paths relative to ``root`` so the file is relocatable."""
        data = asdict(self)
        if relative:
            data["root"] = "."
            for e in data["entries"]:
                for key in ("image_path", "mask_path"):
                    if e[key]:
                        e[key] = os.path.relpath(e[key], self.root)
        return data


def _read_lines(path: Path) -> list[str]:
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def ingest_voc_style(root: str | os.PathLike, split: str = "train", class_names: Sequence[str] | None = None) -> DatasetManifest:
    """Read and validate a VOC-style tree. Masks are located but never opened."""
    root = Path(root)
    if class_names is None:
        cls_file = root / "classes.txt"
        class_names = _read_lines(cls_file) if cls_file.exists() else list(VOC_CLASSES)
    class_names = list(class_names)
    known = set(class_names)

    split_file = root / "ImageSets" / "Segmentation" / f"{split}.txt"
    if not split_file.exists():
        raise FormatError(f"missing split list {split_file}")
    ids = [ln.split()[0] for ln in _read_lines(split_file)]

    labels_file = root / "image_labels.txt"
    image_labels: dict[str, list[str]] = {}
    if labels_file.exists():
        for ln in _read_lines(labels_file):
            ident, *names = ln.split()
            for name in names:
                if name not in known:
                    raise FormatError(f"unknown class {name!r} for {ident} in {labels_file}")
            image_labels[ident] = names
    elif split == "train":
        raise FormatError(f"missing image-level label file {labels_file}")

    entries = []
    for ident in ids:
        image_path = next(
            (root / "JPEGImages" / f"{ident}{ext}" for ext in IMAGE_EXTS if (root / "JPEGImages" / f"{ident}{ext}").exists()),
            None,
        )
        if image_path is None:
            raise FormatError(f"missing image {root / 'JPEGImages' / (ident + '.jpg')}")
        mask = root / "SegmentationClass" / f"{ident}.png"
        mask_path = str(mask) if mask.exists() else None
        if mask_path is None and split != "train":
            raise FormatError(f"missing mask {mask} for split {split}")
        if ident not in image_labels and split == "train":
            raise FormatError(f"no image-level labels for {ident} in {labels_file}")
        entries.append(ManifestEntry(ident, str(image_path), image_labels.get(ident, []), mask_path))
    return DatasetManifest(split, str(root), class_names, entries)


# -- synthetic shapes -----------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "ring", "cross")


@dataclass
class ShapeClass:
    name: str
    shape: str
    colors: list[list[int]]  # RGB candidates, one is drawn per instance

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")


@dataclass
class SyntheticSpec:
    image_side: int = 64
    num_images: int = 200
    classes: list[ShapeClass] = field(default_factory=list)
    clutter: float = 0.05  # pixel noise std, in [0, 1] intensity units
    max_objects: int = 2
    empty_fraction: float = 0.0  # share of background-only images
    min_radius: int = 9
    max_radius: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        self.classes = [c if isinstance(c, ShapeClass) else ShapeClass(**c) for c in self.classes]
        if len(self.classes) < 2:
            raise ValueError("a synthetic spec needs at least two classes")
        if not 1 <= self.max_objects <= len(self.classes):
            raise ValueError("max_objects must be in [1, number of classes]")
        if not 0.0 <= self.empty_fraction < 1.0:
            raise ValueError("empty_fraction must be in [0, 1)")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls(**yaml.safe_load(fh))


def _shape_mask(shape: str, side: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if shape == "disk":
        return dx**2 + dy**2 <= r**2
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        half = r / np.sqrt(2) * 1.15
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if shape == "cross":
        arm = 0.33 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    # equilateral triangle, enlarged so its area is close to the other shapes' (about 2.4 r^2)
    R = 1.35 * r
    pts = [(R * np.cos(a), R * np.sin(a)) for a in (-np.pi / 2, np.pi / 6, 5 * np.pi / 6)]
    inside = np.ones_like(u, dtype=bool)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


def _layout(spec: SyntheticSpec, chosen: list[int], rng: np.random.Generator):
    side = spec.image_side
    occupied = np.zeros((side, side), dtype=bool)
    placed = []
    for ci in chosen:
        r = rng.uniform(spec.min_radius, spec.max_radius)
        cy, cx = rng.uniform(r + 1, side - r - 1, size=2)
        m = _shape_mask(spec.classes[ci].shape, side, cy, cx, r, rng.uniform(0, 2 * np.pi))
        halo = _shape_mask("disk", side, cy, cx, 1.15 * r + 1.5, 0.0)
        if (halo & occupied).any():
            return None
        placed.append((ci, m))
        occupied |= halo
    return placed


def _render(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[str]]:
    side = spec.image_side
    empty = rng.random() < spec.empty_fraction
    n_obj = 0 if empty else int(rng.integers(1, spec.max_objects + 1))
    chosen = sorted(rng.choice(len(spec.classes), size=n_obj, replace=False).tolist())

    base = rng.uniform(0.25, 0.75, size=3)
    image = np.broadcast_to(base, (side, side, 3)).copy()
    # low-frequency background shading
    yy, xx = np.mgrid[0:side, 0:side] / side
    image += 0.08 * np.sin(2 * np.pi * (rng.uniform(0.5, 1.5) * xx + rng.uniform(0, 1)))[..., None]
    mask = np.zeros((side, side), dtype=np.uint8)
    for _ in range(100):
        placed = _layout(spec, chosen, rng)
        if placed is not None:
            break
    else:
        raise RuntimeError("could not place objects without overlap; lower radii or max_objects")
    for ci, m in placed:
        cls = spec.classes[ci]
        color = np.asarray(cls.colors[int(rng.integers(len(cls.colors)))], dtype=np.float64) / 255.0
        color = np.clip(color + rng.normal(0, 0.04, size=3), 0, 1)
        image[m] = color
        mask[m] = ci + 1

    image += rng.normal(0, spec.clutter, size=image.shape)
    image = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
    return image, mask, [spec.classes[ci].name for ci in chosen]


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike, split: str = "train") -> DatasetManifest:
    """Write a VOC-style synthetic dataset. Same spec and seed give byte-identical files."""
    out = Path(out_dir)
    for sub in ("JPEGImages", "SegmentationClass", "ImageSets/Segmentation"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    names = [c.name for c in spec.classes]
    ids, label_lines = [], []
    for i in range(spec.num_images):
        ident = f"synth_{i:05d}"
        image, mask, labels = _render(spec, rng)
        Image.fromarray(image, mode="RGB").save(out / "JPEGImages" / f"{ident}.png")
        save_label_map(mask, out / "SegmentationClass" / f"{ident}.png")
        ids.append(ident)
        label_lines.append(" ".join([ident, *labels]))
    (out / "ImageSets" / "Segmentation" / f"{split}.txt").write_text("\n".join(ids) + "\n", encoding="utf-8")
    (out / "image_labels.txt").write_text("\n".join(label_lines) + "\n", encoding="utf-8")
    (out / "classes.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    manifest = ingest_voc_style(out, split, names)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(relative=True), indent=2) + "\n", encoding="utf-8")
    return manifest


def load_split(manifest: DatasetManifest, side: int) -> np.ndarray:
    """Stack every image of the manifest into ``(N, h, w, 3)`` float32."""
    return np.stack([load_image(e.image_path, side) for e in manifest.entries])
