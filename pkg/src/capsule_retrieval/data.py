"""Dataset manifests, image IO and a synthetic in-shop-style generator.

Manifest format (documented in docs/formats.md): UTF-8 text, one record per
line, tab-separated, with the exact header line

    image_id\titem_id\tcategory_id\tsplit\tpath

``split`` is one of train/query/gallery; ``path`` is relative to the manifest
file.  Fields must not contain tabs or newlines.

Images travel as portable pixmaps (binary P6 or ASCII P3, maxval 255); PNG
reading is available when Pillow is installed.  Decoded images are float
arrays of shape [3, H, W] scaled to [0, 1].

The synthetic generator draws one regular polygon per item (vertex count
fixed by the item's category, fill color and base size fixed per item) and
jitters translation/rotation/scale per view, so that views of one item are
the same object under pose change.  The first view of every item goes to the
query split, the second to gallery, and the rest to train.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ManifestRecord",
    "ManifestError",
    "ImageError",
    "SPLITS",
    "MANIFEST_HEADER",
    "load_manifest",
    "write_manifest",
    "load_image",
    "write_ppm",
    "read_ppm",
    "ImageDataset",
    "generate_synthetic",
]

SPLITS = ("train", "query", "gallery")
MANIFEST_HEADER = "image_id\titem_id\tcategory_id\tsplit\tpath"


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


class ImageError(ValueError):
    """Unsupported or corrupt image file."""


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    item_id: str
    category_id: str
    split: str
    path: str


def write_manifest(path, records) -> None:
    lines = [MANIFEST_HEADER]
    for r in records:
        for f in (r.image_id, r.item_id, r.category_id, r.split, r.path):
            if "\t" in f or "\n" in f:
                raise ManifestError(f"manifest field {f!r} contains a separator")
        lines.append(f"{r.image_id}\t{r.item_id}\t{r.category_id}\t{r.split}\t{r.path}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> list[ManifestRecord]:
    """Parse and validate a manifest; all violations name their line number."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or (len(lines) == 1 and not lines[0].strip()):
        raise ManifestError(f"{path}: no records")
    if lines[0] != MANIFEST_HEADER:
        raise ManifestError(
            f"{path} line 1: bad header {lines[0]!r}, expected {MANIFEST_HEADER!r}"
        )
    records = []
    seen_ids: dict[str, int] = {}
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path} line {number}: expected 5 fields, got {len(parts)}")
        image_id, item_id, category_id, split, rel = parts
        if split not in SPLITS:
            raise ManifestError(
                f"{path} line {number}: unknown split token {split!r} "
                f"(expected one of {', '.join(SPLITS)})"
            )
        if image_id in seen_ids:
            raise ManifestError(
                f"{path} line {number}: duplicate image_id {image_id!r} "
                f"(first seen on line {seen_ids[image_id]})"
            )
        seen_ids[image_id] = number
        records.append(ManifestRecord(image_id, item_id, category_id, split, rel))
    if not records:
        raise ManifestError(f"{path}: no records")

    gallery_items = {r.item_id for r in records if r.split == "gallery"}
    for r in records:
        if r.split == "query" and r.item_id not in gallery_items:
            raise ManifestError(
                f"{path} line {seen_ids[r.image_id]}: query item {r.item_id!r} "
                f"has no gallery image"
            )
    return records


# ---------------------------------------------------------------------------
# pixmap IO
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [3, H, W] float array in [0, 1] as a binary P6 pixmap."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageError(f"expected [3, H, W] image, got shape {image.shape}")
    h, w = image.shape[1:]
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def _read_ppm_tokens(data: bytes, count: int, start: int):
    """Read whitespace/comment-separated header tokens; returns (tokens, offset)."""
    tokens = []
    i = start
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ImageError("truncated pixmap header")
        tokens.append(data[i:j])
        i = j
    return tokens, i


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] not in (b"P6", b"P3"):
        raise ImageError(f"{path}: not a P6/P3 pixmap")
    binary = data[:2] == b"P6"
    (w, h, maxval), offset = _read_ppm_tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageError(f"{path}: only maxval 255 supported, got {maxval}")
    if binary:
        offset += 1  # single whitespace byte after maxval
        raw = data[offset : offset + w * h * 3]
        if len(raw) != w * h * 3:
            raise ImageError(f"{path}: truncated pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8)
    else:
        values = data[offset:].split()
        if len(values) != w * h * 3:
            raise ImageError(f"{path}: expected {w * h * 3} ASCII samples, got {len(values)}")
        pixels = np.array([int(v) for v in values], dtype=np.uint8)
    image = pixels.reshape(h, w, 3).transpose(2, 0, 1)
    return image.astype(np.float64) / 255.0


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageError(
            f"{path}: PNG support requires Pillow (pip install pillow)"
        ) from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _resize_nearest(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    h, w = image.shape[1:]
    if (h, w) == (target_h, target_w):
        return image
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    return image[:, rows][:, :, cols]


def load_image(path, target=None) -> np.ndarray:
    """Decode an image to [3, H, W] floats in [0, 1], resizing if asked.

    Portable pixmaps (P6/P3) decode natively; .png falls back to Pillow.
    ``target`` is an (H, W) pair; resizing is nearest-neighbor.
    """
    path = Path(path)
    if not path.exists():
        raise ImageError(f"image {path} does not exist")
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm"):
        image = read_ppm(path)
    elif suffix == ".png":
        image = _read_png(path)
    else:
        raise ImageError(f"{path}: unsupported image format {suffix!r}")
    if target is not None:
        image = _resize_nearest(image, int(target[0]), int(target[1]))
    return image


class ImageDataset:
    """Manifest plus decoded-image cache, resolved against the manifest's directory."""

    def __init__(self, manifest_path, resolution=None):
        self.manifest_path = Path(manifest_path)
        self.records = load_manifest(self.manifest_path)
        self.root = self.manifest_path.parent
        self.resolution = resolution
        self.by_id = {r.image_id: r for r in self.records}
        self._cache: dict[str, np.ndarray] = {}

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def categories(self) -> list[str]:
        return sorted({r.category_id for r in self.records})

    def category_index(self, record: ManifestRecord) -> int:
        return self.categories.index(record.category_id)

    def image(self, image_id: str) -> np.ndarray:
        if image_id not in self._cache:
            record = self.by_id[image_id]
            self._cache[image_id] = load_image(self.root / record.path, self.resolution)
        return self._cache[image_id]

    def batch(self, image_ids) -> np.ndarray:
        return np.stack([self.image(i) for i in image_ids])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def _polygon_vertices(sides: int, radius: float, rotation: float) -> np.ndarray:
    angles = rotation + 2.0 * np.pi * np.arange(sides) / sides
    return np.stack([np.cos(angles), np.sin(angles)], axis=1) * radius


def _fill_convex_polygon(height, width, vertices, center) -> np.ndarray:
    """Boolean mask of pixels inside a convex polygon (counter-clockwise)."""
    ys, xs = np.mgrid[0:height, 0:width]
    pts = np.stack([xs + 0.5 - center[0], ys + 0.5 - center[1]], axis=-1)
    inside = np.ones((height, width), dtype=bool)
    n = len(vertices)
    for k in range(n):
        a = vertices[k]
        b = vertices[(k + 1) % n]
        edge = b - a
        rel = pts - a
        cross = edge[0] * rel[..., 1] - edge[1] * rel[..., 0]
        inside &= cross >= 0
    return inside


def _item_color(index: int) -> tuple[float, float, float]:
    golden = 0.6180339887498949
    hue = (index * golden) % 1.0
    sat = 0.65 + 0.3 * ((index * 0.37) % 1.0)
    val = 0.7 + 0.3 * ((index * 0.53) % 1.0)
    return colorsys.hsv_to_rgb(hue, sat, val)


def generate_synthetic(
    n_items: int,
    views_per_item: int,
    categories: int,
    resolution: int,
    seed: int,
    out_dir,
) -> Path:
    """Write a synthetic dataset under ``out_dir``; returns the manifest path.

    Category k draws regular (k+3)-gons; item identity is a fixed fill color
    and base size.  Views jitter translation, rotation and scale.  Per item:
    view 0 -> query, view 1 -> gallery, remaining views -> train.
    """
    if categories < 2:
        raise ValueError(f"need at least 2 categories, got {categories}")
    if n_items < categories:
        raise ValueError(f"need n_items >= categories, got {n_items} < {categories}")
    if views_per_item < 2:
        raise ValueError(f"need at least 2 views per item, got {views_per_item}")
    if resolution < 8:
        raise ValueError(f"resolution too small: {resolution}")

    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    h = w = int(resolution)

    for item in range(n_items):
        category = item % categories
        sides = category + 3
        color = np.array(_item_color(item))
        base_radius = (0.24 + 0.10 * ((item * 0.71) % 1.0)) * min(h, w)
        for view in range(views_per_item):
            rotation = rng.uniform(0.0, 2.0 * np.pi)
            scale = rng.uniform(0.85, 1.15)
            shift = rng.uniform(-0.08, 0.08, size=2) * min(h, w)
            center = np.array([w / 2.0, h / 2.0]) + shift
            vertices = _polygon_vertices(sides, base_radius * scale, rotation)
            mask = _fill_convex_polygon(h, w, vertices, center)
            noise = rng.uniform(0.0, 0.04, size=(3, h, w))
            image = noise.copy()
            image[:, mask] = color[:, None] * (1.0 - 0.05) + noise[:, mask] * 0.05
            split = "query" if view == 0 else "gallery" if view == 1 else "train"
            image_id = f"item{item:04d}_view{view}"
            rel = f"images/{image_id}.ppm"
            write_ppm(out_dir / rel, image)
            records.append(
                ManifestRecord(image_id, f"item{item:04d}", f"cat{category}", split, rel)
            )

    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, records)
    return manifest_path
