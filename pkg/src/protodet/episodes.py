"""Synthetic C-way K-shot detection episodes with controllable rendering style.

Classes are (shape, colour) pairs. Geometry comes from one random stream and
pixels from a style-specific stream, so two styles with the same seed share
every box and differ only in appearance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadConfigError
from .geometry import Box
from .rng import Rng

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
COLORS = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.1),
    "magenta": (0.8, 0.2, 0.75),
    "cyan": (0.1, 0.8, 0.85),
}
STYLES = ("photo-like", "cartoon-like", "texture-defect", "low-contrast")


@dataclass
class ImageRecord:
    image_id: int
    image: np.ndarray  # 3 x H x W in [0, 1], multiples of 1/255
    annotations: list[tuple[int, Box]]
    split: str
    file_name: str = ""

    @property
    def gt_boxes(self) -> np.ndarray:
        return np.array([b.as_array() for _, b in self.annotations]).reshape(-1, 4)

    @property
    def gt_classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.annotations], dtype=int)


@dataclass
class Episode:
    class_names: list[str]
    supports: list[ImageRecord]
    queries: list[ImageRecord]
    style: str
    seed: int
    shots: int
    image_size: int
    meta: dict = field(default_factory=dict)

    @property
    def n_way(self) -> int:
        return len(self.class_names)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean size x size mask of ``shape`` touching its bounding box."""
    c = (np.arange(size) + 0.5) / size * 2 - 1  # pixel centres in [-1, 1]
    y, x = np.meshgrid(c, c, indexing="ij")
    edge = 1.0 - 1.0 / size
    if shape == "circle":
        return x * x + y * y <= 1.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        return (y >= -edge) & (np.abs(x) <= (y + 1) / 2 + 1.0 / size)
    if shape == "diamond":
        return np.abs(x) + np.abs(y) <= 1.0 + 1.0 / size
    if shape == "cross":
        return (np.abs(x) <= 0.34) | (np.abs(y) <= 0.34)
    if shape == "ring":
        r2 = x * x + y * y
        return (r2 <= 1.0) & (r2 >= 0.3)
    raise ValueError(f"unknown shape {shape!r}")


def _place(rng: Rng, n: int, canvas: int, lo: int, hi: int, attempts: int = 200) -> list[tuple[int, int, int]]:
    """Non-overlapping square placements (x, y, size) in pixels."""
    placed: list[tuple[int, int, int]] = []
    for _ in range(n):
        for _ in range(attempts):
            s = int(rng.integers(lo, hi + 1))
            x = int(rng.integers(0, canvas - s + 1))
            y = int(rng.integers(0, canvas - s + 1))
            if all(x + s + 1 <= px or px + ps + 1 <= x or y + s + 1 <= py or py + ps + 1 <= y for px, py, ps in placed):
                placed.append((x, y, s))
                break
        else:
            raise BadConfigError(f"cannot place {n} objects on a {canvas}px canvas")
    return placed


def _background(style: str, rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    if style == "photo-like":
        a, b = rng.uniform(0.3, 0.7, 3), rng.uniform(0.3, 0.7, 3)
        t = (xx + yy) / 2
        bg = a[:, None, None] * (1 - t) + b[:, None, None] * t
        return bg + rng.normal(0, 0.03, (3, size, size))
    if style == "cartoon-like":
        col = rng.uniform(0.75, 0.95, 3)
        return np.broadcast_to(col[:, None, None], (3, size, size)).copy()
    if style == "texture-defect":
        freq, phase = rng.uniform(6, 14), rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.15 * np.sin(2 * np.pi * freq * (xx * 0.8 + yy * 0.2) + phase)
        gray = stripes + rng.normal(0, 0.06, (size, size))
        return np.stack([gray, gray, gray * 0.95])
    if style == "low-contrast":
        level = rng.uniform(0.4, 0.6)
        return np.full((3, size, size), level) + rng.normal(0, 0.05, (3, size, size))
    raise BadConfigError(f"unknown style {style!r}")


def _paint(img: np.ndarray, style: str, rng: Rng, cls_shape: str, rgb, x: int, y: int, s: int) -> None:
    mask = _shape_mask(cls_shape, s)
    color = np.asarray(rgb, dtype=np.float64)
    region = img[:, y : y + s, x : x + s]
    if style == "photo-like":
        shade = np.linspace(1.1, 0.85, s)[:, None]
        fill = color[:, None, None] * shade[None] + rng.normal(0, 0.02, (3, s, s))
    elif style == "cartoon-like":
        fill = np.broadcast_to(color[:, None, None], (3, s, s)).copy()
        inner = np.zeros_like(mask)
        inner[1:-1, 1:-1] = mask[1:-1, 1:-1] & mask[:-2, 1:-1] & mask[2:, 1:-1] & mask[1:-1, :-2] & mask[1:-1, 2:]
        fill[:, mask & ~inner] = 0.05
    elif style == "texture-defect":
        fill = 0.6 * color[:, None, None] + 0.4 * region + rng.normal(0, 0.03, (3, s, s))
    else:  # low-contrast
        base = region.mean()
        fill = base + 0.35 * (color[:, None, None] - base) + rng.normal(0, 0.04, (3, s, s))
    region[:, mask] = fill[:, mask]


def generate_episode(
    n_way: int,
    shots: int,
    n_query: int,
    style: str,
    seed: int,
    image_size: int = 64,
    max_objects: int = 3,
) -> Episode:
    """Render an episode: ``shots`` single-object support images per class plus
    ``n_query`` query images holding 1..max_objects objects each."""
    if n_way < 1 or shots < 1 or n_query < 0:
        raise BadConfigError("need n_way >= 1, shots >= 1, n_query >= 0")
    if style not in STYLES:
        raise BadConfigError(f"style must be one of {STYLES}")
    combos = [(s, c) for s in SHAPES for c in COLORS]
    if n_way > len(combos):
        raise BadConfigError(f"at most {len(combos)} classes available")
    root = Rng(seed)
    geo = root.child("geometry")
    pix = root.child(f"style:{style}")
    picked = [combos[i] for i in geo.permutation(len(combos))[:n_way]]
    names = [f"{color} {shape}" for shape, color in picked]
    lo, hi = max(6, int(0.2 * image_size)), max(7, int(0.4 * image_size))

    def make(image_id: int, split: str, cls_list: list[int]) -> ImageRecord:
        spots = _place(geo, len(cls_list), image_size, lo, hi)
        img = _background(style, pix, image_size)
        anns = []
        for cls, (x, y, s) in zip(cls_list, spots):
            shape, color = picked[cls]
            _paint(img, style, pix, shape, COLORS[color], x, y, s)
            box = Box((x + s / 2) / image_size, (y + s / 2) / image_size, s / image_size, s / image_size)
            anns.append((cls, box))
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        return ImageRecord(image_id, img, anns, split, f"{split}_{image_id:04d}.png")

    supports = []
    for c in range(n_way):
        for _ in range(shots):
            supports.append(make(len(supports), "support", [c]))
    queries = []
    for _ in range(n_query):
        n_obj = int(geo.integers(1, max_objects + 1))
        cls_list = [int(geo.integers(0, n_way)) for _ in range(n_obj)]
        queries.append(make(len(supports) + len(queries), "query", cls_list))
    return Episode(names, supports, queries, style, seed, shots, image_size)


# -- file format -------------------------------------------------------------
def episode_to_coco(ep: Episode) -> dict:
    images, annotations = [], []
    for rec in ep.supports + ep.queries:
        images.append(
            {
                "id": rec.image_id,
                "file_name": rec.file_name,
                "width": ep.image_size,
                "height": ep.image_size,
                "split": rec.split,
            }
        )
        for cls, box in rec.annotations:
            x1, y1, _, _ = box.xyxy()
            w, h = box.w * ep.image_size, box.h * ep.image_size
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": rec.image_id,
                    "category_id": cls + 1,
                    "bbox": [x1 * ep.image_size, y1 * ep.image_size, w, h],
                    "area": w * h,
                    "iscrowd": 0,
                }
            )
    return {
        "info": {
            "n_way": ep.n_way,
            "shots": ep.shots,
            "style": ep.style,
            "seed": ep.seed,
            "image_size": ep.image_size,
            **ep.meta,
        },
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(ep.class_names)],
    }


def save_episode(ep: Episode, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in ep.supports + ep.queries:
        pixels = np.round(rec.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(out / rec.file_name, format="PNG", optimize=False)
    path = out / "episode.json"
    path.write_text(json.dumps(episode_to_coco(ep), indent=1, sort_keys=True))
    return path


def load_episode(path: str | Path) -> Episode:
    path = Path(path)
    if path.is_dir():
        path = path / "episode.json"
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BadConfigError(f"cannot read episode {path}: {exc}") from exc
    info = data["info"]
    size = int(info["image_size"])
    cats = sorted(data["categories"], key=lambda c: c["id"])
    by_image: dict[int, list] = {im["id"]: [] for im in data["images"]}
    for ann in data["annotations"]:
        x, y, w, h = ann["bbox"]
        box = Box((x + w / 2) / size, (y + h / 2) / size, w / size, h / size)
        by_image[ann["image_id"]].append((ann["category_id"] - 1, box))
    supports, queries = [], []
    for im in sorted(data["images"], key=lambda i: i["id"]):
        pixels = np.asarray(Image.open(path.parent / im["file_name"]).convert("RGB"), dtype=np.float64)
        rec = ImageRecord(im["id"], pixels.transpose(2, 0, 1) / 255.0, by_image[im["id"]], im["split"], im["file_name"])
        (supports if im["split"] == "support" else queries).append(rec)
    meta = {k: v for k, v in info.items() if k not in ("n_way", "shots", "style", "seed", "image_size")}
    return Episode([c["name"] for c in cats], supports, queries, info["style"], info["seed"], info["shots"], size, meta)
