"""Datasets, the JSON manifest format, annotation stripping and synthetic shape scenes.

Manifest layout::

    {"classes": ["circle", ...],
     "images": [{"id": "0001", "path": "images/0001.png", "width": 96, "height": 96,
                 "annotations": [{"class": "circle", "box": [x1, y1, x2, y2]}]}]}

``path`` is relative to the manifest's directory unless absolute.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import Box


class ManifestError(ValueError):
    """Schema or content error in a dataset manifest."""


@dataclass(frozen=True)
class Annotation:
    box: Box
    label: str


@dataclass
class Sample:
    """One image with its training annotations.

    The unstripped annotation set is kept privately and is only reachable via
    :meth:`analysis_annotations`; training code must use ``annotations``.
    """

    image_id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    annotations: tuple
    _full: Optional[tuple] = field(default=None, repr=False)

    @property
    def width(self) -> int:
        return int(self.image.shape[2])

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    def analysis_annotations(self) -> tuple:
        """Full annotation set for evaluation and analysis only."""
        return self._full if self._full is not None else self.annotations

    def targets(self, classes: Sequence[str]):
        """Training targets ``(boxes (n, 4), labels (n,))`` indexed into ``classes``.

        Annotations of classes outside ``classes`` are dropped.
        """
        index = {c: i for i, c in enumerate(classes)}
        keep = [a for a in self.annotations if a.label in index]
        boxes = np.array([a.box.as_tuple() for a in keep], dtype=np.float64).reshape(-1, 4)
        labels = np.array([index[a.label] for a in keep], dtype=np.int64)
        return boxes, labels


@dataclass
class Dataset:
    classes: list
    samples: list

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass
class ManifestImage:
    id: str
    path: str
    width: int
    height: int
    annotations: list


@dataclass
class DatasetManifest:
    classes: list
    images: list
    root: Path = Path(".")

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "images": [
                {"id": im.id, "path": im.path, "width": im.width, "height": im.height,
                 "annotations": [{"class": a.label, "box": [float(v) for v in a.box.as_tuple()]}
                                 for a in im.annotations]}
                for im in self.images
            ],
        }


def _line_of(text: str, image_id) -> Optional[int]:
    m = re.search(r'"id"\s*:\s*' + re.escape(json.dumps(image_id)), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_manifest(text: str, root: Path = Path("."), source: str = "<manifest>") -> DatasetManifest:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e

    def fail(msg, image_id=None):
        line = _line_of(text, image_id) if image_id is not None else None
        where = f"{source}:{line}" if line else source
        raise ManifestError(f"{where}: {msg}")

    if not isinstance(raw, dict):
        fail("top level must be an object")
    classes = raw.get("classes")
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        fail("'classes' must be a list of strings")
    if len(set(classes)) != len(classes):
        fail("duplicate class names in 'classes'")
    images = raw.get("images")
    if not isinstance(images, list):
        fail("'images' must be a list")
    vocab = set(classes)
    out, seen = [], set()
    for i, im in enumerate(images):
        if not isinstance(im, dict):
            fail(f"images[{i}] must be an object")
        iid = im.get("id")
        if not isinstance(iid, str):
            fail(f"images[{i}].id must be a string")
        if iid in seen:
            fail(f"images[{i}]: duplicate id {iid!r}", iid)
        seen.add(iid)
        for key in ("width", "height"):
            if not isinstance(im.get(key), int) or im[key] < 1:
                fail(f"images[{i}].{key} must be a positive integer", iid)
        if not isinstance(im.get("path"), str):
            fail(f"images[{i}].path must be a string", iid)
        anns = im.get("annotations", [])
        if not isinstance(anns, list):
            fail(f"images[{i}].annotations must be a list", iid)
        parsed = []
        for j, a in enumerate(anns):
            where = f"images[{i}].annotations[{j}]"
            if not isinstance(a, dict) or "class" not in a or "box" not in a:
                fail(f"{where} needs 'class' and 'box'", iid)
            if a["class"] not in vocab:
                fail(f"{where}: unknown class {a['class']!r}", iid)
            box = a["box"]
            if (not isinstance(box, list) or len(box) != 4
                    or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in box)):
                fail(f"{where}.box must be 4 finite numbers", iid)
            x1, y1, x2, y2 = box
            if not (0 <= x1 <= x2 <= im["width"] and 0 <= y1 <= y2 <= im["height"]):
                fail(f"{where}.box {box} outside image bounds or inverted", iid)
            parsed.append(Annotation(Box.from_seq(box), a["class"]))
        out.append(ManifestImage(iid, im["path"], im["width"], im["height"], parsed))
    return DatasetManifest(list(classes), out, root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(), path.parent, str(path))


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, optimize=False)


def load_dataset(manifest) -> Dataset:
    """Load all images of a manifest (or manifest path) into memory."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    samples = []
    for im in manifest.images:
        p = Path(im.path)
        img = load_image(p if p.is_absolute() else manifest.root / p)
        if img.shape[1:] != (im.height, im.width):
            raise ManifestError(f"image {im.id}: file is {img.shape[2]}x{img.shape[1]}, "
                                f"manifest says {im.width}x{im.height}")
        samples.append(Sample(im.id, img, tuple(im.annotations)))
    return Dataset(list(manifest.classes), samples)


def write_dataset(dataset: Dataset, out_dir, name: str = "manifest.json") -> Path:
    """Materialize a dataset as PNG files plus a manifest holding the full annotations."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images = []
    for s in dataset.samples:
        rel = f"images/{s.image_id}.png"
        save_image(s.image, out_dir / rel)
        images.append(ManifestImage(s.image_id, rel, s.width, s.height,
                                    list(s.analysis_annotations())))
    path = out_dir / name
    save_manifest(DatasetManifest(list(dataset.classes), images, out_dir), path)
    return path


def strip_annotations(dataset, visible_classes: Iterable[str]):
    """Keep only annotations of ``visible_classes`` for training; pixels are untouched.

    Works on a :class:`Dataset` or a list of samples. The full annotation set
    stays available through :meth:`Sample.analysis_annotations`.
    """
    visible = set(visible_classes)
    samples = dataset.samples if isinstance(dataset, Dataset) else dataset
    if isinstance(dataset, Dataset) and not visible <= set(dataset.classes):
        raise ValueError(f"unknown classes {sorted(visible - set(dataset.classes))}")
    out = [replace(s, annotations=tuple(a for a in s.annotations if a.label in visible),
                   _full=s.analysis_annotations())
           for s in samples]
    return Dataset(list(dataset.classes), out) if isinstance(dataset, Dataset) else out


# --- synthetic shapes -----------------------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "diamond", "cross")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Parameters for rendering random non-overlapping shapes.

    ``classes`` is the vocabulary (each name must be one of ``SHAPES``).
    ``draw_classes`` restricts which classes appear (default: all) and
    ``require`` forces at least one instance of the named class.
    """

    width: int = 96
    height: int = 96
    classes: tuple = ("circle", "square", "triangle")
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 16
    max_size: int = 40
    noise: float = 0.03
    seed: int = 0
    draw_classes: Optional[tuple] = None
    require: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.draw_classes is not None:
            object.__setattr__(self, "draw_classes", tuple(self.draw_classes))
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"no renderer for classes {sorted(unknown)}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size <= min(self.width, self.height):
            raise ValueError("shape sizes must fit the canvas")
        pool = self.draw_classes if self.draw_classes is not None else self.classes
        if not set(pool) <= set(self.classes):
            raise ValueError("draw_classes must be a subset of classes")
        if self.require is not None and self.require not in pool:
            raise ValueError("required class must be drawable")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "square":
        m = np.ones((size, size), dtype=bool)
    elif kind == "circle":
        m = (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2
    elif kind == "triangle":
        # apex on top row, base on bottom row
        half = (yy + 1) / size * (size / 2.0)
        m = np.abs(xx - c) <= half
    elif kind == "diamond":
        m = np.abs(xx - c) + np.abs(yy - c) <= size / 2.0
    elif kind == "cross":
        arm = max(1, size // 6)
        m = (np.abs(xx - c) <= arm) | (np.abs(yy - c) <= arm)
    else:
        raise ValueError(kind)
    return m


def _tight_box(mask: np.ndarray, x0: int, y0: int) -> Box:
    ys, xs = np.nonzero(mask)
    return Box(float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1),
               float(y0 + ys.max() + 1))


def render_scene(spec: SyntheticSceneSpec, rng: np.random.Generator, image_id: str = "0"):
    """Render one scene; returns ``(image, annotations, masks)``."""
    pool = list(spec.draw_classes if spec.draw_classes is not None else spec.classes)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    if spec.require is not None:
        n = max(n, 1)
    labels = [pool[int(rng.integers(len(pool)))] for _ in range(n)]
    if spec.require is not None and spec.require not in labels:
        labels[int(rng.integers(n))] = spec.require
    bg = rng.uniform(0.0, 0.35, size=3)
    image = np.empty((3, spec.height, spec.width), dtype=np.float64)
    image[:] = bg[:, None, None]
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    anns, masks = [], []
    for label in labels:
        for _ in range(50):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x0 = int(rng.integers(0, spec.width - size + 1))
            y0 = int(rng.integers(0, spec.height - size + 1))
            # 2px margin keeps boxes disjoint so every box stays tight on visible pixels
            ya, yb = max(0, y0 - 2), min(spec.height, y0 + size + 2)
            xa, xb = max(0, x0 - 2), min(spec.width, x0 + size + 2)
            if not occupied[ya:yb, xa:xb].any():
                break
        else:
            continue
        occupied[ya:yb, xa:xb] = True
        local = _shape_mask(label, size)
        color = rng.uniform(0.55, 1.0, size=3)
        color[int(rng.integers(3))] = rng.uniform(0.0, 1.0)
        full = np.zeros((spec.height, spec.width), dtype=bool)
        full[y0:y0 + size, x0:x0 + size] = local
        image[:, full] = color[:, None]
        anns.append(Annotation(_tight_box(local, x0, y0), label))
        masks.append(full)
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=image.shape)
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image.astype(np.float32), tuple(anns), masks


def generate_synthetic_scene(spec: SyntheticSceneSpec, rng: np.random.Generator,
                             image_id: str = "0") -> Sample:
    image, anns, _ = render_scene(spec, rng, image_id)
    return Sample(image_id, image, anns)


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n_images: int, prefix: str = "img") -> Dataset:
    """``n_images`` scenes from ``spec.seed``; deterministic."""
    rng = np.random.default_rng(spec.seed)
    samples = [generate_synthetic_scene(spec, rng, f"{prefix}{i:05d}") for i in range(n_images)]
    return Dataset(list(spec.classes), samples)
