"""Dataset plumbing: KITTI-style label text, portable binary images (P5/P6),
bilinear image resizing, and a deterministic synthetic multi-scale scene
generator used for desk-scale experiments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BBox, GeometryError, clip


class DataError(ValueError):
    """Malformed label text, unsupported image format, or truncated payload."""


@dataclass
class ObjectLabel:
    class_name: str
    class_id: int           # 1..K; 0 means ignore
    box: BBox

    @property
    def height(self) -> float:
        return self.box.h


@dataclass
class SceneAnnotation:
    image_path: str
    objects: list = field(default_factory=list)
    source: str = "kitti"

    def boxes(self) -> list:
        return [o.box for o in self.objects if o.class_id > 0]

    def classes(self) -> list:
        return [o.class_id for o in self.objects if o.class_id > 0]


# ---------------------------------------------------------------------------
# KITTI-style labels: whitespace-separated fields, one object per line;
# fields 5..8 (1-based) are the box corners left, top, right, bottom.
# ---------------------------------------------------------------------------

def parse_kitti_labels(text: str, class_map: dict, image_path: str = "",
                       image_size: tuple | None = None) -> SceneAnnotation:
    """Classes outside class_map are kept with id 0 (ignored in training).

    With image_size given, boxes are clipped to the image at load time;
    boxes entirely outside are treated as malformed.
    """
    ann = SceneAnnotation(image_path=image_path, source="kitti")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 8:
            raise DataError(f"line {lineno}: expected at least 8 fields, got {len(fields)}")
        name = fields[0]
        try:
            left, top, right, bottom = (float(v) for v in fields[4:8])
        except ValueError as exc:
            raise DataError(f"line {lineno}: bad box coordinates: {exc}") from exc
        if right <= left or bottom <= top:
            raise DataError(f"line {lineno}: degenerate box {left},{top},{right},{bottom}")
        box = BBox.from_corners(left, top, right, bottom)
        if image_size is not None:
            try:
                box = clip(box, image_size[0], image_size[1])
            except GeometryError as exc:
                raise DataError(f"line {lineno}: box outside image: {exc}") from exc
        ann.objects.append(ObjectLabel(name, class_map.get(name, 0), box))
    return ann


def format_kitti_labels(ann: SceneAnnotation) -> str:
    """Emit labels in the same column layout parse_kitti_labels reads."""
    lines = []
    for o in ann.objects:
        b = o.box
        lines.append(f"{o.class_name} 0 0 0 "
                     f"{b.x0:.2f} {b.y0:.2f} {b.x1:.2f} {b.y1:.2f} "
                     f"0 0 0 0 0 0 0")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Binary PPM (P6) / PGM (P5) images, scaled to [0, 1], channels-first.
# ---------------------------------------------------------------------------

_PNM_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def load_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = _PNM_HEADER.match(blob)
    if not m:
        raise DataError(f"{path}: not a binary P5/P6 image")
    magic = m.group(1)
    width, height, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DataError(f"{path}: unsupported max value {maxval} (want 255)")
    channels = 3 if magic == b"P6" else 1
    payload = blob[m.end():]
    expected = width * height * channels
    if len(payload) < expected:
        raise DataError(f"{path}: truncated payload ({len(payload)} < {expected} bytes)")
    raw = np.frombuffer(payload[:expected], dtype=np.uint8)
    img = raw.reshape(height, width, channels).transpose(2, 0, 1)
    return img.astype(np.float64) / 255.0


def save_image(path, image: np.ndarray) -> None:
    c, h, w = image.shape
    if c not in (1, 3):
        raise DataError(f"cannot write {c}-channel image; want 1 or 3")
    magic = b"P6" if c == 3 else b"P5"
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.transpose(1, 2, 0).tobytes())


def normalize_image(image: np.ndarray, channel_means) -> np.ndarray:
    means = np.asarray(channel_means, dtype=image.dtype)
    return image - means[:, None, None]


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channels-first bilinear resize with half-pixel-centered sampling."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = image[:, y0][:, :, x0]
    tr = image[:, y0][:, :, x1]
    bl = image[:, y1][:, :, x0]
    br = image[:, y1][:, :, x1]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# Synthetic scenes: bright filled shapes (one kind per class) on a textured
# noise background, with exact bounding boxes and a log-uniform size spread.
# ---------------------------------------------------------------------------

SYNTHETIC_CLASSES = ("disk", "block", "wedge")


@dataclass
class SceneSample:
    image: np.ndarray           # (3, H, W) in [0, 1]
    annotation: SceneAnnotation


def _textured_background(rng, size: int) -> np.ndarray:
    coarse = rng.uniform(0.05, 0.35, size=(3, size // 8 + 2, size // 8 + 2))
    img = resize_bilinear(coarse, size, size)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _paint_shape(img: np.ndarray, cls: int, box: BBox, color: np.ndarray) -> None:
    x0, y0 = int(round(box.x0)), int(round(box.y0))
    x1, y1 = int(round(box.x1)), int(round(box.y1))
    h, w = y1 - y0, x1 - x0
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if cls == 1:        # disk: inscribed ellipse
        mask = (2 * u - 1) ** 2 + (2 * v - 1) ** 2 <= 1.0
    elif cls == 2:      # block: the full box
        mask = np.ones((h, w), dtype=bool)
    else:               # wedge: triangle spanning the box
        mask = (v >= np.abs(2 * u - 1))
    region = img[:, y0:y1, x0:x1]
    region[:, mask] = color[:, None]


def generate_synthetic(n_images: int, size: int, scale_octaves: int, seed: int,
                       min_height: float = 25.0, objects_per_image: tuple = (3, 6),
                       n_classes: int = 3, height_bias: float = 0.0) -> list:
    """Deterministic dataset of shape scenes spanning the requested octaves.

    Object heights are log-uniform over [min_height, min_height * 2^octaves];
    a positive height_bias skews the draw toward the smallest octave. Boxes
    are exact shape bounds, kept fully inside the image, with pairwise IoU
    held under 0.3 by rejection.
    """
    if n_classes > len(SYNTHETIC_CLASSES):
        raise ValueError(f"at most {len(SYNTHETIC_CLASSES)} synthetic classes")
    rng = np.random.default_rng(seed)
    max_height = min_height * (2.0 ** scale_octaves)
    samples = []
    for idx in range(n_images):
        img = _textured_background(rng, size)
        ann = SceneAnnotation(image_path=f"synthetic/{idx:05d}", source="synthetic")
        n_objects = int(rng.integers(objects_per_image[0], objects_per_image[1] + 1))
        placed: list[BBox] = []
        attempts = 0
        while len(placed) < n_objects and attempts < 50 * n_objects:
            attempts += 1
            u = rng.uniform() ** (1.0 + height_bias)
            height = min_height * (max_height / min_height) ** u
            aspect = rng.uniform(0.8, 1.25)
            width = height * aspect
            if width >= size - 2 or height >= size - 2:
                continue
            cx = rng.uniform(width / 2 + 1, size - width / 2 - 1)
            cy = rng.uniform(height / 2 + 1, size - height / 2 - 1)
            box = BBox(cx, cy, width, height)
            from .boxes import iou
            if any(iou(box, other) > 0.3 for other in placed):
                continue
            cls = int(rng.integers(1, n_classes + 1))
            color = rng.uniform(0.6, 1.0, size=3)
            _paint_shape(img, cls, box, color)
            # exact bounds of the painted pixels
            x0, y0 = round(box.x0), round(box.y0)
            x1, y1 = round(box.x1), round(box.y1)
            painted = BBox.from_corners(float(x0), float(y0), float(x1), float(y1))
            placed.append(painted)
            ann.objects.append(ObjectLabel(SYNTHETIC_CLASSES[cls - 1], cls, painted))
        samples.append(SceneSample(img, ann))
    return samples


def write_dataset(samples: list, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        save_image(out / "images" / f"{stem}.ppm", s.image)
        (out / "labels" / f"{stem}.txt").write_text(format_kitti_labels(s.annotation))


def load_dataset(root, class_map: dict | None = None) -> list:
    """Read back a directory written by write_dataset (or KITTI-style data)."""
    root = Path(root)
    if class_map is None:
        class_map = {name: i + 1 for i, name in enumerate(SYNTHETIC_CLASSES)}
    image_paths = sorted((root / "images").glob("*.p?m"))
    if not image_paths:
        raise DataError(f"no P5/P6 images under {root}/images")
    samples = []
    for img_path in image_paths:
        label_path = root / "labels" / (img_path.stem + ".txt")
        if not label_path.exists():
            raise DataError(f"missing label file {label_path}")
        image = load_image(img_path)
        ann = parse_kitti_labels(label_path.read_text(), class_map,
                                 image_path=str(img_path),
                                 image_size=(image.shape[2], image.shape[1]))
        samples.append(SceneSample(image, ann))
    return samples
