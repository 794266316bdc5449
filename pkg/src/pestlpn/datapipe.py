"""Dataset ingestion, preprocessing, augmentation and synthetic fixtures.

Datasets follow the layout ``<root>/<crop>/<pest_class>/<image files>``.
"""
from __future__ import annotations

import colorsys
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SIZE = 100
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SUPPORTED_FORMATS = {"PNG", "JPEG"}
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    crop: str
    label: str
    path: Path

    @property
    def qualified_label(self) -> str:
        return f"{self.crop}/{self.label}"


@dataclass
class DatasetIndex:
    root: Path
    records: list[ImageRecord]
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.qualified_label] = out.get(r.qualified_label, 0) + 1
        return out

    @property
    def crops(self) -> list[str]:
        return sorted({r.crop for r in self.records})

    def groups(self, crop: str | None = None) -> dict[str, list[Path]]:
        """Image paths per class.

        With ``crop`` given, labels are bare class names from that crop;
        otherwise they are ``crop/class`` so that same-named classes in
        different crops stay apart.
        """
        out: dict[str, list[Path]] = {}
        for r in self.records:
            if crop is not None and r.crop != crop:
                continue
            key = r.label if crop is not None else r.qualified_label
            out.setdefault(key, []).append(r.path)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["crop", "class", "path"])
            for r in self.records:
                writer.writerow([r.crop, r.label, r.path.relative_to(self.root).as_posix()])


def _is_supported_image(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            fmt = im.format
            im.verify()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError):
        return False
    return fmt in SUPPORTED_FORMATS


def scan_dataset(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    records, warnings = [], []
    for crop_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for class_dir in sorted(p for p in crop_dir.iterdir() if p.is_dir()):
            found = [f for f in sorted(class_dir.iterdir())
                     if f.is_file() and _is_supported_image(f)]
            if not found:
                warnings.append(f"empty class {crop_dir.name}/{class_dir.name}")
            records.extend(ImageRecord(crop_dir.name, class_dir.name, f) for f in found)
    for w in warnings:
        log.warning(w)
    return DatasetIndex(root, records, warnings)


def load_image(path) -> np.ndarray:
    """Decode an image file to a float32 ``H x W x C`` array in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise ImageDecodeError(f"{path}: unsupported format {im.format}")
            im.load()
            return to_float_array(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc


def to_float_array(image) -> np.ndarray:
    """PIL image or array -> float32 RGB ``H x W x 3`` in [0, 1]."""
    if isinstance(image, Image.Image):
        if image.mode not in ("L", "LA", "RGB", "RGBA"):
            image = image.convert("RGBA" if "A" in image.getbands() else "RGB")
        arr = np.asarray(image)
    else:
        arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or not 1 <= arr.shape[2] <= 4:
        raise ImageDecodeError(f"unsupported image array shape {arr.shape}")
    c = arr.shape[2]
    if c in (2, 4):
        arr = arr[:, :, : c - 1]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.ascontiguousarray(arr)


def resize(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x 3`` float array to ``size x size``."""
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    channels = [
        np.asarray(Image.fromarray(arr[:, :, c], mode="F").resize((size, size), Image.BILINEAR))
        for c in range(arr.shape[2])
    ]
    return np.stack(channels, axis=2)


def normalize(arr: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    out = (arr - mean) / std
    return torch.from_numpy(np.ascontiguousarray(out.transpose(2, 0, 1)))


def denormalize(x: torch.Tensor, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Inverse of :func:`normalize`, back to ``H x W x 3``."""
    arr = x.detach().cpu().numpy().transpose(1, 2, 0)
    return arr * np.asarray(std, dtype=np.float32) + np.asarray(mean, dtype=np.float32)


def preprocess(image, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Resize to ``size x size``, replicate grey to 3 channels, ImageNet-normalize."""
    if isinstance(image, (str, Path)):
        image = load_image(image)
    return normalize(resize(to_float_array(image), size))


@dataclass(frozen=True)
class AugmentationConfig:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    max_zoom: float = 0.15
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    grayscale: bool = True
    grayscale_channels: int = 3
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} jitter must be >= 0")
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue jitter must lie in [0, 0.5]")
        if not 0 <= self.max_zoom <= 0.5:
            raise ValueError("max_zoom must lie in [0, 0.5]")
        for name in ("hflip_prob", "vflip_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.grayscale_channels != 3:
            raise ValueError("grayscale output must have 3 channels")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean/std need 3 entries")
        if not all(np.isfinite(self.mean)) or not all(np.isfinite(self.std)):
            raise ValueError("mean/std must be finite")
        if min(self.std) <= 0:
            raise ValueError("std must be > 0")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(brightness=0, contrast=0, saturation=0, hue=0, max_zoom=0,
                   hflip_prob=0, vflip_prob=0, grayscale=False)


def _rgb_to_hsv(arr):
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    maxc = arr.max(-1)
    minc = arr.min(-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], -1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], -1).astype(np.float32)


def _gray(arr):
    return (arr @ LUMA)[..., None]


def _zoom(arr: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the image centre by ``factor`` (>1 zooms in), zero fill."""
    h, w = arr.shape[:2]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    matrix = np.diag([1 / factor, 1 / factor])
    offset = centre - matrix @ centre
    return np.stack([
        ndimage.affine_transform(arr[:, :, c], matrix, offset=offset, order=1,
                                 mode="constant", cval=0.0)
        for c in range(arr.shape[2])
    ], axis=2).astype(np.float32)


def augment(image, config: AugmentationConfig | None = None, seed=None,
            size: int = IMAGE_SIZE) -> torch.Tensor:
    """Training-time pipeline: resize, colour jitter, zoom, flips, grey, normalize.

    Every random draw comes from ``seed`` and is made regardless of whether
    the corresponding transform is active, so the output is a pure function
    of ``(image, config, seed)``.
    """
    config = config or AugmentationConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(image, (str, Path)):
        image = load_image(image)
    arr = resize(to_float_array(image), size)

    b = rng.uniform(1 - config.brightness, 1 + config.brightness)
    c = rng.uniform(1 - config.contrast, 1 + config.contrast)
    s = rng.uniform(1 - config.saturation, 1 + config.saturation)
    hshift = rng.uniform(-config.hue, config.hue)
    z = rng.uniform(1 - config.max_zoom, 1 + config.max_zoom)
    hflip = rng.random() < config.hflip_prob
    vflip = rng.random() < config.vflip_prob

    if config.brightness:
        arr = np.clip(arr * b, 0, 1)
    if config.contrast:
        m = float(_gray(arr).mean())
        arr = np.clip((arr - m) * c + m, 0, 1)
    if config.saturation:
        g = _gray(arr)
        arr = np.clip((arr - g) * s + g, 0, 1)
    if config.hue:
        hsv = _rgb_to_hsv(arr)
        hsv[..., 0] = (hsv[..., 0] + hshift) % 1.0
        arr = _hsv_to_rgb(hsv)
    if config.max_zoom and z != 1.0:
        arr = _zoom(arr, z)
    if hflip:
        arr = arr[:, ::-1]
    if vflip:
        arr = arr[::-1]
    if config.grayscale:
        arr = np.repeat(_gray(arr), config.grayscale_channels, axis=2)
    return normalize(np.ascontiguousarray(arr, dtype=np.float32), config.mean, config.std)


class ImageStore:
    """Decoded images keyed by path, with preprocessed tensors cached."""

    def __init__(self, size: int = IMAGE_SIZE):
        self.size = size
        self._raw: dict[Path, np.ndarray] = {}
        self._pre: dict[Path, torch.Tensor] = {}

    def raw(self, path) -> np.ndarray:
        path = Path(path)
        if path not in self._raw:
            self._raw[path] = resize(load_image(path), self.size)
        return self._raw[path]

    def tensor(self, path) -> torch.Tensor:
        path = Path(path)
        if path not in self._pre:
            self._pre[path] = normalize(self.raw(path))
        return self._pre[path]

    def batch(self, paths: Sequence) -> torch.Tensor:
        return torch.stack([self.tensor(p) for p in paths])

    def augmented_batch(self, paths: Sequence, config: AugmentationConfig,
                        rng: np.random.Generator) -> torch.Tensor:
        return torch.stack([augment(self.raw(p), config, rng, self.size) for p in paths])


# -- synthetic fixtures --------------------------------------------------------

SHAPES = ("disc", "square", "triangle", "cross", "ring", "diamond", "hbars", "vbars")


def _shape_mask(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        w = r / 3
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "hbars":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r) & ((np.floor((dy + r) / (r / 2.5)) % 2) == 0)
    return (np.abs(dx) <= r) & (np.abs(dy) <= r) & ((np.floor((dx + r) / (r / 2.5)) % 2) == 0)


def class_color(index: int, total: int) -> np.ndarray:
    """Distinct colour per class; lightness alternates so grey levels differ too."""
    hue = index / max(total, 1)
    value = 0.95 if index % 2 == 0 else 0.6
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, value), dtype=np.float32)


def render_fixture_image(class_index: int, total_classes: int, size: int,
                         rng: np.random.Generator) -> np.ndarray:
    color = class_color(class_index, total_classes)
    shape = SHAPES[class_index % len(SHAPES)]
    base = 0.5 * color + 0.25
    img = base + rng.normal(0.0, 0.04, size=(size, size, 3)).astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    r = size * rng.uniform(0.22, 0.32)
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    mask = _shape_mask(shape, yy, xx, cy, cx, r)
    img[mask] = color
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_fixture(root, classes: int = 5, per_class: int = 30, image_size: int = IMAGE_SIZE,
                     seed: int = 0, crops: Sequence[str] = ("fixture",),
                     class_names: Sequence[str] | None = None) -> Path:
    """Write a synthetic ``root/crop/class/*.png`` tree.

    ``classes`` is per crop. Every class gets its own colour and motif, so
    classes are separable from mean colour alone. Output bytes depend only on
    the arguments.
    """
    root = Path(root)
    if class_names is not None and len(class_names) != classes:
        raise ValueError("class_names must have one entry per class")
    total = classes * len(crops)
    for crop in crops:
        target = root / crop
        if target.exists() and any(target.iterdir()):
            raise FileExistsError(f"{target} already exists and is not empty")
    rng = np.random.default_rng(seed)
    for ci, crop in enumerate(crops):
        for k in range(classes):
            name = class_names[k] if class_names is not None else f"pest_{ci * classes + k:02d}"
            class_dir = root / crop / name
            class_dir.mkdir(parents=True, exist_ok=True)
            for j in range(per_class):
                pixels = render_fixture_image(ci * classes + k, total, image_size, rng)
                Image.fromarray(pixels, mode="RGB").save(class_dir / f"{j:03d}.png", optimize=False)
    return root
