"""Image datasets: CIFAR-10 binary records, a synthetic generator, preprocessing."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_HW = 32
CIFAR_CLASSES = 10

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DataFormatError(ValueError):
    def __init__(self, msg: str, offset: int | None = None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.offset = offset
        self.path = path


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    label: int


@dataclass
class ImageDataset:
    """Images stored as one ``(n, H, W, 3)`` uint8 block plus integer labels."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise DataFormatError(f"pixels must be (n, H, W, 3), got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise DataFormatError("pixel and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], int(self.labels[i]))

    @property
    def image_size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.pixels[idx], self.labels[idx], self.num_classes)


# --------------------------------------------------------------------------
# CIFAR-10 binary
# --------------------------------------------------------------------------

def decode_cifar10(buf: bytes, path=None) -> ImageDataset:
    n, rem = divmod(len(buf), CIFAR_RECORD)
    if rem:
        raise DataFormatError(
            f"length {len(buf)} is not a multiple of {CIFAR_RECORD}; truncated record",
            offset=n * CIFAR_RECORD, path=path)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if len(bad):
        raise DataFormatError(f"label byte {labels[bad[0]]} >= {CIFAR_CLASSES}",
                              offset=int(bad[0]) * CIFAR_RECORD, path=path)
    planes = raw[:, 1:].reshape(n, 3, CIFAR_HW, CIFAR_HW)
    return ImageDataset(planes.transpose(0, 2, 3, 1).copy(), labels, CIFAR_CLASSES)


def encode_cifar10(ds: ImageDataset) -> bytes:
    if ds.image_size != (CIFAR_HW, CIFAR_HW):
        raise DataFormatError(f"CIFAR records are 32x32, got {ds.image_size}")
    n = len(ds)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = ds.pixels.transpose(0, 3, 1, 2).reshape(n, -1)
    return out.tobytes()


def load_cifar10(path, split: str = "train") -> ImageDataset:
    """Read one ``*.bin`` batch file, or every batch of ``split`` in a directory."""
    path = Path(path)
    if path.is_dir():
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(path.glob(pattern)) or sorted(path.glob(f"*/{pattern}"))
        if not files:
            raise DataFormatError(f"no CIFAR-10 {split} batches found", path=path)
    elif path.exists():
        files = [path]
    else:
        raise DataFormatError("file not found", path=path)
    parts = [decode_cifar10(f.read_bytes(), path=f) for f in files]
    return ImageDataset(np.concatenate([p.pixels for p in parts]),
                        np.concatenate([p.labels for p in parts]), CIFAR_CLASSES)


def save_cifar10(ds: ImageDataset, path) -> None:
    Path(path).write_bytes(encode_cifar10(ds))


# --------------------------------------------------------------------------
# synthetic
# --------------------------------------------------------------------------

def class_colors(classes: int) -> np.ndarray:
    """Evenly spaced hues, alternating value so neighbours differ in brightness too."""
    cols = []
    for k in range(classes):
        v = 0.85 if k % 2 == 0 else 0.55
        cols.append(colorsys.hsv_to_rgb(k / classes, 0.7, v))
    return np.array(cols)


def _pattern(kind: int, h: int, w: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        return ((yy + phase) // 4 % 2).astype(float)
    if kind == 1:
        return ((xx + phase) // 4 % 2).astype(float)
    if kind == 2:
        return (((yy + phase) // 4 + (xx + phase) // 4) % 2).astype(float)
    cy, cx = (h - 1) / 2 + (phase % 5 - 2), (w - 1) / 2 + (phase // 5 % 5 - 2)
    r = min(h, w) / 4
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(float)


def synth_dataset(n: int, classes: int = 4, image_size=(32, 32), seed: int = 0,
                  noise: float = 0.08) -> ImageDataset:
    """Class-conditional images: per-class mean colour and geometric pattern plus noise."""
    if n <= 0:
        raise ValueError("n must be positive")
    h, w = image_size
    rng = np.random.default_rng(seed)
    colors = class_colors(classes)
    labels = rng.integers(0, classes, size=n)
    imgs = np.empty((n, h, w, 3))
    for i, k in enumerate(labels):
        phase = int(rng.integers(0, 8))
        pat = _pattern(int(k) % 4, h, w, phase)[..., None]
        img = 0.6 * colors[k] + 0.3 * pat * colors[(k + 1) % classes] + 0.1
        img = img + noise * rng.standard_normal((h, w, 3))
        imgs[i] = img
    pixels = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
    return ImageDataset(pixels, labels, classes)


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def _resize_axis(arr: np.ndarray, out: int, axis: int, method: str) -> np.ndarray:
    n = arr.shape[axis]
    if n == out:
        return arr
    scale = n / out
    centers = (np.arange(out) + 0.5) * scale - 0.5
    if method == "nearest":
        idx = np.clip(np.floor((np.arange(out) + 0.5) * scale), 0, n - 1).astype(int)
        return np.take(arr, idx, axis=axis)
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")
    centers = np.clip(centers, 0, n - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = centers - lo
    shape = [1] * arr.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - frac) + np.take(arr, hi, axis=axis) * frac


def resize(img: np.ndarray, size: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resize ``(..., H, W, C)`` float images with half-pixel-centre sampling."""
    img = np.asarray(img, dtype=np.float64)
    img = _resize_axis(img, size[0], img.ndim - 3, method)
    return _resize_axis(img, size[1], img.ndim - 2, method)


def crop_size(size: int, pct: float) -> int:
    return int(np.floor(size * pct + 1e-9))


def center_crop_resize(img: np.ndarray, pct: float = 0.9, method: str = "bilinear") -> np.ndarray:
    """Keep the central ``pct`` window of ``(..., H, W, C)`` and resize it back to H x W."""
    h, w = img.shape[-3], img.shape[-2]
    ch, cw = crop_size(h, pct), crop_size(w, pct)
    top, left = (h - ch) // 2, (w - cw) // 2
    window = img[..., top:top + ch, left:left + cw, :]
    return resize(window, (h, w), method)


def normalize(image, mean=IMAGENET_MEAN, std=IMAGENET_STD, crop_pct: float | None = None):
    """``(pixel/255 - mean)/std`` per channel; optional eval-time center crop first.

    Accepts a :class:`LabeledImage` or a raw ``(..., H, W, 3)`` uint8 array.
    """
    pixels = image.pixels if isinstance(image, LabeledImage) else image
    std = np.asarray(std, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std components must be positive")
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    if crop_pct is not None and crop_pct < 1.0:
        x = center_crop_resize(x, crop_pct)
    return (x - mean) / std


def augment(pixels: np.ndarray, rng: np.random.Generator, pad: int = 4,
            flip: bool = True) -> np.ndarray:
    """Random horizontal flip then zero-pad-and-crop on a uint8 batch ``(B, H, W, 3)``."""
    b, h, w, _ = pixels.shape
    out = pixels.copy()
    if flip:
        flips = rng.random(b) < 0.5
        out[flips] = out[flips, :, ::-1]
    if pad > 0:
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
        for i in range(b):
            r, c = offs[i]
            out[i] = padded[i, r:r + h, c:c + w]
    return out
