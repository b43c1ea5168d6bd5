"""Image file io, dataset indexing, and deterministic batch assembly.

Inputs are 8-bit RGB PNG or PPM files mapped to [0, 1] floats, channels
last.  Batch crops and augmentations are pure functions of
(seed, epoch, step), so any batch can be regenerated exactly.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .rand import rng_from

DOWNSAMPLE_PROB = 0.3
DOWNSAMPLE_FACTORS = (1.5, 2.0)


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG/PPM to float64 (h, w, 3) in [0, 1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read image {path}: {err}") from err
    if img.format not in ("PNG", "PPM"):
        raise DataError(f"unsupported format {img.format!r} for {path}; need PNG or PPM")
    if img.mode != "RGB":
        raise DataError(
            f"unsupported mode {img.mode!r} for {path}; need 8-bit RGB "
            f"(16-bit and non-RGB images are rejected)")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(x: np.ndarray, path) -> None:
    """[0, 1] floats to an 8-bit RGB PNG (round to nearest level)."""
    arr = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG")


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample with edge clamping; img is (h, w, c)."""
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _augment_and_crop(img: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Optional random downsample, then a random crop of `crop` x `crop`."""
    if rng.random() < DOWNSAMPLE_PROB:
        factor = DOWNSAMPLE_FACTORS[rng.integers(len(DOWNSAMPLE_FACTORS))]
        nh, nw = int(img.shape[0] / factor), int(img.shape[1] / factor)
        if nh >= crop and nw >= crop:
            img = bilinear_resize(img, nh, nw)
        else:
            warnings.warn("downsample augmentation skipped: result smaller than crop")
    h, w = img.shape[:2]
    if h < crop or w < crop:
        raise DataError(f"image {h}x{w} smaller than crop {crop}")
    oy = int(rng.integers(h - crop + 1))
    ox = int(rng.integers(w - crop + 1))
    return img[oy:oy + crop, ox:ox + crop]


class ArrayDataset:
    """In-memory image list with the same batching contract as DatasetIndex."""

    def __init__(self, images):
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        if not self.images:
            raise DataError("empty dataset")

    def size(self) -> int:
        return len(self.images)

    def _image(self, i: int) -> np.ndarray:
        return self.images[i]

    def epoch_order(self, seed: int, epoch: int) -> np.ndarray:
        return rng_from(seed, epoch, 11).permutation(self.size())

    def make_batch(self, crop: int, batch: int, seed: int, epoch: int, step: int,
                   augment: bool = True) -> np.ndarray:
        """Deterministic (batch, crop, crop, 3) stack for (seed, epoch, step)."""
        order = self.epoch_order(seed, epoch)
        rng = rng_from(seed, epoch, step, 13)
        out = np.empty((batch, crop, crop, 3))
        for b in range(batch):
            img = self._image(int(order[(step * batch + b) % self.size()]))
            if augment:
                out[b] = _augment_and_crop(img, crop, rng)
            else:
                h, w = img.shape[:2]
                if h < crop or w < crop:
                    raise DataError(f"image {h}x{w} smaller than crop {crop}")
                oy = int(rng.integers(h - crop + 1))
                ox = int(rng.integers(w - crop + 1))
                out[b] = img[oy:oy + crop, ox:ox + crop]
        return out


class DatasetIndex(ArrayDataset):
    """Folder of PNG/PPM files; images load lazily and cache."""

    def __init__(self, folder):
        folder = Path(folder)
        if not folder.is_dir():
            raise DataError(f"dataset folder {folder} does not exist")
        self.paths = sorted(p for p in folder.iterdir()
                            if p.suffix.lower() in (".png", ".ppm"))
        if not self.paths:
            raise DataError(f"no .png/.ppm files in {folder}")
        self.dims = []
        for p in self.paths:
            with Image.open(p) as im:
                self.dims.append((im.height, im.width))
        self._cache: dict[int, np.ndarray] = {}

    def size(self) -> int:
        return len(self.paths)

    def _image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = load_image(self.paths[i])
        return self._cache[i]
