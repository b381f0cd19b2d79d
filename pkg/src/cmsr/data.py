"""Image dataset pipeline: RGB selection, cropping, x4 block downsampling,
[-1, 1] normalization, and synthetic datasets for oracle-driven tests."""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as tn
from .denoiser import UPSCALE
from .errors import ConfigError, InvalidShapeError

logger = logging.getLogger(__name__)

RGB_MODES = ("RGB", "RGBA")
TEXTURE_MODES = ("checkerboard", "stripes", "gradient", "blobs")


def normalize(values) -> np.ndarray:
    """Bytes in [0, 255] to floats in [-1, 1]."""
    return np.asarray(values, dtype=np.float64) / 127.5 - 1.0


def denormalize(x) -> np.ndarray:
    """Floats to uint8, rounding half away from zero and clamping to [0, 255]."""
    data = x.data if isinstance(x, tn.Tensor) else np.asarray(x, dtype=np.float64)
    v = (data + 1.0) * 127.5
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def downsample_x4(pixels) -> np.ndarray:
    """4x4 non-overlapping block average over the last two axes."""
    data = pixels.data if isinstance(pixels, tn.Tensor) else np.asarray(pixels, dtype=np.float64)
    with tn.no_grad():
        return tn.downsample_average(tn.Tensor(data), UPSCALE).data


def upsample_nearest_x4(lowres) -> np.ndarray:
    data = np.asarray(lowres, dtype=np.float64)
    return np.repeat(np.repeat(data, UPSCALE, axis=-2), UPSCALE, axis=-1)


def pixel_checksum(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels, dtype="<f8").tobytes()).hexdigest()


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    lowres: np.ndarray
    source_path: str | None = None

    def __post_init__(self):
        s = self.pixels.shape[-1]
        if self.pixels.ndim != 3 or self.pixels.shape[1] != s or s % UPSCALE:
            raise InvalidShapeError(f"record {self.id}: pixels must be (C, S, S) with S % 4 == 0")
        if np.any(np.abs(self.pixels) > 1.0) or np.any(np.abs(self.lowres) > 1.0):
            raise ConfigError(f"record {self.id}: values outside [-1, 1]")
        if not np.allclose(self.lowres, downsample_x4(self.pixels), rtol=0, atol=1e-12):
            raise ConfigError(f"record {self.id}: lowres does not match the x4 downsample of pixels")


@dataclass
class ImageSet:
    """Stacked images ``pixels`` (M, C, S, S) with their x4 downsamples."""

    ids: list[str]
    pixels: np.ndarray
    lowres: np.ndarray | None = None
    clip_fraction: float = 0.0

    def __post_init__(self):
        if self.lowres is None and self.pixels.ndim == 4 and self.pixels.shape[-1] % UPSCALE == 0:
            self.lowres = downsample_x4(self.pixels)

    def __len__(self) -> int:
        return len(self.ids)

    def records(self) -> list[ImageRecord]:
        return [ImageRecord(i, p, lr) for i, p, lr in zip(self.ids, self.pixels, self.lowres)]

    def subset(self, indices) -> ImageSet:
        idx = list(indices)
        return ImageSet([self.ids[i] for i in idx], self.pixels[idx], self.lowres[idx])


@dataclass
class DatasetManifest:
    size: int
    split: str
    seed: int
    records: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> DatasetManifest:
        return cls(**json.loads(text))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def crop_offsets(width: int, height: int, size: int, mode: str = "center", rng=None) -> tuple[int, int]:
    """Top-left ``(x, y)`` of a ``size`` x ``size`` crop."""
    if width < size or height < size:
        raise InvalidShapeError(f"image {width}x{height} smaller than crop {size}")
    if mode == "center":
        return (width - size) // 2, (height - size) // 2
    if mode == "random":
        if rng is None:
            raise ConfigError("random crop needs an rng")
        return int(rng.integers(0, width - size + 1)), int(rng.integers(0, height - size + 1))
    raise ConfigError(f"unknown crop mode {mode!r}")


def load_png(path) -> Image.Image:
    with Image.open(path) as im:
        im.load()
        return im.copy()


def save_png(pixels, path) -> None:
    """Write a (3, H, W) tensor in [-1, 1] as an 8-bit RGB PNG."""
    arr = denormalize(pixels).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(path, format="PNG")


def png_to_tensor(path) -> np.ndarray:
    im = load_png(path)
    if im.mode not in RGB_MODES:
        raise ConfigError(f"{path}: expected an RGB image, got mode {im.mode}")
    return normalize(np.asarray(im.convert("RGB"))).transpose(2, 0, 1).copy()


def ingest(
    dir_path,
    target_size: int,
    crop_mode: str = "center",
    seed: int = 0,
    split: str = "train",
) -> tuple[DatasetManifest, ImageSet]:
    """Crop every RGB PNG in ``dir_path`` to ``target_size`` and pair it with its x4 downsample.

    Grayscale, undersized and unreadable files are skipped with a logged reason.
    """
    if target_size < UPSCALE or target_size % UPSCALE:
        raise ConfigError(f"target size must be a positive multiple of {UPSCALE}, got {target_size}")
    root = Path(dir_path)
    if not root.is_dir():
        raise ConfigError(f"input directory does not exist: {root}")
    manifest = DatasetManifest(size=target_size, split=split, seed=seed)
    ids, pixels = [], []
    for path in sorted(root.rglob("*.png"), key=lambda p: p.relative_to(root).with_suffix("").as_posix()):
        rid = path.relative_to(root).with_suffix("").as_posix()
        try:
            im = load_png(path)
        except Exception as exc:  # PIL raises a zoo of exception types
            logger.warning("skipping %s: unreadable (%s)", path, exc)
            manifest.skipped.append({"id": rid, "reason": "unreadable"})
            continue
        if im.mode not in RGB_MODES:
            logger.info("skipping %s: not RGB (mode %s)", path, im.mode)
            manifest.skipped.append({"id": rid, "reason": f"not RGB (mode {im.mode})"})
            continue
        w, h = im.size
        if w < target_size or h < target_size:
            logger.info("skipping %s: %dx%d smaller than %d", path, w, h, target_size)
            manifest.skipped.append({"id": rid, "reason": f"smaller than {target_size}"})
            continue
        rng = np.random.default_rng([seed, zlib.crc32(rid.encode())])
        x0, y0 = crop_offsets(w, h, target_size, crop_mode, rng)
        arr = np.asarray(im.convert("RGB"))[y0 : y0 + target_size, x0 : x0 + target_size]
        px = normalize(arr).transpose(2, 0, 1).copy()
        ids.append(rid)
        pixels.append(px)
        manifest.records.append(
            {
                "id": rid,
                "source_path": str(path),
                "size": target_size,
                "crop": [x0, y0],
                "checksum": pixel_checksum(px),
            }
        )
    s = target_size
    stack = np.stack(pixels) if pixels else np.zeros((0, 3, s, s))
    return manifest, ImageSet(ids, stack, downsample_x4(stack) if pixels else np.zeros((0, 3, s // 4, s // 4)))


def synth_gaussian(mu0: float, sigma0: float, shape, count: int, seed: int) -> ImageSet:
    """iid ``N(mu0, sigma0^2)`` values clipped into [-1, 1]; reports the clipped fraction."""
    if sigma0 < 0:
        raise ConfigError(f"sigma0 must be >= 0, got {sigma0}")
    rng = np.random.default_rng(seed)
    raw = mu0 + sigma0 * rng.standard_normal((count,) + tuple(shape))
    clipped = np.clip(raw, -1.0, 1.0)
    frac = float(np.mean(clipped != raw)) if raw.size else 0.0
    ids = [f"gauss-{i:06d}" for i in range(count)]
    return ImageSet(ids, clipped, clip_fraction=frac)


def _colors(rng, k: int) -> np.ndarray:
    return rng.uniform(-0.9, 0.9, size=(k, 3))


def _texture(mode: str, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if mode == "checkerboard":
        a, b = _colors(rng, 2)
        cell = int(rng.integers(4, 9))
        ox, oy = rng.integers(0, cell, size=2)
        mask = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(bool)
    elif mode == "stripes":
        a, b = _colors(rng, 2)
        width = int(rng.integers(3, 9))
        coord = xx if rng.random() < 0.5 else yy
        mask = (((coord + rng.integers(0, width)) // width) % 2).astype(bool)
    elif mode == "gradient":
        a, b = _colors(rng, 2)
        theta = rng.uniform(0, 2 * np.pi)
        proj = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta)
        w = np.clip(proj / size + 0.5, 0.0, 1.0)
        return a[:, None, None] * (1 - w) + b[:, None, None] * w
    elif mode == "blobs":
        background, = _colors(rng, 1)
        img = np.broadcast_to(background[:, None, None], (3, size, size)).copy()
        for _ in range(int(rng.integers(1, 4))):
            color, = _colors(rng, 1)
            cx, cy = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 10, size / 4)
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            img[:, inside] = color[:, None]
        return img
    else:
        raise ConfigError(f"unknown texture mode {mode!r}; choose from {TEXTURE_MODES}")
    return np.where(mask[None], b[:, None, None], a[:, None, None])


def synth_textures(modes=TEXTURE_MODES, size: int = 32, count: int = 512, seed: int = 0) -> ImageSet:
    """Procedural RGB patterns cycling through ``modes``, paired with exact x4 downsamples.

    Every pattern is piecewise constant or linear between colors drawn
    uniformly from [-0.9, 0.9] per channel, so values never leave [-1, 1].
    """
    if size % UPSCALE:
        raise ConfigError(f"texture size must be a multiple of {UPSCALE}, got {size}")
    modes = tuple(modes)
    rng = np.random.default_rng(seed)
    pixels = np.stack([_texture(modes[i % len(modes)], size, rng) for i in range(count)])
    ids = [f"{modes[i % len(modes)]}-{i:06d}" for i in range(count)]
    return ImageSet(ids, pixels)
