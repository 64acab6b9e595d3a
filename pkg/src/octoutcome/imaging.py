"""PNG decoding, training-time augmentation and evaluation preprocessing.

Both pipelines return float32 arrays shaped (3, S, S), normalised per channel.
The geometric part of the training chain (resize, flip, rotate, crop, final
resize) is composed into a single bilinear resampling of the source image, so
that with identity draws the result coincides with the evaluation path.
"""

from __future__ import annotations

import functools
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import kernels

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ImageDecodeError(ValueError):
    pass


@dataclass
class ImageBuffer:
    """8-bit image, ``data`` shaped (height, width, channels), channels 1 or 3."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W, 1|3), got shape {data.shape}")
        if data.dtype != np.uint8:
            raise ValueError(f"image samples must be uint8, got {data.dtype}")
        self.data = np.ascontiguousarray(data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def decode_png(raw: bytes) -> ImageBuffer:
    """Decode an 8-bit grayscale or RGB PNG without any colour conversion."""
    if not raw.startswith(b"\x89PNG\r\n\x1a\n"):
        raise ImageDecodeError("not a PNG (bad signature)")
    try:
        with Image.open(io.BytesIO(raw)) as img:
            mode = img.mode
            if mode not in ("L", "RGB"):
                raise ImageDecodeError(f"unsupported PNG mode {mode!r}; only 8-bit L and RGB are accepted")
            img.load()
            data = np.asarray(img, dtype=np.uint8)
    except ImageDecodeError:
        raise
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError, EOFError) as exc:
        raise ImageDecodeError(f"malformed PNG: {exc}") from exc
    if data.size == 0:
        raise ImageDecodeError("PNG has no pixels")
    return ImageBuffer(data)


def encode_png(image: ImageBuffer) -> bytes:
    data = image.data[:, :, 0] if image.channels == 1 else image.data
    buf = io.BytesIO()
    Image.fromarray(data, mode="L" if image.channels == 1 else "RGB").save(buf, format="PNG")
    return buf.getvalue()


def read_image(path: str) -> ImageBuffer:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return decode_png(raw)
    except ImageDecodeError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc


@dataclass
class AugmentationConfig:
    resize_to: int = 256
    hflip_prob: float = 0.5
    brightness_range: Tuple[float, float] = (-0.3, 0.3)
    contrast_range: Tuple[float, float] = (-0.3, 0.3)
    rotation_range: Tuple[float, float] = (-10.0, 10.0)
    crop_ratio_range: Tuple[float, float] = (0.7, 1.0)
    final_size: int = 224
    channel_means: Tuple[float, float, float] = IMAGENET_MEAN
    channel_stds: Tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "rotation_range", "crop_ratio_range",
                     "channel_means", "channel_stds"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("brightness_range", "contrast_range", "rotation_range", "crop_ratio_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        lo, hi = self.crop_ratio_range
        if lo <= 0 or hi > 1:
            raise ValueError(f"crop_ratio_range must lie in (0, 1], got {self.crop_ratio_range}")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if not 1 <= self.final_size <= self.resize_to:
            raise ValueError(f"need 1 <= final_size ({self.final_size}) <= resize_to ({self.resize_to})")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ValueError("channel_means and channel_stds need 3 values each")
        if min(self.channel_stds) <= 0:
            raise ValueError("channel_stds must be positive")

    @classmethod
    def desk(cls, size: int = 64, **overrides) -> "AugmentationConfig":
        """Same chain scaled down to ``size`` output pixels (resize step keeps the 256:224 ratio)."""
        return cls(resize_to=int(round(size * 256 / 224)), final_size=int(size), **overrides)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        return cls(**d)


@dataclass(frozen=True)
class AugmentationParams:
    """One draw of the random training transform."""

    flip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0
    angle: float = 0.0
    crop: int = 0  # crop side in resized pixels; 0 means the whole resized image
    top: int = 0
    left: int = 0


def identity_params(config: AugmentationConfig) -> AugmentationParams:
    return AugmentationParams(crop=config.resize_to)


def sample_augmentation(config: AugmentationConfig, rng: np.random.Generator) -> AugmentationParams:
    """Draw flip, brightness, contrast, angle, crop ratio, then crop position, in that order."""
    R = config.resize_to
    flip = bool(rng.random() < config.hflip_prob)
    brightness = float(rng.uniform(*config.brightness_range))
    contrast = float(rng.uniform(*config.contrast_range))
    angle = float(rng.uniform(*config.rotation_range))
    ratio = float(rng.uniform(*config.crop_ratio_range))
    crop = max(1, min(R, int(math.floor(ratio * R))))
    top = int(rng.integers(0, R - crop + 1))
    left = int(rng.integers(0, R - crop + 1))
    return AugmentationParams(flip, brightness, contrast, angle, crop, top, left)


def _check_image(image: ImageBuffer) -> np.ndarray:
    if image.height == 0 or image.width == 0:
        raise ValueError(f"zero-sized image ({image.height}x{image.width})")
    return image.data


@functools.lru_cache(maxsize=64)
def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear resize matrix, half-pixel centres, edge-clamped."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)  # shared through the cache
    return m


def _normalize(values: np.ndarray, config: AugmentationConfig) -> np.ndarray:
    """(S, S, C) pixel values in [0, 255] -> (3, S, S) float32, replicating grayscale."""
    if values.shape[2] == 1:
        values = np.repeat(values, 3, axis=2)
    mean = np.asarray(config.channel_means)
    std = np.asarray(config.channel_stds)
    out = (values / 255.0 - mean) / std
    return out.astype(np.float32).transpose(2, 0, 1)


def preprocess_eval(image: ImageBuffer, config: Optional[AugmentationConfig] = None) -> np.ndarray:
    """Resize straight to the final size and normalise; no randomness."""
    config = config or AugmentationConfig()
    data = _check_image(image).astype(np.float64)
    S = config.final_size
    ry = _resize_weights(image.height, S)
    rx = _resize_weights(image.width, S)
    resized = np.einsum("sh,hwc,tw->stc", ry, data, rx, optimize=True)
    return _normalize(resized, config)


def _photometric(data: np.ndarray, params: AugmentationParams, R: int) -> np.ndarray:
    """Brightness then contrast on source pixels, each clamped to [0, 255]."""
    x = data.astype(np.float64)
    if params.brightness != 0.0:
        x = np.clip(x * (1.0 + params.brightness), 0.0, 255.0)
    if params.contrast != 0.0:
        # image mean as it would be measured on the resized R x R image
        wy = _resize_weights(data.shape[0], R).sum(axis=0)
        wx = _resize_weights(data.shape[1], R).sum(axis=0)
        mean = float(np.einsum("h,hwc,w->", wy, x, wx)) / (R * R * x.shape[2])
        x = np.clip((x - mean) * (1.0 + params.contrast) + mean, 0.0, 255.0)
    return x


def _bilinear_gather(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) ``img`` at fractional (y, x), edge-clamped; returns (..., C)."""
    H, W, C = img.shape
    y = np.minimum(np.maximum(y, 0.0), H - 1)
    x = np.minimum(np.maximum(x, 0.0), W - 1)
    y0 = y.astype(np.intp)  # floor, coordinates are non-negative
    x0 = x.astype(np.intp)
    fy = (y - y0)[..., None]
    fx = (x - x0)[..., None]
    dy = np.where(y0 < H - 1, W, 0)
    dx = np.where(x0 < W - 1, 1, 0)
    flat = img.reshape(H * W, C)
    i00 = y0 * W + x0
    v00 = flat[i00]
    v01 = flat[i00 + dx]
    v10 = flat[i00 + dy]
    v11 = flat[i00 + dy + dx]
    top = v00 + (v01 - v00) * fx
    bottom = v10 + (v11 - v10) * fx
    return top + (bottom - top) * fy


# the fused compiled resampler; the vectorised numpy path below is its reference
USE_KERNELS = True


def apply_augmentation(image: ImageBuffer, params: AugmentationParams,
                       config: AugmentationConfig) -> np.ndarray:
    """Apply one drawn transform: resize, flip, brightness, contrast, rotate, crop, resize, normalise.

    Each output pixel is traced back through crop, rotation (black outside the
    rotated footprint), flip and the first resize to a source location that is
    sampled bilinearly from the photometrically adjusted source image.
    """
    data = _check_image(image)
    H, W = data.shape[:2]
    R, S = config.resize_to, config.final_size
    crop = params.crop or R
    src = _photometric(data, params, R)
    if params.flip:
        # mirroring the source commutes with the symmetric half-pixel resize
        src = src[:, ::-1]

    if USE_KERNELS and kernels.AVAILABLE and src.shape[2] in (1, 3):
        t = math.radians(params.angle)
        means = np.asarray(config.channel_means, dtype=np.float64)
        stds = np.asarray(config.channel_stds, dtype=np.float64)
        return kernels.warp_normalize(src, S, float(crop), params.top, params.left, R, params.angle != 0.0,
                                      math.cos(t), math.sin(t), means, stds,
                                      np.empty((3, S, S), dtype=np.float32))

    # output pixel centres in crop coordinates, then in the R x R rotated image
    grid = (np.arange(S) + 0.5) * (crop / S) - 0.5
    ry = grid[:, None] + params.top
    rx = grid[None, :] + params.left
    ry, rx = np.broadcast_arrays(ry, rx)
    inside = None
    if params.angle != 0.0:
        # undo a counter-clockwise rotation about the image centre
        c = (R - 1) / 2.0
        t = math.radians(params.angle)
        cos, sin = math.cos(t), math.sin(t)
        dy, dx = ry - c, rx - c
        ry = c + cos * dy - sin * dx
        rx = c + sin * dy + cos * dx
        inside = (ry >= -0.5) & (ry <= R - 0.5) & (rx >= -0.5) & (rx <= R - 0.5)
    sy = (ry + 0.5) * (H / R) - 0.5
    sx = (rx + 0.5) * (W / R) - 0.5
    values = _bilinear_gather(src, sy, sx)
    if inside is not None:
        values *= inside[..., None]
    return _normalize(values, config)


def augment_train(image: ImageBuffer, config: Optional[AugmentationConfig] = None,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    config = config or AugmentationConfig()
    rng = rng if rng is not None else np.random.default_rng()
    _check_image(image)
    return apply_augmentation(image, sample_augmentation(config, rng), config)


__all__ = [
    "AugmentationConfig", "AugmentationParams", "ImageBuffer", "ImageDecodeError",
    "apply_augmentation", "augment_train", "decode_png", "encode_png", "identity_params",
    "preprocess_eval", "read_image", "sample_augmentation",
]
