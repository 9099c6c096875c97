"""Image I/O, YCbCr conversion, the bicubic resampler, and PSNR/SSIM metrics.

The resampler is separable cubic convolution with the Keys kernel (a = -0.5),
center-aligned coordinates (src = (dst + 0.5) * in/out - 0.5) and edge
replication. When shrinking, the kernel support is stretched by the inverse
scale (the standard antialiased form used throughout SR evaluation); pass
``antialias=False`` for the raw kernel. Metrics follow the Y-channel
convention: PSNR on [0, 255] with a shaved border, SSIM with an 11x11
Gaussian window (sigma 1.5) averaged over valid window centers only.

Everything here is a pure function over immutable inputs; parallel
invocation across images is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFormatError(ValueError):
    """File is not a decodable 8-bit gray/RGB image."""


class MetricError(ValueError):
    """Metric preconditions violated (dimensions, shave, window size)."""


@dataclass
class ImageU8:
    """Interleaved 8-bit image; pixels shaped (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageFormatError(f"expected (h, w, 1|3) pixels, got shape {arr.shape}")
        self.pixels = np.ascontiguousarray(arr, dtype=np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


class Plane:
    """Single-channel float image, nominal range [0, 255]."""

    __slots__ = ("samples",)

    def __init__(self, samples: np.ndarray):
        arr = np.asarray(samples, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"plane must be 2-D and non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("plane contains non-finite samples")
        self.samples = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def __repr__(self) -> str:
        return f"Plane({self.width}x{self.height})"


# BT.601 studio-range RGB <-> YCbCr. Y lands in [16, 235].
_YCBCR_MATRIX = np.array(
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ]
) / 255.0
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])
_YCBCR_INVERSE = np.linalg.inv(_YCBCR_MATRIX)


def rgb_to_ycbcr(img: ImageU8) -> tuple[Plane, Plane, Plane]:
    """Split an RGB image into Y, Cb, Cr planes (grayscale: Y = samples)."""
    if img.channels == 1:
        y = img.pixels[:, :, 0].astype(np.float64)
        neutral = np.full_like(y, 128.0)
        return Plane(y), Plane(neutral), Plane(neutral.copy())
    rgb = img.pixels.astype(np.float64)
    ycc = rgb @ _YCBCR_MATRIX.T + _YCBCR_OFFSET
    return Plane(ycc[:, :, 0]), Plane(ycc[:, :, 1]), Plane(ycc[:, :, 2])


def rgb_to_y(img: ImageU8) -> Plane:
    """Luminance plane: Y = 16 + (65.481 R + 128.553 G + 24.966 B)/255."""
    return rgb_to_ycbcr(img)[0]


def y_merge_back(y: Plane, cb: Plane, cr: Plane) -> ImageU8:
    """Reassemble RGB from Y/Cb/Cr planes, clipped and rounded to uint8."""
    if not (y.samples.shape == cb.samples.shape == cr.samples.shape):
        raise MetricError("Y/Cb/Cr planes must share dimensions")
    ycc = np.stack([y.samples, cb.samples, cr.samples], axis=-1)
    rgb = (ycc - _YCBCR_OFFSET) @ _YCBCR_INVERSE.T
    return ImageU8(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


def keys_cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """The Keys cubic-convolution kernel with free parameter ``a``."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    near = (a + 2) * ax**3 - (a + 3) * ax**2 + 1
    far = a * ax**3 - 5 * a * ax**2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _contributions(in_len: int, out_len: int, antialias: bool):
    """Per-output-sample source indices (clamped) and normalized weights."""
    scale = out_len / in_len
    src = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    if scale < 1.0 and antialias:
        kscale = scale
        kwidth = 4.0 / scale
    else:
        kscale = 1.0
        kwidth = 4.0
    left = np.floor(src - kwidth / 2).astype(np.int64)
    taps = int(math.ceil(kwidth)) + 2
    idx = left[:, None] + np.arange(taps)
    weights = keys_cubic((src[:, None] - idx) * kscale) * kscale
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    return idx, weights


def _resample_axis(arr: np.ndarray, out_len: int, axis: int, antialias: bool) -> np.ndarray:
    idx, weights = _contributions(arr.shape[axis], out_len, antialias)
    taps = idx.shape[1]
    if axis == 0:
        out = np.zeros((out_len, arr.shape[1]))
        for t in range(taps):
            out += arr[idx[:, t], :] * weights[:, t : t + 1]
    else:
        out = np.zeros((arr.shape[0], out_len))
        for t in range(taps):
            out += arr[:, idx[:, t]] * weights[:, t]
    return out


def bicubic_resize(p: Plane, out_w: int, out_h: int, antialias: bool = True) -> Plane:
    """Resize to (out_w, out_h); rows are resampled first, then columns."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be >= 1x1, got {out_w}x{out_h}")
    arr = _resample_axis(p.samples, out_h, axis=0, antialias=antialias)
    arr = _resample_axis(arr, out_w, axis=1, antialias=antialias)
    return Plane(arr)


def modcrop(p: Plane, scale: int) -> Plane:
    """Crop bottom/right so both dimensions are multiples of ``scale``."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    h = (p.height // scale) * scale
    w = (p.width // scale) * scale
    if h == 0 or w == 0:
        raise ValueError(f"modcrop to scale {scale} would empty a {p.width}x{p.height} plane")
    return Plane(p.samples[:h, :w])


def _shaved(a: Plane, b: Plane, shave: int) -> tuple[np.ndarray, np.ndarray]:
    if a.samples.shape != b.samples.shape:
        raise MetricError(f"plane dimensions differ: {a.samples.shape} vs {b.samples.shape}")
    if shave < 0:
        raise MetricError(f"shave must be >= 0, got {shave}")
    if 2 * shave >= min(a.height, a.width):
        raise MetricError(f"shave {shave} leaves no pixels in a {a.width}x{a.height} plane")
    if shave == 0:
        return a.samples, b.samples
    return a.samples[shave:-shave, shave:-shave], b.samples[shave:-shave, shave:-shave]


def psnr(a: Plane, b: Plane, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB over the shaved region (peak 255).

    Identical inputs return math.inf.
    """
    sa, sb = _shaved(a, b, shave)
    mse = float(np.mean((sa - sb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 255.0


def _gaussian_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-((np.arange(_SSIM_WINDOW) - half) ** 2) / (2.0 * _SSIM_SIGMA**2))
    return g / g.sum()


_SSIM_G = _gaussian_window()


def _window_filter(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian-weighted local mean over valid window positions."""
    h, w = img.shape
    ww = w - _SSIM_WINDOW + 1
    wh = h - _SSIM_WINDOW + 1
    tmp = np.zeros((h, ww))
    for k in range(_SSIM_WINDOW):
        tmp += _SSIM_G[k] * img[:, k : k + ww]
    out = np.zeros((wh, ww))
    for k in range(_SSIM_WINDOW):
        out += _SSIM_G[k] * tmp[k : k + wh, :]
    return out


def ssim(a: Plane, b: Plane) -> float:
    """Mean local structural similarity over valid 11x11 window centers."""
    if a.samples.shape != b.samples.shape:
        raise MetricError(f"plane dimensions differ: {a.samples.shape} vs {b.samples.shape}")
    if min(a.height, a.width) < _SSIM_WINDOW:
        raise MetricError(
            f"plane {a.width}x{a.height} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    x, y = a.samples, b.samples
    mu_x = _window_filter(x)
    mu_y = _window_filter(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = _window_filter(x * x) - mu_xx
    var_y = _window_filter(y * y) - mu_yy
    cov = _window_filter(x * y) - mu_xy
    ssim_map = ((2 * mu_xy + c1) * (2 * cov + c2)) / ((mu_xx + mu_yy + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


def shaved_metrics(reference: Plane, candidate: Plane, shave: int) -> tuple[float, float]:
    """(psnr_db, ssim) on the common shaved region — the evaluation protocol."""
    sa, sb = _shaved(reference, candidate, shave)
    return psnr(Plane(sa), Plane(sb)), ssim(Plane(sa), Plane(sb))


def png_load(path) -> ImageU8:
    """Load an 8-bit grayscale or RGB PNG.

    Palette images are expanded to RGB and alpha channels are dropped;
    16-bit and float images are rejected rather than truncated.
    """
    try:
        with Image.open(path) as img:
            if img.mode in ("I", "I;16", "I;16B", "I;16L", "I;16N", "F"):
                raise ImageFormatError(f"unsupported bit depth (mode {img.mode}) in {path}")
            if img.mode == "P":
                img = img.convert("RGB")
            elif img.mode == "RGBA":
                img = img.convert("RGB")
            elif img.mode == "LA":
                img = img.convert("L")
            if img.mode not in ("L", "RGB"):
                raise ImageFormatError(f"unsupported image mode {img.mode} in {path}")
            arr = np.asarray(img)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    except OSError as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    return ImageU8(arr)


def png_save(img: ImageU8, path) -> None:
    """Write an ImageU8 as PNG (mode L or RGB)."""
    arr = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    Image.fromarray(arr, mode="L" if img.channels == 1 else "RGB").save(path, format="PNG")
