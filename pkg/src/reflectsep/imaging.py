"""Image primitives: clipping, resampling, augmentation, convolution, metrics, I/O.

Images are float64 arrays of shape (height, width, channels) with channels in
{1, 3}; intensities are dimensionless and live in [0, 1] after any clipping
operation. Every function taking ``rng`` expects a ``numpy.random.Generator``
and draws from it in a fixed order, so equal seeds give equal outputs.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

#: Value returned by :func:`psnr` for identical images.
PSNR_INF = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

CROP_RANGE = (192, 256)
BASE_SIZE = 256
TRAIN_SIZE = 128


def check_image(img, name="image"):
    """Return ``img`` as a float64 (H, W, C) array, raising on bad shape or values."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name} must have shape (H, W, 1|3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} is empty: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_kernel(k):
    arr = np.asarray(k, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] % 2 == 0 or arr.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd sides, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("kernel contains non-finite values")
    return arr


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def clip01(img):
    img = check_image(img)
    return np.minimum(np.maximum(img, 0.0), 1.0)


def _axis_weights(n_in, n_out):
    # Corner-aligned: output sample i sits at input coordinate i*(n_in-1)/(n_out-1),
    # so the first and last samples coincide with the input corners.
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with the corner-aligned convention.

    Output pixel ``(i, j)`` samples the input at
    ``(i * (H - 1) / (out_h - 1), j * (W - 1) / (out_w - 1))``; a target side
    of 1 samples row/column 0. Resizing to the input size is exact.
    """
    img = check_image(img)
    if int(out_h) < 1 or int(out_w) < 1:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    out_h, out_w = int(out_h), int(out_w)
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1.0 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1.0 - fx) + img[y1][:, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def sample_crop_box(rng, crop_range=CROP_RANGE, size=BASE_SIZE):
    """Draw ``(top, left, height, width)`` for a crop of a ``size`` square.

    Height and width are independent uniform integers in ``crop_range``
    (inclusive); the top-left corner is uniform over valid placements.
    """
    lo, hi = crop_range
    if not 1 <= lo <= hi <= size:
        raise ValueError(f"invalid crop range {crop_range}")
    ch = int(rng.integers(lo, hi + 1))
    cw = int(rng.integers(lo, hi + 1))
    top = int(rng.integers(0, size - ch + 1))
    left = int(rng.integers(0, size - cw + 1))
    return top, left, ch, cw


def random_crop_resize(img, rng, out_size=TRAIN_SIZE, crop_range=CROP_RANGE):
    """Crop a random box (see :func:`sample_crop_box`) from a 256x256 image, resize to ``out_size``."""
    img = check_image(img)
    if img.shape[:2] != (BASE_SIZE, BASE_SIZE):
        raise ValueError(f"expected a {BASE_SIZE}x{BASE_SIZE} image, got {img.shape[:2]}")
    top, left, ch, cw = sample_crop_box(rng, crop_range)
    patch = img[top:top + ch, left:left + cw]
    return resize_bilinear(patch, out_size, out_size)


def flip_lr(img, rng, p=0.5):
    """Mirror columns with probability ``p`` (one uniform draw per call)."""
    img = check_image(img)
    if rng.random() < p:
        return img[:, ::-1].copy()
    return img.copy()


def gaussian_kernel(sigma):
    """Normalized isotropic Gaussian of side ``2*ceil(2*sigma) + 1``."""
    sigma = float(sigma)
    if not sigma > 0 or not math.isfinite(sigma):
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(2.0 * sigma)
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def conv2d_same(img, k):
    """Per-channel 2-D convolution with "same" output size.

    Borders use reflect padding without repeating the edge sample
    (``d c b | a b c d | c b a``). The kernel origin is its center element;
    the kernel is flipped, so this is a true convolution.
    """
    img = check_image(img)
    k = check_kernel(k)
    kh, kw = k.shape
    h, w, _ = img.shape
    ry, rx = kh // 2, kw // 2
    if ry >= h or rx >= w:
        raise ValueError(f"kernel {k.shape} too large for image {img.shape[:2]}")
    padded = np.pad(img, ((ry, ry), (rx, rx), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    flipped = k[::-1, ::-1]
    for dy, dx in zip(*np.nonzero(flipped)):
        out += flipped[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with peak 1.0; ``PSNR_INF`` when equal."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _ssim_window():
    ax = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    g = np.exp(-(ax**2) / (2.0 * SSIM_SIGMA**2))
    g /= g.sum()
    return g


def _filter_valid(x, g):
    # Separable correlation over every fully contained window position.
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim_map(a, b):
    """Local SSIM at every valid 11x11 window position, per channel."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    _same_shape(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image sides must be >= {SSIM_WINDOW}, got {a.shape[:2]}")
    g = _ssim_window()
    maps = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = _filter_valid(x, g)
        mu_y = _filter_valid(y, g)
        var_x = _filter_valid(x * x, g) - mu_x**2
        var_y = _filter_valid(y * y, g) - mu_y**2
        cov = _filter_valid(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        maps.append(num / den)
    return np.stack(maps, axis=-1)


def ssim(a, b):
    """Mean structural similarity (Gaussian 11x11 window, sigma 1.5)."""
    return float(np.mean(ssim_map(a, b)))


def load_image(path):
    """Read an 8-bit PNG/JPEG as an RGB float image in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(img):
    img = clip01(img)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_image(img, path):
    """Write an image as 8-bit PNG (or JPEG by extension), rounding to nearest."""
    path = Path(path)
    arr = to_uint8(img)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        PILImage.fromarray(arr).save(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc
    return path
