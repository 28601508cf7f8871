"""Deterministic, seeded image degradation operators.

All operators work on float images in [0,1], shape H x W x C (C in {1,3}),
RGB channel order. Randomness enters only through explicit integer seeds,
so every operator is a pure function of (inputs, seed).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from PIL import Image as PilImage
from scipy import ndimage


class DegradeError(ValueError):
    """Invalid input to a degradation operator."""


# ---------------------------------------------------------------------------
# image helpers
# ---------------------------------------------------------------------------

def check_image(img: np.ndarray) -> np.ndarray:
    """Validate the [0,1] HxWxC float image contract and return float64 view."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DegradeError(f"expected HxWxC image with C in {{1,3}}, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DegradeError("image must have H,W >= 1")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise DegradeError("image intensities must lie in [0,1]")
    return np.clip(arr, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] float -> uint8, round-half-to-even (codec / file boundary only)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    out = arr.astype(np.float64) / 255.0
    if out.ndim == 2:
        out = out[:, :, None]
    return out


def load_image(path) -> np.ndarray:
    with PilImage.open(path) as im:
        im = im.convert("RGB")
        return from_uint8(np.asarray(im))


def save_image(path, img: np.ndarray) -> None:
    arr = to_uint8(check_image(img))
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PilImage.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# degradation recipe types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IspParams:
    """Simplified camera pipeline: gamma + heteroscedastic Poisson-Gaussian noise."""

    gain: float = 1.0
    read_noise: float = 0.02
    shot_noise: float = 0.01
    gamma: float = 2.2

    def __post_init__(self):
        if self.gain <= 0 or self.gamma <= 0:
            raise DegradeError("gain and gamma must be positive")
        if self.read_noise < 0 or self.shot_noise < 0:
            raise DegradeError("noise parameters must be non-negative")


@dataclass(frozen=True)
class DegradationSpec:
    """Declarative recipe identifying one degradation pipeline."""

    id: str
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0  # on the 0-255 intensity scale
    jpeg_quality: int | None = None
    isp: IspParams | None = None
    scale: int = 4

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise DegradeError("blur_sigma and noise_sigma must be >= 0")
        if self.jpeg_quality is not None and not (1 <= self.jpeg_quality <= 100):
            raise DegradeError("jpeg_quality must be in [1,100]")
        if self.scale not in (2, 4):
            raise DegradeError("scale must be 2 or 4")


BASE_BLUR_SIGMAS = (0.2, 1.3, 2.6)
BASE_NOISE_SIGMAS = (0.0, 15.0)
BLUR_KERNEL_SIZE = 15


def base_specs(scale: int = 4) -> list[DegradationSpec]:
    """The 6 base degradations: blur {0.2,1.3,2.6} x noise {0,15}."""
    specs = []
    for b in BASE_BLUR_SIGMAS:
        for n in BASE_NOISE_SIGMAS:
            specs.append(DegradationSpec(
                id=f"blur-{b:g}-noise-{n:g}", blur_sigma=b, noise_sigma=n, scale=scale))
    return specs


def jpeg_spec(scale: int = 4, quality: int = 30) -> DegradationSpec:
    return DegradationSpec(id=f"jpeg-{quality}", jpeg_quality=quality, scale=scale)


def camera_sensor_spec(scale: int = 4, isp: IspParams | None = None) -> DegradationSpec:
    return DegradationSpec(id="camera-sensor", isp=isp or IspParams(), scale=scale)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic 2D Gaussian kernel, k x k with k odd, normalized to sum 1."""
    if size < 1 or size % 2 == 0:
        raise DegradeError(f"kernel size must be odd and >= 1, got {size}")
    if sigma <= 0:
        raise DegradeError(f"sigma must be positive, got {sigma}")
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    kern = np.outer(g1, g1)
    return kern / kern.sum()


def apply_blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2D convolution with reflect padding (edge not repeated)."""
    img = check_image(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if abs(kernel.sum() - 1.0) > 1e-9:
        raise DegradeError("kernel must be normalized to sum 1")
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        # scipy 'mirror' == np.pad 'reflect'
        out[:, :, c] = ndimage.convolve(img[:, :, c], kernel, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Additive i.i.d. Gaussian noise; sigma stated on the 0-255 scale."""
    img = check_image(img)
    if sigma < 0:
        raise DegradeError("noise sigma must be >= 0")
    if sigma == 0:
        return img
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(img.shape) * (sigma / 255.0)
    return np.clip(img + noise, 0.0, 1.0)


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    # Catmull-Rom cubic (a = -0.5); t is distance from sample point, shape (n, 4)
    a = -0.5
    at = np.abs(t)
    w = np.where(
        at <= 1.0,
        (a + 2) * at ** 3 - (a + 3) * at ** 2 + 1,
        np.where(at < 2.0, a * at ** 3 - 5 * a * at ** 2 + 8 * a * at - 4 * a, 0.0),
    )
    return w


def _resize_axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Tap indices (n_out,4) and cubic weights for one axis, clamped borders."""
    scale = n_out / n_in
    # map output pixel centers into input coordinates
    x = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    base = np.floor(x).astype(np.int64)
    offs = np.arange(-1, 3)
    idx = base[:, None] + offs[None, :]
    t = x[:, None] - idx
    w = _cubic_weights(t)
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    return idx, w


def bicubic_resize(img: np.ndarray, scale) -> np.ndarray:
    """Separable bicubic resize (Catmull-Rom a=-0.5), border taps clamped.

    No anti-alias prefilter is applied when downscaling; the degradation
    pipelines rely on this plain convention.
    """
    img = check_image(img)
    s = Fraction(scale).limit_denominator(10**6) if not isinstance(scale, Fraction) else scale
    h, w = img.shape[:2]
    out_h = int(h * s) if (h * s).denominator == 1 else int(round(float(h * s)))
    out_w = int(w * s) if (w * s).denominator == 1 else int(round(float(w * s)))
    if out_h < 1 or out_w < 1:
        raise DegradeError(f"degenerate output size {out_h}x{out_w}")
    iy, wy = _resize_axis_weights(h, out_h)
    ix, wx = _resize_axis_weights(w, out_w)
    # rows: gather 4 taps per output row and reduce
    tmp = np.einsum("rthc,rt->rhc", img[iy, :, :], wy)
    out = np.einsum("rcts,ct->rcs", tmp[:, ix, :], wx)
    return np.clip(out, 0.0, 1.0)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG encode/decode round trip at the given quality."""
    img = check_image(img)
    if not (1 <= int(quality) <= 100):
        raise DegradeError(f"jpeg quality must be in [1,100], got {quality}")
    arr = to_uint8(img)
    gray = arr.shape[2] == 1
    pil = PilImage.fromarray(arr[:, :, 0] if gray else arr)
    buf = io.BytesIO()
    # 4:4:4 sampling so quality alone controls the quantization strength
    pil.save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with PilImage.open(buf) as dec:
        out = from_uint8(np.asarray(dec.convert("L" if gray else "RGB")))
    return out


def camera_sensor_noise(img: np.ndarray, params: IspParams, seed: int) -> np.ndarray:
    """Reverse-forward gamma with heteroscedastic sensor noise in linear domain.

    var = shot_noise * signal + read_noise^2, applied per pixel, then gain,
    forward gamma and clip. Mosaic/demosaic deliberately omitted.
    """
    img = check_image(img)
    rng = np.random.default_rng(seed)
    linear = np.power(img, params.gamma)
    var = params.shot_noise * linear + params.read_noise ** 2
    if params.shot_noise > 0 or params.read_noise > 0:
        linear = linear + rng.standard_normal(img.shape) * np.sqrt(var)
    linear = np.clip(params.gain * linear, 0.0, None)
    out = np.power(linear, 1.0 / params.gamma)
    return np.clip(out, 0.0, 1.0)


def apply_degradation(spec: DegradationSpec, hr: np.ndarray, seed: int) -> np.ndarray:
    """Full HR -> LR pipeline: blur, bicubic downsample, noise, JPEG, ISP."""
    hr = check_image(hr)
    if hr.shape[0] % spec.scale or hr.shape[1] % spec.scale:
        raise DegradeError(
            f"HR shape {hr.shape[:2]} not divisible by scale {spec.scale}")
    out = hr
    if spec.blur_sigma > 0:
        out = apply_blur(out, gaussian_kernel(BLUR_KERNEL_SIZE, spec.blur_sigma))
    out = bicubic_resize(out, Fraction(1, spec.scale))
    if spec.noise_sigma > 0:
        out = add_gaussian_noise(out, spec.noise_sigma, seed)
    if spec.jpeg_quality is not None:
        out = jpeg_compress(out, spec.jpeg_quality)
    if spec.isp is not None:
        out = camera_sensor_noise(out, spec.isp, seed + 1)
    return out
