"""Image quality metrics: PSNR, SSIM and a pluggable perceptual distance.

All metrics are computed on RGB intensities in [0,1] (no luma conversion),
so the numbers are self-consistent across the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .degrade import DegradeError, check_image


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max_val^2 / MSE) over all pixels and channels; inf if identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DegradeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def _ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, channel-averaged.

    C1=(0.01*L)^2, C2=(0.03*L)^2 with L=max_val (the reference convention).
    """
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise DegradeError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < 11:
        raise DegradeError("image too small for 11x11 SSIM window")
    win = _ssim_window()
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2

    def filt(x):
        return ndimage.convolve(x, win, mode="mirror")

    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x, mu_y = filt(x), filt(y)
        sxx = filt(x * x) - mu_x ** 2
        syy = filt(y * y) - mu_y ** 2
        sxy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


class FallbackPerceptual:
    """Fixed, seeded random convolutional feature stack as perceptual plugin.

    A stand-in for pretrained feature extractors: needs no download, is fully
    deterministic, and still responds monotonically to common corruptions.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.kernels = []
        c_in = 3
        for c_out in channels:
            k = rng.standard_normal((c_out, c_in, 3, 3)) / math.sqrt(9 * c_in)
            self.kernels.append(k)
            c_in = c_out

    def features(self, img: np.ndarray) -> list[np.ndarray]:
        img = check_image(img)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        x = np.moveaxis(img, -1, 0)  # CHW
        feats = []
        for k in self.kernels:
            out = np.empty((k.shape[0],) + x.shape[1:])
            for o in range(k.shape[0]):
                acc = np.zeros(x.shape[1:])
                for i in range(x.shape[0]):
                    acc += ndimage.convolve(x[i], k[o, i], mode="mirror")
                out[o] = acc
            x = np.maximum(out, 0.0)  # ReLU
            # stride-2 pooling keeps cost bounded on large images
            x = x[:, ::2, ::2]
            feats.append(x)
        return feats

    def __call__(self, a: np.ndarray, b: np.ndarray) -> float:
        fa, fb = self.features(a), self.features(b)
        return float(sum(np.mean((x - y) ** 2) for x, y in zip(fa, fb)))


def perceptual_distance(a: np.ndarray, b: np.ndarray, plugin=None,
                        allow_fallback: bool = True) -> float:
    """Plugin-defined perceptual distance; 0 for identical inputs."""
    if plugin is None:
        if not allow_fallback:
            raise DegradeError("no perceptual plugin loaded and fallback disabled")
        plugin = FallbackPerceptual()
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise DegradeError(f"shape mismatch {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 0.0
    return float(plugin(a, b))


@dataclass
class MetricReport:
    """Per-image metric rows plus arithmetic-mean aggregates."""

    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, psnr_db: float, ssim_val: float,
            perceptual: float | None = None) -> None:
        self.rows.append({"id": image_id, "psnr": psnr_db, "ssim": ssim_val,
                          "perceptual": perceptual})

    def aggregate(self) -> dict:
        if not self.rows:
            return {"psnr": math.nan, "ssim": math.nan, "perceptual": math.nan}
        out = {}
        for key in ("psnr", "ssim", "perceptual"):
            vals = [r[key] for r in self.rows if r[key] is not None]
            out[key] = float(np.mean(vals)) if vals else math.nan
        return out

    def to_csv(self, path) -> None:
        agg = self.aggregate()
        with open(path, "w", encoding="utf-8") as f:
            f.write("id,psnr,ssim,perceptual\n")
            for r in self.rows:
                perc = "" if r["perceptual"] is None else f"{r['perceptual']:.6f}"
                p = "inf" if math.isinf(r["psnr"]) else f"{r['psnr']:.6f}"
                f.write(f"{r['id']},{p},{r['ssim']:.6f},{perc}\n")
            f.write(f"# mean_psnr={agg['psnr']:.6f} mean_ssim={agg['ssim']:.6f}"
                    f" mean_perceptual={agg['perceptual']:.6f}\n")
