"""Small torch helpers shared by the training stages."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(global_seed: int, stage: str) -> int:
    """Per-stage seed: hash of the global seed and the stage name."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def to_tensor(imgs: np.ndarray) -> torch.Tensor:
    """HWC or NHWC float image(s) in [0,1] -> NCHW float32 tensor."""
    arr = np.asarray(imgs, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t: torch.Tensor) -> np.ndarray:
    """NCHW or CHW tensor -> HWC float64 image(s), clipped to [0,1]."""
    arr = t.detach().cpu().numpy()
    if arr.ndim == 3:
        arr = arr[None]
    out = np.clip(arr.transpose(0, 2, 3, 1).astype(np.float64), 0.0, 1.0)
    return out[0] if out.shape[0] == 1 else out
