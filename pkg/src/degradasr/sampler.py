"""Sampling degradation representations from the Gaussian-matched latent space.

Default mode draws from the standard normal prior and keeps draws whose
projected category matches the target (rejection sampling); cluster mode
fits a diagonal Gaussian to accepted codes first, for rare categories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .gdrl import Gdrl, categorize


class SamplerError(RuntimeError):
    pass


@dataclass
class SampledRep:
    z: np.ndarray          # sampling-space code, shape (d_z,)
    rep_feat: np.ndarray   # conditioning vector, shape (d_rep,)
    category: int
    accepted: bool = True


def sample_prior(n: int, d_z: int, seed: int) -> np.ndarray:
    """n i.i.d. standard normal codes, shape (n, d_z)."""
    if n < 0:
        raise SamplerError("n must be >= 0")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d_z))


def fit_cluster_gaussian(z_samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension sample mean and variance of one category's codes."""
    z = np.asarray(z_samples, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise SamplerError("need at least 2 samples to fit a cluster Gaussian")
    return z.mean(axis=0), z.var(axis=0)


@torch.no_grad()
def _accept(model: Gdrl, z: np.ndarray, category: int, tau: float
            ) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    zt = torch.from_numpy(z.astype(np.float32))
    logits, rep_feat = model.projector(zt)
    probs = categorize(logits)
    top_p, top_i = probs.max(dim=-1)
    mask = (top_i == category) & (top_p >= tau)
    return mask.numpy(), zt, rep_feat


def sample_for_category(category: int, n: int, max_tries: int, model: Gdrl,
                        seed: int, tau: float = 0.5,
                        mode: str = "prior") -> list[SampledRep]:
    """Up to n accepted representations whose argmax category matches `category`.

    Raises if the prior never reaches the category within max_tries draws.
    """
    if not (0 <= category < model.config.n_categories):
        raise SamplerError(f"category {category} out of range")
    if mode not in ("prior", "cluster"):
        raise SamplerError(f"unknown sampling mode {mode!r}")
    model.eval()
    d_z = model.config.d_z
    rng = np.random.default_rng(seed)

    def rejection(n_target: int, tries_budget: int, draw):
        out: list[SampledRep] = []
        tries = 0
        batch = 256
        while len(out) < n_target and tries < tries_budget:
            take = min(batch, tries_budget - tries)
            z = draw(take)
            tries += take
            mask, zt, rep_feat = _accept(model, z, category, tau)
            for i in np.nonzero(mask)[0]:
                out.append(SampledRep(z=z[i].copy(),
                                      rep_feat=rep_feat[i].numpy().copy(),
                                      category=category))
                if len(out) >= n_target:
                    break
        return out, tries

    def draw_prior(k):
        return rng.standard_normal((k, d_z))

    if mode == "prior":
        accepted, _ = rejection(n, max_tries, draw_prior)
        if not accepted:
            raise SamplerError(
                f"category {category} unreachable from prior after {max_tries} draws")
        return accepted

    # cluster mode: bootstrap a few accepted prior draws, fit, then resample
    boot, used = rejection(max(2, min(n, 32)), max_tries, draw_prior)
    if len(boot) < 2:
        raise SamplerError(
            f"category {category} unreachable from prior after {max_tries} draws")
    mean, var = fit_cluster_gaussian(np.stack([r.z for r in boot]))
    std = np.sqrt(np.maximum(var, 1e-12))

    def draw_cluster(k):
        return mean[None, :] + rng.standard_normal((k, d_z)) * std[None, :]

    accepted, _ = rejection(n, max(max_tries - used, n), draw_cluster)
    if not accepted:
        raise SamplerError(f"category {category} unreachable in cluster mode")
    return accepted


def save_reps(path, reps: list[SampledRep], extra_meta: dict | None = None) -> None:
    arrays = {"z": np.stack([r.z for r in reps]),
              "rep_feat": np.stack([r.rep_feat for r in reps]),
              "category": np.asarray([r.category for r in reps], dtype=np.int64)}
    meta = {"kind": "sampled_reps", "count": len(reps)}
    meta.update(extra_meta or {})
    ckpt.save_checkpoint(path, arrays, meta)


def load_reps(path) -> list[SampledRep]:
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "sampled_reps":
        raise SamplerError(f"{path} is not a sampled-reps file")
    return [SampledRep(z=arrays["z"][i], rep_feat=arrays["rep_feat"][i],
                       category=int(arrays["category"][i]))
            for i in range(len(arrays["z"]))]
