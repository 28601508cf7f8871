"""Downstream LR -> SR model trained on generated HR-LR pairs.

A small residual-in-residual dense generator with pixel upsampling, a
global skip from the bicubic-upsampled input (zero-initialized tail, so the
fresh network reproduces the interpolation baseline), and the usual
L1 + perceptual + adversarial training recipe with an L1-only warm-up.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .corpus import DatasetManifest
from .hrlr import RandomFeatureExtractor, _nonsat_gan, loss_perceptual
from .torchutil import to_image, to_tensor


class SrError(ValueError):
    pass


class DenseBlock(nn.Module):
    def __init__(self, channels: int, growth: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, growth, 3, padding=1)
        self.conv2 = nn.Conv2d(channels + growth, growth, 3, padding=1)
        self.conv3 = nn.Conv2d(channels + 2 * growth, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        h1 = self.act(self.conv1(x))
        h2 = self.act(self.conv2(torch.cat([x, h1], 1)))
        out = self.conv3(torch.cat([x, h1, h2], 1))
        return x + 0.2 * out


class Rrdb(nn.Module):
    """Residual-in-residual dense block."""

    def __init__(self, channels: int, growth: int):
        super().__init__()
        self.blocks = nn.Sequential(*[DenseBlock(channels, growth) for _ in range(3)])

    def forward(self, x):
        return x + 0.2 * self.blocks(x)


class SrGenerator(nn.Module):
    def __init__(self, scale: int = 4, channels: int = 32, n_blocks: int = 4,
                 growth: int = 16):
        super().__init__()
        if scale not in (2, 4):
            raise SrError("scale must be 2 or 4")
        self.scale = scale
        self.head = nn.Conv2d(3, channels, 3, padding=1)
        self.trunk = nn.Sequential(*[Rrdb(channels, growth) for _ in range(n_blocks)])
        self.trunk_conv = nn.Conv2d(channels, channels, 3, padding=1)
        ups = []
        for _ in range(scale // 2):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(channels, channels, 3, padding=1),
                    nn.LeakyReLU(0.2)]
        self.upsample = nn.Sequential(*ups)
        self.tail = nn.Conv2d(channels, 3, 3, padding=1)
        # zero tail: untrained output equals the interpolation baseline
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = F.interpolate(x, scale_factor=self.scale, mode="bilinear",
                             align_corners=False)
        h = self.head(x)
        h = h + self.trunk_conv(self.trunk(h))
        return base + self.tail(self.upsample(h))


class SrDiscriminator(nn.Module):
    """Conv discriminator over HR-sized images, scalar sigmoid output."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, c * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c * 2, c * 4, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c * 4, 1, 3, padding=1), nn.Sigmoid(),
        )

    def forward(self, x):
        return self.net(x).mean(dim=(1, 2, 3))


def super_resolve(lr, gen: SrGenerator, scale: int) -> torch.Tensor:
    """LR image(s) -> SR tensor at (H*scale, W*scale); eval-mode deterministic."""
    if scale != gen.scale:
        raise SrError(f"generator was built for scale {gen.scale}, asked {scale}")
    x = to_tensor(lr) if isinstance(lr, np.ndarray) else lr
    return gen(x)


def loss_gan_sr(sr: torch.Tensor, hr: torch.Tensor, disc: SrDiscriminator
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN on full HR-sized images (no high-pass here)."""
    if sr.numel() == 0 or hr.numel() == 0:
        raise SrError("empty batch")
    return _nonsat_gan(disc(hr), disc(sr), disc(sr.detach()))


@dataclass
class SrConfig:
    scale: int = 4
    channels: int = 32
    n_blocks: int = 4
    growth: int = 16
    lambda_per: float = 0.1
    lambda_adv: float = 0.005
    warmup_steps: int = 0      # L1-only phase before GAN/perceptual kick in
    lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    batch_size: int = 4
    steps: int = 200
    seed: int = 0
    disc_channels: int = 16


@dataclass
class SrModel:
    config: SrConfig
    generator: SrGenerator
    discriminator: SrDiscriminator
    step: int = 0

    @classmethod
    def create(cls, config: SrConfig) -> "SrModel":
        torch.manual_seed(config.seed)
        return cls(config=config,
                   generator=SrGenerator(config.scale, config.channels,
                                         config.n_blocks, config.growth),
                   discriminator=SrDiscriminator(config.disc_channels))

    def eval(self) -> "SrModel":
        self.generator.eval()
        self.discriminator.eval()
        return self

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {}
        arrays.update(ckpt.state_dict_to_arrays("generator", self.generator))
        arrays.update(ckpt.state_dict_to_arrays("discriminator", self.discriminator))
        cfg = self.config
        meta = {"kind": "sr", "step": self.step, "scale": cfg.scale,
                "channels": cfg.channels, "n_blocks": cfg.n_blocks,
                "growth": cfg.growth, "disc_channels": cfg.disc_channels,
                "seed": cfg.seed}
        meta.update(extra_meta or {})
        ckpt.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "SrModel":
        arrays, meta = ckpt.load_checkpoint(path)
        if meta.get("kind") != "sr":
            raise SrError(f"{path} is not an sr checkpoint")
        config = SrConfig(scale=meta["scale"], channels=meta["channels"],
                          n_blocks=meta["n_blocks"], growth=meta["growth"],
                          disc_channels=meta["disc_channels"], seed=meta["seed"])
        model = cls.create(config)
        ckpt.load_state_dict_from_arrays("generator", arrays, model.generator)
        ckpt.load_state_dict_from_arrays("discriminator", arrays, model.discriminator)
        model.step = meta["step"]
        return model.eval()


def train_sr(config: SrConfig, hr_patches: np.ndarray, lr_patches: np.ndarray,
             log_path=None, progress: bool = False) -> tuple[SrModel, list[dict]]:
    """GAN training over paired (hr, lr) patch arrays (NHWC float in [0,1])."""
    if len(hr_patches) == 0 or len(hr_patches) != len(lr_patches):
        raise SrError("paired training set is empty or mismatched")
    model = SrModel.create(config)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=config.lr,
                             betas=config.adam_betas)
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=config.lr,
                             betas=config.adam_betas)
    extractor = (RandomFeatureExtractor(seed=config.seed)
                 if config.lambda_per > 0 else None)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        idx = rng.integers(len(hr_patches), size=config.batch_size)
        hr = torch.from_numpy(
            hr_patches[idx].astype(np.float32).transpose(0, 3, 1, 2))
        lr = torch.from_numpy(
            lr_patches[idx].astype(np.float32).transpose(0, 3, 1, 2))
        sr = model.generator(lr)
        l1 = (sr - hr).abs().mean()
        gan_on = step >= config.warmup_steps
        l_per = (loss_perceptual(sr, hr, extractor)
                 if gan_on and config.lambda_per > 0 else torch.zeros(()))
        if gan_on and config.lambda_adv > 0:
            l_adv_g, l_adv_d = loss_gan_sr(sr, hr, model.discriminator)
        else:
            l_adv_g = torch.zeros(())
            l_adv_d = torch.zeros(())
        total = l1 + config.lambda_per * l_per + config.lambda_adv * l_adv_g

        opt_g.zero_grad()
        total.backward()
        if l_adv_d.requires_grad:
            opt_d.zero_grad()
            l_adv_d.backward()
            opt_d.step()
        opt_g.step()

        row = {"step": step, "L1": l1.item(), "L_per": l_per.item(),
               "L_adv_g": l_adv_g.item(), "L_adv_d": l_adv_d.item()}
        history.append(row)
        if progress and step % 50 == 0:
            print(f"[sr] step {step}: L1={row['L1']:.4f}")
    model.step = config.steps
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="", encoding="utf-8") as f:
            if history:
                w = csv.DictWriter(f, fieldnames=list(history[0].keys()))
                w.writeheader()
                w.writerows(history)
    return model.eval(), history


def generate_pairs(manifest: DatasetManifest, hrlr_model, gdrl,
                   sampled_reps=None, rng_seed: int = 0
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Materialize HR patches and produce generated LR via the HR->LR model."""
    from .hrlr import degrade_hr, _materialize_pairs

    hr_u8, lr_real, labels = _materialize_pairs(manifest)
    rng = np.random.default_rng(rng_seed)
    by_cat = {c: np.nonzero(labels == c)[0] for c in set(labels.tolist())}
    reps_by_cat = {}
    if sampled_reps:
        for r in sampled_reps:
            reps_by_cat.setdefault(r.category, []).append(r.rep_feat)
    hr_out, lr_out = [], []
    with torch.no_grad():
        for i in range(len(hr_u8)):
            cat = int(labels[i])
            pool = reps_by_cat.get(cat)
            if pool and rng.random() < 0.5:
                rep = torch.from_numpy(
                    pool[int(rng.integers(len(pool)))].astype(np.float32))[None]
            else:
                ex = lr_real[int(rng.choice(by_cat[cat]))]
                _, _, rep = gdrl.represent(ex)
            hr = hr_u8[i].astype(np.float32) / 255.0
            lr_gen = degrade_hr(hr, rep, hrlr_model.generator)
            hr_out.append(hr)
            lr_out.append(to_image(lr_gen).astype(np.float32))
    return np.stack(hr_out), np.stack(lr_out)
