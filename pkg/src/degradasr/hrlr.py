"""Degradation-conditioned HR -> LR generator and its training loop.

The generator works at LR resolution: HR inputs are bicubic pre-downsampled.
Residual groups of degradation-aware blocks modulate features with depthwise
kernels and channel coefficients predicted from the conditioning vector.
A zero-initialized tail plus a global skip makes the untrained generator an
exact identity, so training starts from the bicubic baseline.

Two training modes run in parallel: (1) degrade an HR patch under
degradation/content-consistency losses, (2) reconstruct a real degraded LR
patch as an autoencoder with a pixel-wise L1 loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from . import checkpoint as ckpt
from .corpus import DatasetManifest, materialize
from .degrade import bicubic_resize, check_image, save_image, to_uint8
from .gdrl import Gdrl, ResBlock, categorize, loss_cls
from .sampler import SampledRep
from .torchutil import to_image, to_tensor

_EPS = 1e-12


class HrlrError(ValueError):
    pass


# ---------------------------------------------------------------------------
# high-pass filtering
# ---------------------------------------------------------------------------

def high_pass(img: np.ndarray, window: int = 5) -> np.ndarray:
    """x minus box blur of x (reflect padding); isolates degradation texture."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise HrlrError("expected HxWxC image")
    low = ndimage.uniform_filter(img, size=(window, window, 1), mode="mirror")
    return img - low


def high_pass_t(x: torch.Tensor, window: int = 5) -> torch.Tensor:
    """Torch NCHW counterpart of high_pass, differentiable."""
    pad = window // 2
    c = x.shape[1]
    weight = torch.full((c, 1, window, window), 1.0 / window ** 2,
                        dtype=x.dtype, device=x.device)
    low = F.conv2d(F.pad(x, (pad,) * 4, mode="reflect"), weight, groups=c)
    return x - low


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class DaBlock(nn.Module):
    """Degradation-aware block: predicted depthwise kernel + channel scaling.

    The kernel predictor is initialized to emit a centered delta so the
    dynamic stage starts as (0.5-scaled) identity modulation.
    """

    def __init__(self, channels: int, d_rep: int, k_dw: int = 3):
        super().__init__()
        if k_dw % 2 == 0:
            raise HrlrError("depthwise kernel size must be odd")
        self.channels = channels
        self.k_dw = k_dw
        self.kernel_pred = nn.Linear(d_rep, channels * k_dw * k_dw)
        self.coeff_pred = nn.Linear(d_rep, channels)
        nn.init.zeros_(self.kernel_pred.weight)
        with torch.no_grad():
            delta = torch.zeros(channels, k_dw, k_dw)
            delta[:, k_dw // 2, k_dw // 2] = 1.0
            self.kernel_pred.bias.copy_(delta.reshape(-1))
            nn.init.zeros_(self.coeff_pred.weight)
            nn.init.zeros_(self.coeff_pred.bias)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def dynamic_stage(self, x: torch.Tensor, rep: torch.Tensor) -> torch.Tensor:
        """Per-sample depthwise conv with predicted kernel, then scaling."""
        b, c, h, w = x.shape
        if c != self.channels:
            raise HrlrError(f"expected {self.channels} channels, got {c}")
        if rep.ndim == 1:
            rep = rep[None].expand(b, -1)
        kernels = self.kernel_pred(rep).reshape(b * c, 1, self.k_dw, self.k_dw)
        coeff = torch.sigmoid(self.coeff_pred(rep))  # (b, c) in (0,1)
        pad = self.k_dw // 2
        xp = F.pad(x.reshape(1, b * c, h, w), (pad,) * 4, mode="reflect")
        dyn = F.conv2d(xp, kernels, groups=b * c).reshape(b, c, h, w)
        return dyn * coeff[:, :, None, None]

    def forward(self, x: torch.Tensor, rep: torch.Tensor) -> torch.Tensor:
        dyn = self.dynamic_stage(x, rep)
        out = self.conv2(self.act(self.conv1(dyn)))
        return x + out


class ResidualGroup(nn.Module):
    def __init__(self, channels: int, d_rep: int, n_blocks: int, k_dw: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            DaBlock(channels, d_rep, k_dw) for _ in range(n_blocks))
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, rep):
        h = x
        for block in self.blocks:
            h = block(h, rep)
        return x + self.conv(h)


class HrLrGenerator(nn.Module):
    """Resolution-preserving conditional generator with a global skip."""

    def __init__(self, channels: int = 64, d_rep: int = 128, n_groups: int = 5,
                 n_blocks: int = 5, k_dw: int = 3, scale: int = 4):
        super().__init__()
        self.scale = scale
        self.d_rep = d_rep
        self.head = nn.Conv2d(3, channels, 3, padding=1)
        self.groups = nn.ModuleList(
            ResidualGroup(channels, d_rep, n_blocks, k_dw) for _ in range(n_groups))
        self.tail = nn.Conv2d(channels, 3, 3, padding=1)
        # identity at init: zero tail + global skip
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x: torch.Tensor, rep: torch.Tensor) -> torch.Tensor:
        h = self.head(x)
        for g in self.groups:
            h = g(h, rep)
        return x + self.tail(h)


def degrade_hr(hr, rep: torch.Tensor, gen: HrLrGenerator) -> torch.Tensor:
    """Training mode 1: bicubic pre-downsample, then generator forward."""
    if isinstance(hr, np.ndarray):
        if hr.ndim == 3:
            hr = hr[None]
        if hr.shape[1] % gen.scale or hr.shape[2] % gen.scale:
            raise HrlrError(f"HR shape {hr.shape[1:3]} not divisible by {gen.scale}")
        ds = np.stack([bicubic_resize(h, Fraction(1, gen.scale)) for h in hr])
        x = to_tensor(ds)
    else:
        raise HrlrError("degrade_hr expects a numpy HR image or batch")
    return gen(x, rep)


def reconstruct_lr(lr, rep: torch.Tensor, gen: HrLrGenerator) -> torch.Tensor:
    """Training mode 2: generator as autoencoder at LR resolution."""
    x = to_tensor(lr) if isinstance(lr, np.ndarray) else lr
    return gen(x, rep)


# ---------------------------------------------------------------------------
# discriminator, classifier, feature extractor
# ---------------------------------------------------------------------------

class LrDiscriminator(nn.Module):
    """Patch discriminator over high-pass responses, scalar score per image."""

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


class AcClassifier(nn.Module):
    """Auxiliary degradation classifier: 3 residual blocks + 2 FC layers."""

    def __init__(self, n_categories: int, channels: int = 32):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, channels, 3, padding=1),
                                  nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(*[ResBlock(channels) for _ in range(3)])
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, n_categories)

    def forward(self, x):
        h = self.pool(self.blocks(self.stem(x))).flatten(1)
        return self.fc2(F.leaky_relu(self.fc1(h), 0.2))


class RandomFeatureExtractor(nn.Module):
    """Fixed, seeded random conv stack: the fallback perceptual feature space."""

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / (3 * (c_in ** 0.5)))
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_rep(lr_gen: torch.Tensor, y, gdrl: Gdrl) -> torch.Tensor:
    """Cross entropy of the frozen representation learner's pseudo label."""
    z = gdrl.encoder(lr_gen)
    logits, _ = gdrl.projector(z)
    return loss_cls(categorize(logits), y)


def _nonsat_gan(real_out, fake_out, fake_out_detached):
    disc = (-torch.log(real_out.clamp_min(_EPS)).mean()
            - torch.log((1 - fake_out_detached).clamp_min(_EPS)).mean())
    gen = -torch.log(fake_out.clamp_min(_EPS)).mean()
    return gen, disc


def loss_gan_lr(lr_gen: torch.Tensor, real_lr: torch.Tensor,
                disc: LrDiscriminator, window: int = 5
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN on high-pass responses of generated vs real LR."""
    if lr_gen.numel() == 0 or real_lr.numel() == 0:
        raise HrlrError("empty batch")
    hf_fake = high_pass_t(lr_gen, window)
    hf_real = high_pass_t(real_lr, window)
    return _nonsat_gan(disc(hf_real), disc(hf_fake),
                       disc(high_pass_t(lr_gen.detach(), window)))


def loss_ac(img: torch.Tensor, y, classifier: AcClassifier) -> torch.Tensor:
    """AC-GAN style category cross entropy on the auxiliary classifier."""
    logits = classifier(img)
    return loss_cls(categorize(logits), y)


def loss_color(lr_gen: torch.Tensor, hr: np.ndarray, scale: int) -> torch.Tensor:
    """L1 between generated LR and the bicubic downsample of the HR source."""
    if isinstance(hr, np.ndarray):
        if hr.ndim == 3:
            hr = hr[None]
        target = to_tensor(np.stack(
            [bicubic_resize(h, Fraction(1, scale)) for h in hr]))
    else:
        target = hr
    if target.shape != lr_gen.shape:
        raise HrlrError(f"shape mismatch {tuple(target.shape)} vs {tuple(lr_gen.shape)}")
    return (lr_gen - target).abs().mean()


def loss_perceptual(a: torch.Tensor, b: torch.Tensor,
                    extractor: RandomFeatureExtractor | None) -> torch.Tensor:
    """Mean-squared feature distance under the configured extractor."""
    if extractor is None:
        raise HrlrError("no perceptual extractor configured and fallback disabled")
    if a.shape != b.shape:
        raise HrlrError("perceptual loss needs same-shape inputs")
    fa, fb = extractor(a), extractor(b)
    return sum(F.mse_loss(x, y) for x, y in zip(fa, fb))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class HrlrConfig:
    scale: int = 4
    channels: int = 64
    n_groups: int = 5
    n_blocks: int = 5
    k_dw: int = 3
    highpass_window: int = 5
    w_color: float = 1.0
    w_per: float = 0.1
    w_rep: float = 0.1
    w_gan: float = 0.05
    w_ac: float = 0.1
    w_mode2: float = 1.0
    mode2_enabled: bool = True
    lr: float = 1e-4
    disc_lr: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    disc_channels: int = 32
    ac_channels: int = 32
    sample_every: int = 0  # write PNG triplets every N steps (0 = never)


@dataclass
class HrlrModel:
    config: HrlrConfig
    generator: HrLrGenerator
    discriminator: LrDiscriminator
    classifier: AcClassifier
    step: int = 0

    @classmethod
    def create(cls, config: HrlrConfig, d_rep: int, n_categories: int) -> "HrlrModel":
        torch.manual_seed(config.seed)
        return cls(
            config=config,
            generator=HrLrGenerator(config.channels, d_rep, config.n_groups,
                                    config.n_blocks, config.k_dw, config.scale),
            discriminator=LrDiscriminator(config.disc_channels),
            classifier=AcClassifier(n_categories, config.ac_channels),
        )

    def eval(self) -> "HrlrModel":
        for m in (self.generator, self.discriminator, self.classifier):
            m.eval()
        return self

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {}
        arrays.update(ckpt.state_dict_to_arrays("generator", self.generator))
        arrays.update(ckpt.state_dict_to_arrays("discriminator", self.discriminator))
        arrays.update(ckpt.state_dict_to_arrays("classifier", self.classifier))
        cfg = self.config
        meta = {"kind": "hrlr", "step": self.step, "scale": cfg.scale,
                "channels": cfg.channels, "n_groups": cfg.n_groups,
                "n_blocks": cfg.n_blocks, "k_dw": cfg.k_dw,
                "d_rep": self.generator.d_rep,
                "n_categories": self.classifier.fc2.out_features,
                "disc_channels": cfg.disc_channels, "ac_channels": cfg.ac_channels,
                "seed": cfg.seed}
        meta.update(extra_meta or {})
        ckpt.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "HrlrModel":
        arrays, meta = ckpt.load_checkpoint(path)
        if meta.get("kind") != "hrlr":
            raise HrlrError(f"{path} is not an hrlr checkpoint")
        config = HrlrConfig(scale=meta["scale"], channels=meta["channels"],
                            n_groups=meta["n_groups"], n_blocks=meta["n_blocks"],
                            k_dw=meta["k_dw"], disc_channels=meta["disc_channels"],
                            ac_channels=meta["ac_channels"], seed=meta["seed"])
        model = cls.create(config, meta["d_rep"], meta["n_categories"])
        ckpt.load_state_dict_from_arrays("generator", arrays, model.generator)
        ckpt.load_state_dict_from_arrays("discriminator", arrays, model.discriminator)
        ckpt.load_state_dict_from_arrays("classifier", arrays, model.classifier)
        model.step = meta["step"]
        return model.eval()


def _materialize_pairs(manifest: DatasetManifest
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """HR patches (uint8 to bound memory), real LR patches, labels."""
    hrs, lrs, labels = [], [], []
    for s in manifest.samples:
        hr, lr, label = materialize(s, manifest)
        hrs.append(to_uint8(hr))
        lrs.append(lr.astype(np.float32))
        labels.append(label)
    return np.stack(hrs), np.stack(lrs), np.asarray(labels, dtype=np.int64)


def train_hrlr(config: HrlrConfig, manifest: DatasetManifest, gdrl: Gdrl,
               sampled_reps: list[SampledRep] | None = None,
               log_path=None, sample_dir=None, progress: bool = False
               ) -> tuple[HrlrModel, list[dict]]:
    """Dual-mode adversarial training of the HR->LR generator.

    The conditioning vector comes from encoding a real LR exemplar of the
    target category, or from `sampled_reps` (used for half the batch rows
    of matching categories when provided).
    """
    gdrl.freeze()
    model = HrlrModel.create(config, gdrl.config.d_rep, gdrl.config.n_categories)
    hr_u8, lr_real, labels = _materialize_pairs(manifest)
    if len(hr_u8) == 0:
        raise HrlrError("manifest has no samples")
    categories = sorted(set(labels.tolist()))
    by_cat = {c: np.nonzero(labels == c)[0] for c in categories}
    reps_by_cat: dict[int, np.ndarray] = {}
    if sampled_reps:
        for c in categories:
            feats = [r.rep_feat for r in sampled_reps if r.category == c]
            if feats:
                reps_by_cat[c] = np.stack(feats).astype(np.float32)

    gen_params = list(model.generator.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.lr, betas=config.adam_betas)
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=config.disc_lr,
                             betas=config.adam_betas)
    opt_c = torch.optim.Adam(model.classifier.parameters(), lr=config.disc_lr,
                             betas=config.adam_betas)
    extractor = RandomFeatureExtractor(seed=config.seed) if config.w_per > 0 else None

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    history = []
    for step in range(config.steps):
        idx = rng.integers(len(hr_u8), size=config.batch_size)
        hr = hr_u8[idx].astype(np.float32) / 255.0
        y = torch.from_numpy(labels[idx])
        real = torch.from_numpy(lr_real[idx].transpose(0, 3, 1, 2))

        # conditioning vector per row: same-category real exemplar or sampled rep
        rep_rows = []
        for row, cat in enumerate(labels[idx]):
            pool = reps_by_cat.get(int(cat))
            if pool is not None and rng.random() < 0.5:
                rep_rows.append(torch.from_numpy(pool[int(rng.integers(len(pool)))]))
            else:
                ex = lr_real[int(rng.choice(by_cat[int(cat)]))]
                with torch.no_grad():
                    _, _, feat = gdrl.represent(ex)
                rep_rows.append(feat[0])
        rep = torch.stack(rep_rows)

        # mode 1: HR -> LR generation
        lr_gen = degrade_hr(hr, rep, model.generator)
        l_color = loss_color(lr_gen, hr, config.scale)
        l_per = (loss_perceptual(lr_gen, to_tensor(np.stack(
            [bicubic_resize(h, Fraction(1, config.scale)) for h in hr])), extractor)
            if config.w_per > 0 else torch.zeros(()))
        l_rep = loss_rep(lr_gen, y, gdrl) if config.w_rep > 0 else torch.zeros(())
        l_gan_g, l_gan_d = loss_gan_lr(lr_gen, real, model.discriminator,
                                       config.highpass_window)
        l_ac_gen = loss_ac(lr_gen, y, model.classifier) if config.w_ac > 0 \
            else torch.zeros(())
        l_ac_real = loss_ac(real, y, model.classifier) if config.w_ac > 0 \
            else torch.zeros(())

        # mode 2: LR -> LR reconstruction
        l_mode2 = torch.zeros(())
        if config.mode2_enabled and config.w_mode2 > 0:
            lr_rec = reconstruct_lr(real, rep, model.generator)
            l_mode2 = (lr_rec - real).abs().mean()

        total_g = (config.w_color * l_color + config.w_per * l_per
                   + config.w_rep * l_rep + config.w_gan * l_gan_g
                   + config.w_ac * l_ac_gen + config.w_mode2 * l_mode2)

        # accumulate all gradients before any in-place parameter update
        opt_g.zero_grad()
        if total_g.requires_grad:
            total_g.backward()
        opt_d.zero_grad()
        if config.w_gan > 0:
            l_gan_d.backward()
        opt_c.zero_grad()
        if config.w_ac > 0:
            l_ac_real.backward()
            opt_c.step()
        if total_g.requires_grad:
            opt_g.step()
        if config.w_gan > 0:
            opt_d.step()

        row = {"step": step, "L_color": float(l_color.detach()),
               "L_per": float(l_per.detach()), "L_rep": float(l_rep.detach()),
               "L_gan_g": float(l_gan_g.detach()), "L_gan_d": float(l_gan_d.detach()),
               "L_ac": float(l_ac_gen.detach()), "L_mode2": float(l_mode2.detach())}
        history.append(row)
        if progress and step % 20 == 0:
            print(f"[hrlr] step {step}: color={row['L_color']:.4f} "
                  f"mode2={row['L_mode2']:.4f} gan_g={row['L_gan_g']:.4f}")
        if sample_dir and config.sample_every and step % config.sample_every == 0:
            _dump_triplet(sample_dir, step, hr[0], lr_gen[0], lr_real[idx[0]])

    model.step = config.steps
    if log_path is not None:
        _write_log(log_path, history)
    return model.eval(), history


def _dump_triplet(sample_dir, step, hr, lr_gen_t, lr_real) -> None:
    out = Path(sample_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / f"step{step:06d}_hr.png", check_image(hr.astype(np.float64)))
    save_image(out / f"step{step:06d}_lr_gen.png", to_image(lr_gen_t))
    save_image(out / f"step{step:06d}_lr_real.png",
               check_image(lr_real.astype(np.float64)))


def _write_log(path, history: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if history:
            w = csv.DictWriter(f, fieldnames=list(history[0].keys()))
            w.writeheader()
            w.writerows(history)
