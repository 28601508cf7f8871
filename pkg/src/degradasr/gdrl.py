"""Degradation representation learner.

A convolutional encoder maps an LR patch to a sampling-space code z; a small
MLP projector maps z to K category logits (the degradation representation
space). Three objectives shape the spaces jointly:

  1. cross-entropy classification of the labeled base degradations,
  2. adversarial push of novel-sample category embeddings towards one-hot
     vectors drawn over the reserved (non-base) categories,
  3. adversarial matching of the z posterior to a standard Gaussian prior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .corpus import DatasetManifest, materialize
from .torchutil import to_tensor

_EPS = 1e-12


class GdrlConfigError(ValueError):
    pass


@dataclass
class GdrlConfig:
    d_z: int = 128
    d_rep: int = 128
    n_categories: int = 8          # K = base categories + reserved
    n_base: int = 6
    patch_size: int = 64
    base_channels: int = 32
    n_stages: int = 3
    alpha: float = 1.0             # weight of the classification loss
    beta: float = 1.0              # weight of the categorical adversarial loss
    lr: float = 1e-4
    disc_lr: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    batch_size: int = 16
    steps: int = 400
    seed: int = 0
    # one-hot pool for the categorical adversary: novel samples are pushed
    # into the reserved categories, away from the base ones
    reserved_onehot_pool: bool = True
    # step at which the categorical adversary switches on; letting the
    # classifier and prior settle first makes the reserved-category pull
    # far more reliable on short runs
    cat_start: int = 0
    # step at which the categorical adversary switches off again (a bounded
    # window re-routes the novel samples; the classification task then
    # repairs any collateral drift of the base categories)
    cat_stop: int = 10 ** 9
    # restrict the categorical adversary's generator gradient to the category
    # head (fc3): the classification task anchors the head for base classes
    # while the adversary re-routes novel features, instead of both tasks
    # tearing at the shared backbone
    cat_head_only: bool = True

    def validate(self) -> None:
        if self.n_categories < self.n_base:
            raise GdrlConfigError(
                f"K={self.n_categories} is smaller than the {self.n_base} base categories")
        if self.alpha < 0 or self.beta < 0:
            raise GdrlConfigError("loss weights must be >= 0")


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.conv2(self.act(self.conv1(x)))
        return self.act(x + out)


class Encoder(nn.Module):
    """Residual conv backbone + fully-connected map to the sampling space."""

    def __init__(self, d_z: int = 128, base_channels: int = 32, n_stages: int = 3,
                 patch_size: int = 64):
        super().__init__()
        self.d_z = d_z
        self.patch_size = patch_size
        # BatchNorm after each conv: degradation classes differ mostly in
        # second-order statistics (noise/blur energy), which plain
        # conv+ReLU+global-pool stacks cannot surface from a cold start.
        layers = [nn.Conv2d(3, base_channels, 3, padding=1),
                  nn.BatchNorm2d(base_channels), nn.ReLU(inplace=True)]
        c = base_channels
        for _ in range(n_stages):
            layers.append(ResBlock(c))
            layers.append(nn.Conv2d(c, c * 2, 3, stride=2, padding=1))
            layers.append(nn.BatchNorm2d(c * 2))
            layers.append(nn.ReLU(inplace=True))
            c *= 2
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c, d_z)
        # standardize the sampling space per-dimension; the adversarial prior
        # matching then only has to shape higher-order structure, which keeps
        # short runs stable instead of chasing drifting first/second moments
        self.z_norm = nn.BatchNorm1d(d_z, affine=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pool(self.body(x)).flatten(1)
        return self.z_norm(self.fc(h))


class Projector(nn.Module):
    """Three FC layers with LeakyReLU(0.2); returns (logits, rep_feat)."""

    def __init__(self, d_z: int = 128, d_rep: int = 128, n_categories: int = 8):
        super().__init__()
        self.d_z = d_z
        self.d_rep = d_rep
        self.n_categories = n_categories
        self.fc1 = nn.Linear(d_z, d_rep)
        self.fc2 = nn.Linear(d_rep, d_rep)
        self.fc3 = nn.Linear(d_rep, n_categories)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if z.shape[-1] != self.d_z:
            raise GdrlConfigError(f"expected z of dim {self.d_z}, got {z.shape[-1]}")
        rep_feat = self.act(self.fc2(self.act(self.fc1(z))))
        return self.fc3(rep_feat), rep_feat


class MlpDiscriminator(nn.Module):
    """3-layer FC discriminator with scalar sigmoid output."""

    def __init__(self, in_dim: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        return self.net(x).squeeze(-1)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------

def encode(img, encoder: Encoder) -> torch.Tensor:
    """LR patch(es) -> sampling-space code(s) z; deterministic in eval mode."""
    x = to_tensor(img) if isinstance(img, np.ndarray) else img
    if x.ndim == 3:
        x = x[None]
    if x.shape[-2:] != (encoder.patch_size, encoder.patch_size) or x.shape[1] != 3:
        raise GdrlConfigError(
            f"expected 3x{encoder.patch_size}x{encoder.patch_size} patches, got {tuple(x.shape)}")
    return encoder(x)


def project(z: torch.Tensor, projector: Projector) -> tuple[torch.Tensor, torch.Tensor]:
    return projector(z)


def categorize(logits: torch.Tensor) -> torch.Tensor:
    """Max-stabilized softmax over the category logits."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def loss_cls(d: torch.Tensor, y) -> torch.Tensor:
    """-log d[y] on probability vectors; batched inputs are averaged."""
    if d.ndim == 1:
        d = d[None]
        y = torch.as_tensor([y])
    y = torch.as_tensor(y, dtype=torch.long)
    if (y < 0).any() or (y >= d.shape[-1]).any():
        raise GdrlConfigError(f"label out of range [0,{d.shape[-1]})")
    picked = d.gather(-1, y[:, None]).squeeze(-1)
    return -torch.log(picked.clamp_min(_EPS)).mean()


def _nonsat_gan(real_out: torch.Tensor, fake_out: torch.Tensor,
                fake_out_detached: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    disc = (-torch.log(real_out.clamp_min(_EPS)).mean()
            - torch.log((1 - fake_out_detached).clamp_min(_EPS)).mean())
    gen = -torch.log(fake_out.clamp_min(_EPS)).mean()
    return gen, disc


def loss_cat(d_batch: torch.Tensor, one_hot_batch: torch.Tensor,
             disc: MlpDiscriminator) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial pull of category embeddings towards one-hot vectors."""
    if d_batch.numel() == 0 or one_hot_batch.numel() == 0:
        raise GdrlConfigError("empty batch")
    return _nonsat_gan(disc(one_hot_batch), disc(d_batch), disc(d_batch.detach()))


def loss_sample(z_batch: torch.Tensor, gaussian_batch: torch.Tensor,
                disc: MlpDiscriminator) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial matching of encoded z to the standard Gaussian prior."""
    if z_batch.numel() == 0 or gaussian_batch.numel() == 0:
        raise GdrlConfigError("empty batch")
    return _nonsat_gan(disc(gaussian_batch), disc(z_batch), disc(z_batch.detach()))


def sample_one_hot(n: int, n_categories: int, seed: int,
                   pool: list[int] | None = None) -> torch.Tensor:
    """n one-hot vectors drawn uniformly over `pool` (default: all K)."""
    rng = np.random.default_rng(seed)
    pool = list(range(n_categories)) if pool is None else list(pool)
    idx = rng.choice(pool, size=n)
    out = np.zeros((n, n_categories), dtype=np.float32)
    out[np.arange(n), idx] = 1.0
    return torch.from_numpy(out)


# ---------------------------------------------------------------------------
# model bundle + training
# ---------------------------------------------------------------------------

@dataclass
class Gdrl:
    config: GdrlConfig
    encoder: Encoder
    projector: Projector
    disc_sample: MlpDiscriminator
    disc_cat: MlpDiscriminator
    step: int = 0

    @classmethod
    def create(cls, config: GdrlConfig) -> "Gdrl":
        config.validate()
        torch.manual_seed(config.seed)
        return cls(
            config=config,
            encoder=Encoder(config.d_z, config.base_channels, config.n_stages,
                            config.patch_size),
            projector=Projector(config.d_z, config.d_rep, config.n_categories),
            disc_sample=MlpDiscriminator(config.d_z),
            disc_cat=MlpDiscriminator(config.n_categories),
        )

    def eval(self) -> "Gdrl":
        for m in (self.encoder, self.projector, self.disc_sample, self.disc_cat):
            m.eval()
        return self

    @torch.no_grad()
    def represent(self, imgs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """imgs -> (z, logits, rep_feat) in eval mode."""
        self.eval()
        z = encode(imgs, self.encoder)
        logits, rep_feat = self.projector(z)
        return z, logits, rep_feat

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {}
        arrays.update(ckpt.state_dict_to_arrays("encoder", self.encoder))
        arrays.update(ckpt.state_dict_to_arrays("projector", self.projector))
        arrays.update(ckpt.state_dict_to_arrays("disc_sample", self.disc_sample))
        arrays.update(ckpt.state_dict_to_arrays("disc_cat", self.disc_cat))
        cfg = self.config
        meta = {"kind": "gdrl", "d_z": cfg.d_z, "d_rep": cfg.d_rep,
                "n_categories": cfg.n_categories, "n_base": cfg.n_base,
                "patch_size": cfg.patch_size, "base_channels": cfg.base_channels,
                "n_stages": cfg.n_stages, "alpha": cfg.alpha, "beta": cfg.beta,
                "seed": cfg.seed, "step": self.step}
        meta.update(extra_meta or {})
        ckpt.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Gdrl":
        arrays, meta = ckpt.load_checkpoint(path)
        if meta.get("kind") != "gdrl":
            raise GdrlConfigError(f"{path} is not a gdrl checkpoint")
        config = GdrlConfig(
            d_z=meta["d_z"], d_rep=meta["d_rep"], n_categories=meta["n_categories"],
            n_base=meta["n_base"], patch_size=meta["patch_size"],
            base_channels=meta["base_channels"], n_stages=meta["n_stages"],
            alpha=meta["alpha"], beta=meta["beta"], seed=meta["seed"])
        model = cls.create(config)
        ckpt.load_state_dict_from_arrays("encoder", arrays, model.encoder)
        ckpt.load_state_dict_from_arrays("projector", arrays, model.projector)
        ckpt.load_state_dict_from_arrays("disc_sample", arrays, model.disc_sample)
        ckpt.load_state_dict_from_arrays("disc_cat", arrays, model.disc_cat)
        model.step = meta["step"]
        return model.eval()

    def freeze(self) -> "Gdrl":
        for m in (self.encoder, self.projector, self.disc_sample, self.disc_cat):
            for p in m.parameters():
                p.requires_grad_(False)
        return self.eval()


def materialize_lr_dataset(manifest: DatasetManifest
                           ) -> tuple[np.ndarray, np.ndarray]:
    """All LR patches and labels of a manifest as float32 arrays."""
    patches, labels = [], []
    for s in manifest.samples:
        _, lr, label = materialize(s, manifest)
        patches.append(lr.astype(np.float32))
        labels.append(label)
    return np.stack(patches), np.asarray(labels, dtype=np.int64)


def _recalibrate_bn(encoder: Encoder, patches: np.ndarray, seed: int,
                    batch_size: int = 64) -> None:
    """Re-estimate BatchNorm running statistics under the final weights.

    Adversarial updates keep shifting the encoder, so the exponentially
    averaged statistics collected during training lag the converged weights;
    a cumulative re-estimation pass over the training patches fixes eval-mode
    behavior (and pins the standardized sampling space to the data it serves).
    """
    bns = [m for m in encoder.modules()
           if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d))]
    saved_momentum = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative moving average
    encoder.train()
    order = np.random.default_rng(seed).permutation(len(patches))
    with torch.no_grad():
        for i in range(0, len(order), batch_size):
            chunk = order[i:i + batch_size]
            if len(chunk) < 2:
                continue
            encoder(torch.from_numpy(patches[chunk].transpose(0, 3, 1, 2)))
    for m, mom in zip(bns, saved_momentum):
        m.momentum = mom
    encoder.eval()


def train_gdrl(config: GdrlConfig, base_manifest: DatasetManifest,
               novel_manifest: DatasetManifest | None = None,
               log_path=None, progress: bool = False) -> tuple[Gdrl, list[dict]]:
    """Joint training of all three pretext tasks; returns model + loss log."""
    config.validate()
    if novel_manifest is not None and config.n_categories < config.n_base + 1:
        raise GdrlConfigError("need at least one reserved category for novel samples")

    model = Gdrl.create(config)
    base_x, base_y = materialize_lr_dataset(base_manifest)
    novel_x = None
    if novel_manifest is not None and novel_manifest.samples:
        novel_x, _ = materialize_lr_dataset(novel_manifest)

    gdrl_params = list(model.encoder.parameters()) + list(model.projector.parameters())
    opt_g = torch.optim.Adam(gdrl_params, lr=config.lr, betas=config.adam_betas)
    opt_ds = torch.optim.Adam(model.disc_sample.parameters(), lr=config.disc_lr,
                              betas=config.adam_betas)
    opt_dc = torch.optim.Adam(model.disc_cat.parameters(), lr=config.disc_lr,
                              betas=config.adam_betas)

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    reserved = list(range(config.n_base, config.n_categories))
    onehot_pool = reserved if (config.reserved_onehot_pool and reserved) else None

    history = []
    for step in range(config.steps):
        bidx = rng.integers(len(base_x), size=config.batch_size)
        xb = torch.from_numpy(base_x[bidx].transpose(0, 3, 1, 2))
        yb = torch.from_numpy(base_y[bidx])
        xn = None
        if novel_x is not None:
            nidx = rng.integers(len(novel_x), size=config.batch_size)
            xn = torch.from_numpy(novel_x[nidx].transpose(0, 3, 1, 2))

        # forward pass (all samples feed the prior-matching task)
        z_b = model.encoder(xb)
        logits_b, _ = model.projector(z_b)
        if xn is not None:
            z_n = model.encoder(xn)
            logits_n, rep_n = model.projector(z_n)
            z_all = torch.cat([z_b, z_n], dim=0)
        else:
            z_all = z_b

        gaussian = torch.from_numpy(
            rng.standard_normal((len(z_all), config.d_z)).astype(np.float32))
        l_sample_g, l_sample_d = loss_sample(z_all, gaussian, model.disc_sample)

        l_cat_g = torch.zeros(())
        l_cat_d = torch.zeros(())
        if (xn is not None and config.beta > 0
                and config.cat_start <= step < config.cat_stop):
            if config.cat_head_only:
                d_n = categorize(model.projector.fc3(rep_n.detach()))
            else:
                d_n = categorize(logits_n)
            one_hot = sample_one_hot(len(d_n), config.n_categories,
                                     seed=int(rng.integers(2 ** 31)), pool=onehot_pool)
            l_cat_g, l_cat_d = loss_cat(d_n, one_hot, model.disc_cat)

        l_cls = loss_cls(categorize(logits_b), yb)

        # accumulate all gradients before any in-place parameter update;
        # discriminator/learner update ratio is 1:1
        total = l_sample_g + config.alpha * l_cls + config.beta * l_cat_g
        opt_g.zero_grad()
        total.backward()
        opt_ds.zero_grad()
        l_sample_d.backward()
        if l_cat_d.requires_grad:
            opt_dc.zero_grad()
            l_cat_d.backward()
            opt_dc.step()
        opt_g.step()
        opt_ds.step()

        row = {"step": step, "L_cls": float(l_cls.detach()),
               "L_cat_g": float(l_cat_g.detach()), "L_cat_d": float(l_cat_d.detach()),
               "L_sample_g": float(l_sample_g.detach()),
               "L_sample_d": float(l_sample_d.detach())}
        history.append(row)
        if progress and step % 50 == 0:
            print(f"[gdrl] step {step}: cls={row['L_cls']:.4f} "
                  f"sample_g={row['L_sample_g']:.4f} cat_g={row['L_cat_g']:.4f}")

    model.step = config.steps
    all_x = base_x if novel_x is None else np.concatenate([base_x, novel_x])
    _recalibrate_bn(model.encoder, all_x, config.seed)
    if log_path is not None:
        write_loss_log(log_path, history)
    return model.eval(), history


def write_loss_log(path, history: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not history:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)
