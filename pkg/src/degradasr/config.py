"""Flat key-value run configuration shared by all pipeline stages.

Format: one `key = value` per line, `#` comments and blank lines ignored.
Unknown keys are rejected so typos fail loudly. Every command writes the
fully resolved config (defaults filled in) next to its outputs, and every
artifact records the hash of that resolved text.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # global
    global_seed: int = 0
    scale: int = 4
    corpus_dir: str = "corpus"
    run_dir: str = "run"
    # dataset sizes (patch samples per manifest)
    base_samples: int = 96
    novel_samples: int = 32
    sr_samples: int = 64
    eval_samples: int = 12
    novel_kind: str = "jpeg"            # jpeg | camera-sensor | none
    eval_degradation: str = "blur-1.3-noise-0"
    # representation learner
    d_z: int = 128
    d_rep: int = 128
    n_categories: int = 8
    gdrl_base_channels: int = 32
    gdrl_n_stages: int = 3
    alpha: float = 1.0
    beta: float = 1.0
    gdrl_lr: float = 1e-4
    gdrl_disc_lr: float = 1e-4
    gdrl_batch_size: int = 16
    gdrl_steps: int = 400
    # categorical-adversary schedule: active for steps in [cat_start, cat_stop)
    cat_start: int = 0
    cat_stop: int = 10 ** 9
    cat_head_only: bool = True
    # latent sampler
    sample_tau: float = 0.5
    sample_max_tries: int = 10000
    sample_mode: str = "prior"          # prior | cluster
    sample_count: int = 16
    # HR->LR generator
    hrlr_channels: int = 64
    hrlr_groups: int = 5
    hrlr_blocks: int = 5
    w_color: float = 1.0
    w_per: float = 0.1
    w_rep: float = 0.1
    w_gan: float = 0.05
    w_ac: float = 0.1
    w_mode2: float = 1.0
    mode2_enabled: bool = True
    hrlr_lr: float = 1e-4
    hrlr_batch_size: int = 8
    hrlr_steps: int = 200
    hrlr_disc_channels: int = 32
    hrlr_ac_channels: int = 32
    # SR network
    sr_channels: int = 32
    sr_blocks: int = 4
    sr_growth: int = 16
    lambda_per: float = 0.1
    lambda_adv: float = 0.005
    sr_warmup_steps: int = 0
    sr_lr: float = 1e-4
    sr_batch_size: int = 4
    sr_steps: int = 200
    sr_disc_channels: int = 16
    sr_use_sampled_reps: bool = False
    # visualization
    tsne_perplexity: float = 30.0

    def validate(self) -> None:
        if self.scale not in (2, 4):
            raise ConfigError("scale must be 2 or 4")
        if self.novel_kind not in ("jpeg", "camera-sensor", "none"):
            raise ConfigError(f"unknown novel_kind {self.novel_kind!r}")
        if self.sample_mode not in ("prior", "cluster"):
            raise ConfigError(f"unknown sample_mode {self.sample_mode!r}")
        if self.n_categories < 6:
            raise ConfigError("n_categories must cover the 6 base degradations")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _parse_value(key: str, text: str):
    typ = _TYPES[_FIELDS[key].type]
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: {text!r} is not a boolean")
    try:
        return typ(text)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value)
    config = RunConfig(**values)
    config.validate()
    return config


def to_text(config: RunConfig) -> str:
    """Canonical serialization (declaration order) used for hashing."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(to_text(config).encode("utf-8")).hexdigest()[:12]


def write_resolved(config: RunConfig, run_dir) -> str:
    """Write the resolved config into the run directory, return its hash."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(config)
    (run_dir / "config.resolved").write_text(
        f"# config_hash = {h}\n" + to_text(config), encoding="utf-8")
    return h
