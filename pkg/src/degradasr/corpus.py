"""Corpus ingestion, deterministic patch sampling, and manifest files.

The manifest is the contract between pipeline stages: a line-oriented UTF-8
text file that is byte-identical for identical inputs and global_seed. Per
sample randomness comes from a counter-based generator keyed on
(global_seed, sample index), so subsetting or reordering a manifest never
changes any individual sample.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from .degrade import (
    DegradationSpec, DegradeError, IspParams, apply_degradation, load_image,
)

LR_PATCH = 64  # HR patch is LR_PATCH * scale per side

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class CorpusError(RuntimeError):
    """Fatal corpus or manifest problem."""


@dataclass(frozen=True)
class ImageRecord:
    path: str
    width: int
    height: int
    sha256: str


@dataclass(frozen=True)
class PatchSample:
    path: str
    sha256: str
    x: int
    y: int
    hr_size: int
    degradation_id: str
    flip_h: bool
    flip_v: bool
    rot90: int
    seed: int


@dataclass
class DatasetManifest:
    global_seed: int
    scale: int
    specs: list[DegradationSpec]
    samples: list[PatchSample]

    @property
    def spec_ids(self) -> list[str]:
        return [s.id for s in self.specs]

    def spec_by_id(self, deg_id: str) -> DegradationSpec:
        for s in self.specs:
            if s.id == deg_id:
                return s
        raise CorpusError(f"unknown degradation id {deg_id!r}")


def scan_corpus(directory) -> list[ImageRecord]:
    """All readable images under `directory`, sorted lexicographically by path."""
    root = Path(directory)
    if not root.is_dir():
        raise CorpusError(f"corpus directory does not exist: {root}")
    records = []
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() not in IMAGE_SUFFIXES or not p.is_file():
            continue
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        with PilImage.open(p) as im:
            w, h = im.size
        records.append(ImageRecord(path=str(p), width=w, height=h, sha256=digest))
    if not records:
        raise CorpusError(f"no images found in {root}")
    return records


def _sample_rng(global_seed: int, index: int) -> np.random.Generator:
    # counter-based: Philox keyed per (seed, index)
    return np.random.Generator(np.random.Philox(key=(global_seed & 0xFFFFFFFFFFFFFFFF, index)))


def build_manifest(records: list[ImageRecord], specs: list[DegradationSpec],
                   n_samples: int, global_seed: int, scale: int) -> DatasetManifest:
    """Draw n_samples patch samples with round-robin degradation assignment."""
    hr_size = LR_PATCH * scale
    usable = [r for r in records if r.width >= hr_size and r.height >= hr_size]
    for r in records:
        if r not in usable:
            warnings.warn(f"skipping {r.path}: smaller than {hr_size}x{hr_size} patch")
    if n_samples > 0 and not usable:
        raise CorpusError(f"no image large enough for a {hr_size}x{hr_size} patch")
    samples = []
    for i in range(n_samples):
        rng = _sample_rng(global_seed, i)
        rec = usable[int(rng.integers(len(usable)))]
        x = int(rng.integers(rec.width - hr_size + 1))
        y = int(rng.integers(rec.height - hr_size + 1))
        spec = specs[i % len(specs)]
        samples.append(PatchSample(
            path=rec.path, sha256=rec.sha256, x=x, y=y, hr_size=hr_size,
            degradation_id=spec.id,
            flip_h=bool(rng.integers(2)), flip_v=bool(rng.integers(2)),
            rot90=int(rng.integers(4)),
            seed=int(rng.integers(2 ** 31)),
        ))
    return DatasetManifest(global_seed=global_seed, scale=scale,
                           specs=list(specs), samples=samples)


@lru_cache(maxsize=64)
def _cached_image(path: str, sha256: str) -> np.ndarray:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    if digest != sha256:
        raise CorpusError(f"stale manifest: digest mismatch for {path}")
    arr = load_image(path)
    arr.setflags(write=False)
    return arr


def augment(patch: np.ndarray, flip_h: bool, flip_v: bool, rot90: int) -> np.ndarray:
    out = patch
    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1, :]
    if rot90:
        out = np.rot90(out, rot90)
    return np.ascontiguousarray(out)


def materialize(sample: PatchSample, manifest: DatasetManifest
                ) -> tuple[np.ndarray, np.ndarray, int]:
    """Crop, augment and degrade one sample -> (hr_patch, lr_patch, label)."""
    img = _cached_image(sample.path, sample.sha256)
    hr = img[sample.y:sample.y + sample.hr_size, sample.x:sample.x + sample.hr_size]
    if hr.shape[0] != sample.hr_size or hr.shape[1] != sample.hr_size:
        raise CorpusError(f"patch box out of bounds for {sample.path}")
    hr = augment(hr, sample.flip_h, sample.flip_v, sample.rot90)
    spec = manifest.spec_by_id(sample.degradation_id)
    lr = apply_degradation(spec, hr, sample.seed)
    label = manifest.spec_ids.index(sample.degradation_id)
    return hr, lr, label


# ---------------------------------------------------------------------------
# manifest file format
# ---------------------------------------------------------------------------

_SAMPLE_FIELDS = ("path", "sha256", "x", "y", "hr_size", "degradation_id",
                  "flip_h", "flip_v", "rot90", "seed")


def _spec_to_lines(spec: DegradationSpec) -> list[str]:
    lines = ["[spec]", f"id = {spec.id}", f"blur_sigma = {spec.blur_sigma!r}",
             f"noise_sigma = {spec.noise_sigma!r}", f"scale = {spec.scale}"]
    if spec.jpeg_quality is not None:
        lines.append(f"jpeg_quality = {spec.jpeg_quality}")
    if spec.isp is not None:
        p = spec.isp
        lines.append(f"isp = {p.gain!r} {p.read_noise!r} {p.shot_noise!r} {p.gamma!r}")
    lines.append("[/spec]")
    return lines


def _spec_from_block(block: dict[str, str]) -> DegradationSpec:
    isp = None
    if "isp" in block:
        gain, read, shot, gamma = (float(v) for v in block["isp"].split())
        isp = IspParams(gain=gain, read_noise=read, shot_noise=shot, gamma=gamma)
    return DegradationSpec(
        id=block["id"],
        blur_sigma=float(block.get("blur_sigma", 0)),
        noise_sigma=float(block.get("noise_sigma", 0)),
        jpeg_quality=int(block["jpeg_quality"]) if "jpeg_quality" in block else None,
        isp=isp,
        scale=int(block.get("scale", 4)),
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["# degradasr-manifest v1",
             f"global_seed = {manifest.global_seed}",
             f"scale = {manifest.scale}"]
    for spec in manifest.specs:
        lines.extend(_spec_to_lines(spec))
    lines.append("[samples]")
    lines.append("# " + "\t".join(_SAMPLE_FIELDS))
    for s in manifest.samples:
        lines.append("\t".join([
            s.path, s.sha256, str(s.x), str(s.y), str(s.hr_size),
            s.degradation_id, str(int(s.flip_h)), str(int(s.flip_v)),
            str(s.rot90), str(s.seed)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_manifest(path) -> DatasetManifest:
    text = Path(path).read_text(encoding="utf-8")
    global_seed = None
    scale = None
    specs: list[DegradationSpec] = []
    samples: list[PatchSample] = []
    block: dict[str, str] | None = None
    in_samples = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[spec]":
            block = {}
        elif line == "[/spec]":
            specs.append(_spec_from_block(block))
            block = None
        elif line == "[samples]":
            in_samples = True
        elif in_samples:
            parts = line.split("\t")
            if len(parts) != len(_SAMPLE_FIELDS):
                raise CorpusError(f"malformed sample line: {line!r}")
            samples.append(PatchSample(
                path=parts[0], sha256=parts[1], x=int(parts[2]), y=int(parts[3]),
                hr_size=int(parts[4]), degradation_id=parts[5],
                flip_h=bool(int(parts[6])), flip_v=bool(int(parts[7])),
                rot90=int(parts[8]), seed=int(parts[9])))
        else:
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if block is not None:
                block[key] = value
            elif key == "global_seed":
                global_seed = int(value)
            elif key == "scale":
                scale = int(value)
            else:
                raise CorpusError(f"unknown manifest key {key!r}")
    if global_seed is None or scale is None:
        raise CorpusError(f"manifest {path} missing header fields")
    return DatasetManifest(global_seed=global_seed, scale=scale,
                           specs=specs, samples=samples)
