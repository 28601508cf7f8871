"""Pipeline command line: staged orchestration of all modules.

Stage DAG: degrade-corpus -> train-gdrl -> (sample-reps) -> train-hrlr ->
train-sr, plus evaluate and visualize. Every command reads one flat config
file, writes the resolved config + hash into the run directory, and refuses
to run before its prerequisites exist.

Exit codes: 0 success, 2 config error, 3 dependency error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, config_hash, load_config, write_resolved
from .corpus import (
    CorpusError, DatasetManifest, build_manifest, load_manifest, materialize,
    save_manifest, scan_corpus,
)
from .degrade import (
    DegradeError, base_specs, camera_sensor_spec, jpeg_spec, save_image,
)
from .gdrl import Gdrl, GdrlConfig, GdrlConfigError, train_gdrl
from .hrlr import HrlrConfig, HrlrError, HrlrModel, degrade_hr, train_hrlr
from .metrics import MetricReport, perceptual_distance, psnr, ssim
from .sampler import SamplerError, load_reps, sample_for_category, save_reps
from .srnet import SrConfig, SrError, SrGenerator, SrModel, generate_pairs, train_sr
from .torchutil import derive_seed, to_image
from .viz import VizError, plot_latent_spaces


class DependencyError(RuntimeError):
    """A prerequisite stage artifact is missing."""


def _run_dir(config: RunConfig) -> Path:
    return Path(os.environ.get("DEGRADASR_RUN_DIR", config.run_dir))


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DependencyError(
            f"missing {path}: run `degradasr {produced_by}` first")
    return path


def _novel_spec(config: RunConfig):
    if config.novel_kind == "jpeg":
        return jpeg_spec(scale=config.scale)
    if config.novel_kind == "camera-sensor":
        return camera_sensor_spec(scale=config.scale)
    return None


def _save_manifest_with_hash(manifest: DatasetManifest, path: Path,
                             h: str) -> None:
    save_manifest(manifest, path)
    text = path.read_text(encoding="utf-8")
    path.write_text(f"# config_hash = {h}\n" + text, encoding="utf-8")


def cmd_degrade_corpus(config: RunConfig, args) -> None:
    run = _run_dir(config)
    h = write_resolved(config, run)
    records = scan_corpus(config.corpus_dir)
    specs = base_specs(config.scale)
    seed = config.global_seed

    base = build_manifest(records, specs, config.base_samples,
                          derive_seed(seed, "manifest-base"), config.scale)
    _save_manifest_with_hash(base, run / "base_manifest.txt", h)

    novel_spec = _novel_spec(config)
    if novel_spec is not None:
        novel = build_manifest(records, [novel_spec], config.novel_samples,
                               derive_seed(seed, "manifest-novel"), config.scale)
        _save_manifest_with_hash(novel, run / "novel_manifest.txt", h)

    eval_spec = next((s for s in specs + ([novel_spec] if novel_spec else [])
                      if s.id == config.eval_degradation), None)
    if eval_spec is None:
        raise ConfigError(f"eval_degradation {config.eval_degradation!r} "
                          f"is not a known degradation id")
    sr_man = build_manifest(records, [eval_spec], config.sr_samples,
                            derive_seed(seed, "manifest-sr"), config.scale)
    _save_manifest_with_hash(sr_man, run / "sr_manifest.txt", h)
    ev = build_manifest(records, [eval_spec], config.eval_samples,
                        derive_seed(seed, "manifest-eval"), config.scale)
    _save_manifest_with_hash(ev, run / "eval_manifest.txt", h)

    if args.dump_lr:
        dump = run / "lr_dump"
        dump.mkdir(exist_ok=True)
        for i, sample in enumerate(base.samples):
            _, lr, _ = materialize(sample, base)
            save_image(dump / f"base_{i:04d}_{sample.degradation_id}.png", lr)
    print(f"wrote manifests to {run} (config {h})")


def _gdrl_config(config: RunConfig) -> GdrlConfig:
    return GdrlConfig(
        d_z=config.d_z, d_rep=config.d_rep, n_categories=config.n_categories,
        base_channels=config.gdrl_base_channels, n_stages=config.gdrl_n_stages,
        alpha=config.alpha, beta=config.beta, lr=config.gdrl_lr,
        disc_lr=config.gdrl_disc_lr, batch_size=config.gdrl_batch_size,
        steps=config.gdrl_steps, cat_start=config.cat_start,
        cat_stop=config.cat_stop, cat_head_only=config.cat_head_only,
        seed=derive_seed(config.global_seed, "gdrl"))


def cmd_train_gdrl(config: RunConfig, args) -> None:
    run = _run_dir(config)
    h = write_resolved(config, run)
    base = load_manifest(_require(run / "base_manifest.txt", "degrade-corpus"))
    novel_path = run / "novel_manifest.txt"
    novel = load_manifest(novel_path) if novel_path.exists() else None
    gcfg = _gdrl_config(config)
    if args.max_steps is not None:
        gcfg = replace(gcfg, steps=args.max_steps)
    model, history = train_gdrl(gcfg, base, novel_manifest=novel,
                                log_path=run / "gdrl_loss.csv",
                                progress=not args.quiet)
    model.save(run / "gdrl.npz", extra_meta={"config_hash": h})
    last = history[-1] if history else {}
    print(f"gdrl done: {len(history)} steps, final {last} (config {h})")


def cmd_sample_reps(config: RunConfig, args) -> None:
    run = _run_dir(config)
    h = write_resolved(config, run)
    gdrl = Gdrl.load(_require(run / "gdrl.npz", "train-gdrl")).freeze()
    mode = args.mode or config.sample_mode
    n = args.n or config.sample_count
    reps = sample_for_category(
        args.category, n, config.sample_max_tries, gdrl,
        seed=derive_seed(config.global_seed, f"sample-{args.category}"),
        tau=config.sample_tau, mode=mode)
    out = run / f"reps_cat{args.category}.npz"
    save_reps(out, reps, extra_meta={"config_hash": h, "mode": mode})
    print(f"wrote {len(reps)} reps for category {args.category} to {out}")


def _hrlr_config(config: RunConfig) -> HrlrConfig:
    return HrlrConfig(
        scale=config.scale, channels=config.hrlr_channels,
        n_groups=config.hrlr_groups, n_blocks=config.hrlr_blocks,
        w_color=config.w_color, w_per=config.w_per, w_rep=config.w_rep,
        w_gan=config.w_gan, w_ac=config.w_ac, w_mode2=config.w_mode2,
        mode2_enabled=config.mode2_enabled, lr=config.hrlr_lr,
        disc_lr=config.hrlr_lr, batch_size=config.hrlr_batch_size,
        steps=config.hrlr_steps, disc_channels=config.hrlr_disc_channels,
        ac_channels=config.hrlr_ac_channels,
        seed=derive_seed(config.global_seed, "hrlr"))


def _load_rep_pool(run: Path, args) -> list | None:
    if not getattr(args, "reps", None):
        return None
    pool = []
    for p in args.reps:
        pool.extend(load_reps(_require(Path(p), "sample-reps")))
    return pool


def cmd_train_hrlr(config: RunConfig, args) -> None:
    run = _run_dir(config)
    h = write_resolved(config, run)
    gdrl = Gdrl.load(_require(run / "gdrl.npz", "train-gdrl")).freeze()
    base = load_manifest(_require(run / "base_manifest.txt", "degrade-corpus"))
    hcfg = _hrlr_config(config)
    if args.max_steps is not None:
        hcfg = replace(hcfg, steps=args.max_steps)
    model, history = train_hrlr(hcfg, base, gdrl,
                                sampled_reps=_load_rep_pool(run, args),
                                log_path=run / "hrlr_loss.csv",
                                progress=not args.quiet)
    model.save(run / "hrlr.npz", extra_meta={"config_hash": h})
    last = history[-1] if history else {}
    print(f"hrlr done: {len(history)} steps, final {last} (config {h})")


def _sr_config(config: RunConfig) -> SrConfig:
    return SrConfig(
        scale=config.scale, channels=config.sr_channels,
        n_blocks=config.sr_blocks, growth=config.sr_growth,
        lambda_per=config.lambda_per, lambda_adv=config.lambda_adv,
        warmup_steps=config.sr_warmup_steps, lr=config.sr_lr,
        batch_size=config.sr_batch_size, steps=config.sr_steps,
        disc_channels=config.sr_disc_channels,
        seed=derive_seed(config.global_seed, "sr"))


def cmd_train_sr(config: RunConfig, args) -> None:
    run = _run_dir(config)
    h = write_resolved(config, run)
    gdrl = Gdrl.load(_require(run / "gdrl.npz", "train-gdrl")).freeze()
    hrlr = HrlrModel.load(_require(run / "hrlr.npz", "train-hrlr"))
    manifest = load_manifest(_require(run / "sr_manifest.txt", "degrade-corpus"))
    pool = _load_rep_pool(run, args) if config.sr_use_sampled_reps else None
    hr, lr = generate_pairs(manifest, hrlr, gdrl, sampled_reps=pool,
                            rng_seed=derive_seed(config.global_seed, "sr-pairs"))
    scfg = _sr_config(config)
    if args.max_steps is not None:
        scfg = replace(scfg, steps=args.max_steps)
    model, history = train_sr(scfg, hr, lr, log_path=run / "sr_loss.csv",
                              progress=not args.quiet)
    model.save(run / "sr.npz", extra_meta={"config_hash": h})
    last = history[-1] if history else {}
    print(f"sr done: {len(history)} steps, final {last} (config {h})")


def cmd_evaluate(config: RunConfig, args) -> None:
    run = _run_dir(config)
    write_resolved(config, run)
    manifest = load_manifest(_require(run / "eval_manifest.txt",
                                      "degrade-corpus"))
    report = MetricReport()
    if args.target == "lr":
        gdrl = Gdrl.load(_require(run / "gdrl.npz", "train-gdrl")).freeze()
        hrlr = HrlrModel.load(_require(run / "hrlr.npz", "train-hrlr"))
        with torch.no_grad():
            for i, sample in enumerate(manifest.samples):
                hr, lr_gt, _ = materialize(sample, manifest)
                _, _, rep = gdrl.represent(lr_gt)
                lr_gen = to_image(degrade_hr(hr, rep, hrlr.generator))
                report.add(f"{i:04d}", psnr(lr_gen, lr_gt), ssim(lr_gen, lr_gt),
                           perceptual_distance(lr_gen, lr_gt))
        out = run / "eval_lr.csv"
    else:
        sr_model = SrModel.load(_require(run / "sr.npz", "train-sr"))
        baseline = MetricReport()
        with torch.no_grad():
            for i, sample in enumerate(manifest.samples):
                hr, lr, _ = materialize(sample, manifest)
                sr = to_image(sr_model.generator(
                    torch.from_numpy(lr.astype(np.float32)
                                     .transpose(2, 0, 1))[None]))
                report.add(f"{i:04d}", psnr(sr, hr), ssim(sr, hr),
                           perceptual_distance(sr, hr))
                up = bicubic_upsample(lr, config.scale)
                baseline.add(f"{i:04d}", psnr(up, hr), ssim(up, hr))
        baseline.to_csv(run / "eval_sr_bicubic.csv")
        out = run / "eval_sr.csv"
    report.to_csv(out)
    agg = report.aggregate()
    print(f"evaluate target={args.target}: psnr={agg['psnr']:.4f} "
          f"ssim={agg['ssim']:.4f} -> {out}")


def bicubic_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    from fractions import Fraction
    from .degrade import bicubic_resize
    return np.clip(bicubic_resize(lr, Fraction(scale)), 0.0, 1.0)


def cmd_visualize(config: RunConfig, args) -> None:
    run = _run_dir(config)
    write_resolved(config, run)
    gdrl = Gdrl.load(_require(run / "gdrl.npz", "train-gdrl")).freeze()
    base = load_manifest(_require(run / "base_manifest.txt", "degrade-corpus"))
    manifests = [base]
    novel_path = run / "novel_manifest.txt"
    if novel_path.exists():
        manifests.append(load_manifest(novel_path))
    zs, reps, labels = [], [], []
    label_offset = 0
    with torch.no_grad():
        for manifest in manifests:
            ids = manifest.spec_ids
            for sample in manifest.samples:
                _, lr, _ = materialize(sample, manifest)
                z, _, rep = gdrl.represent(lr)
                zs.append(z[0].numpy())
                reps.append(rep[0].numpy())
                labels.append(label_offset + ids.index(sample.degradation_id))
            label_offset += len(ids)
    spaces = {"sampling": np.stack(zs), "representation": np.stack(reps)}
    if args.spaces:
        spaces = {k: v for k, v in spaces.items() if k in args.spaces}
        if not spaces:
            raise ConfigError(f"unknown space selection {args.spaces!r}")
    scores = plot_latent_spaces(spaces, np.asarray(labels), run / "viz",
                                seed=derive_seed(config.global_seed, "viz"))
    print(f"visualize: silhouettes {scores} -> {run / 'viz'}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="degradasr",
        description="Blind-SR degradation learning pipeline")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--quiet", action="store_true", help="suppress progress")
    sub = p.add_subparsers(dest="command", required=True)

    dc = sub.add_parser("degrade-corpus", help="build degradation manifests")
    dc.add_argument("--dump-lr", action="store_true",
                    help="also write materialized LR PNGs")
    dc.set_defaults(func=cmd_degrade_corpus)

    for name, func in [("train-gdrl", cmd_train_gdrl),
                       ("train-hrlr", cmd_train_hrlr),
                       ("train-sr", cmd_train_sr)]:
        t = sub.add_parser(name, help=f"run the {name.split('-')[1]} stage")
        t.add_argument("--max-steps", type=int, default=None)
        if name != "train-gdrl":
            t.add_argument("--reps", nargs="*", default=None,
                           help="sampled-rep files to condition on")
        t.set_defaults(func=func)

    sr_ = sub.add_parser("sample-reps", help="sample latent representations")
    sr_.add_argument("--category", type=int, required=True)
    sr_.add_argument("--n", type=int, default=None)
    sr_.add_argument("--mode", choices=["prior", "cluster"], default=None)
    sr_.set_defaults(func=cmd_sample_reps)

    ev = sub.add_parser("evaluate", help="metric report on the eval manifest")
    ev.add_argument("--target", choices=["lr", "sr"], required=True)
    ev.set_defaults(func=cmd_evaluate)

    vz = sub.add_parser("visualize", help="latent-space embeddings")
    vz.add_argument("--spaces", nargs="*", default=None,
                    choices=["sampling", "representation"])
    vz.set_defaults(func=cmd_visualize)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        args.func(config, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return 3
    except (CorpusError, DegradeError, GdrlConfigError, HrlrError,
            SamplerError, SrError, VizError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
