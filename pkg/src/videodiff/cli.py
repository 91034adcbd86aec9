"""Command-line entry point: dataset generation, training, sampling,
evaluation, and self-verification."""

from __future__ import annotations

import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .codec import Codec, LearnedCodec, VideoClip, make_codec, train_codec
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataError,
    build_dataset,
    load_batch,
    load_clip_frames,
    load_manifest,
)
from .engine import (
    CheckpointError,
    DiffusionModel,
    Trainer,
    build_model,
    karras_schedule,
    load_checkpoint,
    predict_future,
    restore_model_state,
    step_rng,
)
from .metrics import (
    ClipResult,
    EvalReport,
    best_of_trajectories,
    frechet_distance,
    latent_features,
    psnr,
    ssim,
)
from .verify import SUITES, run_suite

SEED_ENV = "HMPDM_SEED"


def _resolve_config(config_path) -> RunConfig:
    config = load_config(config_path) if config_path else RunConfig()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            config = config.replace(seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}")
    click.echo(f"config hash: {config.config_hash():#018x}")
    return config


def _manifest(data_path):
    path = Path(data_path)
    if path.is_dir():
        path = path / "manifest.txt"
    return load_manifest(path)


def _build_codec(config: RunConfig) -> Codec:
    return make_codec(config.codec_mode, np.random.default_rng(config.seed),
                      config.downsample_factor, config.latent_channels,
                      seed=config.seed)


def _load_model(ckpt, config: RunConfig) -> tuple[DiffusionModel, Codec, int]:
    tensors, step, ckpt_hash = load_checkpoint(ckpt)
    if ckpt_hash != config.config_hash():
        raise CheckpointError(
            f"checkpoint config hash {ckpt_hash:#018x} does not match the "
            f"supplied config {config.config_hash():#018x}")
    model = build_model(config, np.random.default_rng(config.seed))
    codec = _build_codec(config)
    restore_model_state(model, codec, tensors)
    return model, codec, step


def _write_frames(clip: VideoClip, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    arr = clip.data.numpy()[0]
    for t in range(arr.shape[0]):
        img = np.round(arr[t].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(img).save(directory / f"frame_{t:04d}.png")


def _read_frames(directory: Path, count: int) -> VideoClip:
    frames = []
    for t in range(count):
        path = directory / f"frame_{t:04d}.png"
        if not path.exists():
            raise DataError(f"clip needs at least {count} frames; missing {path}")
        img = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        frames.append(img.transpose(2, 0, 1))
    return VideoClip.from_array(np.stack(frames)[None])


@click.group()
def main():
    """Latent video diffusion for short future-frame prediction."""


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--train", "n_train", default=8, show_default=True)
@click.option("--test", "n_test", default=2, show_default=True)
@click.option("--frames", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--height", default=32, show_default=True)
@click.option("--width", default=32, show_default=True)
def cmd_gen_data(out, n_train, n_test, frames, seed, height, width):
    """Render a synthetic moving-shapes clip dataset."""
    seed = int(os.environ.get(SEED_ENV, seed))
    manifest = build_dataset(out, n_train, n_test, frames, seed,
                             height=height, width=width)
    click.echo(f"wrote {len(manifest.entries)} clips; manifest: "
               f"{manifest.root / 'manifest.txt'}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--resume", type=click.Path(exists=True))
@click.option("--steps", type=int, help="Override config train_steps.")
def cmd_train(config_path, data, out, resume, steps):
    """Train the diffusion model (pretraining the codec in learned mode)."""
    config = _resolve_config(config_path)
    manifest = _manifest(data)
    manifest.validate_protocol(config.past_frames, config.future_frames)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.txt")

    codec = _build_codec(config)
    train_entries = manifest.split_entries("train")
    if isinstance(codec, LearnedCodec) and resume is None:
        clips = [VideoClip.from_array(
            load_clip_frames(manifest, entry, 0, entry.frames)[None])
            for entry in train_entries]
        click.echo(f"pretraining codec for {config.codec_train_steps} steps")
        train_codec(codec, clips, config.codec_train_steps, config.codec_lr,
                    np.random.default_rng(config.seed))

    model = build_model(config, np.random.default_rng(config.seed))
    trainer = Trainer(model, codec, config, out_dir=out_dir)
    if resume:
        trainer.restore(resume)
        click.echo(f"resumed from step {trainer.step}")

    total = steps if steps is not None else config.train_steps
    remaining = total - trainer.step
    if remaining <= 0:
        click.echo(f"nothing to do: checkpoint already at step {trainer.step}")
        return

    n_clips = len(train_entries)
    protocol = config.past_frames + config.future_frames

    def batches(rng: np.random.Generator):
        idx = rng.choice(n_clips, size=min(config.batch_size, n_clips),
                         replace=config.batch_size > n_clips)
        max_offset = min(e.frames for e in train_entries) - protocol
        offset = int(rng.integers(0, max_offset + 1)) if max_offset > 0 else 0
        return load_batch(manifest, "train", idx, config.past_frames,
                          config.future_frames, offset=offset)

    click.echo(f"training {remaining} steps")
    trainer.run(batches, remaining, log_file=out_dir / "loss.log")
    final = out_dir / f"ckpt_{trainer.step:07d}.bin"
    trainer.save(final)
    click.echo(f"final checkpoint: {final}")


@main.command("sample")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--clip", "clip_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--traj", default=None, type=int, help="Trajectory count.")
@click.option("--steps", default=None, type=int, help="Sampler step count.")
@click.option("--seed", default=None, type=int)
def cmd_sample(ckpt, config_path, clip_dir, out, traj, steps, seed):
    """Sample future trajectories for one clip's conditioning frames."""
    config = _resolve_config(config_path)
    sample_seed = seed if seed is not None else config.seed
    model, codec, _ = _load_model(ckpt, config)
    cond = _read_frames(Path(clip_dir), config.past_frames)
    n_traj = traj if traj is not None else config.n_trajectories
    n_steps = steps if steps is not None else config.n_sample_steps
    schedule = karras_schedule(n_steps, config.sigma_min, config.sigma_max,
                               config.rho)
    out_dir = Path(out)
    _write_frames(cond, out_dir / "conditioning")
    for t in range(n_traj):
        pred = predict_future(model, codec, cond, schedule,
                              step_rng(sample_seed, t))
        _write_frames(pred, out_dir / f"traj_{t:02d}")
    click.echo(f"wrote {n_traj} trajectories of "
               f"{config.future_frames} frames under {out_dir}")


def _eval_clip(model, codec, config, manifest, split, idx, n_traj, schedule):
    cond, target = load_batch(manifest, split, [idx], config.past_frames,
                              config.future_frames)
    gt_feats = latent_features(codec, target)
    per = {"psnr": [], "ssim": [], "frechet": []}
    for t in range(n_traj):
        pred = predict_future(model, codec, cond, schedule,
                              step_rng(config.seed, idx * 10_000 + t))
        per["psnr"].append(float(psnr(pred, target)[0]))
        per["ssim"].append(float(ssim(pred, target)[0]))
        per["frechet"].append(frechet_distance(latent_features(codec, pred),
                                               gt_feats))
    best = best_of_trajectories(per)
    name = manifest.split_entries(split)[idx].directory
    return ClipResult(name, {k: v for k, (v, _) in best.items()},
                      {k: i for k, (_, i) in best.items()})


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--traj", default=None, type=int)
@click.option("--steps", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--jobs", default=1, show_default=True,
              help="Clip-level parallelism; determinism guaranteed at 1.")
def cmd_eval(ckpt, config_path, data, split, traj, steps, out, jobs):
    """Best-of-T evaluation (PSNR, SSIM, latent Frechet) over a split."""
    config = _resolve_config(config_path)
    model, codec, ckpt_step = _load_model(ckpt, config)
    manifest = _manifest(data)
    manifest.validate_protocol(config.past_frames, config.future_frames)
    entries = manifest.split_entries(split)
    if not entries:
        raise DataError(f"no clips in split {split!r}")
    n_traj = traj if traj is not None else config.n_trajectories
    n_steps = steps if steps is not None else config.n_sample_steps
    schedule = karras_schedule(n_steps, config.sigma_min, config.sigma_max,
                               config.rho)

    report = EvalReport(n_trajectories=n_traj)
    args = [(model, codec, config, manifest, split, i, n_traj, schedule)
            for i in range(len(entries))]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            report.clips = list(pool.map(lambda a: _eval_clip(*a), args))
    else:
        report.clips = [_eval_clip(*a) for a in args]

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_table() + "\n")
    (out_dir / "report.jsonl").write_text(report.to_records() + "\n")
    click.echo(f"checkpoint step {ckpt_step}, split {split!r}, "
               f"best-of-{n_traj}:")
    click.echo(report.to_table())


@main.command("verify")
@click.option("--suite", "suites", multiple=True,
              type=click.Choice(sorted(SUITES)),
              help="Which suites to run; default all.")
@click.option("--seed", default=0, show_default=True)
def cmd_verify(suites, seed):
    """Run self-check suites; exit code 0 iff every check passes."""
    seed = int(os.environ.get(SEED_ENV, seed))
    names = list(suites) if suites else sorted(SUITES)
    rows = []
    for name in names:
        rows.extend(run_suite(name, seed))
    width = max(len(r.name) for r in rows)
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        click.echo(f"[{r.suite:>10}] {r.name:<{width}}  {status}  {r.detail}")
    failed = [r for r in rows if not r.passed]
    click.echo(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
