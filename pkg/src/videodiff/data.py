"""Synthetic moving-shapes video generator and clip dataset I/O.

Clips show a handful of constant-velocity rectangles/discs over a flat
background, optionally passing behind a static occluder. Everything is
reproducible from the scene seed; frames are stored as 8-bit RGB PNGs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import VideoClip


class DataError(ValueError):
    pass


@dataclass
class Agent:
    shape: str                 # "rect" | "disc"
    size: int                  # px (rect side / disc diameter)
    start: tuple[float, float]  # (row, col) of top-left / center
    velocity: tuple[float, float]  # px per frame
    color: tuple[float, float, float]


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    frames: int = 16
    agents: list[Agent] = field(default_factory=list)
    occluder: tuple[int, int, int, int] | None = None  # (r0, c0, r1, c1)
    occluder_color: tuple[float, float, float] = (0.15, 0.15, 0.15)
    background: tuple[float, float, float] = (0.55, 0.6, 0.65)
    seed: int = 0


def random_scene(rng: np.random.Generator, height: int = 32, width: int = 32,
                 frames: int = 16, seed: int = 0) -> SceneSpec:
    """Sample a scene with 2-3 moving agents and (usually) an occluder."""
    agents = []
    for _ in range(int(rng.integers(2, 4))):
        size = int(rng.integers(4, 9))
        if size > height or size > width:
            raise DataError("agent larger than canvas")
        agents.append(Agent(
            shape=str(rng.choice(["rect", "disc"])),
            size=size,
            start=(float(rng.uniform(0, height - size)), float(rng.uniform(0, width - size))),
            velocity=(float(rng.integers(-2, 3)), float(rng.integers(-2, 3))),
            color=tuple(rng.uniform(0.2, 1.0, size=3).round(3)),
        ))
    occluder = None
    if rng.random() < 0.7:
        r0 = int(rng.integers(0, height - 8))
        c0 = int(rng.integers(0, width - 8))
        occluder = (r0, c0, r0 + int(rng.integers(5, 9)), c0 + int(rng.integers(5, 9)))
    # background doubles as a per-clip watermark
    background = tuple((0.35 + 0.3 * rng.uniform(size=3)).round(3))
    return SceneSpec(height=height, width=width, frames=frames, agents=agents,
                     occluder=occluder, background=background, seed=seed)


def agent_position(agent: Agent, t: int, height: int, width: int) -> tuple[float, float]:
    """Constant-velocity kinematics with wrap-around, the renderer's oracle."""
    r = (agent.start[0] + t * agent.velocity[0]) % height
    c = (agent.start[1] + t * agent.velocity[1]) % width
    return r, c


def _draw_agent(frame: np.ndarray, agent: Agent, t: int) -> None:
    h, w, _ = frame.shape
    r, c = agent_position(agent, t, h, w)
    r, c = int(round(r)), int(round(c))
    color = np.asarray(agent.color, dtype=np.float64)
    if agent.shape == "rect":
        rows = np.arange(r, r + agent.size) % h
        cols = np.arange(c, c + agent.size) % w
        frame[np.ix_(rows, cols)] = color
    else:
        radius = agent.size / 2.0
        yy, xx = np.mgrid[0:agent.size, 0:agent.size]
        mask = (yy - radius + 0.5) ** 2 + (xx - radius + 0.5) ** 2 <= radius**2
        rows = np.arange(r, r + agent.size) % h
        cols = np.arange(c, c + agent.size) % w
        sub = frame[np.ix_(rows, cols)]
        sub[mask] = color
        frame[np.ix_(rows, cols)] = sub


def generate_clip(spec: SceneSpec) -> VideoClip:
    """Render a (1, T, 3, H, W) clip in [0, 1]."""
    for agent in spec.agents:
        if agent.size > spec.height or agent.size > spec.width:
            raise DataError(f"agent of size {agent.size} larger than canvas")
    frames = np.empty((spec.frames, 3, spec.height, spec.width), dtype=np.float32)
    for t in range(spec.frames):
        img = np.empty((spec.height, spec.width, 3), dtype=np.float64)
        img[:] = spec.background
        for agent in spec.agents:
            _draw_agent(img, agent, t)
        if spec.occluder is not None:
            r0, c0, r1, c1 = spec.occluder
            img[r0:r1, c0:c1] = spec.occluder_color
        frames[t] = img.transpose(2, 0, 1)
    return VideoClip.from_array(frames[None])


@dataclass
class ManifestEntry:
    split: str
    directory: str
    frames: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def validate_protocol(self, past_frames: int, future_frames: int) -> None:
        for e in self.entries:
            if past_frames + future_frames > e.frames:
                raise DataError(
                    f"clip {e.directory}: P+F = {past_frames + future_frames} "
                    f"exceeds clip length T = {e.frames}")

    def save(self) -> Path:
        path = self.root / "manifest.txt"
        lines = [f"{e.split}\t{e.directory}\t{e.frames}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        split, directory, frames = line.split("\t")
        entries.append(ManifestEntry(split, directory, int(frames)))
    return DatasetManifest(root=path.parent, entries=entries)


def _save_frames(clip: VideoClip, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    arr = clip.data.numpy()[0]  # (T, 3, H, W)
    for t in range(arr.shape[0]):
        img = np.round(arr[t].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(img).save(directory / f"frame_{t:04d}.png")


def build_dataset(out_dir, n_train: int, n_test: int, frames: int, seed: int,
                  height: int = 32, width: int = 32) -> DatasetManifest:
    """Write n_train + n_test rendered clips plus a manifest; seed-reproducible."""
    if n_train < 1 or n_test < 1:
        raise DataError("need at least one clip per split")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        clip_seed = seed * 100003 + i
        rng = np.random.default_rng(clip_seed)
        spec = random_scene(rng, height=height, width=width, frames=frames, seed=clip_seed)
        clip = generate_clip(spec)
        directory = f"clip_{i:04d}"
        _save_frames(clip, root / directory)
        entries.append(ManifestEntry(split, directory, frames))
    manifest = DatasetManifest(root=root, entries=entries)
    manifest.save()
    return manifest


def load_clip_frames(manifest: DatasetManifest, entry: ManifestEntry,
                     start: int, count: int) -> np.ndarray:
    frames = []
    for t in range(start, start + count):
        path = manifest.root / entry.directory / f"frame_{t:04d}.png"
        if not path.exists():
            raise DataError(f"missing frame file {path}")
        img = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        frames.append(img.transpose(2, 0, 1))
    return np.stack(frames)


def load_batch(manifest: DatasetManifest, split: str, indices, past_frames: int,
               future_frames: int, offset: int = 0) -> tuple[VideoClip, VideoClip]:
    """Load (condition, target) pairs: frames [offset, offset+P) and [.., +F)."""
    entries = manifest.split_entries(split)
    cond, target = [], []
    for idx in indices:
        entry = entries[idx]
        if offset + past_frames + future_frames > entry.frames:
            raise DataError(f"clip {entry.directory} too short for P={past_frames}, "
                            f"F={future_frames}, offset={offset}")
        cond.append(load_clip_frames(manifest, entry, offset, past_frames))
        target.append(load_clip_frames(manifest, entry, offset + past_frames, future_frames))
    return VideoClip.from_array(np.stack(cond)), VideoClip.from_array(np.stack(target))
