"""Latent codec pair: pixel clips <-> per-frame latent sequences.

Two modes:

* ``identity`` — invertible 2x2 space-to-depth rearrangement (factor 2,
  C'=12, bit-exact round trip). At factor 4 the 48 per-patch values are
  projected to C'=4 through a fixed seeded orthonormal matrix; that
  variant is a lossy convenience, not an identity.
* ``learned`` — small per-frame patch autoencoder trained on squared
  reconstruction error, frozen before diffusion training. Latents are
  standardized per channel with dataset statistics computed once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor, clamp01, gelu, matmul, no_grad, reshape, transpose


class CodecError(ValueError):
    pass


@dataclass
class VideoClip:
    """Pixel-space clip (B, T, 3, H, W) with values in [0, 1]."""

    data: Tensor
    frame_rate: float = 8.0

    @classmethod
    def from_array(cls, array, frame_rate: float = 8.0) -> "VideoClip":
        arr = np.clip(np.asarray(array, dtype=np.float32), 0.0, 1.0)
        if arr.ndim != 5 or arr.shape[2] != 3:
            raise CodecError(f"expected (B, T, 3, H, W), got {arr.shape}")
        return cls(Tensor(arr), frame_rate)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LatentSequence:
    """Latent clip (B, T, C', H', W') plus its pixel->latent geometry."""

    data: Tensor
    downsample_factor: int
    source_range: str = "unit"

    @property
    def shape(self):
        return self.data.shape

    @property
    def frames(self) -> int:
        return self.data.shape[1]


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """(B, T, C, H, W) -> (B, T, C*f*f, H/f, W/f), channel-major patch order."""
    b, t, c, h, w = x.shape
    if h % factor or w % factor:
        raise CodecError(f"spatial dims ({h}, {w}) not divisible by factor {factor}")
    x = reshape(x, b, t, c, h // factor, factor, w // factor, factor)
    x = transpose(x, (0, 1, 2, 4, 6, 3, 5))
    return reshape(x, b, t, c * factor * factor, h // factor, w // factor)


def depth_to_space(x: Tensor, factor: int, channels: int) -> Tensor:
    """Exact inverse of :func:`space_to_depth`."""
    b, t, cf, hh, ww = x.shape
    if cf != channels * factor * factor:
        raise CodecError(f"channel count {cf} inconsistent with {channels}*{factor}^2")
    x = reshape(x, b, t, channels, factor, factor, hh, ww)
    x = transpose(x, (0, 1, 2, 5, 3, 6, 4))
    return reshape(x, b, t, channels, hh * factor, ww * factor)


def _channels_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 1, 3, 4, 2))


def _channels_first(x: Tensor) -> Tensor:
    return transpose(x, (0, 1, 4, 2, 3))


class Codec(Module):
    mode = "base"
    downsample_factor: int
    latent_channels: int

    def encode(self, clip: VideoClip) -> LatentSequence:
        raise NotImplementedError

    def decode(self, latent: LatentSequence) -> VideoClip:
        raise NotImplementedError

    def _check_latent(self, latent: LatentSequence) -> None:
        c = latent.data.shape[2]
        if c != self.latent_channels or latent.downsample_factor != self.downsample_factor:
            raise CodecError(
                f"latent (C'={c}, factor={latent.downsample_factor}) does not match "
                f"codec (C'={self.latent_channels}, factor={self.downsample_factor})")

    def named_arrays(self) -> list[tuple[str, Tensor]]:
        """All arrays defining codec behavior: weights plus fixed buffers."""
        arrays = list(self.named_parameters())
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and not value.requires_grad:
                arrays.append((key, value))
        return sorted(arrays)

    def weights_fingerprint(self) -> int:
        """Order-stable hash of all codec arrays; used to prove frozenness."""
        h = 1469598103934665603
        for name, p in self.named_arrays():
            h ^= hash((name, p.data.tobytes())) & 0xFFFFFFFFFFFFFFFF
        return h


class IdentityCodec(Codec):
    """Non-learned patchify codec; factor 2 is exactly invertible."""

    mode = "identity"

    def __init__(self, downsample_factor: int = 2, seed: int = 0):
        if downsample_factor not in (2, 4):
            raise CodecError("identity codec supports factor 2 or 4")
        self.downsample_factor = downsample_factor
        self.latent_channels = 12 if downsample_factor == 2 else 4
        if downsample_factor == 4:
            rng = np.random.default_rng(seed)
            q, _ = np.linalg.qr(rng.standard_normal((48, 48)))
            # orthonormal columns: project 48 patch values onto 4 of them
            self.projection = Tensor(q[:, :4].astype(np.float32), requires_grad=False)
        else:
            self.projection = None

    def encode(self, clip: VideoClip) -> LatentSequence:
        x = space_to_depth(clip.data, self.downsample_factor)
        if self.projection is not None:
            x = _channels_first(matmul(_channels_last(x), self.projection))
        return LatentSequence(x, self.downsample_factor)

    def decode(self, latent: LatentSequence) -> VideoClip:
        self._check_latent(latent)
        x = latent.data
        if self.projection is not None:
            proj_t = transpose(self.projection, (1, 0))
            x = _channels_first(matmul(_channels_last(x), proj_t))
        x = depth_to_space(x, self.downsample_factor, 3)
        return VideoClip(clamp01(x))


class LearnedCodec(Codec):
    """Per-frame patch autoencoder: space-to-depth, MLP bottleneck, mirror."""

    mode = "learned"

    def __init__(self, rng: np.random.Generator, downsample_factor: int = 4,
                 latent_channels: int = 4, hidden: int = 96):
        self.downsample_factor = downsample_factor
        self.latent_channels = latent_channels
        patch_dim = 3 * downsample_factor * downsample_factor
        self.enc1 = Linear(patch_dim, hidden, rng)
        self.enc2 = Linear(hidden, hidden, rng)
        self.enc3 = Linear(hidden, latent_channels, rng)
        self.dec1 = Linear(latent_channels, hidden, rng)
        self.dec2 = Linear(hidden, hidden, rng)
        self.dec3 = Linear(hidden, patch_dim, rng)
        # per-channel standardization, identity until calibrated
        self.latent_mean = Tensor(np.zeros(latent_channels, dtype=np.float32))
        self.latent_std = Tensor(np.ones(latent_channels, dtype=np.float32))

    def _encode_raw(self, clip: VideoClip) -> Tensor:
        x = _channels_last(space_to_depth(clip.data, self.downsample_factor))
        x = self.enc3(gelu(self.enc2(gelu(self.enc1(x)))))
        return _channels_first(x)

    def encode(self, clip: VideoClip) -> LatentSequence:
        raw = _channels_last(self._encode_raw(clip))
        normed = _channels_first((raw - self.latent_mean) / self.latent_std)
        return LatentSequence(normed, self.downsample_factor)

    def decode(self, latent: LatentSequence) -> VideoClip:
        self._check_latent(latent)
        raw = _channels_last(latent.data) * self.latent_std + self.latent_mean
        x = self.dec3(gelu(self.dec2(gelu(self.dec1(raw)))))
        x = depth_to_space(_channels_first(x), self.downsample_factor, 3)
        return VideoClip(clamp01(x))

    def calibrate(self, clips: list[VideoClip]) -> None:
        """Compute per-channel latent statistics once, after training."""
        with no_grad():
            feats = [self._encode_raw(c).numpy() for c in clips]
        stacked = np.concatenate([f.transpose(2, 0, 1, 3, 4).reshape(f.shape[2], -1)
                                  for f in feats], axis=1)
        self.latent_mean = Tensor(stacked.mean(axis=1).astype(np.float32))
        self.latent_std = Tensor(np.maximum(stacked.std(axis=1), 1e-6).astype(np.float32))


def train_codec(codec: LearnedCodec, clips: list[VideoClip], steps: int, lr: float,
                rng: np.random.Generator, batch_frames: int = 8) -> list[float]:
    """Minimize per-pixel squared reconstruction error; returns the loss trace."""
    if not clips:
        raise CodecError("empty dataset")
    frames = np.concatenate([c.data.numpy().reshape(-1, *c.data.shape[2:]) for c in clips])
    opt = T.AdamW(codec.parameters(), lr=lr)
    tape = T.get_tape()
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, frames.shape[0], size=batch_frames)
        batch = VideoClip(Tensor(frames[idx][:, None]))  # (b, 1, 3, H, W)
        recon = codec.decode(codec.encode(batch))
        diff = recon.data - batch.data
        loss = (diff * diff).mean()
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        tape.clear()
        losses.append(loss.item())
    codec.calibrate(clips)
    return losses


def make_codec(mode: str, rng: np.random.Generator, downsample_factor: int,
               latent_channels: int, seed: int = 0) -> Codec:
    if mode == "identity":
        codec = IdentityCodec(downsample_factor=downsample_factor, seed=seed)
        if codec.latent_channels != latent_channels:
            raise CodecError(
                f"identity codec at factor {downsample_factor} has "
                f"C'={codec.latent_channels}, config says {latent_channels}")
        return codec
    if mode == "learned":
        return LearnedCodec(rng, downsample_factor=downsample_factor,
                            latent_channels=latent_channels)
    raise CodecError(f"unknown codec mode {mode!r}")
