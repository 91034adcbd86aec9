"""Temporal conditioning for the latent denoiser.

Clean history latents are concatenated with noisy future latents along the
frame axis; a binary frame mask routes history frames to a fixed
minimal-noise time embedding while future frames get the embedding of the
current noise scale. The denoiser wraps the backbone with scale-dependent
skip/in/out coefficients so that at sigma = 0 it is exactly the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .codec import LatentSequence
from .nn import Linear, Module
from .tensor import Tensor, concat, gelu, scale


class ConditioningError(ValueError):
    pass


@dataclass
class NoiseLevel:
    sigma: float
    bounds: tuple[float, float] = (0.002, 80.0)

    def __post_init__(self):
        lo, hi = self.bounds
        if lo <= 0:
            raise ConditioningError("sigma_min must be > 0")
        # sigma == 0 is admitted as the boundary case where the denoiser
        # degenerates to the identity; it is never sampled during training.
        if self.sigma != 0.0 and not lo <= self.sigma <= hi:
            raise ConditioningError(f"sigma {self.sigma} outside [{lo}, {hi}]")


@dataclass
class FrameMask:
    values: np.ndarray  # binary, length P+F, first P entries are 1

    @classmethod
    def for_protocol(cls, past_frames: int, future_frames: int) -> "FrameMask":
        if past_frames < 1:
            raise ConditioningError("need at least one history frame")
        if future_frames < 1:
            raise ConditioningError("need at least one future frame")
        return cls(np.array([1] * past_frames + [0] * future_frames, dtype=np.int64))

    @property
    def past_frames(self) -> int:
        return int(self.values.sum())

    @property
    def future_frames(self) -> int:
        return int(len(self.values) - self.values.sum())


@dataclass
class JointLatent:
    """History and noisy-future latents concatenated on the frame axis."""

    data: Tensor            # (B, P+F, C', H', W')
    mask: FrameMask
    sigma: NoiseLevel


def add_noise(z: LatentSequence, sigma: NoiseLevel, rng: np.random.Generator) -> Tensor:
    """Corrupt clean latents: z + sigma * n with n ~ N(0, I)."""
    noise = rng.standard_normal(z.data.shape).astype(z.data.dtype.type)
    return z.data + Tensor(noise * np.asarray(sigma.sigma, dtype=z.data.dtype.type))


def make_joint(h: LatentSequence, z_sigma: Tensor, sigma: NoiseLevel) -> JointLatent:
    if h.data.shape[0] != z_sigma.shape[0] or h.data.shape[2:] != z_sigma.shape[2:]:
        raise ConditioningError(
            f"history {h.data.shape} and noisy future {z_sigma.shape} disagree "
            "in batch/channel/spatial dims")
    mask = FrameMask.for_protocol(h.data.shape[1], z_sigma.shape[1])
    return JointLatent(concat([h.data, z_sigma], axis=1), mask, sigma)


def sinusoidal_features(value: float, dim: int, dtype=np.float32) -> np.ndarray:
    """[sin(v / 10000^(2i/dim)), cos(v / 10000^(2i/dim))] for i < dim/2."""
    if dim % 2:
        raise ConditioningError("embedding dim must be even")
    half = dim // 2
    freqs = np.power(10000.0, -2.0 * np.arange(half) / dim)
    angles = value * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(dtype)


class TimeEmbedder(Module):
    """Sinusoidal featurization of 0.25*log(sigma) followed by a 2-layer MLP."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, sigma: float) -> Tensor:
        base = Tensor(sinusoidal_features(0.25 * math.log(sigma), self.dim)[None])
        return self.fc2(gelu(self.fc1(base)))  # (1, dim)


class DualTimeEmbedder(Module):
    """Separate embedders for clean-history and noisy-future frames.

    Both share the architecture and initial weights (built from the same
    seed) and are trained independently afterwards.
    """

    def __init__(self, dim: int, sigma_min: float, seed: int):
        self.clean = TimeEmbedder(dim, np.random.default_rng(seed))
        self.noise = TimeEmbedder(dim, np.random.default_rng(seed))
        self.sigma_min = sigma_min

    def __call__(self, sigma: NoiseLevel, mask: FrameMask) -> Tensor:
        """Frame-wise embedding (P+F, dim): history rows depend only on sigma_min."""
        e_clean = self.clean(self.sigma_min)
        e_noise = self.noise(sigma.sigma)
        m = Tensor(mask.values.astype(np.float32)[:, None])
        one_minus = Tensor((1 - mask.values).astype(np.float32)[:, None])
        return m * e_clean + one_minus * e_noise


def precondition_coeffs(sigma: float, canonical_edm_cin: bool = False) -> tuple[float, float, float]:
    """Skip/input/output scales for the denoiser at noise level sigma.

    Default follows c_skip = 1/(sigma^2+1), c_in = sqrt(c_skip^2) = c_skip,
    c_out = sqrt(1 - c_in^2). ``canonical_edm_cin`` substitutes the
    canonical c_in = 1/sqrt(sigma^2+1) instead.
    """
    if sigma < 0:
        raise ConditioningError("sigma must be >= 0")
    c_skip = 1.0 / (sigma * sigma + 1.0)
    c_in = 1.0 / math.sqrt(sigma * sigma + 1.0) if canonical_edm_cin else c_skip
    c_out = math.sqrt(max(0.0, 1.0 - c_in * c_in))
    return c_skip, c_in, c_out


def denoise(joint: JointLatent,
            backbone_fn: Callable[[Tensor, Tensor, object, Tensor], Tensor],
            time_embedder: DualTimeEmbedder,
            pyramid,
            sc_channel: Tensor,
            canonical_edm_cin: bool = False) -> Tensor:
    """Clean-latent estimate over all P+F frames.

    Output = c_skip * joint + c_out * backbone(c_in * joint; e(sigma), memory,
    self-conditioning channel). Only the last F frames are meaningful
    downstream; history slots pass through the network and are discarded
    by the caller.
    """
    c_skip, c_in, c_out = precondition_coeffs(joint.sigma.sigma, canonical_edm_cin)
    if c_out == 0.0:
        # sigma = 0 boundary: the network term vanishes and log(sigma) is
        # undefined, so return the (identity-scaled) input directly.
        return scale(joint.data, c_skip)
    e_sigma = time_embedder(joint.sigma, joint.mask)
    net = backbone_fn(scale(joint.data, c_in), e_sigma, pyramid, sc_channel)
    if net.shape != joint.data.shape:
        raise ConditioningError(f"backbone output {net.shape} != joint {joint.data.shape}")
    return scale(joint.data, c_skip) + scale(net, c_out)
