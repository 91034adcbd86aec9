"""Hierarchical spatio-temporal encoder over history latents.

History frames are patchified into tokens, run through three stages of
alternating temporal/spatial transformer blocks, and 2x2 patch merging
between stages quarters the spatial token count. The three stage outputs
serve as multi-scale key/value memories for the denoising backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import LatentSequence, space_to_depth
from .nn import Linear, Module, TransformerBlock
from .tensor import Tensor, reshape, transpose


class PyramidError(ValueError):
    pass


@dataclass
class TokenPyramid:
    """Three token memories (B, N_s, D) with their grid geometry."""

    m1: Tensor
    m2: Tensor
    m3: Tensor
    grids: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    frames: int
    embed_dim: int

    def memory(self, stage: int) -> Tensor:
        return (self.m1, self.m2, self.m3)[stage - 1]

    def token_counts(self) -> tuple[int, int, int]:
        return (self.m1.shape[1], self.m2.shape[1], self.m3.shape[1])


def tokens_to_spatial(x: Tensor, frames: int, grid: tuple[int, int]) -> Tensor:
    """(B, P*gh*gw, D) -> (B*P, gh*gw, D): same-frame tokens together."""
    b, n, d = x.shape
    return reshape(x, b * frames, grid[0] * grid[1], d)


def spatial_to_tokens(x: Tensor, batch: int) -> Tensor:
    bp, s, d = x.shape
    return reshape(x, batch, (bp // batch) * s, d)


def tokens_to_temporal(x: Tensor, frames: int, grid: tuple[int, int]) -> Tensor:
    """(B, P*gh*gw, D) -> (B*gh*gw, P, D): same-location tokens together."""
    b, n, d = x.shape
    s = grid[0] * grid[1]
    x = reshape(x, b, frames, s, d)
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, b * s, frames, d)


def temporal_to_tokens(x: Tensor, batch: int) -> Tensor:
    bs, p, d = x.shape
    s = bs // batch
    x = reshape(x, batch, s, p, d)
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, batch, p * s, d)


def spatial_attention(block: TransformerBlock, x: Tensor, frames: int,
                      grid: tuple[int, int]) -> Tensor:
    b = x.shape[0]
    return spatial_to_tokens(block(tokens_to_spatial(x, frames, grid)), b)


def temporal_attention(block: TransformerBlock, x: Tensor, frames: int,
                       grid: tuple[int, int]) -> Tensor:
    b = x.shape[0]
    return temporal_to_tokens(block(tokens_to_temporal(x, frames, grid)), b)


class PatchMerge(Module):
    """Concatenate each 2x2 token neighborhood and project 4D -> D."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(4 * dim, dim, rng)

    def __call__(self, x: Tensor, frames: int, grid: tuple[int, int]) -> Tensor:
        gh, gw = grid
        if gh % 2 or gw % 2:
            raise PyramidError(f"grid ({gh}, {gw}) not divisible by 2 for merging")
        b, n, d = x.shape
        x = reshape(x, b, frames, gh // 2, 2, gw // 2, 2, d)
        x = transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = reshape(x, b, frames * (gh // 2) * (gw // 2), 4 * d)
        return self.proj(x)


class SpatioTemporalStage(Module):
    """Three (Spatial o Temporal) compositions; temporal runs first."""

    def __init__(self, dim: int, heads: int, head_dim: int, mlp_ratio: float,
                 rng: np.random.Generator, depth: int = 3):
        self.temporal_blocks = [TransformerBlock(dim, heads, head_dim, mlp_ratio, rng)
                                for _ in range(depth)]
        self.spatial_blocks = [TransformerBlock(dim, heads, head_dim, mlp_ratio, rng)
                               for _ in range(depth)]

    def __call__(self, x: Tensor, frames: int, grid: tuple[int, int]) -> Tensor:
        for t_block, s_block in zip(self.temporal_blocks, self.spatial_blocks):
            x = temporal_attention(t_block, x, frames, grid)
            x = spatial_attention(s_block, x, frames, grid)
        return x


class PyramidEncoder(Module):
    """Patch embed, three stages, two merges; emits [M1, M2, M3]."""

    def __init__(self, latent_channels: int, latent_size: tuple[int, int],
                 frames: int, embed_dim: int, heads: int, mlp_ratio: float,
                 rng: np.random.Generator):
        hh, ww = latent_size
        if hh % 8 or ww % 8:
            raise PyramidError(f"latent size ({hh}, {ww}) must be divisible by 8 "
                               "for three pyramid stages")
        if embed_dim % heads:
            raise PyramidError("embed_dim must be divisible by heads")
        self.frames = frames
        self.embed_dim = embed_dim
        self.grid1 = (hh // 2, ww // 2)
        head_dim = embed_dim // heads
        self.patch_proj = Linear(4 * latent_channels, embed_dim, rng)
        self.pos_spatial = Tensor(
            (rng.standard_normal((self.grid1[0] * self.grid1[1], embed_dim)) * 0.02)
            .astype(np.float32), requires_grad=True)
        self.pos_temporal = Tensor(
            (rng.standard_normal((frames, embed_dim)) * 0.02).astype(np.float32),
            requires_grad=True)
        self.stages = [SpatioTemporalStage(embed_dim, heads, head_dim, mlp_ratio, rng)
                       for _ in range(3)]
        self.merges = [PatchMerge(embed_dim, rng) for _ in range(2)]

    def patch_embed(self, h: LatentSequence) -> Tensor:
        """Non-overlapping 2x2 patches, flattened frame-major then row-major."""
        b, p, c, hh, ww = h.data.shape
        if p != self.frames:
            raise PyramidError(f"expected {self.frames} history frames, got {p}")
        x = space_to_depth(h.data, 2)                      # (B, P, 4C', gh, gw)
        x = transpose(x, (0, 1, 3, 4, 2))
        x = reshape(x, b, p * self.grid1[0] * self.grid1[1], 4 * c)
        return self.patch_proj(x)

    def add_positions(self, tokens: Tensor) -> Tensor:
        b, n, d = tokens.shape
        s = self.grid1[0] * self.grid1[1]
        pos = reshape(self.pos_temporal, self.frames, 1, d) + \
            reshape(self.pos_spatial, 1, s, d)
        return tokens + reshape(pos, 1, n, d)

    def __call__(self, h: LatentSequence) -> TokenPyramid:
        tokens = self.add_positions(self.patch_embed(h))
        grid = self.grid1
        memories = []
        grids = []
        for stage_idx, stage in enumerate(self.stages):
            if stage_idx > 0:
                if grid[0] % 2 or grid[1] % 2:
                    raise PyramidError(f"stage {stage_idx + 1}: grid {grid} "
                                       "not divisible for 2x2 merging")
                tokens = self.merges[stage_idx - 1](tokens, self.frames, grid)
                grid = (grid[0] // 2, grid[1] // 2)
            tokens = stage(tokens, self.frames, grid)
            memories.append(tokens)
            grids.append(grid)
        return TokenPyramid(memories[0], memories[1], memories[2],
                            tuple(grids), self.frames, self.embed_dim)
