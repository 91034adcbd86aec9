"""Three-level encoder/mid/decoder denoising network over the joint latent.

Tokens at each level pass through [spatial attention, temporal attention,
cross-attention to the matching pyramid memory, MLP], with the frame-wise
time embedding added per level. Down/up transitions are 2x2 token
space-to-depth plus linear projections; skip connections join matching
levels. Cross-attention output projections start at zero so the memory's
influence grows from nothing.
"""

from __future__ import annotations

import numpy as np

from .nn import (
    CrossAttentionBlock,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
)
from .pyramid import (
    TokenPyramid,
    spatial_attention,
    temporal_attention,
)
from .tensor import Tensor, concat, reshape, transpose


class BackboneError(ValueError):
    pass


class LevelBlock(Module):
    """One resolution level: time inject, spatial, temporal, cross, MLP."""

    def __init__(self, width: int, memory_dim: int, time_dim: int, heads: int,
                 mlp_ratio: float, rng: np.random.Generator):
        head_dim = width // heads
        # noise-level injection is multiplicative and additive (scale/shift):
        # the gain the denoiser needs on its input varies by orders of
        # magnitude across noise levels, which a purely additive embedding
        # cannot express without slow higher-order learning. Both start near
        # zero so the block is initially noise-level independent.
        self.time_scale = Linear(time_dim, width, rng, init_scale=0.02)
        self.time_shift = Linear(time_dim, width, rng, init_scale=0.02)
        self.norm_s = LayerNorm(width)
        self.attn_s = MultiHeadAttention(width, width, heads, head_dim, rng)
        self.norm_t = LayerNorm(width)
        self.attn_t = MultiHeadAttention(width, width, heads, head_dim, rng)
        self.cross = CrossAttentionBlock(width, memory_dim, heads, head_dim, rng)
        self.norm_m = LayerNorm(width)
        self.mlp = MLP(width, int(width * mlp_ratio), rng)

    def __call__(self, x: Tensor, frames: int, grid: tuple[int, int],
                 memory: Tensor, e_sigma: Tensor) -> Tensor:
        b, n, w = x.shape
        s = grid[0] * grid[1]
        t_scale = reshape(self.time_scale(e_sigma), 1, frames, 1, w)
        t_shift = reshape(self.time_shift(e_sigma), 1, frames, 1, w)
        xf = reshape(x, b, frames, s, w)
        x = reshape(xf + xf * t_scale + t_shift, b, n, w)

        def spatial_block(tokens):
            return tokens + self.attn_s(self.norm_s(tokens))

        def temporal_block(tokens):
            return tokens + self.attn_t(self.norm_t(tokens))

        x = spatial_attention(spatial_block, x, frames, grid)
        x = temporal_attention(temporal_block, x, frames, grid)
        x = self.cross(x, memory)
        return x + self.mlp(self.norm_m(x))


class TokenDownsample(Module):
    """2x2 token grouping + linear: quarter the grid, change width."""

    def __init__(self, width_in: int, width_out: int, rng: np.random.Generator):
        self.proj = Linear(4 * width_in, width_out, rng)

    def __call__(self, x: Tensor, frames: int, grid: tuple[int, int]) -> Tensor:
        gh, gw = grid
        b, n, w = x.shape
        x = reshape(x, b, frames, gh // 2, 2, gw // 2, 2, w)
        x = transpose(x, (0, 1, 2, 4, 3, 5, 6))
        x = reshape(x, b, frames * (gh // 2) * (gw // 2), 4 * w)
        return self.proj(x)


class TokenUpsample(Module):
    """Linear + token depth-to-space: double the grid, change width."""

    def __init__(self, width_in: int, width_out: int, rng: np.random.Generator):
        self.proj = Linear(width_in, 4 * width_out, rng)

    def __call__(self, x: Tensor, frames: int, grid: tuple[int, int]) -> Tensor:
        gh, gw = grid
        x = self.proj(x)
        b, n, w4 = x.shape
        w = w4 // 4
        x = reshape(x, b, frames, gh, gw, 2, 2, w)
        x = transpose(x, (0, 1, 2, 4, 3, 5, 6))
        return reshape(x, b, frames * gh * 2 * gw * 2, w)


class Backbone(Module):
    """Down(L1, L2) -> Mid(L3) -> Up(L2, L1) with additive skips."""

    def __init__(self, latent_channels: int, latent_size: tuple[int, int],
                 frames: int, widths: tuple[int, int, int], memory_dim: int,
                 time_dim: int, heads: int, mlp_ratio: float,
                 rng: np.random.Generator):
        hh, ww = latent_size
        if hh % 8 or ww % 8:
            raise BackboneError(f"latent size ({hh}, {ww}) must be divisible by 8")
        for w in widths:
            if w % heads:
                raise BackboneError("level widths must be divisible by heads")
        self.frames = frames
        self.latent_channels = latent_channels
        self.grids = ((hh // 2, ww // 2), (hh // 4, ww // 4), (hh // 8, ww // 8))
        w1, w2, w3 = widths
        # input channels are 2*C': the joint latent plus the SC channel
        self.patch_proj = Linear(4 * 2 * latent_channels, w1, rng)
        g1 = self.grids[0]
        self.pos_spatial = Tensor(
            (rng.standard_normal((g1[0] * g1[1], w1)) * 0.02).astype(np.float32),
            requires_grad=True)
        self.pos_temporal = Tensor(
            (rng.standard_normal((frames, w1)) * 0.02).astype(np.float32),
            requires_grad=True)
        self.down1 = LevelBlock(w1, memory_dim, time_dim, heads, mlp_ratio, rng)
        self.pool1 = TokenDownsample(w1, w2, rng)
        self.down2 = LevelBlock(w2, memory_dim, time_dim, heads, mlp_ratio, rng)
        self.pool2 = TokenDownsample(w2, w3, rng)
        self.mid = LevelBlock(w3, memory_dim, time_dim, heads, mlp_ratio, rng)
        self.lift2 = TokenUpsample(w3, w2, rng)
        self.up2 = LevelBlock(w2, memory_dim, time_dim, heads, mlp_ratio, rng)
        self.lift1 = TokenUpsample(w2, w1, rng)
        self.up1 = LevelBlock(w1, memory_dim, time_dim, heads, mlp_ratio, rng)
        self.out_norm = LayerNorm(w1)
        self.out_proj = Linear(w1, 4 * latent_channels, rng, init_scale=0.1)

    def _check_pyramid(self, pyramid: TokenPyramid) -> None:
        if tuple(pyramid.grids) != self.grids:
            raise BackboneError(
                f"pyramid grids {pyramid.grids} do not align with backbone "
                f"level grids {self.grids}")

    def __call__(self, j_scaled: Tensor, e_sigma: Tensor, pyramid: TokenPyramid,
                 sc_channel: Tensor) -> Tensor:
        if sc_channel.shape != j_scaled.shape:
            raise BackboneError(
                f"SC channel {sc_channel.shape} must match joint {j_scaled.shape}")
        self._check_pyramid(pyramid)
        b, t, c, hh, ww = j_scaled.shape
        if t != self.frames or c != self.latent_channels:
            raise BackboneError(f"joint latent ({t} frames, {c} ch) does not match "
                                f"backbone ({self.frames} frames, {self.latent_channels} ch)")
        from .codec import space_to_depth

        x = concat([j_scaled, sc_channel], axis=2)
        x = space_to_depth(x, 2)                       # (B, T, 8C', g1h, g1w)
        x = transpose(x, (0, 1, 3, 4, 2))
        g1, g2, g3 = self.grids
        x = reshape(x, b, t * g1[0] * g1[1], 8 * c)
        x = self.patch_proj(x)
        pos = reshape(self.pos_temporal, t, 1, -1) + reshape(self.pos_spatial, 1, g1[0] * g1[1], -1)
        x = x + reshape(pos, 1, t * g1[0] * g1[1], -1)

        h1 = self.down1(x, t, g1, pyramid.m1, e_sigma)
        x = self.pool1(h1, t, g1)
        h2 = self.down2(x, t, g2, pyramid.m2, e_sigma)
        x = self.pool2(h2, t, g2)
        x = self.mid(x, t, g3, pyramid.m3, e_sigma)
        x = self.lift2(x, t, g3) + h2
        x = self.up2(x, t, g2, pyramid.m2, e_sigma)
        x = self.lift1(x, t, g2) + h1
        x = self.up1(x, t, g1, pyramid.m1, e_sigma)

        x = self.out_proj(self.out_norm(x))
        x = reshape(x, b, t, g1[0], g1[1], 4 * c)
        x = transpose(x, (0, 1, 4, 2, 3))              # (B, T, 4C', g1h, g1w)
        from .codec import depth_to_space

        return depth_to_space(x, 2, c)
