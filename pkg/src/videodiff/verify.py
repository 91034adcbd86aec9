"""Self-check suites: finite-difference gradient checks for every op and
composite block, closed-form oracles, and structural invariants.

Each suite returns a list of CheckResult rows so both the CLI and the test
suite can run them and render a table.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .codec import IdentityCodec, LatentSequence, VideoClip, space_to_depth
from .conditioning import DualTimeEmbedder, FrameMask, NoiseLevel, precondition_coeffs
from .config import RunConfig
from .engine import (
    edm_sample_loop,
    karras_schedule,
    load_checkpoint,
    loss_weight,
    save_checkpoint,
)
from .gradcheck import gradcheck
from .metrics import frechet_from_moments, psnr, ssim_frame
from .nn import MLP, LayerNorm, MultiHeadAttention, TransformerBlock
from .pyramid import PatchMerge, PyramidEncoder, spatial_attention, temporal_attention
from .tensor import Tensor

GRADCHECK_TOL = 1e-4
N_SHAPES = 5


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str


def _f64(module) -> None:
    for p in module.parameters():
        p.data = p.data.astype(np.float64)


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _grad_rows(name: str, cases) -> list[CheckResult]:
    """cases: iterable of (fn, params); reports the worst relative error."""
    worst = 0.0
    for fn, params in cases:
        worst = max(worst, gradcheck(fn, params))
    return [CheckResult("gradcheck", name, worst < GRADCHECK_TOL,
                        f"max rel err {worst:.2e}")]


def gradcheck_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def shapes(max_rank=3, max_dim=5):
        for _ in range(N_SHAPES):
            rank = int(rng.integers(1, max_rank + 1))
            yield tuple(int(rng.integers(2, max_dim + 1)) for _ in range(rank))

    def unary(name, op, transform=None):
        cases = []
        for shape in shapes():
            x = _rand(rng, *shape)
            if transform is not None:
                x.data = transform(x.data)
            cases.append((lambda x=x: T.tsum(T.mul(op(x), op(x))), [x]))
        results.extend(_grad_rows(name, cases))

    unary("gelu", T.gelu)
    unary("exp", lambda x: T.texp(T.scale(x, 0.3)))
    unary("sqrt", T.tsqrt, transform=lambda d: np.abs(d) + 0.5)
    unary("reciprocal", T.reciprocal, transform=lambda d: np.abs(d) + 0.5)
    unary("scale", lambda x: T.scale(x, -1.7))

    cases = []
    for shape in shapes():
        x, y = _rand(rng, *shape), _rand(rng, *shape)
        cases.append((lambda x=x, y=y: T.tsum(T.mul(T.add(x, y), y)), [x, y]))
    results.extend(_grad_rows("add/mul", cases))

    cases = []
    for _ in range(N_SHAPES):
        m, k, n = (int(rng.integers(2, 6)) for _ in range(3))
        a, b = _rand(rng, m, k), _rand(rng, k, n)
        cases.append((lambda a=a, b=b: T.tsum(T.mul(T.matmul(a, b),
                                                    T.matmul(a, b))), [a, b]))
    results.extend(_grad_rows("matmul", cases))

    cases = []
    for _ in range(N_SHAPES):
        r, c = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        x = _rand(rng, r, c)
        cases.append((lambda x=x, c=c: T.tsum(T.mul(T.softmax(x, axis=-1),
                                                    Tensor(np.arange(float(c))))), [x]))
    results.extend(_grad_rows("softmax", cases))

    cases = []
    for _ in range(N_SHAPES):
        r, c = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        x = _rand(rng, r, c)
        ln = LayerNorm(c, dtype=np.float64)
        ln.gain.data = rng.standard_normal(c)
        ln.bias.data = rng.standard_normal(c)
        cases.append((lambda x=x, ln=ln: T.tsum(T.mul(ln(x), ln(x))),
                      [x, ln.gain, ln.bias]))
    results.extend(_grad_rows("layernorm", cases))

    cases = []
    for shape in shapes(max_rank=2):
        x, y = _rand(rng, *shape), _rand(rng, *shape)
        axis = int(rng.integers(0, len(shape)))

        def fn(x=x, y=y, axis=axis, shape=shape):
            joined = T.concat([x, y], axis=axis)
            parts = T.split(joined, [shape[axis], shape[axis]], axis=axis)
            return T.tsum(T.mul(parts[0], parts[1]))

        cases.append((fn, [x, y]))
    results.extend(_grad_rows("concat/split", cases))

    cases = []
    for _ in range(N_SHAPES):
        t, d = int(rng.integers(3, 6)), int(rng.integers(2, 5))
        x = _rand(rng, 1, t, d)
        idx = list(rng.choice(t, size=2, replace=False))
        cases.append((lambda x=x, idx=idx:
                      T.tsum(T.mul(T.gather_frames(x, idx),
                                   T.gather_frames(x, idx))), [x]))
    results.extend(_grad_rows("gather_frames", cases))

    cases = []
    for _ in range(N_SHAPES):
        a, b, c = (int(rng.integers(2, 5)) for _ in range(3))
        x = _rand(rng, a, b, c)

        def fn(x=x, a=a, b=b, c=c):
            y = T.transpose(T.reshape(x, (a * b, c)), (1, 0))
            return T.tmean(T.mul(y, y))

        cases.append((fn, [x]))
    results.extend(_grad_rows("reshape/transpose/mean", cases))

    # composite blocks, parameters cast to 64-bit
    cases = []
    for _ in range(N_SHAPES):
        n = int(rng.integers(2, 6))
        block = TransformerBlock(8, 2, 4, 1.0, rng)
        _f64(block)
        x = _rand(rng, 1, 2 * n, 8)
        params = [x, block.attn.q_proj.weight, block.mlp.fc1.bias]
        cases.append((lambda block=block, x=x, n=n:
                      T.tsum(T.mul(spatial_attention(block, x, 2, (1, n)),
                                   spatial_attention(block, x, 2, (1, n)))),
                      params))
    results.extend(_grad_rows("spatial attention", cases))

    cases = []
    for _ in range(N_SHAPES):
        n = int(rng.integers(2, 6))
        block = TransformerBlock(8, 2, 4, 1.0, rng)
        _f64(block)
        x = _rand(rng, 1, 2 * n, 8)
        params = [x, block.attn.v_proj.weight, block.norm1.gain]
        cases.append((lambda block=block, x=x, n=n:
                      T.tsum(T.mul(temporal_attention(block, x, 2, (1, n)),
                                   temporal_attention(block, x, 2, (1, n)))),
                      params))
    results.extend(_grad_rows("temporal attention", cases))

    cases = []
    for _ in range(N_SHAPES):
        nq, nm = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        attn = MultiHeadAttention(6, 4, 2, 3, rng, dtype=np.float64)
        x, mem = _rand(rng, 1, nq, 6), _rand(rng, 1, nm, 4)
        params = [x, mem, attn.k_proj.weight, attn.out_proj.weight]
        cases.append((lambda attn=attn, x=x, mem=mem:
                      T.tsum(T.mul(attn(x, mem), attn(x, mem))), params))
    results.extend(_grad_rows("cross attention", cases))

    cases = []
    for _ in range(N_SHAPES):
        hw = int(rng.choice([4, 8]))
        c = int(rng.integers(2, 4))
        proj = MLP(4 * c, 8, rng, dtype=np.float64)
        x = _rand(rng, 1, 2, c, hw, hw)

        def fn(proj=proj, x=x, c=c, hw=hw):
            folded = space_to_depth(x, 2)
            tokens = T.reshape(T.transpose(
                T.reshape(folded, (1, 2, 4 * c, (hw // 2) ** 2)),
                (0, 1, 3, 2)), (1, 2 * (hw // 2) ** 2, 4 * c))
            out = proj(tokens)
            return T.tsum(T.mul(out, out))

        cases.append((fn, [x, proj.fc1.weight, proj.fc2.bias]))
    results.extend(_grad_rows("patch embed", cases))

    cases = []
    for _ in range(N_SHAPES):
        g = int(rng.choice([2, 4]))
        merge = PatchMerge(6, rng)
        _f64(merge)
        x = _rand(rng, 1, 2 * g * g, 6)
        cases.append((lambda merge=merge, x=x, g=g:
                      T.tsum(T.mul(merge(x, 2, (g, g)), merge(x, 2, (g, g)))),
                      [x, merge.proj.weight]))
    results.extend(_grad_rows("patch merge", cases))

    cases = []
    for _ in range(N_SHAPES):
        n, d = int(rng.integers(2, 5)), 6
        norm = LayerNorm(d, dtype=np.float64)
        mlp = MLP(d, 10, rng, dtype=np.float64)
        x = _rand(rng, n, d)
        cases.append((lambda norm=norm, mlp=mlp, x=x:
                      T.tsum(T.mul(mlp(norm(x)), mlp(norm(x)))),
                      [x, norm.gain, mlp.fc1.weight, mlp.fc2.weight]))
    results.extend(_grad_rows("layernorm-MLP", cases))

    return results


def oracle_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def row(name, passed, detail):
        results.append(CheckResult("oracle", name, bool(passed), detail))

    sched = karras_schedule(50, 0.002, 80.0, 7.0)
    row("schedule endpoints",
        sched.sigmas[0] == 80.0 and sched.sigmas[-1] == 0.002
        and np.all(np.diff(sched.sigmas) < 0),
        f"sigma_n={sched.sigmas[0]:g} sigma_1={sched.sigmas[-1]:g}")

    mid = karras_schedule(3, 0.002, 80.0, 1.0).sigmas[1]
    row("rho=1 midpoint", abs(mid - 40.001) < 1e-9, f"mid={mid:.6f}")

    z0 = rng.standard_normal(10_000) * 80.0
    out = edm_sample_loop(lambda z, s: z / (s * s + 1.0), z0, sched)
    row("sampler vs analytic Gaussian denoiser",
        abs(out.mean()) < 0.05 and 0.95 < out.var() < 1.05,
        f"mean={out.mean():.4f} var={out.var():.4f}")

    lam = loss_weight(NoiseLevel(1.0))
    row("loss weight at sigma=1", abs(lam - 4.0 / 3.0) < 1e-12, f"lambda={lam:.6f}")

    d0 = frechet_from_moments(np.zeros(3), np.eye(3), np.zeros(3), np.eye(3))
    d1 = frechet_from_moments(np.zeros(1), np.eye(1), np.zeros(1), 4 * np.eye(1))
    row("frechet analytic cases", abs(d0) < 1e-8 and abs(d1 - 1.0) < 1e-8,
        f"identical={d0:.2e} N(0,1)|N(0,4)={d1:.8f}")

    base = np.full((1, 1, 3, 16, 16), 0.25)
    off = VideoClip.from_array(base + 0.125)
    val = float(psnr(off, VideoClip.from_array(base))[0])
    expected = 10 * math.log10(1.0 / 0.125**2)
    row("psnr closed form", abs(val - expected) < 1e-4,
        f"psnr={val:.4f} expected={expected:.4f}")

    x, y = np.full((16, 16), 0.3), np.full((16, 16), 0.6)
    got = ssim_frame(x, y)
    want = (2 * 0.3 * 0.6 + 0.01**2) / (0.3**2 + 0.6**2 + 0.01**2)
    row("ssim constant-frame closed form", abs(got - want) < 1e-9,
        f"ssim={got:.6f} expected={want:.6f}")

    return results


def invariant_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def row(name, passed, detail):
        results.append(CheckResult("invariants", name, bool(passed), detail))

    ok = True
    for _ in range(5):
        p, f = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        mask = FrameMask.for_protocol(p, f)
        ok &= list(mask.values) == [1] * p + [0] * f
    row("frame mask layout", ok, "5 random (P, F) protocols")

    sigmas = np.logspace(math.log10(0.002), math.log10(80.0), 1000)
    worst = max(abs(precondition_coeffs(float(s))[1] ** 2
                    + precondition_coeffs(float(s))[2] ** 2 - 1.0) for s in sigmas)
    boundary = precondition_coeffs(0.0) == (1.0, 1.0, 0.0)
    row("preconditioning identities", worst < 1e-6 and boundary,
        f"max |c_in^2+c_out^2-1| = {worst:.2e}; sigma=0 -> (1,1,0): {boundary}")

    emb = DualTimeEmbedder(32, 0.002, seed=seed)
    mask = FrameMask.for_protocol(2, 4)
    rows_ = [emb(NoiseLevel(s), mask).numpy()[:2] for s in (0.002, 1.0, 80.0)]
    row("history embedding sigma-invariance",
        np.array_equal(rows_[0], rows_[1]) and np.array_equal(rows_[1], rows_[2]),
        "bitwise across sigma in {sigma_min, 1, sigma_max}")

    ok, detail = True, []
    for _ in range(5):
        p = int(rng.integers(1, 5))
        hw = int(rng.choice([8, 16]))
        enc = PyramidEncoder(4, (hw, hw), p, 16, 2, 2.0, rng)
        with T.no_grad():
            h = LatentSequence(Tensor(rng.standard_normal(
                (1, p, 4, hw, hw)).astype(np.float32)), 4)
            counts = enc(h).token_counts()
        expect = tuple(p * (hw // 2**s) ** 2 for s in (1, 2, 3))
        ok &= counts == expect and counts[1] * 4 == counts[0] and counts[2] * 4 == counts[1]
        detail.append(f"P={p},HW={hw}:{counts}")
    row("pyramid token counts", ok, " ".join(detail))

    cfg = RunConfig(height=16, width=16, embed_dim=16, heads=2, mlp_ratio=2.0,
                    backbone_widths=(16, 16, 16), time_embed_dim=16)
    enc = PyramidEncoder(cfg.latent_channels, (8, 8), cfg.past_frames,
                         cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
    bb = Backbone(cfg.latent_channels, (8, 8), cfg.past_frames + cfg.future_frames,
                  cfg.backbone_widths, cfg.embed_dim, cfg.time_embed_dim,
                  cfg.heads, cfg.mlp_ratio, rng)
    with T.no_grad():
        h = LatentSequence(Tensor(rng.standard_normal(
            (1, cfg.past_frames, cfg.latent_channels, 8, 8)).astype(np.float32)), 4)
        pyr = enc(h)
    row("cross-attention grid alignment", bb.grids == pyr.grids,
        f"backbone {bb.grids} == pyramid {pyr.grids}")

    x = Tensor(rng.standard_normal((4, 6)) * 1e4)
    sums = T.softmax(x, axis=-1).numpy().sum(axis=-1)
    row("softmax large-magnitude stability", np.allclose(sums, 1.0, atol=1e-6),
        f"max |row sum - 1| = {np.abs(sums - 1).max():.2e}")

    codec = IdentityCodec(2)
    clip = VideoClip.from_array(rng.uniform(size=(1, 2, 3, 16, 16)))
    with T.no_grad():
        rt = codec.decode(codec.encode(clip))
    row("identity codec exact round-trip",
        np.array_equal(rt.data.numpy(), clip.data.numpy()), "bitwise at factor 2")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.bin"
        tensors = {"w": rng.standard_normal((3, 4)).astype(np.float32)}
        save_checkpoint(path, tensors, 7, 11)
        loaded, step, chash = load_checkpoint(path)
        row("checkpoint round-trip",
            step == 7 and chash == 11 and np.array_equal(loaded["w"], tensors["w"]),
            "bitwise tensors, step and hash preserved")

    a = RunConfig().canonical_text()
    b = RunConfig().canonical_text()
    row("config hash stability", a == b and RunConfig().config_hash()
        == RunConfig().config_hash(), f"hash={RunConfig().config_hash():#018x}")

    return results


SUITES = {
    "gradcheck": gradcheck_suite,
    "oracle": oracle_suite,
    "invariants": invariant_suite,
}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](seed)
