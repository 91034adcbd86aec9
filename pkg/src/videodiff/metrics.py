"""Evaluation: PSNR, SSIM (luma, 11x11 Gaussian window), a generic Frechet
distance over feature vectors, and best-of-#T trajectory selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .codec import Codec, VideoClip
from .tensor import no_grad

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R 601

HIGHER_IS_BETTER = {"ssim": True, "psnr": True, "frechet": False}


class MetricError(ValueError):
    pass


def psnr(pred: VideoClip, gt: VideoClip) -> np.ndarray:
    """Per-clip PSNR in dB: per-frame 10*log10(1/MSE), averaged over frames.

    Zero-error frames are capped at 99 dB.
    """
    a, b = pred.data.numpy(), gt.data.numpy()
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = (a.astype(np.float64) - b.astype(np.float64)) ** 2
    mse = diff.mean(axis=(2, 3, 4))  # (B, T)
    with np.errstate(divide="ignore"):
        db = np.where(mse > 0, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300)), PSNR_CAP_DB)
    db = np.minimum(db, PSNR_CAP_DB)
    return db.mean(axis=1)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def luma(frame: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB -> (H, W) luma."""
    return np.tensordot(LUMA_WEIGHTS, frame.astype(np.float64), axes=(0, 0))


def ssim_frame(pred_frame: np.ndarray, gt_frame: np.ndarray) -> float:
    """SSIM between two luma frames over all valid 11x11 windows."""
    x = np.asarray(pred_frame, dtype=np.float64)
    y = np.asarray(gt_frame, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise MetricError(f"frame {x.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window()
    from numpy.lib.stride_tricks import sliding_window_view

    wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mu_x = np.tensordot(wx, w, axes=([2, 3], [0, 1]))
    mu_y = np.tensordot(wy, w, axes=([2, 3], [0, 1]))
    xx = np.tensordot(wx * wx, w, axes=([2, 3], [0, 1])) - mu_x**2
    yy = np.tensordot(wy * wy, w, axes=([2, 3], [0, 1])) - mu_y**2
    xy = np.tensordot(wx * wy, w, axes=([2, 3], [0, 1])) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (xx + yy + SSIM_C2)
    return float((num / den).mean())


def ssim(pred: VideoClip, gt: VideoClip) -> np.ndarray:
    """Per-clip SSIM on the luma channel, averaged over frames."""
    a, b = pred.data.numpy(), gt.data.numpy()
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    out = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        out[i] = np.mean([ssim_frame(luma(a[i, t]), luma(b[i, t]))
                          for t in range(a.shape[1])])
    return out


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric matrix square root; negative eigenvalues clamped to zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(mu_a: np.ndarray, cov_a: np.ndarray,
                         mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2(cov_b^1/2 cov_a cov_b^1/2)^1/2)."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    sqrt_b = _psd_sqrt(cov_b)
    inner = _psd_sqrt(sqrt_b @ cov_a @ sqrt_b)
    value = float(np.sum((mu_a - mu_b) ** 2)
                  + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(inner))
    return max(value, 0.0)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between the Gaussian fits of two feature sets (n, d)."""
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[1] != feats_b.shape[1]:
        raise MetricError(f"feature dims differ: {feats_a.shape[1]} vs {feats_b.shape[1]}")
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise MetricError("need at least 2 feature vectors per set")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def latent_features(codec: Codec, clip: VideoClip) -> np.ndarray:
    """Per-frame codec-bottleneck features, mean-pooled over space: (T, C')."""
    with no_grad():
        latent = codec.encode(clip).data.numpy()
    return latent.mean(axis=(3, 4)).reshape(-1, latent.shape[2])


def best_of_trajectories(per_trajectory: dict[str, np.ndarray]
                         ) -> dict[str, tuple[float, int]]:
    """Best value (and its trajectory index) per metric, independently."""
    out = {}
    for metric, values in per_trajectory.items():
        values = np.asarray(values, dtype=np.float64)
        if values.size < 1:
            raise MetricError("need at least one trajectory")
        idx = int(np.argmax(values) if HIGHER_IS_BETTER.get(metric, True)
                  else np.argmin(values))
        out[metric] = (float(values[idx]), idx)
    return out


@dataclass
class ClipResult:
    clip: str
    metrics: dict[str, float]
    selected: dict[str, int]


@dataclass
class EvalReport:
    n_trajectories: int
    selection_rule: str = "best-of-T-per-metric"
    clips: list[ClipResult] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        if not self.clips:
            return {}
        keys = self.clips[0].metrics
        return {k: float(np.mean([c.metrics[k] for c in self.clips])) for k in keys}

    def to_table(self) -> str:
        agg = self.aggregate()
        keys = sorted(agg)
        lines = ["clip\t" + "\t".join(keys)]
        for c in self.clips:
            lines.append(c.clip + "\t" + "\t".join(f"{c.metrics[k]:.4f}" for k in keys))
        lines.append("MEAN\t" + "\t".join(f"{agg[k]:.4f}" for k in keys))
        return "\n".join(lines)

    def to_records(self) -> str:
        lines = []
        for c in self.clips:
            lines.append(json.dumps({"clip": c.clip, "metrics": c.metrics,
                                     "selected": c.selected,
                                     "n_trajectories": self.n_trajectories,
                                     "rule": self.selection_rule}, sort_keys=True))
        agg = self.aggregate()
        lines.append(json.dumps({"clip": "__aggregate__", "metrics": agg,
                                 "n_trajectories": self.n_trajectories,
                                 "rule": self.selection_rule}, sort_keys=True))
        return "\n".join(lines)
