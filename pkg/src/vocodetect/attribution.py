"""Blur-path integrated gradients over cepstral feature maps.

The path runs from a heavily blurred copy of the features (``sigma_max``)
back to the features themselves; the detector score gradient is integrated
along it with the trapezoid rule, so the attributions sum to
``score(x) - score(blur(x, sigma_max))`` up to discretization error.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .dsp import CepstralFeatures
from .exceptions import ShapeError
from .gmm import DetectorPair, score_frames, score_gradient

__all__ = [
    "AttributionMap",
    "gaussian_blur_2d",
    "blur_features",
    "sigma_path",
    "blur_ig",
    "attribution_csv",
    "heatmap_pgm",
]

BLOCKS = ("base", "delta", "delta2")


@dataclass
class AttributionMap:
    base: np.ndarray
    delta: np.ndarray
    delta2: np.ndarray
    sigma_max: float
    steps: int
    baseline_score: float = float("nan")
    input_score: float = float("nan")

    def total(self) -> float:
        return float(self.base.sum() + self.delta.sum() + self.delta2.sum())

    def stacked(self) -> np.ndarray:
        return np.hstack([self.base, self.delta, self.delta2])


def gaussian_blur_2d(feat: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with half-sample-symmetric (reflect) borders."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    feat = np.asarray(feat, dtype=np.float64)
    if sigma == 0:
        return feat.copy()
    return gaussian_filter(feat, sigma, mode="reflect")


def blur_features(frames: np.ndarray, n_ceps: int, sigma: float) -> np.ndarray:
    """Blur each of the three ``T x n_ceps`` blocks of a stacked frame matrix separately."""
    return np.hstack([gaussian_blur_2d(frames[:, i * n_ceps:(i + 1) * n_ceps], sigma)
                      for i in range(frames.shape[1] // n_ceps)])


def sigma_path(sigma_max: float, steps: int, ratio: float = 1e-3) -> np.ndarray:
    """``steps + 1`` blur levels: geometric from ``sigma_max`` down to ``ratio * sigma_max``, then 0."""
    return np.append(np.geomspace(sigma_max, ratio * sigma_max, steps), 0.0)


def blur_ig(pair: DetectorPair, feats: CepstralFeatures, sigma_max: float = 5.0,
            steps: int = 100) -> AttributionMap:
    """Attribute the log-likelihood ratio of ``feats`` to individual feature cells."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if sigma_max <= 0:
        raise ValueError("sigma_max must be positive")
    frames = feats.stacked()
    if frames.shape[1] != pair.real_model.dim:
        raise ShapeError(f"features have {frames.shape[1]} columns, detector expects {pair.real_model.dim}")
    r = feats.base.shape[1]
    path = [blur_features(frames, r, s) for s in sigma_path(sigma_max, steps)]
    grads = [score_gradient(pair, p) for p in path]
    total = np.zeros_like(frames)
    for i in range(steps):
        total += 0.5 * (grads[i] + grads[i + 1]) * (path[i + 1] - path[i])
    return AttributionMap(total[:, :r], total[:, r:2 * r], total[:, 2 * r:], float(sigma_max), int(steps),
                          baseline_score=score_frames(pair, path[0]),
                          input_score=score_frames(pair, frames))


def attribution_csv(attr: AttributionMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "t", "r", "value"])
    for name in BLOCKS:
        block = getattr(attr, name)
        for t in range(block.shape[0]):
            for r in range(block.shape[1]):
                w.writerow([name, t, r, repr(float(block[t, r]))])
    return buf.getvalue()


def heatmap_pgm(attr: AttributionMap) -> bytes:
    """8-bit binary PGM of the stacked map: rows are coefficients, columns frames.

    Grey level 128 is zero; the scale is symmetric in the largest magnitude.
    """
    grid = attr.stacked().T[::-1]
    peak = np.abs(grid).max()
    scaled = grid / peak if peak > 0 else grid
    pixels = np.clip(np.round(127.5 + 127.5 * scaled), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()
