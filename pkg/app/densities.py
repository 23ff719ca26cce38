"""
Closed-form mixtures of isotropic unit Gaussians: p(x) = sum_k pi_k N(x | mu_k, I).

UCG/WCG place K centers on a radius-R semicircle at angles theta_k = k * pi / K, k = 0..K-1.
Centers k and K-k mirror each other about the y-axis; the center at theta = 0 has no partner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from app.errors import NonFiniteInputError
from app.schemas import DatasetSpec
from app.utils import read_csv, write_csv

logger = logging.getLogger(__name__)

# rows per block when evaluating [N, K] component terms
_CHUNK = 4096


def _as_points(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError("density evaluated at a non-finite point")
    return arr, single


@dataclass(frozen=True, eq=False)
class MixtureDensity:
    centers: np.ndarray
    weights: np.ndarray
    name: str = "custom"
    _log_w: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != centers.shape[0]:
            raise ValueError(f"{weights.shape[0]} weights for {centers.shape[0]} centers")
        if np.any(weights < 0):
            raise ValueError("mixture weights must be nonnegative")
        weights = weights / weights.sum()
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "weights", weights)
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_w", np.log(weights))

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def _log_terms(self, x: np.ndarray) -> np.ndarray:
        # log pi_k + log N(x | mu_k, I) for a block of rows, shape [n, K]
        sq = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=-1)
        return self._log_w[None, :] - 0.5 * sq - 0.5 * self.dim * np.log(2.0 * np.pi)

    def log_density(self, x) -> np.ndarray | float:
        pts, single = _as_points(x)
        out = np.empty(pts.shape[0])
        for start in range(0, pts.shape[0], _CHUNK):
            block = pts[start : start + _CHUNK]
            out[start : start + _CHUNK] = logsumexp(self._log_terms(block), axis=1)
        return float(out[0]) if single else out

    def density(self, x) -> np.ndarray | float:
        return np.exp(self.log_density(x))

    def score(self, x) -> np.ndarray:
        """grad log p(x) = sum_k r_k(x) (mu_k - x)."""
        pts, single = _as_points(x)
        out = np.empty_like(pts)
        for start in range(0, pts.shape[0], _CHUNK):
            block = pts[start : start + _CHUNK]
            resp = softmax(self._log_terms(block), axis=1)
            out[start : start + _CHUNK] = resp @ self.centers - block
        return out[0] if single else out

    def sample(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        rng = np.random.default_rng(seed)
        comps = rng.choice(self.K, size=n, p=self.weights)
        return self.centers[comps] + rng.standard_normal((n, self.dim))

    def mean(self) -> np.ndarray:
        return self.weights @ self.centers

    def peak_density(self, iters: int = 100) -> float:
        """Highest mode value, found by mean-shift from every center."""
        x = self.centers.copy()
        for _ in range(iters):
            x = softmax(self._log_terms(x), axis=1) @ self.centers
        return float(np.max(self.density(np.vstack([x, self.centers]))))


def semicircle_centers(K: int, R: float) -> np.ndarray:
    theta = np.arange(K) * np.pi / K
    return R * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def wcg_weights(K: int, ratio: float = 6.0) -> np.ndarray:
    """Gaussian-over-angle profile peaked at 90 degrees with max/min weight `ratio`."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    # theta_k - pi/2; k and K-k give exact negatives, so their weights are bit-identical
    u = (2.0 * np.arange(K) - K) * np.pi / (2.0 * K)
    sq = u**2
    span = sq.max() - sq.min()
    if span == 0.0:
        return np.full(K, 1.0 / K)
    # exp(-u^2 / (2 s^2)) with 2 s^2 = span / log(ratio): heaviest / lightest == ratio
    w = np.exp(-np.log(ratio) * (sq - sq.min()) / span)
    return w / w.sum()


def ucg_density(K: int = 200, R: float = 8.0) -> MixtureDensity:
    return MixtureDensity(semicircle_centers(K, R), np.full(K, 1.0 / K), name="ucg")


def wcg_density(K: int = 200, R: float = 8.0, ratio: float = 6.0) -> MixtureDensity:
    return MixtureDensity(semicircle_centers(K, R), wcg_weights(K, ratio), name="wcg")


def density_from_spec(spec: DatasetSpec) -> MixtureDensity:
    if spec.variant == "ucg":
        return ucg_density(spec.K, spec.R)
    if spec.variant == "wcg":
        return wcg_density(spec.K, spec.R, spec.wcg_ratio)
    centers = np.asarray(spec.centers, dtype=np.float64)
    weights = np.asarray(spec.weights) if spec.weights is not None else np.full(len(centers), 1.0 / len(centers))
    return MixtureDensity(centers, weights, name="custom")


def write_dataset(path: str | Path, points: np.ndarray) -> Path:
    columns = [f"x{i}" for i in range(points.shape[1])]
    return write_csv(path, pd.DataFrame(points, columns=columns))


def read_dataset(path: str | Path) -> np.ndarray:
    frame = read_csv(path)
    columns = [c for c in frame.columns if c.startswith("x")]
    if not columns:
        raise ValueError(f"{path} has no x0,x1,... columns")
    return frame[columns].to_numpy(dtype=np.float64)
