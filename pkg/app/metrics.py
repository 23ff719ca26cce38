"""
Metric zoo behind one interface.

Every metric is an affine map of a raw scalar (or diagonal) field h(x):
    direct form   G(x) = (alpha * h(x) + beta) I
    inverse form  G(x) = (alpha * h(x) + beta)^-1 I
The affine value is floored at eps before use; each floor hit is counted.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Literal

import numpy as np
from scipy.optimize import nnls
from sklearn.cluster import KMeans

from app import diffcore as dc
from app.config import settings
from app.densities import MixtureDensity
from app.diffcore import Tensor, no_grad
from app.ebm import energies
from app.errors import CalibrationError, ShapeError
from app.nets import energy_forward
from app.schemas import MetricDescriptor

logger = logging.getLogger(__name__)

Form = Literal["direct", "inverse"]

# query rows per block for kernel sums against the reference set
_CHUNK = 512


# ---------------------------------------------------------------------------
# Raw fields
# ---------------------------------------------------------------------------


class Field:
    """A raw field h(x); values() is graph-free, tensor() is differentiable in x."""

    kind: Literal["conformal", "diagonal"] = "conformal"

    def values(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.tensor(Tensor(x)).data

    def tensor(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def hyper(self) -> dict[str, Any]:
        return {}


class ConstantField(Field):
    def __init__(self, value: float = 1.0):
        self.value = value

    def values(self, x: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(x).shape[0], self.value)

    def tensor(self, x: Tensor) -> Tensor:
        return Tensor(np.full(x.shape[0], self.value))

    def hyper(self) -> dict[str, Any]:
        return {"value": self.value}


class EnergyField(Field):
    """E_theta(x), or exp(-E_theta(x)) when `unnormalized_density` is set."""

    def __init__(self, model, unnormalized_density: bool = False):
        self.model = model
        self.unnormalized_density = unnormalized_density

    def values(self, x: np.ndarray) -> np.ndarray:
        e = energies(self.model, np.atleast_2d(x))
        return np.exp(-e) if self.unnormalized_density else e

    def tensor(self, x: Tensor) -> Tensor:
        e = energy_forward(self.model, x)
        return dc.exp(-e) if self.unnormalized_density else e

    def hyper(self) -> dict[str, Any]:
        return {"unnormalized_density": self.unnormalized_density, **self.model.descriptor()}


class MixtureLogField(Field):
    """-log p(x) of a closed-form mixture."""

    def __init__(self, density: MixtureDensity):
        self.density = density

    def values(self, x: np.ndarray) -> np.ndarray:
        return -self.density.log_density(np.atleast_2d(x))

    def tensor(self, x: Tensor) -> Tensor:
        score = self.density.score(x.data)
        return dc.apply("neg_log_density", [x], -self.density.log_density(x.data), lambda g, needs: (-g[:, None] * score,))


class MixtureDensityField(Field):
    """p(x) of a closed-form mixture."""

    def __init__(self, density: MixtureDensity):
        self.density = density

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.density.density(np.atleast_2d(x))

    def tensor(self, x: Tensor) -> Tensor:
        p = self.density.density(x.data)
        score = self.density.score(x.data)
        return dc.apply("density", [x], p, lambda g, needs: ((g * p)[:, None] * score,))


@dataclass
class LandModel:
    points: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"LAND bandwidth must be positive, got {self.sigma}")
        if len(self.points) == 0:
            raise ValueError("LAND needs a non-empty reference set")


def land_h(model: LandModel, x: np.ndarray) -> np.ndarray:
    """h_j(x) = sum_i (x_i[j] - x[j])^2 exp(-|x - x_i|^2 / (2 sigma^2))."""
    pts, single = np.atleast_2d(np.asarray(x, dtype=np.float64)), np.ndim(x) == 1
    out = np.empty_like(pts)
    inv = 1.0 / (2.0 * model.sigma**2)
    for start in range(0, pts.shape[0], _CHUNK):
        q = pts[start : start + _CHUNK]
        diff = model.points[None, :, :] - q[:, None, :]
        w = np.exp(-inv * (diff**2).sum(axis=-1))
        out[start : start + _CHUNK] = np.einsum("nr,nrd->nd", w, diff**2)
    return out[0] if single else out


class LandField(Field):
    kind = "diagonal"

    def __init__(self, model: LandModel):
        self.model = model

    def values(self, x: np.ndarray) -> np.ndarray:
        return land_h(self.model, np.atleast_2d(x))

    def tensor(self, x: Tensor) -> Tensor:
        ref, s2 = self.model.points, self.model.sigma**2
        value = land_h(self.model, x.data)

        def vjp(g, needs):
            grad = np.empty_like(x.data)
            for start in range(0, x.shape[0], _CHUNK):
                q = x.data[start : start + _CHUNK]
                gq = g[start : start + _CHUNK]
                diff = ref[None, :, :] - q[:, None, :]
                w = np.exp(-(diff**2).sum(axis=-1) / (2.0 * s2))
                weighted = np.einsum("nd,nrd->nr", gq, diff**2)
                grad[start : start + _CHUNK] = np.einsum("nr,nrd->nd", w, -2.0 * gq[:, None, :] * diff) + np.einsum(
                    "nr,nrd->nd", w * weighted, diff
                ) / s2
            return (grad,)

        return dc.apply("land_h", [x], value, vjp)

    def hyper(self) -> dict[str, Any]:
        return {"sigma": self.model.sigma, "n_reference": int(len(self.model.points))}


@dataclass
class RbfModel:
    centers: np.ndarray
    bandwidths: np.ndarray
    weights: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.bandwidths = np.asarray(self.bandwidths, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.centers.shape[0] < 1 or np.any(self.bandwidths <= 0):
            raise ValueError("RBF needs K >= 1 centroids with positive bandwidths")

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    def kernels(self, x: np.ndarray) -> np.ndarray:
        sq = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-0.5 * self.bandwidths[None, :] * sq)

    def h(self, x: np.ndarray) -> np.ndarray:
        return self.kernels(np.atleast_2d(x)) @ self.weights


class RbfField(Field):
    def __init__(self, model: RbfModel):
        self.model = model

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.model.h(x)

    def tensor(self, x: Tensor) -> Tensor:
        m = self.model
        phi = m.kernels(x.data) * m.weights[None, :]
        value = phi.sum(axis=1)

        def vjp(g, needs):
            # dh/dx = -sum_k w_k phi_k lambda_k (x - c_k)
            coef = phi * m.bandwidths[None, :]
            grad = -(coef.sum(axis=1)[:, None] * x.data - coef @ m.centers)
            return (g[:, None] * grad,)

        return dc.apply("rbf_h", [x], value, vjp)

    def hyper(self) -> dict[str, Any]:
        m = self.model
        return {
            "K": m.K,
            "kappa": m.kappa,
            "centers": m.centers.tolist(),
            "bandwidths": m.bandwidths.tolist(),
            "weights": m.weights.tolist(),
        }


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationSets:
    on_manifold: np.ndarray
    off_manifold: np.ndarray
    g_min: float = 1.0
    g_max: float = 1000.0

    def __post_init__(self):
        if len(self.on_manifold) == 0 or len(self.off_manifold) == 0:
            raise CalibrationError("calibration sets must both be non-empty")


def build_calibration_sets(data: np.ndarray, n_pairs: int, seed: int, g_min: float = 1.0, g_max: float = 1000.0) -> CalibrationSets:
    """Endpoints of random data pairs (on manifold) and their linear midpoints (off manifold)."""
    rng = np.random.default_rng(seed)
    i = rng.integers(0, data.shape[0], size=n_pairs)
    j = rng.integers(0, data.shape[0], size=n_pairs)
    ends = np.concatenate([data[i], data[j]], axis=0)
    mids = 0.5 * (data[i] + data[j])
    return CalibrationSets(ends, mids, g_min, g_max)


def calibrate(raw_h: Callable[[np.ndarray], np.ndarray], sets: CalibrationSets, form: Form) -> tuple[float, float]:
    """alpha, beta mapping the set means of h onto g_min (on manifold) and g_max (off manifold).

    For the inverse form the targets hold on the pre-inverse scale (1/g_min, 1/g_max).
    """
    h_on = float(np.mean(raw_h(sets.on_manifold)))
    h_off = float(np.mean(raw_h(sets.off_manifold)))
    if not np.isfinite(h_on) or not np.isfinite(h_off) or abs(h_off - h_on) <= 1e-12 * max(abs(h_on), abs(h_off), 1e-300):
        raise CalibrationError(
            f"degenerate calibration: mean h on manifold {h_on:.6g} vs off manifold {h_off:.6g}; "
            "use larger or more separated calibration sets"
        )
    if form == "direct":
        lo, hi = sets.g_min, sets.g_max
    else:
        lo, hi = 1.0 / sets.g_min, 1.0 / sets.g_max
    alpha = (hi - lo) / (h_off - h_on)
    beta = lo - alpha * h_on
    return alpha, beta


# ---------------------------------------------------------------------------
# Metric fields
# ---------------------------------------------------------------------------


class MetricField:
    def __init__(
        self,
        name: str,
        field: Field,
        form: Form = "direct",
        alpha: float = 1.0,
        beta: float = 0.0,
        eps: float | None = None,
        provenance: dict[str, str] | None = None,
    ):
        self.name = name
        self.field = field
        self.form = form
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.eps = settings.CLAMP_EPS if eps is None else float(eps)
        self.provenance = dict(provenance or {})
        self._lock = threading.Lock()
        self._clamped = 0

    def __repr__(self) -> str:
        return f"MetricField({self.name!r}, {self.kind}, {self.form}, alpha={self.alpha:.6g}, beta={self.beta:.6g})"

    @property
    def kind(self) -> str:
        return self.field.kind

    @property
    def clamped(self) -> int:
        return self._clamped

    def reset_clamp_count(self) -> None:
        with self._lock:
            self._clamped = 0

    def _count(self, affine: np.ndarray) -> None:
        hits = int(np.count_nonzero(affine < self.eps))
        if hits:
            with self._lock:
                self._clamped += hits
            logger.debug(f"{self.name}: {hits} affine values clamped at {self.eps:g}")

    def pre_inverse(self, x: np.ndarray) -> np.ndarray:
        return self.alpha * self.field.values(x) + self.beta

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Metric entries: one scalar per point (conformal) or D diagonal entries (LAND)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        affine = self.pre_inverse(np.atleast_2d(x))
        self._count(affine)
        value = np.maximum(affine, self.eps)
        lam = value if self.form == "direct" else 1.0 / value
        return lam[0] if single else lam

    def tensor(self, x: Tensor) -> Tensor:
        h = self.field.tensor(x)
        affine = h * self.alpha + self.beta
        self._count(affine.data)
        value = dc.clamp_min(affine, self.eps)
        return value if self.form == "direct" else dc.reciprocal(value)

    def inner(self, x: Tensor, v: Tensor) -> Tensor:
        """v^T G(x) v for each row."""
        if x.shape != v.shape:
            raise ShapeError(f"inner: points {x.shape} and velocities {v.shape} differ")
        lam = self.tensor(x)
        if self.kind == "diagonal":
            return dc.sum(lam * dc.square(v), axis=1)
        return lam * dc.sqnorm(v)

    def calibrated(self, sets: CalibrationSets) -> MetricField:
        alpha, beta = calibrate(self.field.values, sets, self.form)
        logger.info(f"📐 Calibrated {self.name}: alpha={alpha:.6g}, beta={beta:.6g}")
        return MetricField(self.name, self.field, self.form, alpha, beta, self.eps, self.provenance)

    def rescaled(self, c: float) -> MetricField:
        """The same metric multiplied by the constant c > 0."""
        if c <= 0:
            raise ValueError(f"scale must be positive, got {c}")
        if self.form == "direct":
            return MetricField(self.name, self.field, "direct", self.alpha * c, self.beta * c, self.eps * c, self.provenance)
        return MetricField(self.name, self.field, "inverse", self.alpha / c, self.beta / c, self.eps / c, self.provenance)

    def descriptor(self) -> MetricDescriptor:
        return MetricDescriptor(
            name=self.name,
            kind=self.kind,
            form=self.form,
            alpha=self.alpha,
            beta=self.beta,
            eps=self.eps,
            hyper=self.field.hyper(),
            provenance=self.provenance,
        )


def eval_metric(m: MetricField, x) -> np.ndarray:
    """Metric entries at a point or a batch of points; clamps are counted on `m`."""
    return m.evaluate(x)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _calibrate_if(m: MetricField, sets: CalibrationSets | None) -> MetricField:
    return m.calibrated(sets) if sets is not None else m


def euclidean_metric() -> MetricField:
    return MetricField("euclidean", ConstantField(1.0), "direct", 1.0, 0.0)


def ebm_energy_metric(model, sets: CalibrationSets | None = None) -> MetricField:
    return _calibrate_if(MetricField("energy_ebm", EnergyField(model), "direct"), sets)


def ebm_inverse_density_metric(model, sets: CalibrationSets | None = None) -> MetricField:
    return _calibrate_if(MetricField("inv_density_ebm", EnergyField(model, unnormalized_density=True), "inverse"), sets)


def oracle_metrics(d: MixtureDensity, sets: CalibrationSets | None = None) -> tuple[MetricField, MetricField]:
    energy = MetricField("energy_oracle", MixtureLogField(d), "direct")
    inverse = MetricField("inv_density_oracle", MixtureDensityField(d), "inverse")
    return _calibrate_if(energy, sets), _calibrate_if(inverse, sets)


def inverse_density_metric(d: MixtureDensity) -> MetricField:
    """Uncalibrated 1/p conformal metric (alpha = 1, beta = 0)."""
    return MetricField("inv_density", MixtureDensityField(d), "inverse", 1.0, 0.0)


def land_metric(data: np.ndarray, sigma: float = 1.0, sets: CalibrationSets | None = None) -> MetricField:
    return _calibrate_if(MetricField("land", LandField(LandModel(np.asarray(data, dtype=np.float64), sigma)), "inverse"), sets)


def rbf_metric(model: RbfModel, sets: CalibrationSets | None = None) -> MetricField:
    return _calibrate_if(MetricField("rbf", RbfField(model), "inverse"), sets)


def _kmeans(data: np.ndarray, K: int, seed: int, init: np.ndarray | str) -> KMeans:
    return KMeans(
        n_clusters=K, init=init, n_init=1, max_iter=100, algorithm="lloyd", random_state=seed
    ).fit(data)


def fit_rbf(
    data: np.ndarray, K: int = 30, kappa: float = 1.0, seed: int = 0, bandwidth: Literal["centroids", "members"] = "centroids"
) -> RbfModel:
    """K-means centroids, per-centroid bandwidths, nonnegative weights fitted so h ~ 1 on data."""
    data = np.asarray(data, dtype=np.float64)
    if K > data.shape[0]:
        raise ValueError(f"K={K} exceeds the {data.shape[0]} data points")
    rng = np.random.default_rng(seed)
    km = _kmeans(data, K, seed, "k-means++")
    centers = km.cluster_centers_.copy()
    for _ in range(10):
        counts = np.bincount(km.labels_, minlength=K)
        empty = counts == 0
        if not empty.any():
            break
        logger.warning(f"⚠️  Reseeding {int(empty.sum())} empty RBF clusters from data points")
        centers[empty] = data[rng.choice(data.shape[0], size=int(empty.sum()), replace=False)]
        km = _kmeans(data, K, seed, centers)
        centers = km.cluster_centers_.copy()

    if bandwidth == "centroids" and K > 1:
        # scale_k = kappa / (2K) * sum_j |c_j - c_k|
        dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        scale = kappa / (2.0 * K) * dists.sum(axis=1)
    else:
        # mean distance of each cluster's members to its centroid
        member = np.linalg.norm(data - centers[km.labels_], axis=1)
        counts = np.maximum(np.bincount(km.labels_, minlength=K), 1)
        scale = kappa * np.bincount(km.labels_, weights=member, minlength=K) / counts
    scale = np.maximum(scale, 1e-12)
    bandwidths = 0.5 * scale**-2.0

    partial = RbfModel(centers, bandwidths, np.ones(K), kappa)
    weights, residual = nnls(partial.kernels(data), np.ones(data.shape[0]))
    logger.info(f"📍 RBF fit: K={K}, kappa={kappa}, weight residual {residual:.4g}")
    return RbfModel(centers, bandwidths, weights, kappa)


def metric_from_descriptor(
    desc: MetricDescriptor,
    density: MixtureDensity | None = None,
    data: np.ndarray | None = None,
    model=None,
) -> MetricField:
    """Rebuild a persisted metric; the caller supplies the density, dataset or energy model it needs."""
    name, hyper = desc.name, desc.hyper
    if name in ("energy_ebm", "inv_density_ebm"):
        if model is None:
            raise ValueError(f"{name} needs the trained energy model")
        field: Field = EnergyField(model, unnormalized_density=name == "inv_density_ebm")
    elif name == "energy_oracle":
        field = MixtureLogField(density)
    elif name in ("inv_density_oracle", "inv_density"):
        field = MixtureDensityField(density)
    elif name == "land":
        if data is None:
            raise ValueError("land needs the reference dataset")
        field = LandField(LandModel(np.asarray(data, dtype=np.float64), hyper["sigma"]))
    elif name == "rbf":
        field = RbfField(RbfModel(hyper["centers"], hyper["bandwidths"], hyper["weights"], hyper["kappa"]))
    elif name == "euclidean":
        field = ConstantField(hyper.get("value", 1.0))
    else:
        raise ValueError(f"unknown metric {name!r}")
    return MetricField(name, field, desc.form, desc.alpha, desc.beta, desc.eps, desc.provenance)
