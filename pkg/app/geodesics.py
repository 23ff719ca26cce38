"""
Geodesic solvers sharing one discrete objective

    E[x] = 1/2 * sum_{t=0}^{T-2} v_t^T G(x_t) v_t * dt,   v_t = (x_{t+1} - x_t) / dt

- train_interpolant: one network phi(x0, x1, t) amortised over endpoint pairs
- optimize_waypoints: per-pair preconditioned descent on the interior points
- shoot_geodesic: RK4 shooting on the conformal 1/p geodesic ODE (analytic densities only)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import solve_banded
from scipy.optimize import root

from app import diffcore as dc
from app.densities import MixtureDensity
from app.diffcore import GradientTape, Tensor, no_grad
from app.errors import DivergenceError, ShapeError, ShootingError
from app.metrics import MetricField, eval_metric
from app.nets import InterpolantNet, interpolant_forward
from app.optim import Adam
from app.schemas import InterpolantTrainConfig, ShootingConfig
from app.utils import write_csv

logger = logging.getLogger(__name__)

ScoreFn = Callable[[np.ndarray], np.ndarray]

# Armijo sufficient-decrease constant and backtracking depth
_ARMIJO = 1e-4
_BACKTRACKS = 40


@dataclass
class GeodesicPath:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2:
            raise ShapeError(f"a path needs [T >= 2, D] points, got {self.points.shape}")

    @property
    def T(self) -> int:
        return self.points.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.points[0]

    @property
    def x1(self) -> np.ndarray:
        return self.points[-1]

    @property
    def dt(self) -> float:
        return 1.0 / (self.T - 1)

    @property
    def velocities(self) -> np.ndarray:
        return np.diff(self.points, axis=0) / self.dt

    @property
    def euclidean_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def _sq_speeds(self, m: MetricField) -> np.ndarray:
        v = self.velocities
        lam = eval_metric(m, self.points[:-1])
        if lam.ndim == 2:
            return (lam * v**2).sum(axis=1)
        return lam * (v**2).sum(axis=1)

    def riemannian_speeds(self, m: MetricField) -> np.ndarray:
        return np.sqrt(self._sq_speeds(m))

    def riemannian_length(self, m: MetricField) -> float:
        return float(self.riemannian_speeds(m).sum() * self.dt)

    def speed_cv(self, m: MetricField) -> float:
        """Coefficient of variation of the Riemannian speed over the grid."""
        s = self.riemannian_speeds(m)
        mean = s.mean()
        return float(s.std() / mean) if mean > 0 else 0.0

    def energy(self, m: MetricField) -> float:
        return float(0.5 * self._sq_speeds(m).sum() * self.dt)

    def reversed(self) -> GeodesicPath:
        return GeodesicPath(self.points[::-1].copy())


def time_grid(T: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, T)


def straight_line(x0, x1, T: int) -> GeodesicPath:
    t = time_grid(T)[:, None]
    return GeodesicPath((1.0 - t) * np.asarray(x0, dtype=np.float64) + t * np.asarray(x1, dtype=np.float64))


def assemble_points(x0: np.ndarray, x1: np.ndarray, phi: Tensor, t: np.ndarray) -> Tensor:
    """x_t = (1 - t) x0 + t x1 + 2 t (1 - t) phi_t for a batch; shapes [T, B, D]."""
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    tt = np.asarray(t, dtype=np.float64)[:, None, None]
    if phi.shape != (tt.shape[0],) + x0.shape:
        raise ShapeError(f"phi {phi.shape} does not match grid {tt.shape[0]} x endpoints {x0.shape}")
    base = (1.0 - tt) * x0[None] + tt * x1[None]
    bump = np.broadcast_to(2.0 * tt * (1.0 - tt), phi.shape).copy()
    return Tensor(base) + phi * Tensor(bump)


def assemble_path(x0, x1, phi_values) -> GeodesicPath:
    phi = np.asarray(phi_values.data if isinstance(phi_values, Tensor) else phi_values, dtype=np.float64)
    if not np.all(np.isfinite(phi)):
        raise ValueError("phi values must be finite")
    with no_grad():
        pts = assemble_points(np.atleast_2d(x0), np.atleast_2d(x1), Tensor(phi[:, None, :]), time_grid(phi.shape[0]))
    return GeodesicPath(pts.data[:, 0, :])


def _as_batch(points) -> Tensor:
    if isinstance(points, GeodesicPath):
        return Tensor(points.points[:, None, :])
    points = dc.as_tensor(points)
    return dc.reshape(points, (points.shape[0], 1, points.shape[1])) if points.ndim == 2 else points


def path_energies(points, m: MetricField) -> Tensor:
    """Per-path kinetic energy for points [T, B, D]."""
    points = _as_batch(points)
    T, B, D = points.shape
    dt = 1.0 / (T - 1)
    head = dc.reshape(points[:-1], ((T - 1) * B, D))
    tail = dc.reshape(points[1:], ((T - 1) * B, D))
    v = (tail - head) / dt
    sq = dc.reshape(m.inner(head, v), (T - 1, B))
    return dc.sum(sq, axis=0) * (0.5 * dt)


def kinetic_energy(path, m: MetricField) -> Tensor:
    """Mean kinetic energy over the batch; differentiable in whatever produced the points."""
    return dc.mean(path_energies(path, m))


# ---------------------------------------------------------------------------
# Amortised interpolant
# ---------------------------------------------------------------------------


class DatasetPairSampler:
    """Independent uniform draws of endpoint pairs from a dataset."""

    def __init__(self, data: np.ndarray, seed: int):
        self.data = np.asarray(data, dtype=np.float64)
        self.rng = np.random.default_rng(seed)

    def sample(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        i = self.rng.integers(0, self.data.shape[0], size=n)
        j = self.rng.integers(0, self.data.shape[0], size=n)
        return self.data[i], self.data[j]


def train_interpolant(
    sampler: DatasetPairSampler,
    net: InterpolantNet,
    m: MetricField,
    cfg: InterpolantTrainConfig,
    log_path: str | Path | None = None,
) -> tuple[InterpolantNet, pd.DataFrame]:
    params = net.parameters()
    opt = Adam(params, lr=cfg.lr)
    t = time_grid(cfg.T)
    rows: list[tuple[int, float]] = []

    logger.info(f"🚀 Training interpolant under {m.name} for {cfg.steps} steps (T={cfg.T}, batch {cfg.batch_size})")
    for step in range(cfg.steps):
        x0, x1 = sampler.sample(cfg.batch_size)
        with GradientTape() as tape:
            phi = interpolant_forward(net, x0, x1, t)
            loss = kinetic_energy(assemble_points(x0, x1, phi, t), m)
            grads = tape.gradient(loss, params)
        value = float(loss.data)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            last = rows[-1][1] if rows else float("nan")
            logger.error(f"❌ Interpolant loss diverged at step {step} (previous loss {last:.6g})")
            raise DivergenceError(
                f"interpolant training under {m.name} produced a non-finite loss at step {step}; "
                f"previous loss {last:.6g}, clamp count {m.clamped}. Lower interpolant.lr or check calibration."
            )
        for p, g in zip(params, grads):
            p.grad = g
        opt.step()
        rows.append((step, value))
        if step % cfg.log_every == 0:
            logger.debug(f"step {step}: energy {value:.6g}")

    log = pd.DataFrame(rows, columns=["step", "loss"]).astype({"step": int})
    if log_path is not None:
        write_csv(log_path, log)
    return net, log


def predict_paths(net: InterpolantNet, x0: np.ndarray, x1: np.ndarray, T: int) -> list[GeodesicPath]:
    t = time_grid(T)
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    with no_grad():
        pts = assemble_points(x0, x1, interpolant_forward(net, x0, x1, t), t).data
    return [GeodesicPath(pts[:, b, :]) for b in range(pts.shape[1])]


# ---------------------------------------------------------------------------
# Waypoint oracle
# ---------------------------------------------------------------------------


def _with_ends(x0: np.ndarray, inner, x1: np.ndarray) -> Tensor:
    return dc.concat([Tensor(x0[None]), inner, Tensor(x1[None])], axis=0)


def _precondition(points: np.ndarray, m: MetricField, grad: np.ndarray) -> np.ndarray:
    """Solve the lambda-weighted path Laplacian against the interior gradient, per path."""
    T, B, D = points.shape
    dt = 1.0 / (T - 1)
    lam = eval_metric(m, points[:-1].reshape(-1, D))
    lam = (lam.mean(axis=1) if lam.ndim == 2 else lam).reshape(T - 1, B)
    lam = np.maximum(lam, 1e-8 * lam.max(axis=0, keepdims=True))
    out = np.empty_like(grad)
    n = T - 2
    for b in range(B):
        w = lam[:, b] / dt
        ab = np.zeros((3, n))
        ab[1] = w[:-1] + w[1:]
        ab[0, 1:] = -w[1:-1]
        ab[2, :-1] = -w[1:-1]
        out[:, b, :] = solve_banded((1, 1), ab, grad[:, b, :])
    return out


def optimize_waypoints_batch(
    x0: np.ndarray,
    x1: np.ndarray,
    m: MetricField,
    T: int = 100,
    steps: int = 500,
    initial_step: float = 1.0,
    tol: float = 1e-10,
) -> tuple[list[GeodesicPath], np.ndarray]:
    """Optimise the interior points of B straight-line initialisations at once.

    Returns the paths and a flag per path that is False when the run ended on a failed line search.
    """
    x0, x1 = np.atleast_2d(x0).astype(np.float64), np.atleast_2d(x1).astype(np.float64)
    B = x0.shape[0]
    t = time_grid(T)[:, None, None]
    inner = ((1.0 - t) * x0[None] + t * x1[None])[1:-1].copy()
    if T == 2 or steps == 0:
        pts = np.concatenate([x0[None], inner, x1[None]], axis=0)
        return [GeodesicPath(pts[:, b]) for b in range(B)], np.ones(B, dtype=bool)

    def energies_of(z: np.ndarray) -> np.ndarray:
        with no_grad():
            return path_energies(_with_ends(x0, Tensor(z), x1), m).data

    step_size = np.full(B, initial_step)
    active = np.ones(B, dtype=bool)
    healthy = np.ones(B, dtype=bool)
    energy = energies_of(inner)
    for it in range(steps):
        if not active.any():
            break
        with GradientTape() as tape:
            z = Tensor(inner, requires_grad=True)
            (grad,) = tape.gradient(dc.sum(path_energies(_with_ends(x0, z, x1), m)), [z])
        pts = np.concatenate([x0[None], inner, x1[None]], axis=0)
        direction = -_precondition(pts, m, grad)
        slope = (grad * direction).sum(axis=(0, 2))
        # stationary to rounding: nothing left to descend
        active &= -slope > tol * np.maximum(np.abs(energy), 1e-300)
        if not active.any():
            break
        trial = np.minimum(initial_step, 2.0 * step_size)
        accepted = ~active
        new_energy = energy.copy()
        for _ in range(_BACKTRACKS):
            todo = ~accepted
            if not todo.any():
                break
            cand = inner + trial[None, :, None] * direction
            e_cand = energies_of(cand)
            ok = todo & np.isfinite(e_cand) & (e_cand <= energy + _ARMIJO * trial * slope)
            inner[:, ok, :] = cand[:, ok, :]
            new_energy[ok] = e_cand[ok]
            step_size[ok] = trial[ok]
            accepted |= ok
            trial[todo & ~ok] *= 0.5
        failed = active & ~accepted
        if failed.any():
            healthy[failed] = False
            active[failed] = False
            logger.debug(f"line search failed for {int(failed.sum())} paths at iteration {it}")
        decrease = energy - new_energy
        active &= decrease > tol * np.maximum(np.abs(energy), 1e-300)
        energy = new_energy

    if not healthy.all():
        logger.warning(f"⚠️  Waypoint optimiser stalled on {int((~healthy).sum())}/{B} paths; returning best so far")
    pts = np.concatenate([x0[None], inner, x1[None]], axis=0)
    return [GeodesicPath(pts[:, b]) for b in range(B)], healthy


def optimize_waypoints(x0, x1, m: MetricField, T: int = 100, steps: int = 500, initial_step: float = 1.0, tol: float = 1e-10) -> GeodesicPath:
    paths, _ = optimize_waypoints_batch(np.atleast_2d(x0), np.atleast_2d(x1), m, T, steps, initial_step, tol)
    return paths[0]


# ---------------------------------------------------------------------------
# Shooting on the conformal 1/p geodesic equation
# ---------------------------------------------------------------------------


def geodesic_ode_rhs(x: np.ndarray, v: np.ndarray, score_fn: ScoreFn) -> np.ndarray:
    """Acceleration <s, v> v - 1/2 |v|^2 s with s = grad log p(x)."""
    s = score_fn(x)
    return (s * v).sum(axis=-1, keepdims=True) * v - 0.5 * (v * v).sum(axis=-1, keepdims=True) * s


def integrate_geodesic(x0: np.ndarray, v0: np.ndarray, score_fn: ScoreFn, T: int, substeps: int = 4) -> np.ndarray:
    """RK4 integration from (x0, v0) over t in [0, 1]; returns the [T, D] grid points."""
    h = 1.0 / ((T - 1) * substeps)
    x, v = np.array(x0, dtype=np.float64), np.array(v0, dtype=np.float64)
    out = np.empty((T, x.shape[0]))
    out[0] = x

    def f(xx, vv):
        return vv, geodesic_ode_rhs(xx, vv, score_fn)

    for i in range(1, T):
        for _ in range(substeps):
            k1x, k1v = f(x, v)
            k2x, k2v = f(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
            k3x, k3v = f(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
            k4x, k4v = f(x + h * k3x, v + h * k3v)
            x = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        out[i] = x
    return out


def shoot_geodesic(
    x0,
    x1,
    density: MixtureDensity | None = None,
    T: int = 100,
    cfg: ShootingConfig | None = None,
    score_fn: ScoreFn | None = None,
) -> GeodesicPath:
    """Solve the boundary problem by multi-restart shooting on the initial velocity."""
    cfg = cfg or ShootingConfig(T=T)
    if score_fn is None:
        if density is None:
            raise ValueError("shooting needs an analytic density or an exact score function")
        score_fn = density.score
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    chord = x1 - x0
    scale = cfg.restart_scale * max(float(np.linalg.norm(chord)), 1e-12)

    def miss(v0: np.ndarray) -> np.ndarray:
        end = integrate_geodesic(x0, v0, score_fn, T, cfg.substeps)[-1]
        return end - x1 if np.all(np.isfinite(end)) else np.full_like(x1, 1e6)

    best: tuple[float, np.ndarray] | None = None
    for attempt in range(cfg.restarts):
        guess = chord if attempt == 0 else chord + scale * rng.standard_normal(chord.shape)
        sol = root(miss, guess, method="hybr")
        pts = integrate_geodesic(x0, sol.x, score_fn, T, cfg.substeps)
        if not np.all(np.isfinite(pts)):
            continue
        gap = float(np.linalg.norm(pts[-1] - x1))
        if gap > cfg.tol:
            continue
        # energy is conserved along the flow and p(x0) is shared, so |v0| ranks candidates
        cost = float(sol.x @ sol.x)
        if best is None or cost < best[0]:
            best = (cost, pts)
    if best is None:
        raise ShootingError(
            f"shooting from {x0.tolist()} to {x1.tolist()} did not converge after {cfg.restarts} restarts; "
            "use the waypoint optimiser (`geodesic solve`) for this pair"
        )
    pts = best[1].copy()
    pts[-1] = x1
    return GeodesicPath(pts)


@dataclass
class OdeResidual:
    mean_residual: float
    mean_acceleration: float

    @property
    def relative(self) -> float:
        return self.mean_residual / self.mean_acceleration if self.mean_acceleration > 0 else 0.0


def ode_residual(path: GeodesicPath, score_fn: ScoreFn) -> OdeResidual:
    """How far a discrete path is from solving the 1/p geodesic equation (central differences)."""
    x, dt = path.points, path.dt
    if path.T < 3:
        return OdeResidual(0.0, 0.0)
    acc = (x[2:] - 2.0 * x[1:-1] + x[:-2]) / dt**2
    vel = (x[2:] - x[:-2]) / (2.0 * dt)
    rhs = geodesic_ode_rhs(x[1:-1], vel, score_fn)
    return OdeResidual(
        float(np.linalg.norm(acc - rhs, axis=1).mean()),
        float(np.linalg.norm(acc, axis=1).mean()),
    )


def paths_to_frame(paths: Sequence[GeodesicPath], pair_ids: Sequence[int] | None = None) -> pd.DataFrame:
    """Long format `pair_id,t,x0,x1,...`, one row per (path, grid point)."""
    rows = []
    ids = range(len(paths)) if pair_ids is None else pair_ids
    for pid, path in zip(ids, paths):
        t = time_grid(path.T)
        block = np.column_stack([np.full(path.T, pid), t, path.points])
        rows.append(block)
    D = paths[0].points.shape[1] if paths else 2
    columns = ["pair_id", "t"] + [f"x{i}" for i in range(D)]
    frame = pd.DataFrame(np.vstack(rows) if rows else np.empty((0, 2 + D)), columns=columns)
    return frame.astype({"pair_id": int})


def frame_to_paths(frame: pd.DataFrame) -> dict[int, GeodesicPath]:
    coords = [c for c in frame.columns if c.startswith("x")]
    return {
        int(pid): GeodesicPath(group.sort_values("t")[coords].to_numpy(dtype=np.float64))
        for pid, group in frame.groupby("pair_id", sort=True)
    }
