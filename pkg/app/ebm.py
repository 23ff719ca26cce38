"""
Energy-based model training by contrastive divergence.

Negatives come from short-run Langevin chains started from a replay buffer
(probability buffer_prob) or from uniform noise over the inflated data box.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from app import diffcore as dc
from app.densities import MixtureDensity
from app.diffcore import GradientTape, Tensor, no_grad
from app.errors import BackwardError, DivergenceError, NumericalError
from app.nets import EnergyModel, energy_forward, save_checkpoint
from app.optim import Adam
from app.schemas import EbmTrainConfig, LangevinConfig
from app.utils import spawn_rngs, write_csv

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "cd_loss", "reg_loss", "mean_E_pos", "mean_E_neg"]


class EnergyFunction(Protocol):
    def energy(self, x: Tensor) -> Tensor: ...

    def energy_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class ReplayBuffer:
    """Bounded FIFO store of past negatives; draws are uniform over what it holds."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self._data = np.empty((capacity, dim))
        self._size = 0
        self._head = 0

    def __len__(self) -> int:
        return self._size

    def add(self, points: np.ndarray) -> None:
        points = points[-self.capacity :]
        n = points.shape[0]
        idx = (self._head + np.arange(n)) % self.capacity
        self._data[idx] = points
        self._head = (self._head + n) % self.capacity
        self._size = min(self.capacity, self._size + n)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot draw from an empty replay buffer")
        return self._data[rng.integers(0, self._size, size=n)].copy()


def langevin_sample(model: EnergyFunction, init: np.ndarray, cfg: LangevinConfig, rng: np.random.Generator) -> np.ndarray:
    """x <- x - step_size * grad E(x) + noise * N(0, I), repeated cfg.steps times."""
    x = np.array(init, dtype=np.float64)
    for step in range(cfg.steps):
        energy, grad = model.energy_and_grad(x)
        bad = ~(np.isfinite(energy) & np.all(np.isfinite(grad), axis=1))
        if bad.any():
            i = int(np.argmax(bad))
            raise NumericalError(f"Langevin step {step}: non-finite energy or gradient at point {x[i].tolist()}")
        drift = cfg.step_size * grad
        if cfg.drift_clip is not None:
            norms = np.linalg.norm(drift, axis=1, keepdims=True)
            drift *= np.minimum(1.0, cfg.drift_clip / np.maximum(norms, 1e-300))
        x = x - drift
        if cfg.noise > 0:
            x = x + cfg.noise * rng.standard_normal(x.shape)
    return x


@dataclass
class CdStats:
    cd_loss: float
    reg_loss: float
    mean_E_pos: float
    mean_E_neg: float
    # mean |E| over the positive and negative batches together
    mean_abs_energy: float


def _detached(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.node is not None or x.requires_grad:
            raise BackwardError("negative samples must be detached before the contrastive loss")
        return x
    return Tensor(x)


def cd_loss_terms(model: EnergyFunction, x_pos, x_neg, reg_weight: float) -> tuple[Tensor, CdStats]:
    x_neg = _detached(x_neg)
    x_pos = dc.as_tensor(x_pos)
    e_pos = energy_forward(model, x_pos)
    e_neg = energy_forward(model, x_neg)
    cd = dc.mean(e_pos) - dc.mean(e_neg)
    reg = dc.mean(dc.square(e_pos)) + dc.mean(dc.square(e_neg))
    loss = cd + reg * reg_weight
    stats = CdStats(
        cd_loss=float(cd.data),
        reg_loss=float(reg.data) * reg_weight,
        mean_E_pos=float(e_pos.data.mean()),
        mean_E_neg=float(e_neg.data.mean()),
        mean_abs_energy=float(np.abs(np.concatenate([e_pos.data, e_neg.data])).mean()),
    )
    return loss, stats


def cd_loss(model: EnergyFunction, x_pos, x_neg, reg_weight: float) -> Tensor:
    """mean E(x+) - mean E(x-) + reg_weight * (mean E(x+)^2 + mean E(x-)^2)."""
    return cd_loss_terms(model, x_pos, x_neg, reg_weight)[0]


def data_box(data: np.ndarray, inflation: float) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = data.min(axis=0), data.max(axis=0)
    pad = 0.5 * inflation * (hi - lo)
    return lo - pad, hi + pad


def _initial_chains(buffer: ReplayBuffer, n: int, prob: float, box, rng: np.random.Generator) -> np.ndarray:
    lo, hi = box
    init = rng.uniform(lo, hi, size=(n, lo.shape[0]))
    from_buffer = rng.random(n) < prob
    if len(buffer) > 0 and from_buffer.any():
        init[from_buffer] = buffer.sample(int(from_buffer.sum()), rng)
    return init


def train_ebm(
    data: np.ndarray,
    cfg: EbmTrainConfig,
    langevin: LangevinConfig,
    model: EnergyModel | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[EnergyModel, pd.DataFrame]:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty [N, D] array")
    # independent streams for positive batches, chain starts and Langevin noise
    batch_rng, init_rng, noise_rng = spawn_rngs(cfg.seed, 3)
    if model is None:
        model = EnergyModel(dim=data.shape[1], seed=cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    buffer = ReplayBuffer(langevin.capacity, data.shape[1])
    box = data_box(data, cfg.box_inflation)
    # parameters whose energies last passed the divergence check
    last_good = model.state_dict()
    rows: list[list[float]] = []

    logger.info(f"🚀 Training EBM on {data.shape[0]} points for {cfg.steps} steps (batch {cfg.batch_size})")
    for step in range(cfg.steps):
        x_pos = data[batch_rng.integers(0, data.shape[0], size=cfg.batch_size)]
        init = _initial_chains(buffer, cfg.batch_size, langevin.buffer_prob, box, init_rng)
        x_neg = langevin_sample(model, init, langevin, noise_rng)
        buffer.add(x_neg)

        with GradientTape() as tape:
            loss, stats = cd_loss_terms(model, x_pos, x_neg, cfg.reg_weight)
            grads = tape.gradient(loss, params)

        if not np.isfinite(loss.data) or stats.mean_abs_energy > cfg.divergence_bound:
            model.load_state_dict(last_good)
            saved = None
            if checkpoint_path is not None:
                saved = str(save_checkpoint(model, checkpoint_path, cfg.seed, {"steps": step, "diverged": True}))
            logger.error(f"❌ EBM diverged at step {step}: mean |E| = {stats.mean_abs_energy:.3g}")
            raise DivergenceError(
                f"EBM training diverged at step {step} (mean |E| {stats.mean_abs_energy:.3g} > {cfg.divergence_bound:g}); "
                f"last good parameters {'saved to ' + saved if saved else 'restored'}",
                checkpoint=saved,
            )

        for p, g in zip(params, grads):
            p.grad = g
        last_good = model.state_dict()
        opt.step()
        rows.append([step, stats.cd_loss, stats.reg_loss, stats.mean_E_pos, stats.mean_E_neg])
        if step % cfg.log_every == 0:
            logger.debug(
                f"step {step}: cd {stats.cd_loss:.4f} reg {stats.reg_loss:.4f} "
                f"E+ {stats.mean_E_pos:.3f} E- {stats.mean_E_neg:.3f} buffer {len(buffer)}"
            )

    log = pd.DataFrame(rows, columns=LOG_COLUMNS).astype({"step": int})
    if log_path is not None:
        write_csv(log_path, log)
    logger.info(f"✅ EBM training finished after {cfg.steps} steps")
    return model, log


def energies(model: EnergyFunction, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, x.shape[0], chunk):
            out.append(energy_forward(model, x[start : start + chunk]).data)
    return np.concatenate(out) if out else np.empty(0)


def grid_points(n: int, box: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axis = np.linspace(-box, box, n)
    gx, gy = np.meshgrid(axis, axis)
    return gx, gy, np.stack([gx.ravel(), gy.ravel()], axis=1)


def grid_correlation(model: EnergyFunction, density: MixtureDensity, n: int = 100, box: float = 14.0) -> float:
    """Pearson correlation between E_theta and -log p over an n x n grid on [-box, box]^2."""
    _, _, pts = grid_points(n, box)
    r = pearsonr(energies(model, pts), -density.log_density(pts))
    return float(r.statistic)
