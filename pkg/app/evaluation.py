"""
Path quality measures and the aggregate evaluation suite.
Aggregates are a mean over trajectory sets with a 2-sigma spread across sets.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from app.config import settings
from app.densities import MixtureDensity
from app.errors import GeometryError, PathMismatchError
from app.geodesics import GeodesicPath, straight_line
from app.metrics import MetricField
from app.schemas import EvalReport, EvalRow
from app.utils import two_sigma, write_csv

logger = logging.getLogger(__name__)

Solver = Callable[[MetricField, np.ndarray, np.ndarray], Sequence[Optional[GeodesicPath]]]

REPORT_COLUMNS = list(EvalRow.model_fields)

ORACLE_FOR = {
    "energy_oracle": "energy_oracle",
    "inv_density_oracle": "inv_density_oracle",
    "energy_ebm": "energy_oracle",
    "inv_density_ebm": "inv_density_oracle",
    "land": "inv_density_oracle",
    "rbf": "inv_density_oracle",
    "linear": "inv_density_oracle",
}

DISPLAY = {
    "energy_oracle": "G_E_M",
    "inv_density_oracle": "G_1/p_M",
    "energy_ebm": "G_E_theta",
    "inv_density_ebm": "G_1/p_theta",
    "land": "G_LAND",
    "rbf": "G_RBF",
    "linear": "Linear",
    "euclidean": "Euclidean",
}


class AccumulatedProbability(NamedTuple):
    raw: float
    normalized: float


def accumulated_probability(path: GeodesicPath, d: MixtureDensity, peak: float | None = None) -> AccumulatedProbability:
    """Sum of p over the path's grid points, and the per-step mean relative to the peak density."""
    p = d.density(path.points)
    peak = d.peak_density() if peak is None else peak
    return AccumulatedProbability(float(p.sum()), float(p.mean() / peak))


def path_rmse(a: GeodesicPath, b: GeodesicPath) -> float:
    if a.T != b.T:
        raise PathMismatchError(f"paths have {a.T} and {b.T} grid points")
    if not (np.allclose(a.x0, b.x0, rtol=0, atol=1e-9) and np.allclose(a.x1, b.x1, rtol=0, atol=1e-9)):
        raise PathMismatchError(f"endpoints differ: {a.x0}->{a.x1} vs {b.x0}->{b.x1}")
    return reference_rmse(a, b)


def reference_rmse(path: GeodesicPath, reference: GeodesicPath) -> float:
    """RMSE to a reference path on the same grid, endpoints unchecked."""
    if path.T != reference.T:
        raise PathMismatchError(f"paths have {path.T} and {reference.T} grid points")
    return float(np.sqrt(np.mean(np.sum((path.points - reference.points) ** 2, axis=1))))


def step_size_profile(path: GeodesicPath) -> np.ndarray:
    return np.linalg.norm(np.diff(path.points, axis=0), axis=1)


def step_ratio(path: GeodesicPath) -> float:
    steps = step_size_profile(path)
    return float(steps.max() / steps.min()) if steps.min() > 0 else float("inf")


def nearest_data_rmse(path: GeodesicPath, data: np.ndarray | cKDTree) -> float:
    """RMS distance from each path point to its nearest dataset point."""
    tree = data if isinstance(data, cKDTree) else cKDTree(np.asarray(data))
    dist, _ = tree.query(path.points)
    return float(np.sqrt(np.mean(dist**2)))


def sample_pair_sets(data: np.ndarray, n_sets: int, per_set: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint-by-draw endpoint pair sets; pairs with identical endpoints are redrawn."""
    rng = np.random.default_rng(seed)
    sets = []
    for _ in range(n_sets):
        i = rng.integers(0, data.shape[0], size=per_set)
        j = rng.integers(0, data.shape[0], size=per_set)
        same = i == j
        while same.any():
            j[same] = rng.integers(0, data.shape[0], size=int(same.sum()))
            same = i == j
        sets.append((data[i], data[j]))
    return sets


def linear_solver(m: MetricField, x0: np.ndarray, x1: np.ndarray, T: int = 100) -> list[GeodesicPath]:
    return [straight_line(a, b, T) for a, b in zip(x0, x1)]


class _SetStats(NamedTuple):
    acc_norm: float
    acc_raw: float
    rmse: float
    nn_rmse: float
    done: int
    skipped: int


def _score_set(
    paths: Sequence[Optional[GeodesicPath]],
    baseline: Optional[Sequence[Optional[GeodesicPath]]],
    d: MixtureDensity,
    peak: float,
    tree: cKDTree | None,
) -> _SetStats:
    acc_n, acc_r, rmse, nn = [], [], [], []
    skipped = 0
    for k, path in enumerate(paths):
        ref = baseline[k] if baseline is not None else None
        if path is None or (baseline is not None and ref is None):
            skipped += 1
            continue
        acc = accumulated_probability(path, d, peak)
        acc_n.append(acc.normalized)
        acc_r.append(acc.raw)
        if ref is not None:
            rmse.append(path_rmse(path, ref))
        if tree is not None:
            nn.append(nearest_data_rmse(path, tree))
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return _SetStats(mean(acc_n), mean(acc_r), mean(rmse), mean(nn), len(acc_n), skipped)


def _guarded(solve: Solver, m: MetricField, x0: np.ndarray, x1: np.ndarray) -> list[Optional[GeodesicPath]]:
    try:
        paths = list(solve(m, x0, x1))
    except GeometryError as e:
        logger.warning(f"⚠️  Solver failed for {m.name} on a set of {len(x0)} pairs: {e.detail}")
        return [None] * len(x0)
    return [p if p is not None and np.all(np.isfinite(p.points)) else None for p in paths]


def run_eval_suite(
    metrics: Sequence[MetricField],
    pair_sets: Sequence[tuple[np.ndarray, np.ndarray]],
    d: MixtureDensity,
    solve: Solver,
    oracles: Sequence[MetricField],
    oracle_solve: Solver,
    dataset: str = "ucg",
    solver_name: str = "interpolant",
    data: np.ndarray | None = None,
    include_linear: bool = True,
    T: int = 100,
) -> tuple[EvalReport, dict[str, list[list[Optional[GeodesicPath]]]]]:
    """Evaluate every metric on every pair set against the oracle matched to its form.

    Returns the report and the solved paths per metric name (one list per set).
    """
    if not metrics:
        raise GeometryError("evaluation needs at least one metric; the report would be empty", exit_code=2)
    if len(pair_sets) < 2:
        raise GeometryError("2-sigma errors need at least two trajectory sets", exit_code=2)
    peak = d.peak_density()
    tree = cKDTree(data) if data is not None else None
    by_name = {o.name: o for o in oracles}

    with ThreadPoolExecutor(max_workers=settings.WORKERS) as pool:
        oracle_paths = {
            o.name: list(pool.map(lambda s, o=o: _guarded(oracle_solve, o, *s), pair_sets)) for o in oracles
        }
        solved: dict[str, list[list[Optional[GeodesicPath]]]] = {}
        rows_spec: list[tuple[str, str, MetricField | None]] = []
        for m in metrics:
            if m.name in by_name:
                solved[m.name] = oracle_paths[m.name]
                rows_spec.append((m.name, "waypoint", by_name[m.name]))
            else:
                solved[m.name] = list(pool.map(lambda s, m=m: _guarded(solve, m, *s), pair_sets))
                rows_spec.append((m.name, solver_name, m))
        if include_linear:
            solved["linear"] = [linear_solver(None, x0, x1, T) for x0, x1 in pair_sets]
            rows_spec.append(("linear", "linear", None))

    rows: list[EvalRow] = []
    for name, solver_label, m in rows_spec:
        oracle = ORACLE_FOR.get(name)
        per_set = [
            _score_set(solved[name][s], oracle_paths[oracle][s] if oracle in oracle_paths else None, d, peak, tree)
            for s in range(len(pair_sets))
        ]
        acc, acc2 = two_sigma(st.acc_norm for st in per_set)
        raw, raw2 = two_sigma(st.acc_raw for st in per_set)
        if oracle in oracle_paths:
            rmse, rmse2 = two_sigma(st.rmse for st in per_set)
        else:
            rmse, rmse2 = float("nan"), float("nan")
        skipped = sum(st.skipped for st in per_set)
        if skipped:
            logger.warning(f"⚠️  {name}: {skipped} pairs skipped after solver failures")
        rows.append(
            EvalRow(
                dataset=dataset,
                metric=name,
                solver=solver_label,
                n_pairs=sum(st.done for st in per_set),
                acc_prob_mean=acc,
                acc_prob_2sig=acc2,
                rmse_mean=rmse,
                rmse_2sig=rmse2,
                skipped=skipped,
                acc_prob_raw_mean=raw,
                acc_prob_raw_2sig=raw2,
                nn_rmse_mean=float(np.nanmean([st.nn_rmse for st in per_set])) if tree is not None else float("nan"),
                clamped=m.clamped if m is not None else 0,
            )
        )
    report = EvalReport(dataset=dataset, n_sets=len(pair_sets), pairs_per_set=len(pair_sets[0][0]), rows=rows)
    return report, solved


def report_frame(report: EvalReport) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in report.rows], columns=REPORT_COLUMNS)


def write_report(path, report: EvalReport):
    return write_csv(path, report_frame(report))


def format_table(report: EvalReport) -> str:
    """Human-readable table: accumulated probability (higher is better) and RMSE to oracle (lower is better)."""
    header = f"{'Metric':<14}{'p_M(path) (up)':>24}{'RMSE (down)':>24}{'skipped':>9}"
    lines = [f"{report.dataset.upper()}  ({report.n_sets} sets x {report.pairs_per_set} pairs)", header, "-" * len(header)]
    for r in report.rows:
        acc = f"{r.acc_prob_mean:.2f} ± {r.acc_prob_2sig:.2f}"
        rmse = "-" if np.isnan(r.rmse_mean) else f"{r.rmse_mean:.2f} ± {r.rmse_2sig:.2f}"
        lines.append(f"{DISPLAY.get(r.metric, r.metric):<14}{acc:>24}{rmse:>24}{r.skipped:>9}")
    return "\n".join(lines)


def profile_frame(paths_by_metric: dict[str, Sequence[GeodesicPath]]) -> pd.DataFrame:
    """Mean step-size profile per metric: columns metric,step,step_size."""
    frames = []
    for name, paths in paths_by_metric.items():
        live = [p for p in paths if p is not None]
        if not live:
            continue
        prof = np.mean([step_size_profile(p) for p in live], axis=0)
        frames.append(pd.DataFrame({"metric": name, "step": np.arange(prof.shape[0]), "step_size": prof}))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["metric", "step", "step_size"])


def step_ratios(paths_by_metric: dict[str, Sequence[GeodesicPath]]) -> dict[str, float]:
    """Mean max/min step-size ratio per metric."""
    return {
        name: float(np.mean([step_ratio(p) for p in paths if p is not None]))
        for name, paths in paths_by_metric.items()
        if any(p is not None for p in paths)
    }
