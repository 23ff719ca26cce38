"""
Command handlers for the experiment pipeline.

Each handler reads its upstream artifacts from the run directory, writes its outputs
there and records every output in the run manifest together with the hashes of the
inputs it was built from. Layout of a run directory:

    config.json                  resolved config snapshot
    dataset.csv                  dataset gen
    ebm/energy.ckpt              ebm train (plus train_log.csv, summary.json)
    metrics/rbf_model.json       metric fit
    metrics/<metric>.json        metric calibrate
    interpolants/<metric>.ckpt   geodesic train (plus <metric>_loss.csv)
    paths/*.csv                  geodesic solve / shoot
    eval/*                       eval run / eval sweep
    figures/*.svg                plot fig1 / fig2 / energy
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.config import resolve_output_dir, settings
from app.densities import MixtureDensity, density_from_spec, read_dataset, write_dataset
from app.ebm import energies, grid_correlation, grid_points, train_ebm
from app.errors import ConfigError, GeometryError, MissingArtifactError, ShootingError
from app.evaluation import (
    profile_frame,
    report_frame,
    run_eval_suite,
    sample_pair_sets,
    format_table,
    step_ratios,
)
from app.geodesics import (
    DatasetPairSampler,
    frame_to_paths,
    optimize_waypoints_batch,
    paths_to_frame,
    predict_paths,
    shoot_geodesic,
    train_interpolant,
)
from app.manifest import ManifestService
from app.metrics import (
    CalibrationSets,
    MetricField,
    RbfField,
    RbfModel,
    build_calibration_sets,
    ebm_energy_metric,
    ebm_inverse_density_metric,
    euclidean_metric,
    fit_rbf,
    land_metric,
    metric_from_descriptor,
    oracle_metrics,
    rbf_metric,
)
from app.nets import EnergyModel, InterpolantNet, load_checkpoint, save_checkpoint
from app.plotting import plot_energy, plot_fig1, plot_fig2
from app.schemas import MetricDescriptor, RunConfig
from app.utils import derive_seed, read_csv, write_csv

logger = logging.getLogger(__name__)

CONFIG_SNAPSHOT = "config.json"
DATASET = "dataset.csv"
EBM_CKPT = "ebm/energy.ckpt"
EBM_LOG = "ebm/train_log.csv"
EBM_SUMMARY = "ebm/summary.json"
RBF_MODEL = "metrics/rbf_model.json"
EVAL_REPORT = "eval/report.csv"
EVAL_TABLE = "eval/table.txt"
EVAL_PROFILES = "eval/profiles.csv"
SHOOT_PATHS = "paths/shoot_inv_density.csv"

EBM_METRICS = ("energy_ebm", "inv_density_ebm")


# closed-form references: solved directly, never given an interpolant
ORACLE_NAMES = ("energy_oracle", "inv_density_oracle")


def metric_path(name: str) -> str:
    return f"metrics/{name}.json"


def interpolant_path(name: str) -> str:
    return f"interpolants/{name}.ckpt"


def eval_paths_path(name: str) -> str:
    return f"eval/paths_{name}.csv"


def apply_overrides(config: RunConfig, seed: Optional[int] = None, variant: Optional[str] = None) -> RunConfig:
    """--seed reseeds every stage; --variant picks the dataset."""
    update = config.model_dump()
    if seed is not None:
        update["seed"] = seed
        for section in ("dataset", "ebm", "interpolant", "shooting", "eval"):
            update[section]["seed"] = seed
        update["metrics"]["calibration_seed"] = seed
    if variant is not None:
        update["dataset"]["variant"] = variant
    return RunConfig.model_validate(update)


@dataclass
class Context:
    """Everything a command handler needs: config, run directory, manifest row."""

    config: RunConfig
    out: Path
    manifest: ManifestService
    command: str
    run_id: int = 0
    options: Dict[str, object] = field(default_factory=dict)
    _data: Optional[np.ndarray] = None
    _density: Optional[MixtureDensity] = None
    _model: Optional[EnergyModel] = None

    def path(self, rel: str) -> Path:
        return self.out / rel

    def require(self, rel: str, producer: str) -> Path:
        return self.manifest.require(self.path(rel), producer)

    def record(self, rel: str, kind: str, inputs: Sequence[str] = ()) -> None:
        self.manifest.record(self.run_id, self.path(rel), kind, self.command, [self.path(i) for i in inputs])

    @property
    def density(self) -> MixtureDensity:
        if self._density is None:
            self._density = density_from_spec(self.config.dataset)
        return self._density

    def data(self) -> np.ndarray:
        if self._data is None:
            self._data = read_dataset(self.require(DATASET, "dataset gen"))
        return self._data

    def energy_model(self) -> EnergyModel:
        if self._model is None:
            path = self.require(EBM_CKPT, "ebm train")
            model = load_checkpoint(path, expect=EnergyModel(dim=self.data().shape[1]).descriptor())
            model.freeze()
            self._model = model
        return self._model

    def calibration_sets(self) -> CalibrationSets:
        mc = self.config.metrics
        return build_calibration_sets(self.data(), mc.calibration_pairs, mc.calibration_seed, mc.g_min, mc.g_max)

    def load_metric(self, name: str) -> MetricField:
        """Rebuild a calibrated metric from its descriptor JSON."""
        if name == "euclidean":
            return euclidean_metric()
        path = self.require(metric_path(name), "metric calibrate")
        desc = MetricDescriptor.model_validate_json(path.read_text())
        model = self.energy_model() if name in EBM_METRICS else None
        return metric_from_descriptor(desc, density=self.density, data=self.data(), model=model)

    def metric_inputs(self, name: str) -> List[str]:
        if name == "euclidean":
            return []
        inputs = [metric_path(name), DATASET]
        if name in EBM_METRICS:
            inputs.append(EBM_CKPT)
        return inputs


# ---------------------------------------------------------------------------
# dataset / ebm
# ---------------------------------------------------------------------------


def dataset_gen(ctx: Context) -> None:
    spec = ctx.config.dataset
    d = ctx.density
    points = d.sample(spec.n_samples, spec.seed)
    write_dataset(ctx.path(DATASET), points)
    ctx.record(DATASET, "dataset")
    logger.info(f"📦 Sampled {spec.n_samples} points from {d.name} (K={d.K})")


def ebm_train(ctx: Context) -> None:
    data = ctx.data()
    model, log = train_ebm(
        data,
        ctx.config.ebm,
        ctx.config.langevin,
        log_path=ctx.path(EBM_LOG),
        checkpoint_path=ctx.path(EBM_CKPT),
    )
    save_checkpoint(model, ctx.path(EBM_CKPT), ctx.config.ebm.seed, {"steps": ctx.config.ebm.steps})
    ctx.record(EBM_CKPT, "checkpoint", [DATASET])
    ctx.record(EBM_LOG, "training_log", [DATASET])

    plot = ctx.config.plot
    r = grid_correlation(model, ctx.density, n=100, box=plot.box)
    logger.info(f"📈 Energy vs -log p correlation on the grid: r = {r:.4f}")
    summary = {
        "grid_correlation": r,
        "final_cd_loss": float(log["cd_loss"].iloc[-1]) if len(log) else None,
        "steps": ctx.config.ebm.steps,
    }
    ctx.path(EBM_SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    ctx.record(EBM_SUMMARY, "summary", [EBM_CKPT])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _write_rbf(ctx: Context, model: RbfModel) -> None:
    ctx.path(RBF_MODEL).parent.mkdir(parents=True, exist_ok=True)
    ctx.path(RBF_MODEL).write_text(json.dumps(RbfField(model).hyper(), indent=2) + "\n")


def _read_rbf(ctx: Context) -> RbfModel:
    hyper = json.loads(ctx.require(RBF_MODEL, "metric fit").read_text())
    return RbfModel(hyper["centers"], hyper["bandwidths"], hyper["weights"], hyper["kappa"])


def metric_fit(ctx: Context) -> None:
    mc = ctx.config.metrics
    if "rbf" not in mc.selection:
        logger.info("ℹ️  rbf not selected; nothing to fit")
        return
    model = fit_rbf(ctx.data(), mc.rbf_k, mc.rbf_kappa, seed=ctx.config.seed, bandwidth=mc.rbf_bandwidth)
    _write_rbf(ctx, model)
    ctx.record(RBF_MODEL, "rbf_model", [DATASET])


def build_metric(ctx: Context, name: str, sets: CalibrationSets) -> tuple[MetricField, List[str]]:
    """Calibrated metric plus the artifacts it was built from."""
    mc = ctx.config.metrics
    if name == "energy_ebm":
        return ebm_energy_metric(ctx.energy_model(), sets), [DATASET, EBM_CKPT]
    if name == "inv_density_ebm":
        return ebm_inverse_density_metric(ctx.energy_model(), sets), [DATASET, EBM_CKPT]
    if name == "energy_oracle":
        return oracle_metrics(ctx.density, sets)[0], [DATASET]
    if name == "inv_density_oracle":
        return oracle_metrics(ctx.density, sets)[1], [DATASET]
    if name == "land":
        return land_metric(ctx.data(), mc.land_sigma, sets), [DATASET]
    if name == "rbf":
        return rbf_metric(_read_rbf(ctx), sets), [DATASET, RBF_MODEL]
    raise ConfigError(f"metrics.selection: {name!r} cannot be calibrated")


def metric_calibrate(ctx: Context) -> None:
    sets = ctx.calibration_sets()
    for name in ctx.config.metrics.selection:
        if name == "euclidean":
            continue
        m, inputs = build_metric(ctx, name, sets)
        m.provenance = {"dataset": ctx.config.dataset.variant, "calibration_seed": str(ctx.config.metrics.calibration_seed)}
        rel = metric_path(name)
        ctx.path(rel).parent.mkdir(parents=True, exist_ok=True)
        ctx.path(rel).write_text(m.descriptor().model_dump_json(indent=2) + "\n")
        ctx.record(rel, "metric", inputs)


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------


def _selected(ctx: Context) -> List[str]:
    only = ctx.options.get("metric")
    return [str(only)] if only else list(ctx.config.metrics.selection)


def geodesic_train(ctx: Context) -> None:
    cfg = ctx.config.interpolant
    for k, name in enumerate(_selected(ctx)):
        if name in ORACLE_NAMES:
            logger.info(f"⏭️  {name}: oracle metric, no interpolant to train")
            continue
        m = ctx.load_metric(name)
        seed = derive_seed(cfg.seed, k)
        net = InterpolantNet(dim=ctx.data().shape[1], seed=seed)
        sampler = DatasetPairSampler(ctx.data(), seed)
        loss_rel = f"interpolants/{name}_loss.csv"
        train_interpolant(sampler, net, m, cfg, log_path=ctx.path(loss_rel))
        save_checkpoint(net, ctx.path(interpolant_path(name)), seed, {"metric": name, "T": cfg.T})
        inputs = ctx.metric_inputs(name) or [DATASET]
        ctx.record(interpolant_path(name), "checkpoint", inputs)
        ctx.record(loss_rel, "training_log", inputs)
        if m.clamped:
            logger.warning(f"⚠️  {name}: {m.clamped} metric values clamped during training")


def _plot_pairs(ctx: Context) -> tuple[np.ndarray, np.ndarray]:
    """The first `plot.paths` pairs of the first evaluation set."""
    ev = ctx.config.eval
    x0, x1 = sample_pair_sets(ctx.data(), 1, ev.pairs_per_set, ev.seed)[0]
    n = min(ctx.config.plot.paths, len(x0))
    return x0[:n], x1[:n]


def geodesic_solve(ctx: Context) -> None:
    wp = ctx.config.waypoint
    x0, x1 = _plot_pairs(ctx)
    for name in _selected(ctx):
        m = ctx.load_metric(name)
        paths, _ = optimize_waypoints_batch(x0, x1, m, wp.T, wp.steps, wp.initial_step, wp.tol)
        rel = f"paths/waypoint_{name}.csv"
        write_csv(ctx.path(rel), paths_to_frame(paths))
        ctx.record(rel, "paths", ctx.metric_inputs(name) or [DATASET])


def geodesic_shoot(ctx: Context) -> None:
    """Shooting on the uncalibrated 1/p metric of the analytic density, one pair per worker."""
    cfg = ctx.config.shooting
    x0, x1 = _plot_pairs(ctx)

    def solve(k: int):
        try:
            return shoot_geodesic(x0[k], x1[k], ctx.density, cfg.T, cfg)
        except ShootingError as e:
            logger.warning(f"⚠️  Pair {k}: {e.detail}")
            return None

    with ThreadPoolExecutor(max_workers=settings.WORKERS) as pool:
        results = list(pool.map(solve, range(len(x0))))
    kept = [(k, p) for k, p in enumerate(results) if p is not None]
    if not kept:
        raise ShootingError("shooting failed for every pair; use `geodesic solve` instead")
    write_csv(ctx.path(SHOOT_PATHS), paths_to_frame([p for _, p in kept], [k for k, _ in kept]))
    ctx.record(SHOOT_PATHS, "paths", [DATASET])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _solver(ctx: Context, names: Sequence[str]) -> tuple[Callable, str, List[str]]:
    ev, wp = ctx.config.eval, ctx.config.waypoint

    def waypoint(m: MetricField, x0: np.ndarray, x1: np.ndarray):
        return optimize_waypoints_batch(x0, x1, m, wp.T, wp.steps, wp.initial_step, wp.tol)[0]

    if ev.solver == "waypoint":
        return waypoint, "waypoint", []

    if ctx.config.interpolant.T != wp.T:
        raise ConfigError(
            f"interpolant.T ({ctx.config.interpolant.T}) must equal waypoint.T ({wp.T}) so paths compare point by point"
        )
    nets: Dict[str, InterpolantNet] = {}
    inputs: List[str] = []
    for name in names:
        if name in ORACLE_NAMES:
            continue
        rel = interpolant_path(name)
        nets[name] = load_checkpoint(ctx.require(rel, "geodesic train"))
        inputs.append(rel)

    def interpolant(m: MetricField, x0: np.ndarray, x1: np.ndarray):
        return predict_paths(nets[m.name], x0, x1, ctx.config.interpolant.T)

    return interpolant, "interpolant", inputs


def _eval_inputs(ctx: Context, names: Sequence[str]) -> List[str]:
    inputs = [DATASET]
    for name in names:
        inputs += [i for i in ctx.metric_inputs(name) if i not in inputs]
    return inputs


def eval_run(ctx: Context) -> None:
    ev, wp = ctx.config.eval, ctx.config.waypoint
    names = _selected(ctx)
    if not names:
        raise ConfigError("metrics.selection is empty; the report would have no rows")
    solve, solver_name, net_inputs = _solver(ctx, names)
    metrics = [ctx.load_metric(n) for n in names]
    oracles = oracle_metrics(ctx.density, ctx.calibration_sets())

    def oracle_solve(m: MetricField, x0: np.ndarray, x1: np.ndarray):
        return optimize_waypoints_batch(x0, x1, m, wp.T, wp.steps, wp.initial_step, wp.tol)[0]

    pair_sets = sample_pair_sets(ctx.data(), ev.n_sets, ev.pairs_per_set, ev.seed)
    report, solved = run_eval_suite(
        metrics,
        pair_sets,
        ctx.density,
        solve,
        oracles,
        oracle_solve,
        dataset=ctx.config.dataset.variant,
        solver_name=solver_name,
        data=ctx.data(),
        T=wp.T,
    )
    inputs = _eval_inputs(ctx, names) + net_inputs

    write_csv(ctx.path(EVAL_REPORT), report_frame(report))
    ctx.record(EVAL_REPORT, "report", inputs)
    table = format_table(report)
    ctx.path(EVAL_TABLE).write_text(table + "\n")
    ctx.record(EVAL_TABLE, "table", inputs)
    logger.info(f"📊 Evaluation\n{table}")

    first_set = {name: sets[0] for name, sets in solved.items()}
    write_csv(ctx.path(EVAL_PROFILES), profile_frame(first_set))
    ctx.record(EVAL_PROFILES, "profiles", inputs)
    for name, ratio in step_ratios(first_set).items():
        logger.info(f"📏 {name}: mean max/min step ratio {ratio:.3f}")

    n = ctx.config.plot.paths
    for name, paths in first_set.items():
        kept = [(k, p) for k, p in enumerate(paths[:n]) if p is not None]
        if not kept:
            continue
        rel = eval_paths_path(name)
        write_csv(ctx.path(rel), paths_to_frame([p for _, p in kept], [k for k, _ in kept]))
        ctx.record(rel, "paths", inputs)


SWEEP_COLUMNS = ["family", "value", "acc_prob_mean", "acc_prob_2sig", "rmse_mean", "rmse_2sig", "skipped", "clamped"]


def eval_sweep(ctx: Context) -> None:
    """Refit, recalibrate and re-evaluate LAND over sigma or RBF over K with waypoint geodesics."""
    family = str(ctx.options.get("family") or "land")
    mc, ev, wp = ctx.config.metrics, ctx.config.eval, ctx.config.waypoint
    data = ctx.data()
    sets = ctx.calibration_sets()
    oracle = oracle_metrics(ctx.density, sets)[1]
    pair_sets = sample_pair_sets(data, ev.n_sets, ev.pairs_per_set, ev.seed)

    def waypoint(m: MetricField, x0: np.ndarray, x1: np.ndarray):
        return optimize_waypoints_batch(x0, x1, m, wp.T, wp.steps, wp.initial_step, wp.tol)[0]

    if family == "land":
        values: Sequence[float] = mc.land_sigma_sweep
        build = lambda v: land_metric(data, float(v), sets)  # noqa: E731
    elif family == "rbf":
        values = mc.rbf_k_sweep
        build = lambda v: rbf_metric(  # noqa: E731
            fit_rbf(data, int(v), mc.rbf_kappa, seed=ctx.config.seed, bandwidth=mc.rbf_bandwidth), sets
        )
    else:
        raise ConfigError(f"--family must be land or rbf, got {family!r}")

    rows = []
    for v in values:
        m = build(v)
        report, _ = run_eval_suite(
            [m], pair_sets, ctx.density, waypoint, (oracle,), waypoint,
            dataset=ctx.config.dataset.variant, solver_name="waypoint", include_linear=False, T=wp.T,
        )
        r = report.rows[0]
        rows.append([family, v, r.acc_prob_mean, r.acc_prob_2sig, r.rmse_mean, r.rmse_2sig, r.skipped, r.clamped])
        logger.info(f"🔁 {family}={v}: acc {r.acc_prob_mean:.4f}, rmse {r.rmse_mean:.4f}")
    rel = f"eval/sweep_{family}.csv"
    write_csv(ctx.path(rel), pd.DataFrame(rows, columns=SWEEP_COLUMNS))
    ctx.record(rel, "sweep", [DATASET])


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def plot_fig1_cmd(ctx: Context) -> None:
    plot = ctx.config.plot
    by_metric: Dict[str, list] = {}
    inputs: List[str] = []
    for name in list(ctx.config.metrics.selection) + ["linear"]:
        rel = eval_paths_path(name)
        if not ctx.path(rel).exists():
            continue
        paths = frame_to_paths(read_csv(ctx.path(rel)))
        by_metric[name] = [paths[k] for k in sorted(paths)]
        inputs.append(rel)
    if not by_metric:
        raise MissingArtifactError("eval/paths_<metric>.csv", "eval run")
    rel = "figures/fig1.svg"
    plot_fig1(ctx.density, by_metric, ctx.path(rel), plot.grid, plot.box, plot.levels)
    ctx.record(rel, "figure", inputs)


def plot_fig2_cmd(ctx: Context) -> None:
    profiles = read_csv(ctx.require(EVAL_PROFILES, "eval run"))
    rel = "figures/fig2.svg"
    plot_fig2(profiles, ctx.path(rel))
    ctx.record(rel, "figure", [EVAL_PROFILES])


def plot_energy_cmd(ctx: Context) -> None:
    plot = ctx.config.plot
    model = ctx.energy_model()
    _, _, pts = grid_points(plot.grid, plot.box)
    values = energies(model, pts).reshape(plot.grid, plot.grid)
    rel = "figures/energy.svg"
    plot_energy(values, ctx.density, ctx.path(rel), plot.box, plot.levels)
    ctx.record(rel, "figure", [EBM_CKPT])


COMMANDS: Dict[str, Dict[str, Callable[[Context], None]]] = {
    "dataset": {"gen": dataset_gen},
    "ebm": {"train": ebm_train},
    "metric": {"fit": metric_fit, "calibrate": metric_calibrate},
    "geodesic": {"train": geodesic_train, "solve": geodesic_solve, "shoot": geodesic_shoot},
    "eval": {"run": eval_run, "sweep": eval_sweep},
    "plot": {"fig1": plot_fig1_cmd, "fig2": plot_fig2_cmd, "energy": plot_energy_cmd},
}


def run_command(
    group: str,
    name: str,
    config: RunConfig,
    out: Optional[str] = None,
    options: Optional[Dict[str, object]] = None,
) -> Path:
    """Run one pipeline command; returns the run directory."""
    try:
        handler = COMMANDS[group][name]
    except KeyError:
        raise GeometryError(f"unknown command: {group} {name}", exit_code=2)
    out_dir = resolve_output_dir(config, out)
    manifest = ManifestService(out_dir)
    command = f"{group} {name}"
    try:
        ctx = Context(config=config, out=out_dir, manifest=manifest, command=command, options=dict(options or {}))
        ctx.run_id = manifest.start_run(command, config, config.seed)
        ctx.path(CONFIG_SNAPSHOT).write_text(config.model_dump_json(indent=2) + "\n")
        ctx.record(CONFIG_SNAPSHOT, "config")
        handler(ctx)
        logger.info(f"✅ {command} finished in {out_dir}")
    finally:
        manifest.close()
    return out_dir
