"""
Metric zoo tests: field gradients, calibration, clamping, RBF fitting, persistence
"""
import numpy as np
import pytest

from app import diffcore as dc
from app.densities import MixtureDensity, ucg_density
from app.diffcore import GradientTape, Tensor, no_grad
from app.errors import CalibrationError
from app.metrics import (
    CalibrationSets,
    ConstantField,
    EnergyField,
    LandField,
    LandModel,
    MetricField,
    MixtureDensityField,
    MixtureLogField,
    RbfField,
    RbfModel,
    build_calibration_sets,
    calibrate,
    ebm_energy_metric,
    ebm_inverse_density_metric,
    eval_metric,
    fit_rbf,
    inverse_density_metric,
    land_h,
    land_metric,
    metric_from_descriptor,
    oracle_metrics,
    rbf_metric,
)
from app.nets import EnergyModel
from app.schemas import MetricDescriptor


@pytest.fixture(scope="module")
def ucg():
    return ucg_density()


@pytest.fixture(scope="module")
def data(ucg):
    return ucg.sample(600, seed=1)


@pytest.fixture(scope="module")
def sets(data):
    return build_calibration_sets(data, 200, seed=2)


@pytest.fixture(scope="module")
def energy_model():
    return EnergyModel(seed=4).freeze()


@pytest.fixture(scope="module")
def rbf_model(data):
    return fit_rbf(data, K=10, kappa=1.0, seed=0)


@pytest.fixture(scope="module")
def calibrated(ucg, data, sets, energy_model, rbf_model):
    energy_oracle, inv_oracle = oracle_metrics(ucg, sets)
    return {
        "energy_ebm": ebm_energy_metric(energy_model, sets),
        "inv_density_ebm": ebm_inverse_density_metric(energy_model, sets),
        "energy_oracle": energy_oracle,
        "inv_density_oracle": inv_oracle,
        "land": land_metric(data, 1.0, sets),
        "rbf": rbf_metric(rbf_model, sets),
    }


def _field_fd_error(field, x, rng, n_dirs=100, h=1e-6):
    with GradientTape() as tape:
        xt = Tensor(x, requires_grad=True)
        (g,) = tape.gradient(dc.sum(field.tensor(xt)), [xt])
    worst = 0.0
    for _ in range(n_dirs):
        u = rng.standard_normal(x.shape)
        fd = (field.values(x + h * u).sum() - field.values(x - h * u).sum()) / (2 * h)
        an = float((g * u).sum())
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-3))
    return worst


class TestFieldGradients:
    """Analytic and network field gradients against finite differences"""

    @pytest.mark.unit
    @pytest.mark.parametrize("name", ["mixture_log", "mixture_density", "land", "rbf", "energy", "energy_density"])
    def test_field_vjp(self, name, ucg, data, energy_model, rbf_model):
        """Each raw field's tape gradient matches central differences"""
        field = {
            "mixture_log": lambda: MixtureLogField(ucg),
            "mixture_density": lambda: MixtureDensityField(ucg),
            "land": lambda: LandField(LandModel(data, 1.0)),
            "rbf": lambda: RbfField(rbf_model),
            "energy": lambda: EnergyField(energy_model),
            "energy_density": lambda: EnergyField(energy_model, unnormalized_density=True),
        }[name]()
        x = data[:12] + 0.3
        scale = 1.0 / max(np.abs(field.values(x)).max(), 1e-300)
        rng = np.random.default_rng(7)

        class Scaled:
            def tensor(self, t):
                return field.tensor(t) * scale

            def values(self, y):
                return field.values(y) * scale

        assert _field_fd_error(Scaled(), x, rng) <= 1e-5

    @pytest.mark.unit
    def test_inverse_metric_tensor_gradient(self, ucg, data):
        """Gradient through the reciprocal of the uncalibrated 1/p metric"""
        m = inverse_density_metric(ucg)
        x = data[:10]

        class Log:
            def tensor(self, t):
                return dc.log(m.tensor(t))

            def values(self, y):
                return np.log(m.evaluate(y))

        assert _field_fd_error(Log(), x, np.random.default_rng(3)) <= 1e-5
        assert m.clamped == 0


class TestCalibration:
    """Affine calibration onto g_min / g_max"""

    @pytest.mark.unit
    @pytest.mark.parametrize(
        "name", ["energy_ebm", "inv_density_ebm", "energy_oracle", "inv_density_oracle", "land", "rbf"]
    )
    def test_set_means_hit_targets(self, name, calibrated, sets):
        """Direct forms average to g_min / g_max; inverse forms to 1/g_min / 1/g_max before inversion"""
        m = calibrated[name]
        on = m.pre_inverse(sets.on_manifold).mean()
        off = m.pre_inverse(sets.off_manifold).mean()
        lo, hi = (1.0, 1000.0) if m.form == "direct" else (1.0, 1e-3)
        assert on == pytest.approx(lo, rel=1e-9)
        assert off == pytest.approx(hi, rel=1e-9)

    @pytest.mark.unit
    def test_forms_and_kinds(self, calibrated):
        """Energy metrics are direct, density-based ones inverse; only LAND is diagonal"""
        assert calibrated["energy_ebm"].form == "direct"
        assert calibrated["energy_oracle"].form == "direct"
        for name in ("inv_density_ebm", "inv_density_oracle", "land", "rbf"):
            assert calibrated[name].form == "inverse"
        assert calibrated["land"].kind == "diagonal"
        assert calibrated["rbf"].kind == "conformal"

    @pytest.mark.unit
    def test_degenerate_sets_raise(self):
        """A field that does not separate the sets cannot be calibrated"""
        sets = CalibrationSets(np.zeros((4, 2)), np.ones((4, 2)))
        with pytest.raises(CalibrationError):
            calibrate(ConstantField(2.0).values, sets, "direct")

    @pytest.mark.unit
    def test_empty_sets_raise(self):
        """Both calibration sets must be non-empty"""
        with pytest.raises(CalibrationError):
            CalibrationSets(np.zeros((0, 2)), np.ones((3, 2)))


class TestMetricField:
    """Clamping, inner products and rescaling"""

    @pytest.mark.unit
    def test_clamps_are_floored_and_counted(self):
        """Affine values below eps are floored and each hit counted"""
        m = MetricField("neg", ConstantField(1.0), "direct", alpha=1.0, beta=-2.0, eps=1e-6)
        np.testing.assert_array_equal(m.evaluate(np.zeros((3, 2))), np.full(3, 1e-6))
        assert m.clamped == 3
        m.reset_clamp_count()
        assert m.clamped == 0

    @pytest.mark.unit
    def test_inner_product_conformal_and_diagonal(self, data):
        """Conformal: lambda |v|^2; diagonal: sum lambda_j v_j^2"""
        x, v = data[:5], np.random.default_rng(0).normal(size=(5, 2))
        m = MetricField("c", ConstantField(3.0), "direct")
        with no_grad():
            np.testing.assert_allclose(m.inner(Tensor(x), Tensor(v)).data, 3.0 * (v**2).sum(axis=1))
            land = land_metric(data, 1.0)
            lam = land.evaluate(x)
            np.testing.assert_allclose(land.inner(Tensor(x), Tensor(v)).data, (lam * v**2).sum(axis=1))

    @pytest.mark.unit
    def test_rescaled_scales_metric(self, calibrated, data):
        """rescaled(c) multiplies every metric entry by c"""
        for name in ("energy_oracle", "inv_density_oracle", "land"):
            m = calibrated[name]
            x = data[:20]
            np.testing.assert_allclose(m.rescaled(4.0).evaluate(x), 4.0 * m.evaluate(x), rtol=1e-12)


class TestRbf:
    """K-means RBF fit"""

    @pytest.mark.unit
    def test_fit_shapes_and_signs(self, rbf_model, data):
        """K centroids, positive bandwidths, nonnegative weights, h near 1 on the data"""
        assert rbf_model.centers.shape == (10, 2)
        assert np.all(rbf_model.bandwidths > 0)
        assert np.all(rbf_model.weights >= 0)
        assert 0.5 < rbf_model.h(data).mean() < 1.5

    @pytest.mark.unit
    def test_centroid_bandwidths(self, rbf_model):
        """lambda_k = 1/2 (kappa/(2K) sum_j |c_j - c_k|)^-2"""
        c = rbf_model.centers
        scale = np.linalg.norm(c[:, None] - c[None], axis=-1).sum(axis=1) / (2.0 * 10)
        np.testing.assert_allclose(rbf_model.bandwidths, 0.5 / scale**2, rtol=1e-12)

    @pytest.mark.unit
    def test_fit_is_deterministic(self, data, rbf_model):
        """Same data and seed give the same centroids"""
        np.testing.assert_array_equal(fit_rbf(data, K=10, kappa=1.0, seed=0).centers, rbf_model.centers)

    @pytest.mark.unit
    def test_k_larger_than_data_rejected(self, data):
        """K cannot exceed the number of data points"""
        with pytest.raises(ValueError):
            fit_rbf(data[:5], K=10)


class TestDescriptors:
    """Metric persistence"""

    @pytest.mark.unit
    @pytest.mark.parametrize("name", ["energy_ebm", "inv_density_ebm", "energy_oracle", "inv_density_oracle", "land", "rbf"])
    def test_descriptor_roundtrip(self, name, calibrated, ucg, data, energy_model):
        """A metric rebuilt from its JSON descriptor evaluates identically"""
        m = calibrated[name]
        desc = MetricDescriptor.model_validate_json(m.descriptor().model_dump_json())
        rebuilt = metric_from_descriptor(desc, density=ucg, data=data, model=energy_model)
        x = data[:25] + 0.5
        np.testing.assert_array_equal(rebuilt.evaluate(x), m.evaluate(x))
        assert (rebuilt.form, rebuilt.kind) == (m.form, m.kind)


class ConstantEnergy:
    """Stand-in energy model returning the same value everywhere."""

    def __init__(self, value):
        self.value = value

    def energy(self, x):
        return Tensor(np.full(x.shape[0], self.value))

    def descriptor(self):
        return {"arch": "constant", "value": self.value}


class TestEvalMetric:
    """Worked substitutions into the conformal EBM metrics"""

    @pytest.mark.unit
    def test_energy_metric_substitution(self):
        """alpha = 1, beta = 0, E = 5 gives lambda = 5"""
        m = ebm_energy_metric(ConstantEnergy(5.0))
        assert (m.alpha, m.beta) == (1.0, 0.0)
        assert eval_metric(m, np.array([0.3, -1.0])) == pytest.approx(5.0)

    @pytest.mark.unit
    def test_inverse_density_metric_substitution(self):
        """alpha = 1, beta = 1, E = 0 gives lambda = (1 + 1)^-1 = 0.5"""
        m = MetricField("inv_density_ebm", EnergyField(ConstantEnergy(0.0), unnormalized_density=True), "inverse", 1.0, 1.0)
        np.testing.assert_allclose(eval_metric(m, np.zeros((3, 2))), 0.5)
        assert m.clamped == 0


class TestLand:
    """Per-coordinate weighted variance"""

    @pytest.mark.unit
    def test_single_reference_point(self):
        """x1 = (1, 0), sigma = 1, query 0: h = (exp(-1/2), 0)"""
        h = land_h(LandModel(np.array([[1.0, 0.0]]), 1.0), np.zeros(2))
        np.testing.assert_allclose(h, [np.exp(-0.5), 0.0], rtol=1e-15, atol=0)

    @pytest.mark.unit
    def test_query_at_lone_reference_point(self):
        """h vanishes on top of a lone reference point"""
        np.testing.assert_array_equal(land_h(LandModel(np.array([[2.0, -3.0]]), 1.0), np.array([2.0, -3.0])), [0.0, 0.0])

    @pytest.mark.unit
    def test_two_symmetric_reference_points(self):
        """(+-1, 0), sigma = 1, query 0: h = (2 exp(-1/2), 0)"""
        h = land_h(LandModel(np.array([[1.0, 0.0], [-1.0, 0.0]]), 1.0), np.zeros(2))
        np.testing.assert_allclose(h, [2.0 * np.exp(-0.5), 0.0], rtol=1e-15, atol=0)

    @pytest.mark.unit
    def test_reference_order_does_not_matter(self, data):
        """Permuting the reference set leaves h unchanged"""
        perm = np.random.default_rng(8).permutation(len(data))
        q = data[:30] + 0.25
        np.testing.assert_allclose(land_h(LandModel(data[perm], 1.0), q), land_h(LandModel(data, 1.0), q), rtol=1e-12)


class TestCalibrationArithmetic:
    """Closed-form alpha / beta"""

    @pytest.fixture
    def two_level_sets(self):
        return CalibrationSets(np.zeros((3, 2)), np.ones((4, 2)))

    @pytest.mark.unit
    def test_direct_form(self, two_level_sets):
        """Means 2 and 10 onto 1 and 1000: alpha = 124.875, beta = -248.75"""
        alpha, beta = calibrate(lambda x: np.where(x[:, 0] == 0, 2.0, 10.0), two_level_sets, "direct")
        assert alpha == pytest.approx(124.875, rel=1e-15)
        assert beta == pytest.approx(-248.75, rel=1e-15)

    @pytest.mark.unit
    def test_inverse_form(self, two_level_sets):
        """Means 10 and 0 onto 1 and 1/1000: alpha = 0.0999, beta = 0.001"""
        alpha, beta = calibrate(lambda x: np.where(x[:, 0] == 0, 10.0, 0.0), two_level_sets, "inverse")
        assert alpha == pytest.approx(0.0999, rel=1e-12)
        assert beta == pytest.approx(0.001, rel=1e-9)

    @pytest.mark.unit
    @pytest.mark.parametrize("name", ["energy_oracle", "inv_density_oracle", "land"])
    def test_recalibration_is_idempotent(self, name, calibrated, sets):
        """Calibrating a calibrated metric again with the same sets reproduces alpha and beta"""
        m = calibrated[name]
        again = m.calibrated(sets)
        assert again.alpha == pytest.approx(m.alpha, rel=1e-12)
        assert again.beta == pytest.approx(m.beta, rel=1e-12, abs=1e-15)


class TestRbfExamples:
    """Worked RBF cases"""

    @pytest.mark.unit
    def test_single_cluster_centroid_is_the_mean(self):
        """K = 1 on data symmetric about the origin puts the centroid at the origin"""
        half = np.random.default_rng(4).normal(size=(100, 2))
        model = fit_rbf(np.concatenate([half, -half]), K=1, seed=0)
        np.testing.assert_allclose(model.centers[0], [0.0, 0.0], atol=1e-12)

    @pytest.mark.unit
    def test_kernel_at_its_center(self):
        """One centroid at the origin with w = 1, lambda = 1 gives h(0) = 1"""
        assert RbfModel(np.zeros((1, 2)), np.ones(1), np.ones(1)).h(np.zeros(2))[0] == 1.0

    @pytest.mark.unit
    def test_vanishes_far_away(self, rbf_model):
        """h underflows at radius 10^6, so the inverse metric plateaus at 1 / beta"""
        far = np.array([[1e6, 0.0], [0.0, -1e6], [-7e5, 7e5]])
        assert np.all(rbf_model.h(far) <= 1e-300)

    @pytest.mark.unit
    def test_ucg_fit_is_close_to_one_on_data(self, ucg):
        """K = 30, kappa = 1 on UCG: mean |h - 1| over the data is at most 0.15"""
        x = ucg.sample(2000, seed=9)
        model = fit_rbf(x, K=30, kappa=1.0, seed=0)
        assert np.abs(model.h(x) - 1.0).mean() <= 0.15


class TestOracleShapes:
    """Qualitative behaviour of the closed-form metrics"""

    @pytest.mark.unit
    def test_entries_positive_and_clamps_counted(self, calibrated, data):
        """Over 10^5 points in the inflated box every entry is positive and finite, and every clamp is counted"""
        lo, hi = data.min(axis=0), data.max(axis=0)
        pad = 0.1 * (hi - lo)
        x = np.random.default_rng(10).uniform(lo - pad, hi + pad, size=(100_000, 2))
        for name, m in calibrated.items():
            m.reset_clamp_count()
            lam = m.evaluate(x)
            assert np.all(np.isfinite(lam)) and np.all(lam > 0), name
            assert m.clamped == int(np.count_nonzero(m.pre_inverse(x) < m.eps)), name
            m.reset_clamp_count()

    @pytest.mark.unit
    def test_energy_oracle_grows_along_an_outward_ray(self, ucg, sets):
        """-log p and the calibrated G_E_M both increase moving radially off the arc"""
        ray = np.stack([np.zeros(40), np.linspace(8.0, 14.0, 40)], axis=1)
        raw, calibrated_energy = oracle_metrics(ucg)[0], oracle_metrics(ucg, sets)[0]
        assert np.all(np.diff(raw.evaluate(ray)) > 0)
        assert calibrated_energy.alpha > 0
        assert np.all(np.diff(calibrated_energy.evaluate(ray)) >= 0)

    @pytest.mark.unit
    def test_single_gaussian_is_rotation_invariant(self):
        """With one Gaussian the oracles take equal values at equal radius"""
        d = MixtureDensity(np.zeros((1, 2)), np.ones(1))
        angles = np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False)
        ring = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        for m in oracle_metrics(d):
            lam = m.evaluate(ring)
            np.testing.assert_allclose(lam, lam[0], rtol=1e-12)
