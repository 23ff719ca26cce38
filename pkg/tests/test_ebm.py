"""
Energy-based model training tests
"""
import numpy as np
import pytest

import app.ebm as ebm_module
from app import diffcore as dc
from app.densities import ucg_density
from app.diffcore import GradientTape, Tensor
from app.ebm import LOG_COLUMNS, ReplayBuffer, cd_loss, cd_loss_terms, energies, grid_correlation, train_ebm
from app.errors import BackwardError, DivergenceError
from app.nets import EnergyModel, read_checkpoint
from app.schemas import EbmTrainConfig, LangevinConfig


@pytest.fixture(scope="module")
def ucg():
    return ucg_density()


@pytest.fixture(scope="module")
def data(ucg):
    return ucg.sample(500, seed=0)


@pytest.fixture
def quick():
    return EbmTrainConfig(batch_size=16, steps=3, log_every=1), LangevinConfig(steps=3)


class TestReplayBuffer:
    """Bounded replay buffer"""

    @pytest.mark.unit
    def test_fifo_eviction(self):
        """Once full, the oldest entries are overwritten first"""
        buf = ReplayBuffer(capacity=3, dim=1)
        buf.add(np.array([[0.0], [1.0]]))
        buf.add(np.array([[2.0], [3.0]]))
        assert len(buf) == 3
        held = set(buf.sample(200, np.random.default_rng(0)).ravel().tolist())
        assert held == {1.0, 2.0, 3.0}

    @pytest.mark.unit
    def test_empty_buffer_cannot_be_sampled(self):
        """Drawing from an empty buffer is an error"""
        with pytest.raises(ValueError):
            ReplayBuffer(4, 2).sample(1, np.random.default_rng(0))


class TestContrastiveLoss:
    """Contrastive divergence objective"""

    @pytest.mark.unit
    def test_loss_value(self, data):
        """Loss equals the CD difference plus the weighted energy-squared term"""
        model = EnergyModel(seed=1)
        x_neg = np.random.default_rng(2).uniform(-10, 10, size=(32, 2))
        loss, stats = cd_loss_terms(model, data[:32], x_neg, reg_weight=0.5)
        e_pos, e_neg = model(Tensor(data[:32])).data, model(Tensor(x_neg)).data
        expected = e_pos.mean() - e_neg.mean() + 0.5 * ((e_pos**2).mean() + (e_neg**2).mean())
        assert abs(float(loss.data) - expected) < 1e-12
        assert abs(stats.mean_E_pos - e_pos.mean()) < 1e-12

    @pytest.mark.unit
    def test_negatives_must_be_detached(self, data):
        """A negative batch still attached to a graph is rejected"""
        model = EnergyModel(seed=1)
        with GradientTape():
            x_neg = Tensor(data[:4], requires_grad=True)
            with pytest.raises(BackwardError):
                cd_loss(model, data[:4], x_neg, 1.0)

    @pytest.mark.unit
    def test_gradient_reaches_every_parameter(self, data):
        """Every network parameter receives a gradient"""
        model = EnergyModel(seed=1)
        with GradientTape() as tape:
            loss = cd_loss(model, data[:8], data[8:16] + 3.0, 1.0)
            tape.backward(loss)
        assert all(p.grad is not None and p.grad.shape == p.data.shape for p in model.parameters())

    @pytest.mark.unit
    def test_identical_batches_leave_only_the_regulariser(self, data):
        """x+ = x- cancels the contrastive term"""
        model = EnergyModel(seed=1)
        x = data[:32]
        loss, stats = cd_loss_terms(model, x, x.copy(), reg_weight=0.7)
        e = model(Tensor(x)).data
        assert stats.cd_loss == 0.0
        assert float(loss.data) == pytest.approx(0.7 * 2.0 * (e**2).mean(), rel=1e-12)

    @pytest.mark.unit
    def test_zero_energy_model_has_zero_loss(self, data):
        """Zeroed heads give E = 0 and therefore a zero loss"""
        model = EnergyModel(seed=1, zero_heads=True)
        assert float(cd_loss(model, data[:16], data[16:32] + 5.0, 1.0).data) == 0.0

    @pytest.mark.unit
    def test_linear_energy_gradient(self, data):
        """E(x) = theta . x: the parameter gradient is analytic and matches central differences"""

        class LinearEnergy:
            def __init__(self, theta):
                self.theta = Tensor(np.asarray(theta, dtype=np.float64).reshape(2, 1), requires_grad=True)

            def energy(self, x):
                return dc.reshape(x @ self.theta, (x.shape[0],))

        x_pos, x_neg, reg = data[:40], np.random.default_rng(3).uniform(-10, 10, size=(40, 2)), 0.3
        theta = np.array([0.2, -0.1])
        model = LinearEnergy(theta)
        with GradientTape() as tape:
            (g,) = tape.gradient(cd_loss(model, x_pos, x_neg, reg), [model.theta])
        e_pos, e_neg = x_pos @ theta, x_neg @ theta
        analytic = (
            x_pos.mean(axis=0) - x_neg.mean(axis=0)
            + 2.0 * reg * ((e_pos[:, None] * x_pos).mean(axis=0) + (e_neg[:, None] * x_neg).mean(axis=0))
        )
        np.testing.assert_allclose(g.ravel(), analytic, rtol=1e-10)

        def value(th):
            return float(cd_loss(LinearEnergy(th), x_pos, x_neg, reg).data)

        h = 1e-6
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            fd = (value(theta + e) - value(theta - e)) / (2 * h)
            assert g.ravel()[d] == pytest.approx(fd, rel=1e-6)

    @pytest.mark.unit
    def test_mixed_sign_energies_do_not_cancel(self):
        """mean |E| is taken over every energy, so +-1e6 reads as 1e6 even though the means are zero"""

        class SplitEnergy:
            def energy(self, x):
                return Tensor(np.where(np.arange(x.shape[0]) % 2 == 0, 1e6, -1e6))

        x = np.zeros((8, 2))
        _, stats = cd_loss_terms(SplitEnergy(), x, x.copy(), reg_weight=0.0)
        assert stats.mean_E_pos == 0.0 and stats.mean_E_neg == 0.0
        assert stats.mean_abs_energy == 1e6


class TestTraining:
    """train_ebm loop"""

    @pytest.mark.unit
    def test_log_columns_and_rows(self, data, quick, tmp_path):
        """One log row per step with the documented columns"""
        cfg, lv = quick
        _, log = train_ebm(data, cfg, lv, log_path=tmp_path / "log.csv")
        assert list(log.columns) == LOG_COLUMNS
        assert len(log) == 3
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)

    @pytest.mark.unit
    def test_same_seed_same_parameters(self, data, quick):
        """Training is reproducible from the seed"""
        cfg, lv = quick
        a, _ = train_ebm(data, cfg, lv)
        b, _ = train_ebm(data, cfg, lv)
        sa, sb = a.state_dict(), b.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    @pytest.mark.unit
    def test_divergence_restores_and_saves(self, data, tmp_path):
        """Exceeding the energy bound aborts with the last good parameters checkpointed"""
        cfg = EbmTrainConfig(batch_size=8, steps=5, divergence_bound=1e-12)
        start = EnergyModel(seed=cfg.seed).state_dict()
        with pytest.raises(DivergenceError) as exc:
            train_ebm(data, cfg, LangevinConfig(steps=2), checkpoint_path=tmp_path / "e.ckpt")
        assert exc.value.checkpoint is not None
        header, arrays = read_checkpoint(tmp_path / "e.ckpt")
        assert header.metadata["diverged"] is True
        assert all(np.array_equal(arrays[k], start[k]) for k in start)

    @pytest.mark.unit
    def test_divergence_after_an_update_keeps_the_passing_parameters(self, data, tmp_path, monkeypatch):
        """A blow-up at step 1 checkpoints the parameters that passed step 0, not the updated ones"""
        real = ebm_module.cd_loss_terms
        seen = []

        def blow_up_on_second_call(model, x_pos, x_neg, reg_weight):
            loss, stats = real(model, x_pos, x_neg, reg_weight)
            seen.append(model.state_dict())
            if len(seen) == 2:
                stats.mean_abs_energy = 1e9
            return loss, stats

        monkeypatch.setattr(ebm_module, "cd_loss_terms", blow_up_on_second_call)
        cfg = EbmTrainConfig(batch_size=8, steps=5, lr=0.05)
        with pytest.raises(DivergenceError) as exc:
            train_ebm(data, cfg, LangevinConfig(steps=2), checkpoint_path=tmp_path / "e.ckpt")
        assert "step 1" in str(exc.value.detail)
        _, arrays = read_checkpoint(exc.value.checkpoint)
        passed, diverged = seen
        assert all(np.array_equal(arrays[k], passed[k]) for k in passed)
        assert max(np.abs(arrays[k] - diverged[k]).max() for k in diverged) > 1e-3

    @pytest.mark.unit
    def test_zero_steps_returns_initial_model(self, data):
        """No training steps leaves the seeded initialisation untouched"""
        cfg = EbmTrainConfig(steps=0, seed=3)
        model, log = train_ebm(data, cfg, LangevinConfig(steps=2))
        start = EnergyModel(seed=3).state_dict()
        trained = model.state_dict()
        assert all(np.array_equal(trained[k], start[k]) for k in start)
        assert len(log) == 0 and list(log.columns) == LOG_COLUMNS


class TestTrainedModel:
    """Properties of a fully trained UCG energy"""

    @pytest.fixture(scope="class")
    def trained(self, ucg):
        model, _ = train_ebm(ucg.sample(5000, seed=0), EbmTrainConfig(), LangevinConfig())
        return model

    @pytest.mark.slow
    def test_trained_energy_tracks_negative_log_density(self, trained, ucg):
        """E correlates with -log p at r >= 0.9 on a 100 x 100 grid"""
        assert grid_correlation(trained, ucg, n=100, box=14.0) >= 0.9

    @pytest.mark.slow
    def test_energy_separates_data_from_the_box(self, trained, ucg):
        """Mean E over data samples is below mean E over uniform points in [-14, 14]^2"""
        on = energies(trained, ucg.sample(1000, seed=11))
        off = energies(trained, np.random.default_rng(12).uniform(-14, 14, size=(1000, 2)))
        assert on.mean() < off.mean()

    @pytest.mark.slow
    def test_energy_orders_data_below_far_points(self, trained, ucg):
        """E(data) < E(far) for at least 95% of 500 pairs with the far point 5+ units from every center"""
        rng = np.random.default_rng(13)
        cand = rng.uniform(-14, 14, size=(20000, 2))
        dist = np.linalg.norm(cand[:, None, :] - ucg.centers[None, :, :], axis=-1).min(axis=1)
        far = cand[dist >= 5.0][:500]
        assert len(far) == 500
        near = ucg.sample(500, seed=14)
        assert np.mean(energies(trained, near) < energies(trained, far)) >= 0.95
