"""
SVG figure tests
"""
import numpy as np
import pandas as pd
import pytest

from app.densities import ucg_density
from app.geodesics import straight_line
from app.plotting import plot_energy, plot_fig1, plot_fig2, svg_line_vertices


@pytest.fixture(scope="module")
def ucg():
    return ucg_density(K=20)


@pytest.fixture
def profiles():
    steps = np.arange(9)
    return pd.concat(
        [
            pd.DataFrame({"metric": "energy_oracle", "step": steps, "step_size": 1.0 + np.sin(steps)}),
            pd.DataFrame({"metric": "land", "step": steps[:7], "step_size": np.full(7, 0.5)}),
        ],
        ignore_index=True,
    )


class TestFigures:
    """Deterministic SVG emission"""

    @pytest.mark.unit
    def test_fig2_curve_matches_csv_rows(self, profiles, tmp_path):
        """Each metric's curve has one vertex per profile row"""
        path = plot_fig2(profiles, tmp_path / "fig2.svg")
        assert svg_line_vertices(path, "profile-energy_oracle") == 9
        assert svg_line_vertices(path, "profile-land") == 7

    @pytest.mark.unit
    def test_fig2_is_byte_stable(self, profiles, tmp_path):
        """Rendering the same data twice gives identical files"""
        a = plot_fig2(profiles, tmp_path / "a.svg").read_bytes()
        b = plot_fig2(profiles, tmp_path / "b.svg").read_bytes()
        assert a == b

    @pytest.mark.unit
    def test_fig1_draws_every_path(self, ucg, tmp_path):
        """Every geodesic is an addressable SVG group with all its grid points"""
        paths = {"land": [straight_line([-6, 2], [6, 2], 15), straight_line([-4, 5], [4, 5], 15)]}
        out = plot_fig1(ucg, paths, tmp_path / "fig1.svg", grid=30)
        assert svg_line_vertices(out, "path-land-0") == 15
        assert svg_line_vertices(out, "path-land-1") == 15
        with pytest.raises(KeyError):
            svg_line_vertices(out, "path-rbf-0")

    @pytest.mark.unit
    def test_energy_figure(self, ucg, tmp_path):
        """The energy panel renders from an n x n grid"""
        axis = np.linspace(-14, 14, 25)
        gx, gy = np.meshgrid(axis, axis)
        out = plot_energy(0.5 * (gx**2 + gy**2), ucg, tmp_path / "energy.svg")
        assert out.exists() and out.read_text().startswith("<?xml")
