"""Tests for ROC geometry and figure rendering."""

import numpy as np

from anatomvlp.plots import plot_activation_density, plot_roc, roc_points


class TestRocPoints:
    def test_endpoints(self):
        fpr, tpr = roc_points([0.1, 0.9], [0, 1])
        assert fpr[0] == 0.0 and tpr[0] == 0.0
        assert fpr[-1] == 1.0 and tpr[-1] == 1.0

    def test_perfect_separation_passes_corner(self):
        fpr, tpr = roc_points([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert any(f == 0.0 and t == 1.0 for f, t in zip(fpr, tpr))

    def test_monotone(self):
        rng = np.random.default_rng(0)
        fpr, tpr = roc_points(rng.random(20), rng.integers(0, 2, 20))
        assert (np.diff(fpr) >= 0).all()
        assert (np.diff(tpr) >= 0).all()


class TestRendering:
    def test_plot_roc_writes_file(self, tmp_path):
        p = plot_roc([("liver/blob", np.array([0.2, 0.8]), np.array([0, 1]))],
                     str(tmp_path / "roc.png"))
        assert (tmp_path / "roc.png").stat().st_size > 0
        assert p.endswith("roc.png")

    def test_plot_density_writes_file(self, tmp_path):
        edges = np.linspace(0, 2, 11)
        dens = {0: {"histogram": np.arange(10), "edges": edges, "count": 45,
                    "near_zero_fraction": 0.1}}
        p = plot_activation_density({"baseline": dens}, ["liver"],
                                    str(tmp_path / "dens.png"))
        assert (tmp_path / "dens.png").stat().st_size > 0
