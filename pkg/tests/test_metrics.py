import numpy as np
import pytest
from matplotlib.image import imread

from eit_hybrid.geometry import build_grid
from eit_hybrid.metrics import compute_metrics, relative_l2
from eit_hybrid.phantoms import Circle, Inclusion, Phantom, homogeneous, rasterize, sample_phantom
from eit_hybrid.report import derivative_panels, render_report


@pytest.fixture(scope="module")
def grid():
    return build_grid(64)


@pytest.fixture(scope="module")
def case(grid):
    ph = sample_phantom(2, "two_circles")
    return ph, rasterize(ph, grid)


def test_identity(grid, case):
    ph, gt = case
    r = compute_metrics(gt, gt, grid, ph)
    assert r.rmse == 0 and r.pearson_r == pytest.approx(1.0) and r.centroid_error == 0
    assert r.inclusion_centroid_errors == [0.0, 0.0]
    assert r.background_within_0p1 == 1.0


def test_offset(grid, case):
    ph, gt = case
    r = compute_metrics(gt + 0.5, gt, grid, ph)
    assert r.rmse == pytest.approx(0.5) and r.pearson_r == pytest.approx(1.0)


def test_flipped(grid, case):
    ph, gt = case
    assert compute_metrics(2 - gt, gt, grid, ph).pearson_r == pytest.approx(-1.0)


def test_constant_gt_has_no_correlation(grid):
    gt = np.ones((64, 64))
    r = compute_metrics(gt + np.random.default_rng(0).normal(size=gt.shape), gt, grid, homogeneous())
    assert r.pearson_r is None
    assert r.inclusion_centroid_errors == []


def test_shifted_inclusion_centroid(grid):
    gt = rasterize(Phantom((Inclusion(Circle((0.2, 0.1), 0.2), 3.0),)), grid)
    rec = rasterize(Phantom((Inclusion(Circle((0.3, 0.1), 0.2), 3.0),)), grid)
    ph = Phantom((Inclusion(Circle((0.2, 0.1), 0.2), 3.0),))
    r = compute_metrics(rec, gt, grid, ph)
    assert r.inclusion_centroid_errors[0] == pytest.approx(0.1, abs=grid.h / 2)
    assert r.inclusion_mean[0] < 3.0


def test_relative_l2():
    assert relative_l2([1, 1], [1, 1]) == 0
    assert relative_l2([2, 0], [1, 0]) == pytest.approx(1.0)


def test_homogeneous_panels_flat(grid):
    panels = derivative_panels(np.ones((64, 64)), grid)
    assert np.nanmax(np.abs(panels[1])) == 0 and np.nanmax(np.abs(panels[2])) == 0
    assert all(p.shape == (64, 64) for p in panels)


def test_render_report(tmp_path, grid, case):
    ph, gt = case
    hist = np.abs(np.random.default_rng(0).normal(size=(20, 8))) + 1e-3
    paths = render_report(gt, gt + 0.1, grid, hist, tmp_path, "7")
    assert [p.name for p in paths] == ["case_7_panels.png", "case_7_loss.png"]
    for p in paths:
        assert imread(p).shape[1] > 100
