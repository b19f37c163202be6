import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eit_hybrid.fem import interpolate_to_grid, solve_continuum
from eit_hybrid.geometry import build_grid, build_trimesh
from eit_hybrid.grid_calculus import divergence_term, fd_derivatives

EPS = 1e-10  # rounding floor for h^-2 differences of O(1) values


@pytest.fixture(scope="module")
def grid():
    return build_grid(64)


def test_quadratic_x(grid):
    b = fd_derivatives(grid.X**2, grid)
    x = grid.interior_points[:, 0]
    assert np.abs(b.du_dx - 2 * x).max() < EPS
    assert np.abs(b.d2u_dxx - 2).max() < EPS
    assert np.abs(b.du_dy).max() == 0 and np.abs(b.d2u_dyy).max() == 0


def test_laplacian_r2(grid):
    b = fd_derivatives(grid.X**2 + grid.Y**2, grid)
    assert np.abs(b.laplacian - 4).max() < EPS
    assert np.abs(b.dn_u - 2).max() < EPS


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.integers(16, 80))
def test_exact_on_any_quadratic(c, N):
    g = build_grid(N)
    X, Y = g.X, g.Y
    U = c[0] + c[1] * X + c[2] * Y + c[3] * X**2 + c[4] * X * Y + c[5] * Y**2
    b = fd_derivatives(U, g)
    x, y = g.interior_points.T
    tol = 1e-12 / g.h**2 * (1 + sum(map(abs, c)))
    assert np.abs(b.du_dx - (c[1] + 2 * c[3] * x + c[4] * y)).max() < tol
    assert np.abs(b.du_dy - (c[2] + c[4] * x + 2 * c[5] * y)).max() < tol
    assert np.abs(b.d2u_dxx - 2 * c[3]).max() < tol
    assert np.abs(b.d2u_dyy - 2 * c[5]).max() < tol


def _errors(N):
    g = build_grid(N)
    b = fd_derivatives(np.sin(2 * g.X) * np.cos(g.Y), g)
    x, y = g.interior_points.T
    q, th = g.ring_points, g.ring_angles
    dn = 2 * np.cos(2 * q[:, 0]) * np.cos(q[:, 1]) * np.cos(th) - np.sin(2 * q[:, 0]) * np.sin(q[:, 1]) * np.sin(th)
    e = [
        np.abs(b.du_dx - 2 * np.cos(2 * x) * np.cos(y)).max(),
        np.abs(b.du_dy + np.sin(2 * x) * np.sin(y)).max(),
        np.abs(b.laplacian + 5 * np.sin(2 * x) * np.cos(y)).max(),
        np.abs(b.dn_u - dn).max(),
    ]
    return g.h, np.array(e)


def test_convergence_order():
    (h1, e1), (h2, e2), (h3, e3) = _errors(64), _errors(128), _errors(256)
    order = np.log(e1 / e2) / math.log(h1 / h2)
    assert np.all(order[:3] >= 1.9), order
    # the ring derivative mixes interpolation and extrapolation stencils whose
    # layout changes with N; it reaches second order one refinement later
    assert np.log(e2[3] / e3[3]) / math.log(h2 / h3) >= 1.9


def test_shape_and_finiteness_checked(grid):
    with pytest.raises(ValueError):
        fd_derivatives(np.zeros((10, 10)), grid)
    U = np.zeros((64, 64))
    U[32, 32] = np.nan
    with pytest.raises(ValueError):
        fd_derivatives(U, grid)


def test_divergence_examples(grid):
    x = grid.interior_points[:, 0]
    b = fd_derivatives(grid.X, grid)
    one, zero = np.ones_like(x), np.zeros_like(x)
    assert np.abs(divergence_term(one, zero, zero, b)).max() < EPS
    assert np.abs(divergence_term(x, one, zero, b) - 1).max() < EPS


def test_divergence_torch_matches_numpy(grid):
    b = fd_derivatives(np.sin(grid.X) * grid.Y**2, grid)
    rng = np.random.default_rng(0)
    s, sx, sy = rng.normal(size=(3, len(b.du_dx)))
    tb = type(b)(*(torch.as_tensor(getattr(b, f)) for f in ("du_dx", "du_dy", "d2u_dxx", "d2u_dyy", "dn_u")))
    got = divergence_term(torch.as_tensor(s), torch.as_tensor(sx), torch.as_tensor(sy), tb).numpy()
    assert np.allclose(got, divergence_term(s, sx, sy, b), atol=1e-14)


def test_divergence_shape_checked(grid):
    b = fd_derivatives(grid.X, grid)
    with pytest.raises(ValueError, match="sigma"):
        divergence_term(np.ones(3), np.zeros(3), np.zeros(3), b)


def test_fem_composition_residual_small(grid):
    mesh = build_trimesh(0.03)
    U = interpolate_to_grid(mesh, solve_continuum(mesh, 1.0).u, grid).values
    b = fd_derivatives(U, grid)
    _, e = _errors(64)
    # the sin/cos study gives the O(h^2) constant of the scheme on smooth fields
    bound = 10 * e[2]
    assert np.abs(b.laplacian).mean() <= bound
