import math

import numpy as np
import pytest

from eit_hybrid.fem import (
    TRIG_AMPLITUDE,
    CemSystem,
    PairDrive,
    TrigPattern,
    element_sigma,
    interpolate_to_grid,
    measure_protocol,
    neumann_load,
    phantom_element_sigma,
    solve_cem,
    solve_continuum,
    stiffness_matrix,
)
from eit_hybrid.geometry import build_grid, build_trimesh, electrode_layout
from eit_hybrid.phantoms import centered_circle, sample_phantom

A = TRIG_AMPLITUDE


@pytest.fixture(scope="module")
def mesh():
    return build_trimesh(0.03)


@pytest.fixture(scope="module")
def homog(mesh):
    return solve_continuum(mesh, 1.0)


def _analytic(mesh):
    ex = A * mesh.nodes[:, 1]
    return ex - ex.mean()


def test_trig_pattern_is_sin_theta():
    th = np.linspace(0, 2 * math.pi, 33)
    assert np.allclose(TrigPattern()(th), A * np.sin(th), atol=1e-15)


def test_stiffness_symmetric_with_constant_kernel(mesh):
    K = stiffness_matrix(mesh, 1.0)
    assert abs(K - K.T).max() < 1e-12
    assert np.abs(K @ np.ones(mesh.n_nodes)).max() < 1e-11


def test_neumann_load_compatible(mesh):
    assert abs(neumann_load(mesh, TrigPattern()).sum()) < 1e-14


def test_homogeneous_analytic(mesh, homog):
    ex = _analytic(mesh)
    assert np.linalg.norm(homog.u - ex) / np.linalg.norm(ex) <= 0.01
    assert homog.residual <= 1e-10


def test_point_value(mesh, homog):
    k = np.argmin(np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1] - 0.5))
    assert np.hypot(*(mesh.nodes[k] - [0, 0.5])) < 1e-12
    assert homog.u[k] == pytest.approx(0.5 / math.sqrt(2 * math.pi), rel=0.01)


@pytest.mark.parametrize("c", [0.25, 3.0, 17.0])
def test_sigma_scaling(mesh, homog, c):
    u = solve_continuum(mesh, c).u
    assert np.allclose(u * c, homog.u, atol=1e-12)


def test_incompatible_pattern(mesh):
    with pytest.raises(ValueError, match="incompatible"):
        solve_continuum(mesh, 1.0, TrigPattern(omega=0.0, phase=math.pi / 2))
    with pytest.raises(ValueError, match="incompatible"):
        solve_continuum(mesh, 1.0, TrigPattern(omega=0.3))


@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
def test_nonpositive_sigma(mesh, bad):
    with pytest.raises(ValueError):
        element_sigma(mesh, bad)


def test_sigma_shape_checked(mesh):
    with pytest.raises(ValueError):
        element_sigma(mesh, np.ones(7))


def test_two_layer_oracle(mesh):
    # inner disk radius rho, conductivity s; u = a r sin(t) inside, (b r + c / r) sin(t) outside
    rho, s = 0.5, 4.0
    kappa = (1 - s) / (1 + s)
    amp = A * (1 + rho**2 * kappa) / (1 - rho**2 * kappa)
    u = solve_continuum(mesh, phantom_element_sigma(mesh, centered_circle(rho, s))).u
    b = mesh.boundary_nodes
    th = np.arctan2(mesh.nodes[b, 1], mesh.nodes[b, 0])
    want = amp * np.sin(th)
    assert np.abs(u[b] - want).max() / np.abs(want).max() <= 0.02


def test_cem_mirror_antisymmetry(mesh):
    U = solve_cem(mesh, 1.0, None, PairDrive(0, 8)).electrode_potentials
    l = np.arange(16)
    assert np.abs(U - U[(-l) % 16]).max() <= 1e-6 * np.abs(U).max()
    assert np.abs(U + U[(8 - l) % 16]).max() <= 1e-6 * np.abs(U).max()
    assert abs(U.sum()) < 1e-12


def test_cem_drive_rejects_same_electrode():
    with pytest.raises(ValueError):
        PairDrive(3, 3).currents(16)


def test_cem_currents_must_balance(mesh):
    with pytest.raises(ValueError, match="sum to zero"):
        CemSystem(mesh, 1.0).solve(np.eye(16)[0])


def _reciprocity_violation(mesh, sigma, pairs):
    sols = CemSystem(mesh, sigma).solve(np.array([PairDrive(i, j).currents(16) for i, j in pairs]))
    worst = 0.0
    for a, (i, j) in enumerate(pairs):
        for b, (k, l) in enumerate(pairs):
            v1 = sols[a].electrode_potentials[k] - sols[a].electrode_potentials[l]
            v2 = sols[b].electrode_potentials[i] - sols[b].electrode_potentials[j]
            worst = max(worst, abs(v1 - v2) / max(abs(v1), abs(v2)))
    return worst


def test_cem_reciprocity(mesh):
    ph = sample_phantom(4, "circle_triangle")
    pairs = [(0, 1), (3, 9), (5, 6), (12, 2)]
    assert _reciprocity_violation(mesh, phantom_element_sigma(mesh, ph), pairs) <= 1e-8


def test_protocol_length_and_shift(mesh):
    v = measure_protocol(mesh, 1.0).values
    assert v.shape == (208,)
    assert np.abs(v - np.roll(v, 13)).max() <= 1e-6 * np.abs(v).max()


def test_protocol_sees_inclusion(mesh):
    v0 = measure_protocol(mesh, 1.0).values
    v1 = measure_protocol(mesh, phantom_element_sigma(mesh, sample_phantom(1, "one_circle"))).values
    assert np.abs(v1 - v0).max() > 1e-6


def _nondrive_differences(z):
    m = build_trimesh(0.03, electrode_layout(16, 0.5, z))
    U = solve_cem(m, 1.0, None, PairDrive(0, 8)).electrode_potentials
    d = np.diff(U)
    return d[[k for k in range(15) if k not in (0, 7, 8)]]


@pytest.mark.xfail(
    strict=True,
    reason="extended electrodes shunt the boundary, so non-drive differences depend on z at the ~1% level",
)
def test_contact_impedance_doubling_insensitive():
    d1, d2 = _nondrive_differences(0.01), _nondrive_differences(0.02)
    assert np.abs(d1 - d2).max() / np.abs(d1).max() <= 1e-6


def test_contact_impedance_effect_shrinks_with_z():
    # the four-terminal data converge to the shunt limit as z -> 0 rather than being z-independent
    d = {z: _nondrive_differences(z) for z in (0.005, 0.01, 0.02, 0.04)}
    steps = [np.abs(d[z] - d[2 * z]).max() for z in (0.005, 0.01, 0.02)]
    assert steps[0] < steps[1] < steps[2]
    assert steps[1] / np.abs(d[0.01]).max() < 0.05


def test_interpolate_linear_exact(mesh):
    g = build_grid(64)
    f = interpolate_to_grid(mesh, mesh.nodes[:, 0], g)
    assert np.abs(f.values[g.mask] - g.X[g.mask]).max() < 1e-12
    assert np.all(f.values[~g.mask] == 0)
    c = interpolate_to_grid(mesh, np.full(mesh.n_nodes, 2.5), g).values
    assert np.allclose(c[g.mask], 2.5, atol=1e-13)


def test_interpolate_analytic(mesh, homog):
    g = build_grid(64)
    ex = _analytic(mesh)
    nodal = np.abs(homog.u - ex).max()
    # nodal mean of y vanishes on the symmetric mesh, so both gauges agree
    grid_err = np.abs(interpolate_to_grid(mesh, homog.u, g).values - A * g.Y)[g.mask]
    assert grid_err.max() <= 2 * nodal


def test_interpolate_flags_fallback():
    # a coarse polygon cuts off grid nodes of the true disk; they are extrapolated and counted
    mesh = build_trimesh(0.15)
    g = build_grid(101)
    f = interpolate_to_grid(mesh, mesh.nodes[:, 1], g)
    assert f.fallback_count > 0
    assert np.abs(f.values[g.mask] - g.Y[g.mask]).max() < 1e-12
