import math

import numpy as np
import pytest
import torch

from eit_hybrid.fem import TrigPattern
from eit_hybrid.geometry import build_grid
from eit_hybrid.grid_calculus import divergence_term, fd_derivatives
from eit_hybrid.pinn import (
    TERMS,
    LossWeights,
    PinnModel,
    PinnProblem,
    TrainConfig,
    loss_eq2,
    loss_terms,
    pinn_eval,
    reconstruct,
    top_m_mean,
)

MACHINE = 1e-12


@pytest.fixture(scope="module")
def grid():
    return build_grid(48)


def _constant_model(value, dtype=torch.float64):
    m = PinnModel().to(dtype)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.fill_(value)
    return m


def _random_model(seed, dtype=torch.float64, output="linear"):
    torch.manual_seed(seed)
    m = PinnModel(output=output).to(dtype)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return m


def _problem(U, grid, dtype=torch.float64):
    return PinnProblem.from_field(U, grid, TrigPattern(), dtype)


def test_zero_head_is_constant(grid):
    m = _constant_model(1.7)
    s, sx, sy = pinn_eval(m, grid.mask_points)
    assert np.all(s == 1.7)
    assert np.all(sx == 0) and np.all(sy == 0)


def test_network_derivatives_match_finite_differences():
    m = _random_model(3)
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.6, 0.6, size=(50, 2))
    eps = 1e-4
    s, sx, sy = pinn_eval(m, p)
    fx = (pinn_eval(m, p + [eps, 0])[0] - pinn_eval(m, p - [eps, 0])[0]) / (2 * eps)
    fy = (pinn_eval(m, p + [0, eps])[0] - pinn_eval(m, p - [0, eps])[0]) / (2 * eps)
    assert np.abs(fx - sx).max() <= 1e-4
    assert np.abs(fy - sy).max() <= 1e-4


def test_softplus_derivatives_match_autograd():
    m = _random_model(5, output="softplus")
    xy = torch.rand(40, 2, dtype=torch.float64) - 0.5
    xy.requires_grad_(True)
    s, sx, sy = m.evaluate(xy)
    (g,) = torch.autograd.grad(s.sum(), xy)
    assert torch.allclose(g[:, 0], sx, atol=1e-12) and torch.allclose(g[:, 1], sy, atol=1e-12)
    assert torch.all(s >= 1)


def test_evaluation_deterministic(grid):
    m = _random_model(1)
    a, b = pinn_eval(m, grid.mask_points), pinn_eval(m, grid.mask_points)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_eval_rejects_points_outside_disk():
    with pytest.raises(ValueError):
        pinn_eval(_constant_model(1.0), [[0.9, 0.9]])


def test_unit_sigma_harmonic_field(grid):
    w = LossWeights(tau=0.01, xi=1e-8)
    out = loss_terms(_constant_model(1.0), _problem(grid.X, grid), w)
    for name in ("pde_l2", "pde_topm", "boundary", "hinge"):
        assert float(getattr(out, name).detach()) <= MACHINE, name
    assert float(out.tv.detach()) == pytest.approx(w.tau * math.sqrt(w.xi), rel=MACHINE)


def test_hinge_value(grid):
    w = LossWeights(nu=1.0)
    out = loss_terms(_constant_model(0.5), _problem(grid.X, grid), w)
    assert float(out.hinge.detach()) == pytest.approx(w.nu * 0.5, rel=MACHINE)


def test_top_m_selection():
    r = torch.tensor([3.0, 1.0, 2.0], dtype=torch.float64, requires_grad=True)
    beta = 0.5
    v = beta * top_m_mean(r, 2)
    assert float(v.detach()) == beta / 2 * (3 + 2)
    v.backward()
    assert r.grad.tolist() == [beta / 2, 0.0, beta / 2]


def test_flux_without_g(grid):
    w = LossWeights(gamma=0.5, neumann_includes_g=False)
    out = loss_terms(_constant_model(1.0), _problem(grid.X, grid), w)
    mean_abs_cos = np.abs(np.cos(grid.ring_angles)).mean()
    assert float(out.flux.detach()) == pytest.approx(w.gamma * mean_abs_cos, rel=MACHINE)
    assert float(out.flux.detach()) == pytest.approx(w.gamma * 2 / math.pi, rel=1e-3)


def test_terms_nonnegative_random():
    grid = build_grid(32)
    rng = np.random.default_rng(0)
    for k in range(100):
        c = rng.normal(size=6)
        U = (c[0] * grid.X + c[1] * grid.Y + c[2] * grid.X * grid.Y
             + c[3] * np.sin(3 * grid.X) + c[4] * np.cos(2 * grid.Y) + c[5] * grid.X**3)
        w = LossWeights(**{n: float(rng.uniform(0, 2)) for n in ("alpha", "beta", "gamma", "tau", "nu")},
                        zeta=float(rng.uniform(0, 1e-3)), neumann_includes_g=bool(k % 2))
        out = loss_terms(_random_model(k), _problem(U, grid), w)
        vals = out.values()
        assert all(v >= 0 for v in vals), dict(zip((*TERMS, "total"), vals))
        assert vals[-1] == pytest.approx(sum(vals[:-1]), rel=1e-12)


def test_parameter_gradient_finite_difference(grid):
    U = np.sin(2 * grid.X) * np.cos(grid.Y) + 0.3 * grid.Y
    bundle = fd_derivatives(U, grid)
    g_ring = TrigPattern()(grid.ring_angles)
    w = LossWeights(beta=0.5, gamma=0.5, tau=0.01, nu=1.0, zeta=1e-3)
    m = _random_model(7)
    with torch.no_grad():
        m.head.bias.fill_(0.8)  # keep part of the domain under the hinge
    loss_eq2(m, bundle, grid, w, g_ring)
    params = list(m.parameters())
    grads = [p.grad.clone() for p in params]
    gen = torch.Generator().manual_seed(0)
    eps = 1e-6
    for _ in range(5):
        d = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, d))

        def at(sign):
            with torch.no_grad():
                for p, v in zip(params, d):
                    p.add_(sign * eps * v)
            val = float(loss_eq2(m, bundle, grid, w, g_ring, backward=False).total.detach())
            with torch.no_grad():
                for p, v in zip(params, d):
                    p.sub_(sign * eps * v)
            return val

        numeric = (at(1) - at(-1)) / (2 * eps)
        assert abs(numeric - analytic) <= 1e-3 * abs(analytic)


def test_nonfinite_term_named(grid):
    b = fd_derivatives(grid.X, grid)
    b.dn_u[0] = np.nan
    p = PinnProblem(b, grid, TrigPattern()(grid.ring_angles), torch.float64)
    with pytest.raises(FloatingPointError, match="flux"):
        loss_terms(_constant_model(1.0), p, LossWeights())


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1).validate(100)
    with pytest.raises(ValueError):
        LossWeights(M=0).validate(100)
    with pytest.raises(ValueError, match="unknown"):
        LossWeights.from_dict({"lambda": 1})
    assert LossWeights().validate(1000) == 10
    assert LossWeights.from_dict(LossWeights(nu=3).to_dict()) == LossWeights(nu=3)


def test_ring_alignment_checked(grid):
    with pytest.raises(ValueError, match="aligned"):
        PinnProblem(fd_derivatives(grid.X, grid), grid, np.zeros(3))


def test_homogeneous_semi_inverse_stays_unit():
    from eit_hybrid.dataset import DatasetConfig, Simulator
    from eit_hybrid.phantoms import homogeneous

    sim = Simulator(DatasetConfig(N=48, target_h=0.05))
    U = sim.simulate(homogeneous()).u_grid
    w = LossWeights(tau=0, nu=0, zeta=0, beta=0, gamma=0)
    rec = reconstruct(U, sim.grid, w, TrainConfig(steps=300, seed=0))
    s = rec.sigma[sim.grid.mask]
    assert np.mean(np.abs(s - 1) <= 0.1) >= 0.95


def test_reconstruct_history_reproducible(grid):
    U = 0.4 * grid.Y + 0.05 * grid.X * grid.Y
    cfg = TrainConfig(steps=30, seed=2)
    a = reconstruct(U, grid, LossWeights(), cfg)
    b = reconstruct(U, grid, LossWeights(), cfg)
    assert a.history.shape == (30, len(TERMS) + 1)
    assert np.array_equal(a.history, b.history)
    assert np.array_equal(a.sigma, b.sigma)
    assert np.all(a.sigma[~grid.mask] == 1)


def test_top_m_full_set_is_l1(grid):
    U = np.sin(2 * grid.X) * np.cos(grid.Y)
    p = _problem(U, grid)
    m = _random_model(4)
    n = p.n_int
    a = loss_terms(m, p, LossWeights(M=n)).pde_topm
    s, sx, sy = m.evaluate(p.interior)
    r = divergence_term(s, sx, sy, p.bundle)
    assert float(a.detach()) == pytest.approx(float(0.5 * r.abs().sum().detach() / n), rel=1e-12)


def test_large_hinge_keeps_sigma_above_floor():
    g = build_grid(32)
    U = np.sin(2 * g.X) * np.cos(g.Y) + 0.2 * g.Y
    rec = reconstruct(U, g, LossWeights(nu=1e3), TrainConfig(steps=400, seed=1))
    assert np.mean(rec.sigma[g.mask] < 0.9) < 0.01
