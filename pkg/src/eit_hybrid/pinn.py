"""Stage II: residual-MLP conductivity network trained on a PDE-constrained loss.

The potential enters only through finite-difference derivatives of a fixed
grid field (``grid_calculus``); the conductivity derivatives are exact
derivatives of the network, propagated alongside the forward pass.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .fem import TrigPattern
from .geometry import GridSpec
from .grid_calculus import DerivativeBundle, divergence_term, fd_derivatives

log = logging.getLogger(__name__)

TERMS = ("pde_l2", "pde_topm", "flux", "boundary", "tv", "hinge", "weight_decay")


class ReconstructionDiverged(RuntimeError):
    def __init__(self, message: str, history: np.ndarray | None = None):
        super().__init__(message)
        self.history = history


class PinnModel(nn.Module):
    """sigma(x, y): a tanh layer from R^2, then residual tanh layers, then a linear head."""

    def __init__(self, width: int = 64, depth: int = 4, output: str = "linear", head_std: float = 1e-2):
        super().__init__()
        if output not in ("linear", "softplus"):
            raise ValueError(f"unknown output transform {output!r}")
        self.width, self.depth, self.output = width, depth, output
        self.inp = nn.Linear(2, width)
        self.hidden = nn.ModuleList(nn.Linear(width, width) for _ in range(depth - 1))
        self.head = nn.Linear(width, 1)
        for lin in [self.inp, *self.hidden]:
            nn.init.xavier_normal_(lin.weight)
            nn.init.zeros_(lin.bias)
        nn.init.normal_(self.head.weight, std=head_std)
        # softplus(b) = 0 is unreachable, so start from sigma = 1 + softplus(-4) ~ 1
        nn.init.constant_(self.head.bias, 1.0 if output == "linear" else -4.0)

    def forward(self, xy: torch.Tensor) -> torch.Tensor:
        return self.evaluate(xy)[0]

    def evaluate(self, xy: torch.Tensor):
        """Return sigma, dsigma/dx, dsigma/dy at points ``xy`` of shape (n, 2)."""
        W = self.inp.weight
        h = torch.tanh(xy @ W.T + self.inp.bias)
        s = 1.0 - h * h
        hx, hy = s * W[:, 0], s * W[:, 1]
        for lin in self.hidden:
            t = torch.tanh(torch.addmm(lin.bias, h, lin.weight.T))
            s = 1.0 - t * t
            hx = hx + s * (hx @ lin.weight.T)
            hy = hy + s * (hy @ lin.weight.T)
            h = h + t
        w = self.head.weight[0]
        z = h @ w + self.head.bias
        zx, zy = hx @ w, hy @ w
        if self.output == "softplus":
            g = torch.sigmoid(z)
            return 1.0 + nn.functional.softplus(z), g * zx, g * zy
        return z, zx, zy

    def weight_norm2(self) -> torch.Tensor:
        return sum((lin.weight**2).sum() for lin in [self.inp, *self.hidden, self.head])


def pinn_eval(model: PinnModel, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=float)
    if np.any((p**2).sum(axis=1) > 1.0 + 1e-9):
        raise ValueError("evaluation points must lie in the unit disk")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        s, sx, sy = model.evaluate(torch.as_tensor(p, dtype=dtype))
    return s.numpy().astype(float), sx.numpy().astype(float), sy.numpy().astype(float)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5
    tau: float = 1e-3
    xi: float = 1e-8
    nu: float = 10.0
    zeta: float = 1e-6
    top_fraction: float = 0.01
    M: int | None = None
    neumann_includes_g: bool = True

    def validate(self, n_interior: int) -> int:
        for f in ("alpha", "beta", "gamma", "tau", "nu", "zeta"):
            if getattr(self, f) < 0:
                raise ValueError(f"loss weight {f} must be nonnegative")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        M = self.M if self.M is not None else max(1, int(round(self.top_fraction * n_interior)))
        if not 1 <= M <= n_interior:
            raise ValueError(f"M={M} outside [1, {n_interior}]")
        return M

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    pde_l2: torch.Tensor
    pde_topm: torch.Tensor
    flux: torch.Tensor
    boundary: torch.Tensor
    tv: torch.Tensor
    hinge: torch.Tensor
    weight_decay: torch.Tensor
    total: torch.Tensor

    def values(self) -> list[float]:
        return [float(getattr(self, k).detach()) for k in (*TERMS, "total")]


class PinnProblem:
    """Collocation tensors for one potential field: interior points, ring points, FD data."""

    def __init__(self, bundle: DerivativeBundle, grid: GridSpec, g_ring, dtype=torch.float32):
        self.grid = grid
        self.dtype = dtype
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=float), dtype=dtype)
        self.interior = t(grid.interior_points)
        self.ring = t(grid.ring_points)
        self.points = torch.cat([self.interior, self.ring], dim=0)
        self.n_int = self.interior.shape[0]
        self.bundle = DerivativeBundle(*(t(getattr(bundle, f.name)) for f in fields(DerivativeBundle)))
        self.g_ring = t(g_ring)
        if self.g_ring.shape[0] != self.ring.shape[0]:
            raise ValueError("boundary current values are not aligned with the ring points")

    @classmethod
    def from_field(cls, U, grid: GridSpec, pattern: TrigPattern | None = None, dtype=torch.float32):
        pattern = pattern or TrigPattern()
        return cls(fd_derivatives(U, grid), grid, pattern(grid.ring_angles), dtype)


def top_m_mean(values: torch.Tensor, M: int) -> torch.Tensor:
    """Mean of the M largest entries; the selection itself carries no gradient."""
    idx = torch.topk(values.detach(), M, sorted=False).indices
    return values[idx].sum() / M


def loss_terms(model: PinnModel, problem: PinnProblem, w: LossWeights) -> LossBreakdown:
    M = w.validate(problem.n_int)
    s, sx, sy = model.evaluate(problem.points)
    n = problem.n_int
    s_in, sx_in, sy_in = s[:n], sx[:n], sy[:n]
    s_b = s[n:]
    r = divergence_term(s_in, sx_in, sy_in, problem.bundle)
    flux = s_b * problem.bundle.dn_u
    if w.neumann_includes_g:
        flux = flux - problem.g_ring
    terms = dict(
        pde_l2=w.alpha * (r * r).mean(),
        pde_topm=w.beta * top_m_mean(r.abs(), M),
        flux=w.gamma * flux.abs().mean(),
        boundary=(s_b - 1.0).abs().mean(),
        tv=w.tau * torch.sqrt(sx_in * sx_in + sy_in * sy_in + w.xi).mean(),
        hinge=w.nu * torch.relu(1.0 - s).mean(),
        weight_decay=w.zeta * model.weight_norm2(),
    )
    total = sum(terms.values())
    for k, v in terms.items():
        if not torch.isfinite(v):
            raise FloatingPointError(f"loss term {k} is not finite")
    return LossBreakdown(**terms, total=total)


def loss_eq2(model: PinnModel, bundle: DerivativeBundle, grid: GridSpec, weights: LossWeights, g_ring, *, backward: bool = True):
    """Evaluate the seven-term loss; with ``backward`` the parameter gradients are left in ``.grad``."""
    dtype = next(model.parameters()).dtype
    problem = PinnProblem(bundle, grid, g_ring, dtype)
    model.zero_grad(set_to_none=True)
    out = loss_terms(model, problem, weights)
    if backward:
        out.total.backward()
    return out


@dataclass
class TrainConfig:
    steps: int = 20000
    lr: float = 1e-3
    seed: int = 0
    output: str = "linear"
    width: int = 64
    depth: int = 4
    cosine: bool = True
    dtype: str = "float32"
    log_every: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Reconstruction:
    sigma: np.ndarray
    history: np.ndarray
    model: PinnModel
    seconds: float

    def final(self) -> dict:
        return dict(zip((*TERMS, "total"), self.history[-1].tolist()))


def reconstruct(U, grid: GridSpec, weights: LossWeights | None = None, cfg: TrainConfig | None = None, pattern: TrigPattern | None = None) -> Reconstruction:
    weights = weights or LossWeights()
    cfg = cfg or TrainConfig()
    dtype = getattr(torch, cfg.dtype)
    torch.manual_seed(cfg.seed)
    problem = PinnProblem.from_field(U, grid, pattern, dtype)
    weights.validate(problem.n_int)
    model = PinnModel(cfg.width, cfg.depth, cfg.output).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps) if cfg.cosine else None

    history = np.zeros((cfg.steps, len(TERMS) + 1))
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        try:
            out = loss_terms(model, problem, weights)
        except FloatingPointError as exc:
            raise ReconstructionDiverged(f"step {step}: {exc}", history[:step]) from exc
        out.total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        history[step] = out.values()
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d total %.4e", step, history[step, -1])
    seconds = time.perf_counter() - t0

    sig = np.ones((grid.N, grid.N))
    s, _, _ = pinn_eval(model, grid.mask_points)
    sig.ravel()[grid.mask_ids] = s
    return Reconstruction(sig, history, model, seconds)
