"""Central finite differences of potential fields on the masked disk grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec


@dataclass(frozen=True)
class DerivativeBundle:
    """Derivatives on ``grid.interior_ids``; ``dn_u`` on the ring points."""

    du_dx: np.ndarray
    du_dy: np.ndarray
    d2u_dxx: np.ndarray
    d2u_dyy: np.ndarray
    dn_u: np.ndarray

    @property
    def laplacian(self) -> np.ndarray:
        return self.d2u_dxx + self.d2u_dyy


def _as_array(U) -> np.ndarray:
    return np.asarray(getattr(U, "values", U), dtype=float)


def first_derivatives(U, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Second-order central differences at interior nodes, returned on interior_ids."""
    U = _as_array(U)
    h = grid.h
    dx = np.zeros_like(U)
    dy = np.zeros_like(U)
    dx[:, 1:-1] = (U[:, 2:] - U[:, :-2]) / (2 * h)
    dy[1:-1, :] = (U[2:, :] - U[:-2, :]) / (2 * h)
    ids = grid.interior_ids
    return dx.ravel()[ids], dy.ravel()[ids]


def fd_derivatives(U, grid: GridSpec) -> DerivativeBundle:
    U = _as_array(U)
    if U.shape != (grid.N, grid.N):
        raise ValueError(f"field shape {U.shape} does not match grid {grid.N}x{grid.N}")
    if not np.all(np.isfinite(U[grid.mask])):
        raise ValueError("field has non-finite entries inside the disk")
    h = grid.h
    ids = grid.interior_ids
    du_dx, du_dy = first_derivatives(U, grid)
    dxx = np.zeros_like(U)
    dyy = np.zeros_like(U)
    dxx[:, 1:-1] = ((U[:, 2:] - U[:, 1:-1]) - (U[:, 1:-1] - U[:, :-2])) / h**2
    dyy[1:-1, :] = ((U[2:, :] - U[1:-1, :]) - (U[1:-1, :] - U[:-2, :])) / h**2
    ext = grid.ring_extension
    p = grid.ring_points
    dn = (ext @ du_dx) * p[:, 0] + (ext @ du_dy) * p[:, 1]
    return DerivativeBundle(du_dx, du_dy, dxx.ravel()[ids], dyy.ravel()[ids], dn)


def divergence_term(sigma, dsigma_dx, dsigma_dy, bundle: DerivativeBundle):
    """div(sigma grad u) = grad(sigma) . grad(u) + sigma * lap(u), pointwise.

    Works on numpy arrays and torch tensors alike.
    """
    n = bundle.du_dx.shape[0]
    for name, a in (("sigma", sigma), ("dsigma_dx", dsigma_dx), ("dsigma_dy", dsigma_dy)):
        if tuple(a.shape) != (n,):
            raise ValueError(f"{name} has shape {tuple(a.shape)}, expected ({n},)")
    return (
        dsigma_dx * bundle.du_dx
        + dsigma_dy * bundle.du_dy
        + sigma * (bundle.d2u_dxx + bundle.d2u_dyy)
    )
