"""P1 finite-element forward solvers for -div(sigma grad u) = 0 on the unit disk.

Two boundary models are provided: a continuum Neumann datum g(theta) used to
produce interior potentials, and the complete electrode model (CEM) used to
simulate the 208 adjacent-drive / adjacent-measure voltages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import ElectrodeLayout, GridSpec, TriMesh

TRIG_AMPLITUDE = 1.0 / math.sqrt(2.0 * math.pi)
RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrigPattern:
    """g = amplitude * sin(omega * k + phase), with k the (continuous) electrode index."""

    amplitude: float = TRIG_AMPLITUDE
    omega: float = 2.0 * math.pi / 16
    phase: float = 0.0
    electrodes: int = 16

    kind = "trig"

    def frequency(self) -> float:
        return self.omega * self.electrodes / (2.0 * math.pi)

    def __call__(self, theta):
        k = np.asarray(theta) * self.electrodes / (2.0 * math.pi)
        return self.amplitude * np.sin(self.omega * k + self.phase)

    def to_dict(self):
        return {
            "kind": "trig",
            "amplitude": self.amplitude,
            "omega": self.omega,
            "phase": self.phase,
            "electrodes": self.electrodes,
        }


@dataclass(frozen=True)
class PairDrive:
    source: int
    sink: int
    current: float = 1.0

    kind = "pair_drive"

    def currents(self, count: int) -> np.ndarray:
        if self.source == self.sink:
            raise ValueError("source and sink electrodes must differ")
        I = np.zeros(count)
        I[self.source % count] += self.current
        I[self.sink % count] -= self.current
        return I


@dataclass
class FemSolution:
    u: np.ndarray
    electrode_potentials: np.ndarray | None = None
    currents: np.ndarray | None = None
    gauge: str = "nodal_mean"
    residual: float = 0.0

    def power(self) -> float:
        if self.electrode_potentials is None:
            return float("nan")
        return float(self.currents @ self.electrode_potentials)


@dataclass
class MeasurementFrame:
    values: np.ndarray
    protocol: str = "adjacent"
    n_electrodes: int = 16

    def __len__(self):
        return len(self.values)

    def descriptor(self) -> dict:
        L = self.n_electrodes
        return {
            "protocol": self.protocol,
            "electrodes": L,
            "drives": L,
            "measurements_per_drive": L - 3,
            "ordering": "drive-major; drive d injects +1 at d and -1 at d+1; "
            "measurement m = d+2, ..., d+L-2 (mod L) records U_m - U_(m+1)",
        }


def element_sigma(mesh: TriMesh, sigma) -> np.ndarray:
    """Per-triangle conductivity from a nodal field, an element field, or a scalar."""
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        s = np.full(mesh.n_triangles, float(s))
    elif s.shape == (mesh.n_nodes,):
        s = s[mesh.triangles].mean(axis=1)
    elif s.shape != (mesh.n_triangles,):
        raise ValueError(
            f"sigma must have {mesh.n_nodes} nodal or {mesh.n_triangles} element values, got {s.shape}"
        )
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("conductivity must be finite and positive")
    return s


_SUB = np.array(
    [(a, b, 4 - a - b) for a in range(5) for b in range(5 - a)], dtype=float
) / 4.0
_SUB = (_SUB + np.array([1.0, 1.0, 1.0]) / 3.0) / 2.0  # pull lattice off the element edges


def phantom_element_sigma(mesh: TriMesh, phantom) -> np.ndarray:
    """Element conductivity as the mean of the phantom over a sub-element lattice."""
    from .phantoms import sigma_at

    p = mesh.nodes[mesh.triangles]
    pts = np.einsum("qk,tkd->tqd", _SUB, p)
    return sigma_at(phantom, pts[..., 0], pts[..., 1]).mean(axis=1)


def _gradients(mesh: TriMesh):
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    area = mesh.areas
    bx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    by = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    return bx / (2 * area[:, None]), by / (2 * area[:, None]), area


def stiffness_matrix(mesh: TriMesh, sigma) -> sp.csr_matrix:
    s = element_sigma(mesh, sigma)
    gx, gy, area = _gradients(mesh)
    ke = (s * area)[:, None, None] * (
        gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]
    )
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    K.sum_duplicates()
    return K


def element_gradient(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    gx, gy, _ = _gradients(mesh)
    ut = u[mesh.triangles]
    return np.stack([(gx * ut).sum(1), (gy * ut).sum(1)], axis=1)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)


def neumann_load(mesh: TriMesh, g: TrigPattern) -> np.ndarray:
    """b_i = integral of g * phi_i over the boundary polygon.

    g is evaluated at the arc angle linearly interpolated along each chord and
    weighted by chord length. Any discrete compatibility defect left by the
    quadrature is removed along the lumped boundary mass.
    """
    a0, a1 = mesh.boundary_angles[:, 0], mesh.boundary_angles[:, 1]
    t = 0.5 * (_GL_X + 1.0)
    theta = a0[:, None] + (a1 - a0)[:, None] * t[None, :]
    ln = mesh.edge_lengths
    gv = g(theta) * (0.5 * _GL_W)[None, :] * ln[:, None]
    b = np.zeros(mesh.n_nodes)
    np.add.at(b, mesh.boundary_edges[:, 0], (gv * (1 - t)).sum(1))
    np.add.at(b, mesh.boundary_edges[:, 1], (gv * t).sum(1))
    lumped = np.zeros(mesh.n_nodes)
    np.add.at(lumped, mesh.boundary_edges.ravel(), np.repeat(ln / 2, 2))
    return b - b.sum() * lumped / lumped.sum()


def _solve_checked(A: sp.spmatrix, rhs: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    A = A.tocsc()
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise SolverError(f"{what}: singular system ({exc})") from exc
    x = lu.solve(rhs)
    res = A @ x - rhs
    denom = max(np.linalg.norm(rhs), 1e-300)
    rel = float(np.linalg.norm(res) / denom)
    if not np.all(np.isfinite(x)) or rel > RESIDUAL_TOL:
        raise SolverError(f"{what}: ill-conditioned system, relative residual {rel:.3e}")
    return x, rel


def solve_continuum(mesh: TriMesh, sigma, g: TrigPattern | None = None) -> FemSolution:
    """Neumann problem sigma du/dn = g, gauge fixed by zero nodal mean."""
    g = g or TrigPattern()
    K = stiffness_matrix(mesh, sigma)
    freq = g.frequency()
    if abs(freq - round(freq)) > 1e-9 or round(freq) == 0:
        raise ValueError("current pattern is incompatible: boundary integral of g is not zero")
    b = neumann_load(mesh, g)
    n = mesh.n_nodes
    c = np.full((n, 1), 1.0 / n)
    A = sp.bmat([[K, sp.csr_matrix(c)], [sp.csr_matrix(c.T), None]], format="csc")
    x, rel = _solve_checked(A, np.concatenate([b, [0.0]]), "continuum solve")
    return FemSolution(u=x[:n], gauge="nodal_mean", residual=rel)


class CemSystem:
    """Assembled and factorised CEM system for one conductivity; solves many drives."""

    def __init__(self, mesh: TriMesh, sigma, layout: ElectrodeLayout | None = None):
        layout = layout or mesh.layout
        if layout is None:
            raise ValueError("an electrode layout is required")
        z = np.asarray(layout.contact_impedance, dtype=float)
        if np.any(z <= 0):
            raise ValueError("contact impedances must be positive")
        self.mesh, self.layout = mesh, layout
        n, L = mesh.n_nodes, layout.count
        K = stiffness_matrix(mesh, sigma)

        on = mesh.electrode_of_edge >= 0
        e = mesh.boundary_edges[on]
        el = mesh.electrode_of_edge[on]
        ln = mesh.edge_lengths[on]
        w = ln / z[el]
        i0, i1 = e[:, 0], e[:, 1]
        B = sp.coo_matrix(
            (
                np.concatenate([w / 3, w / 3, w / 6, w / 6]),
                (np.concatenate([i0, i1, i0, i1]), np.concatenate([i0, i1, i1, i0])),
            ),
            shape=(n, n),
        )
        C = sp.coo_matrix(
            (np.concatenate([-w / 2, -w / 2]), (np.concatenate([i0, i1]), np.concatenate([el, el]))),
            shape=(n, L),
        )
        elen = np.bincount(el, weights=ln, minlength=L)
        D = sp.diags(elen / z)
        ones = sp.csr_matrix(np.ones((L, 1)))
        self.A = sp.bmat(
            [[K + B, C, None], [C.T, D, ones], [None, ones.T, None]], format="csc"
        )
        try:
            self._lu = splu(self.A)
        except RuntimeError as exc:
            raise SolverError(f"CEM solve: singular system ({exc})") from exc

    def solve(self, currents: np.ndarray) -> list[FemSolution]:
        """Solve for one or more electrode current vectors (shape (L,) or (k, L))."""
        I = np.atleast_2d(np.asarray(currents, dtype=float))
        n, L = self.mesh.n_nodes, self.layout.count
        if I.shape[1] != L:
            raise ValueError(f"expected {L} electrode currents")
        if np.any(np.abs(I.sum(axis=1)) > 1e-12 * np.abs(I).sum(axis=1).clip(1.0)):
            raise ValueError("electrode currents must sum to zero")
        rhs = np.zeros((self.A.shape[0], len(I)))
        rhs[n : n + L] = I.T
        x = self._lu.solve(rhs)
        res = self.A @ x - rhs
        rel = np.linalg.norm(res, axis=0) / np.linalg.norm(rhs, axis=0)
        if not np.all(np.isfinite(x)) or np.any(rel > RESIDUAL_TOL):
            raise SolverError(f"CEM solve: relative residual {rel.max():.3e}")
        return [
            FemSolution(
                u=x[:n, k],
                electrode_potentials=x[n : n + L, k],
                currents=I[k],
                gauge="electrode_sum",
                residual=float(rel[k]),
            )
            for k in range(len(I))
        ]


def solve_cem(mesh: TriMesh, sigma, layout: ElectrodeLayout | None, drive: PairDrive) -> FemSolution:
    layout = layout or mesh.layout
    return CemSystem(mesh, sigma, layout).solve(drive.currents(layout.count))[0]


def adjacent_pairs(L: int = 16) -> list[tuple[int, list[int]]]:
    """Drive electrode d with the 13 measurement start electrodes, ordered from d+2 upward."""
    return [(d, [(d + j) % L for j in range(2, L - 1)]) for d in range(L)]


def measure_protocol(mesh: TriMesh, sigma, layout: ElectrodeLayout | None = None) -> MeasurementFrame:
    layout = layout or mesh.layout
    L = layout.count
    system = CemSystem(mesh, sigma, layout)
    drives = np.array([PairDrive(d, (d + 1) % L).currents(L) for d in range(L)])
    sols = system.solve(drives)
    values = []
    for (d, ms), sol in zip(adjacent_pairs(L), sols):
        U = sol.electrode_potentials
        values.extend(U[m] - U[(m + 1) % L] for m in ms)
    return MeasurementFrame(values=np.asarray(values), n_electrodes=L)


@dataclass
class PotentialField:
    values: np.ndarray
    fallback_count: int = 0

    @property
    def N(self) -> int:
        return self.values.shape[0]


class GridInterpolator:
    """Sparse barycentric map from mesh nodes to masked grid nodes.

    Grid nodes inside the unit circle but outside the mesh polygon (between a
    boundary chord and the arc) use the barycentric coordinates of the nearest
    boundary triangle, i.e. linear extrapolation. They are counted in
    ``fallback_count``.
    """

    def __init__(self, mesh: TriMesh, grid: GridSpec):
        self.mesh, self.grid = mesh, grid
        N, h = grid.N, grid.h
        coords = grid.coords
        owner = np.full(N * N, -1, dtype=np.int64)
        lam = np.zeros((N * N, 3))
        mask = grid.mask.ravel()
        p = mesh.nodes[mesh.triangles]
        lo = np.floor((p.min(axis=1) + 1.0) / h - 1e-9).astype(int).clip(0, N - 1)
        hi = np.ceil((p.max(axis=1) + 1.0) / h + 1e-9).astype(int).clip(0, N - 1)
        for t in range(mesh.n_triangles):
            j = np.arange(lo[t, 0], hi[t, 0] + 1)
            i = np.arange(lo[t, 1], hi[t, 1] + 1)
            I, J = np.meshgrid(i, j, indexing="ij")
            ids = (I * N + J).ravel()
            free = mask[ids] & (owner[ids] < 0)
            if not free.any():
                continue
            ids = ids[free]
            bc = self._bary(p[t], coords[ids % N], coords[ids // N])
            inside = np.all(bc >= -1e-12, axis=1)
            owner[ids[inside]] = t
            lam[ids[inside]] = bc[inside]

        missing = np.flatnonzero(mask & (owner < 0))
        if len(missing):
            b_tri = self._boundary_triangles()
            mids = mesh.nodes[mesh.boundary_edges].mean(axis=1)
            q = np.stack([coords[missing % N], coords[missing // N]], axis=1)
            nearest = np.argmin(((q[:, None, :] - mids[None, :, :]) ** 2).sum(-1), axis=1)
            for gid, e in zip(missing, nearest):
                t = b_tri[e]
                owner[gid] = t
                lam[gid] = self._bary(p[t], coords[[gid % N]], coords[[gid // N]])[0]
        self.fallback_count = int(len(missing))

        ids = grid.mask_ids
        rows = np.repeat(np.arange(len(ids)), 3)
        cols = mesh.triangles[owner[ids]].ravel()
        self.matrix = sp.csr_matrix((lam[ids].ravel(), (rows, cols)), shape=(len(ids), mesh.n_nodes))

    @staticmethod
    def _bary(tri: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        (x0, y0), (x1, y1), (x2, y2) = tri
        det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        l0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / det
        l1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / det
        return np.stack([l0, l1, 1.0 - l0 - l1], axis=1)

    def _boundary_triangles(self) -> np.ndarray:
        edge_owner = {}
        for t, tri in enumerate(self.mesh.triangles):
            for a, b in ((0, 1), (1, 2), (2, 0)):
                edge_owner[frozenset((int(tri[a]), int(tri[b])))] = t
        return np.array([edge_owner[frozenset((int(a), int(b)))] for a, b in self.mesh.boundary_edges])

    def __call__(self, u: np.ndarray) -> PotentialField:
        out = np.zeros(self.grid.N * self.grid.N)
        out[self.grid.mask_ids] = self.matrix @ u
        return PotentialField(out.reshape(self.grid.N, self.grid.N), self.fallback_count)


def interpolate_to_grid(mesh: TriMesh, u: np.ndarray, grid: GridSpec, interp: GridInterpolator | None = None) -> PotentialField:
    interp = interp or GridInterpolator(mesh, grid)
    return interp(u)
