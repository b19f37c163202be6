"""Unit-disk domain: electrode layout, Cartesian reconstruction grid, triangular mesh.

The triangular mesh is built from concentric rings. Only the wedge between an
electrode centre and the neighbouring gap centre is triangulated; the rest of
the disk is obtained by reflection and rotation, so the mesh carries the full
dihedral symmetry of the electrode array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree


class MeshingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ElectrodeLayout:
    count: int
    center_angles: np.ndarray
    arc_half_width: float
    contact_impedance: np.ndarray

    def arcs(self) -> np.ndarray:
        """(count, 2) array of [start, end] angles; start may be negative."""
        return np.stack(
            [self.center_angles - self.arc_half_width, self.center_angles + self.arc_half_width],
            axis=1,
        )

    def covered_fraction(self) -> float:
        return self.count * 2.0 * self.arc_half_width / (2.0 * math.pi)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "arc_half_width": self.arc_half_width,
            "contact_impedance": self.contact_impedance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElectrodeLayout":
        count = int(d["count"])
        coverage = d["arc_half_width"] * count / math.pi
        z = np.asarray(d["contact_impedance"], dtype=float)
        layout = electrode_layout(count, coverage, 1.0)
        return ElectrodeLayout(layout.count, layout.center_angles, float(d["arc_half_width"]), z)

    def with_impedance(self, z) -> "ElectrodeLayout":
        z = np.broadcast_to(np.asarray(z, dtype=float), (self.count,)).copy()
        if np.any(z <= 0):
            raise ValueError("contact impedance must be positive")
        return ElectrodeLayout(self.count, self.center_angles, self.arc_half_width, z)


def electrode_layout(count: int = 16, coverage: float = 0.5, z: float = 0.01) -> ElectrodeLayout:
    """Evenly spaced electrodes; ``coverage`` is the fraction of the circle under metal."""
    if count < 4 or count % 2:
        raise ValueError(f"electrode count must be even and >= 4, got {count}")
    if not 0.0 < coverage < 1.0:
        raise ValueError(f"coverage must lie in (0, 1), got {coverage}")
    if z <= 0:
        raise ValueError(f"contact impedance must be positive, got {z}")
    centers = 2.0 * math.pi * np.arange(count) / count
    return ElectrodeLayout(
        count=count,
        center_angles=centers,
        arc_half_width=coverage * math.pi / count,
        contact_impedance=np.full(count, float(z)),
    )


@dataclass(frozen=True)
class GridSpec:
    """Masked N x N Cartesian grid on [-1, 1]^2.

    Arrays are indexed ``[i, j]`` with ``i`` along y and ``j`` along x. Flat
    node ids are ``i * N + j``.
    """

    N: int
    ring_size: int

    @cached_property
    def h(self) -> float:
        return 2.0 / (self.N - 1)

    @cached_property
    def coords(self) -> np.ndarray:
        # integer numerator keeps the coordinates exactly antisymmetric
        return (2.0 * np.arange(self.N) - (self.N - 1)) / (self.N - 1)

    @cached_property
    def X(self) -> np.ndarray:
        return np.broadcast_to(self.coords[None, :], (self.N, self.N))

    @cached_property
    def Y(self) -> np.ndarray:
        return np.broadcast_to(self.coords[:, None], (self.N, self.N))

    @cached_property
    def mask(self) -> np.ndarray:
        return self.X**2 + self.Y**2 <= 1.0

    @cached_property
    def mask_ids(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @cached_property
    def interior_mask(self) -> np.ndarray:
        m = self.mask
        inner = np.zeros_like(m)
        core = np.ones((self.N - 2, self.N - 2), dtype=bool)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                core &= m[1 + di : self.N - 1 + di, 1 + dj : self.N - 1 + dj]
        inner[1:-1, 1:-1] = core
        return inner

    @cached_property
    def interior_ids(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    @cached_property
    def interior_points(self) -> np.ndarray:
        return np.stack(
            [self.X.ravel()[self.interior_ids], self.Y.ravel()[self.interior_ids]], axis=1
        )

    @cached_property
    def mask_points(self) -> np.ndarray:
        return np.stack([self.X.ravel()[self.mask_ids], self.Y.ravel()[self.mask_ids]], axis=1)

    @cached_property
    def ring_angles(self) -> np.ndarray:
        return 2.0 * math.pi * np.arange(self.ring_size) / self.ring_size

    @cached_property
    def ring_points(self) -> np.ndarray:
        return np.stack([np.cos(self.ring_angles), np.sin(self.ring_angles)], axis=1)

    @cached_property
    def ring_extension(self):
        """Sparse (P, n_interior) map from interior-node values to ring points.

        Bilinear interpolation on the grid cell holding each ring point. Cell
        corners that are not interior nodes get a least-squares linear
        extrapolation from nearby interior nodes, so the map is exact for
        fields that are linear in (x, y).
        """
        from scipy.sparse import csr_matrix

        N, h = self.N, self.h
        pts = self.interior_points
        tree = cKDTree(pts)
        pos = {int(g): k for k, g in enumerate(self.interior_ids)}
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

        def corner_weights(i: int, j: int):
            gid = i * N + j
            if gid in pos:
                return np.array([pos[gid]]), np.array([1.0])
            if gid not in cache:
                c = np.array([self.coords[j], self.coords[i]])
                _, nb = tree.query(c, k=12)
                A = np.column_stack([np.ones(len(nb)), (pts[nb] - c) / h])
                w = np.linalg.pinv(A)[0]
                cache[gid] = (nb, w)
            return cache[gid]

        rows, cols, vals = [], [], []
        for r, (px, py) in enumerate(self.ring_points):
            fj = min(max((px + 1.0) / h, 0.0), N - 1 - 1e-12)
            fi = min(max((py + 1.0) / h, 0.0), N - 1 - 1e-12)
            j0, i0 = int(fj), int(fi)
            tx, ty = fj - j0, fi - i0
            for di, dj, wb in (
                (0, 0, (1 - tx) * (1 - ty)),
                (0, 1, tx * (1 - ty)),
                (1, 0, (1 - tx) * ty),
                (1, 1, tx * ty),
            ):
                if wb == 0.0:
                    continue
                nb, w = corner_weights(i0 + di, j0 + dj)
                rows.extend([r] * len(nb))
                cols.extend(nb.tolist())
                vals.extend((wb * w).tolist())
        return csr_matrix(
            (vals, (rows, cols)), shape=(self.ring_size, len(self.interior_ids))
        )

    def to_full(self, values: np.ndarray, ids: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.N * self.N, fill, dtype=np.result_type(values, np.float64))
        out[ids] = values
        return out.reshape(self.N, self.N)

    def to_dict(self) -> dict:
        return {"N": self.N, "ring_size": self.ring_size}


def build_grid(N: int = 64, ring_size: int | None = None) -> GridSpec:
    if N < 16:
        raise ValueError(f"grid resolution must be >= 16, got {N}")
    P = 4 * N if ring_size is None else int(ring_size)
    if P < 8:
        raise ValueError("ring needs at least 8 points")
    return GridSpec(N=N, ring_size=P)


@dataclass(frozen=True)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_angles: np.ndarray
    electrode_of_edge: np.ndarray
    target_h: float = 0.0
    layout: ElectrodeLayout | None = field(default=None, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        p = self.nodes[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return self.boundary_edges[:, 0]

    def max_edge_length(self) -> float:
        p = self.nodes[self.triangles]
        e = np.concatenate(
            [p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=0
        )
        return float(np.linalg.norm(e, axis=1).max())

    def to_dict(self) -> dict:
        return {
            "target_h": self.target_h,
            "n_nodes": self.n_nodes,
            "n_triangles": self.n_triangles,
            "layout": None if self.layout is None else self.layout.to_dict(),
        }


def _ring_offsets(k: int, n_rings: int, h: float, half_width: float, count: int) -> np.ndarray:
    """Angular offsets 0 = w_0 < ... < w_m = pi/count for one ring inside the wedge."""
    wedge = math.pi / count
    if k == n_rings:
        n_e = max(1, math.ceil(half_width / h))
        n_g = max(1, math.ceil((wedge - half_width) / h))
        return np.concatenate(
            [np.linspace(0.0, half_width, n_e + 1), np.linspace(half_width, wedge, n_g + 1)[1:]]
        )
    r = k / n_rings
    m = max(1, math.ceil(r * wedge / h))
    return wedge * np.arange(m + 1) / m


def build_trimesh(target_h: float = 0.03, layout: ElectrodeLayout | None = None) -> TriMesh:
    if layout is None:
        layout = electrode_layout()
    if not 0.0 < target_h < 0.2:
        raise MeshingError(f"target_h must lie in (0, 0.2), got {target_h}")
    L = layout.count
    wedge = math.pi / L
    if layout.arc_half_width >= wedge:
        raise MeshingError(f"electrodes overlap at target_h={target_h}")
    n_rings = math.ceil(1.0 / target_h)

    offsets = [None] + [
        _ring_offsets(k, n_rings, target_h, layout.arc_half_width, L) for k in range(1, n_rings + 1)
    ]
    m = [0] + [len(w) - 1 for w in offsets[1:]]
    size = [1] + [2 * L * mk for mk in m[1:]]
    start = np.concatenate([[0], np.cumsum(size)[:-1]])

    nodes = [np.zeros((1, 2))]
    for k in range(1, n_rings + 1):
        t = np.arange(size[k])
        sector = np.round(t / (2 * m[k])).astype(int)
        rel = t - 2 * m[k] * sector
        ang = 2.0 * math.pi * sector / L + np.sign(rel) * offsets[k][np.abs(rel)]
        r = k / n_rings
        nodes.append(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))
    nodes = np.concatenate(nodes, axis=0)

    # wedge triangles as (ring, local index) pairs
    wedge_tris: list[tuple[tuple[int, int], ...]] = []
    for t in range(m[1]):
        wedge_tris.append(((0, 0), (1, t), (1, t + 1)))
    for k in range(1, n_rings):
        a, b = offsets[k], offsets[k + 1]
        i = j = 0
        while i < m[k] or j < m[k + 1]:
            if j == m[k + 1] or (i < m[k] and a[i + 1] <= b[j + 1]):
                wedge_tris.append(((k, i), (k + 1, j), (k, i + 1)))
                i += 1
            else:
                wedge_tris.append(((k, i), (k + 1, j), (k + 1, j + 1)))
                j += 1

    def gid(k: int, t: int) -> int:
        if k == 0:
            return 0
        return int(start[k] + t % size[k])

    tris = []
    for sector in range(L):
        for sign in (1, -1):
            for tri in wedge_tris:
                tris.append([gid(k, 2 * m[k] * sector + sign * t) for k, t in tri])
    tris = np.array(tris, dtype=np.int64)
    p = nodes[tris]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]

    kb = n_rings
    nb = size[kb]
    b_ids = start[kb] + np.arange(nb)
    b_ang = np.mod(np.arctan2(nodes[b_ids, 1], nodes[b_ids, 0]), 2.0 * math.pi)
    order = np.argsort(b_ang, kind="stable")
    b_ids, b_ang = b_ids[order], b_ang[order]
    edges = np.stack([b_ids, np.roll(b_ids, -1)], axis=1)
    ang_end = np.roll(b_ang, -1)
    ang_end[-1] += 2.0 * math.pi
    edge_angles = np.stack([b_ang, ang_end], axis=1)

    mid = edge_angles.mean(axis=1)
    e_of_edge = np.full(len(edges), -1, dtype=np.int64)
    for l, c in enumerate(layout.center_angles):
        d = np.abs(np.angle(np.exp(1j * (mid - c))))
        e_of_edge[d < layout.arc_half_width] = l

    mesh = TriMesh(
        nodes=nodes,
        triangles=tris,
        boundary_edges=edges,
        boundary_angles=edge_angles,
        electrode_of_edge=e_of_edge,
        target_h=float(target_h),
        layout=layout,
    )
    counts = np.bincount(e_of_edge[e_of_edge >= 0], minlength=L)
    if np.any(counts < 2):
        raise MeshingError(f"electrode under-resolved at target_h={target_h}")
    if np.any(mesh.areas <= 0):
        raise MeshingError(f"degenerate triangle at target_h={target_h}")
    return mesh


def save_mesh(mesh: TriMesh, directory) -> dict:
    """Write nodes/triangles as little-endian float32/int32 blobs; return manifest entry."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mesh.nodes.astype("<f4").tofile(directory / "mesh_nodes.bin")
    mesh.triangles.astype("<i4").tofile(directory / "mesh_triangles.bin")
    meta = mesh.to_dict()
    meta["files"] = {
        "nodes": {"file": "mesh_nodes.bin", "dtype": "<f4", "shape": list(mesh.nodes.shape)},
        "triangles": {
            "file": "mesh_triangles.bin",
            "dtype": "<i4",
            "shape": list(mesh.triangles.shape),
        },
    }
    (directory / "mesh.json").write_text(json.dumps(meta, indent=2))
    return meta
