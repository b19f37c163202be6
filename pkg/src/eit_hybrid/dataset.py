"""Generate, persist, normalise and split (dV, U, sigma) triples.

On-disk layout of a dataset directory::

    manifest.json   descriptors, split assignment, per-sample offsets, statistics
    dv.bin          (n, 208) little-endian float32
    u.bin           (n, N, N) little-endian float32
    sigma.bin       (n, N, N) little-endian float32
    dv_ref.bin      (208,) homogeneous-disk reference voltages
    phantoms.json   inclusion parameters per sample
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import fem
from .geometry import GridSpec, build_grid, build_trimesh, electrode_layout
from .phantoms import FAMILIES, Phantom, PhantomLimits, rasterize, sample_phantom

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STD_FLOOR = 1e-8
F32 = "<f4"


@dataclass
class DatasetConfig:
    n: int = 300
    seed: int = 0
    N: int = 64
    target_h: float = 0.03
    families: dict = field(default_factory=lambda: {f: 1.0 for f in FAMILIES})
    radius: tuple = (0.15, 0.35)
    value: tuple = (2.0, 6.0)
    margin: float = 0.1
    noise: float = 0.0
    splits: tuple = (0.8, 0.1, 0.1)
    electrodes: int = 16
    coverage: float = 0.5
    contact_impedance: float = 0.01

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("radius", "value", "splits"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


@dataclass
class Sample:
    phantom: Phantom
    dv: np.ndarray
    u_grid: np.ndarray
    sigma_grid: np.ndarray
    seed: int


class Simulator:
    """Mesh, grid and interpolator shared across the samples of one dataset."""

    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg
        self.layout = electrode_layout(cfg.electrodes, cfg.coverage, cfg.contact_impedance)
        self.mesh = build_trimesh(cfg.target_h, self.layout)
        self.grid = build_grid(cfg.N)
        self.interp = fem.GridInterpolator(self.mesh, self.grid)
        self.pattern = fem.TrigPattern(electrodes=cfg.electrodes)

    def simulate(self, phantom: Phantom, seed: int = 0) -> Sample:
        s_el = fem.phantom_element_sigma(self.mesh, phantom)
        dv = fem.measure_protocol(self.mesh, s_el, self.layout).values
        u = self.interp(fem.solve_continuum(self.mesh, s_el, self.pattern).u).values
        m = self.grid.mask
        u = np.where(m, u - u[m].mean(), 0.0)
        return Sample(phantom, dv, u, rasterize(phantom, self.grid), seed)


def split_sizes(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative numbers summing to 1: {fractions}")
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    return n - n_val - n_test, n_val, n_test


def add_noise(dv: np.ndarray, level: float, seed: int) -> np.ndarray:
    """Additive Gaussian noise with std = level * std(dv)."""
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    dv = np.asarray(dv, dtype=float)
    if level == 0:
        return dv.copy()
    rng = np.random.default_rng(seed)
    return dv + rng.normal(0.0, level * dv.std(), size=dv.shape)


@dataclass
class NormStats:
    dv_mean: np.ndarray
    dv_std: np.ndarray
    u_scale: float
    clamped: list = field(default_factory=list)
    reference: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "dv_mean": self.dv_mean.tolist(),
            "dv_std": self.dv_std.tolist(),
            "u_scale": self.u_scale,
            "clamped": list(self.clamped),
            "subtract_reference": self.reference is not None,
        }

    @classmethod
    def from_dict(cls, d: dict, reference: np.ndarray | None = None) -> "NormStats":
        return cls(
            np.asarray(d["dv_mean"], dtype=float),
            np.asarray(d["dv_std"], dtype=float),
            float(d["u_scale"]),
            list(d.get("clamped", [])),
            reference if d.get("subtract_reference") else None,
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def compute_stats(dv: np.ndarray, u: np.ndarray, mask: np.ndarray, reference=None) -> NormStats:
    dv = np.asarray(dv, dtype=float)
    if reference is not None:
        dv = dv - reference
    mean = dv.mean(axis=0)
    std = dv.std(axis=0)
    clamped = np.flatnonzero(std < STD_FLOOR).tolist()
    if clamped:
        log.warning("clamping %d zero-variance dv entries to std=%g", len(clamped), STD_FLOOR)
    std = np.maximum(std, STD_FLOOR)
    scale = float(np.abs(np.asarray(u, dtype=float)[:, mask]).max())
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError("potential scale must be finite and positive")
    return NormStats(mean, std, scale, clamped, reference)


def normalize(dv, u, stats: NormStats):
    """Standardise dv per entry and scale u by the global training maximum."""
    dv = np.asarray(dv, dtype=float)
    if stats.reference is not None:
        dv = dv - stats.reference
    dv_n = (dv - stats.dv_mean) / stats.dv_std
    u_n = None if u is None else np.asarray(u, dtype=float) / stats.u_scale
    return dv_n, u_n


def denormalize(dv_n, u_n, stats: NormStats):
    dv = None
    if dv_n is not None:
        dv = np.asarray(dv_n) * stats.dv_std + stats.dv_mean
        if stats.reference is not None:
            dv = dv + stats.reference
    u = None if u_n is None else np.asarray(u_n) * stats.u_scale
    return dv, u


def _write(arr: np.ndarray, path: Path):
    np.ascontiguousarray(arr, dtype=F32).tofile(path)


def generate_dataset(cfg: DatasetConfig, out_dir, subtract_reference: bool = False) -> dict:
    if cfg.n < 10:
        raise ValueError(f"need at least 10 samples, got {cfg.n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulator(cfg)
    lim = PhantomLimits(radius=tuple(cfg.radius), value=tuple(cfg.value), margin=cfg.margin)

    fams = [f for f in FAMILIES if cfg.families.get(f, 0) > 0]
    bad = set(cfg.families) - set(FAMILIES)
    if bad or not fams:
        raise ValueError(f"bad family weights {cfg.families}")
    w = np.array([cfg.families[f] for f in fams], dtype=float)
    w /= w.sum()

    rng = np.random.default_rng(cfg.seed)
    samples: list[Sample] = []
    records = []
    failures = 0
    for k in range(cfg.n):
        family = fams[int(rng.choice(len(fams), p=w))]
        retries = 0
        while True:
            seed = int(rng.integers(0, 2**31 - 1))
            try:
                s = sim.simulate(sample_phantom(seed, family, lim), seed)
                break
            except (fem.SolverError, RuntimeError) as exc:
                log.warning("sample %d (seed %d) failed: %s; resampling", k, seed, exc)
                failures += 1
                retries += 1
        if cfg.noise > 0:
            s.dv = add_noise(s.dv, cfg.noise, seed + 1)
        samples.append(s)
        records.append({"index": k, "seed": seed, "family": family, "resamples": retries})

    n_tr, n_va, n_te = split_sizes(cfg.n, cfg.splits)
    perm = np.random.default_rng([cfg.seed, 1]).permutation(cfg.n)
    split_of = np.empty(cfg.n, dtype=object)
    split_of[perm[:n_tr]] = "train"
    split_of[perm[n_tr : n_tr + n_va]] = "val"
    split_of[perm[n_tr + n_va :]] = "test"

    N, P = cfg.N, len(samples[0].dv)
    dv = np.stack([s.dv for s in samples]).astype(F32)
    u = np.stack([s.u_grid for s in samples]).astype(F32)
    sig = np.stack([s.sigma_grid for s in samples]).astype(F32)
    ref = sim.simulate(Phantom(()), 0).dv.astype(F32)
    _write(dv, out / "dv.bin")
    _write(u, out / "u.bin")
    _write(sig, out / "sigma.bin")
    _write(ref, out / "dv_ref.bin")

    train = perm[:n_tr]
    stats = compute_stats(
        dv[train].astype(float),
        u[train].astype(float),
        sim.grid.mask,
        ref.astype(float) if subtract_reference else None,
    )
    for r in records:
        k = r["index"]
        r["split"] = str(split_of[k])
        r["offsets"] = {"dv": k * P * 4, "u": k * N * N * 4, "sigma": k * N * N * 4}

    cfg_d = asdict(cfg)
    manifest = {
        "version": FORMAT_VERSION,
        "config": cfg_d,
        "grid": sim.grid.to_dict(),
        "mesh": sim.mesh.to_dict(),
        "pattern": sim.pattern.to_dict(),
        "measurement": fem.MeasurementFrame(samples[0].dv, n_electrodes=cfg.electrodes).descriptor(),
        "arrays": {
            "dv": {"file": "dv.bin", "dtype": F32, "shape": [cfg.n, P]},
            "u": {"file": "u.bin", "dtype": F32, "shape": [cfg.n, N, N]},
            "sigma": {"file": "sigma.bin", "dtype": F32, "shape": [cfg.n, N, N]},
            "dv_ref": {"file": "dv_ref.bin", "dtype": F32, "shape": [P]},
        },
        "stats": stats.to_dict(),
        "stats_hash": stats.digest(),
        "splits": {"train": n_tr, "val": n_va, "test": n_te},
        "solver_failures": failures,
        "samples": records,
    }
    (out / "phantoms.json").write_text(
        json.dumps([s.phantom.to_dict() for s in samples], indent=1)
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


class Dataset:
    """Read-only view of a dataset directory."""

    def __init__(self, directory):
        self.dir = Path(directory)
        path = self.dir / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(str(path))
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {self.manifest.get('version')}")

    def _array(self, name: str) -> np.ndarray:
        spec = self.manifest["arrays"][name]
        a = np.fromfile(self.dir / spec["file"], dtype=spec["dtype"])
        return a.reshape(spec["shape"])

    @cached_property
    def dv(self) -> np.ndarray:
        return self._array("dv")

    @cached_property
    def u(self) -> np.ndarray:
        return self._array("u")

    @cached_property
    def sigma(self) -> np.ndarray:
        return self._array("sigma")

    @cached_property
    def dv_ref(self) -> np.ndarray:
        return self._array("dv_ref")

    @cached_property
    def phantoms(self) -> list[Phantom]:
        return [Phantom.from_dict(d) for d in json.loads((self.dir / "phantoms.json").read_text())]

    @cached_property
    def grid(self) -> GridSpec:
        g = self.manifest["grid"]
        return build_grid(g["N"], g["ring_size"])

    @cached_property
    def stats(self) -> NormStats:
        return NormStats.from_dict(self.manifest["stats"], self.dv_ref.astype(float))

    @property
    def stats_hash(self) -> str:
        return self.manifest["stats_hash"]

    def __len__(self) -> int:
        return len(self.manifest["samples"])

    def split(self, name: str) -> np.ndarray:
        return np.array([r["index"] for r in self.manifest["samples"] if r["split"] == name], dtype=int)

    def sample(self, k: int) -> Sample:
        if not 0 <= k < len(self):
            raise IndexError(f"case {k} not in dataset of size {len(self)}")
        rec = self.manifest["samples"][k]
        return Sample(
            self.phantoms[k], self.dv[k].astype(float), self.u[k].astype(float),
            self.sigma[k].astype(float), rec["seed"],
        )

    def family(self, k: int) -> str:
        return self.manifest["samples"][k]["family"]


def load_dataset(directory) -> Dataset:
    return Dataset(directory)
