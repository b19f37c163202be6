"""Random piecewise-constant conductivity phantoms over a unit background."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("one_circle", "two_circles", "circle_triangle")
BACKGROUND = 1.0


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    kind = "circle"

    def contains(self, x, y):
        cx, cy = self.center
        return (np.asarray(x) - cx) ** 2 + (np.asarray(y) - cy) ** 2 <= self.radius**2

    def max_radius(self) -> float:
        return math.hypot(*self.center) + self.radius

    def centroid(self) -> tuple[float, float]:
        return self.center

    def to_dict(self):
        return {"kind": "circle", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Triangle:
    vertices: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

    kind = "triangle"

    def contains(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        (x0, y0), (x1, y1), (x2, y2) = self.vertices
        d0 = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        d1 = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        d2 = (x0 - x2) * (y - y2) - (y0 - y2) * (x - x2)
        neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
        pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
        return ~(neg & pos)

    def max_radius(self) -> float:
        return max(math.hypot(*v) for v in self.vertices)

    def centroid(self) -> tuple[float, float]:
        v = np.asarray(self.vertices)
        return tuple(v.mean(axis=0).tolist())

    def circumradius(self) -> float:
        c = np.asarray(self.centroid())
        return float(max(np.linalg.norm(np.asarray(v) - c) for v in self.vertices))

    def to_dict(self):
        return {"kind": "triangle", "vertices": [list(v) for v in self.vertices]}


@dataclass(frozen=True)
class Inclusion:
    shape: Circle | Triangle
    value: float

    def to_dict(self):
        return {"shape": self.shape.to_dict(), "value": self.value}

    @classmethod
    def from_dict(cls, d):
        s = d["shape"]
        if s["kind"] == "circle":
            shape = Circle(tuple(s["center"]), float(s["radius"]))
        elif s["kind"] == "triangle":
            shape = Triangle(tuple(tuple(v) for v in s["vertices"]))
        else:
            raise ValueError(f"unknown shape kind {s['kind']!r}")
        return cls(shape, float(d["value"]))


@dataclass(frozen=True)
class Phantom:
    inclusions: tuple[Inclusion, ...] = ()
    family: str | None = None
    background: float = BACKGROUND

    def to_dict(self):
        return {
            "family": self.family,
            "background": self.background,
            "inclusions": [inc.to_dict() for inc in self.inclusions],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            inclusions=tuple(Inclusion.from_dict(i) for i in d["inclusions"]),
            family=d.get("family"),
            background=float(d.get("background", BACKGROUND)),
        )


@dataclass
class PhantomLimits:
    radius: tuple[float, float] = (0.15, 0.35)
    value: tuple[float, float] = (2.0, 6.0)
    margin: float = 0.1
    gap: float = 0.05
    max_attempts: int = 1000
    extra: dict = field(default_factory=dict)


def sigma_at(phantom: Phantom, x, y):
    """Conductivity at points ``(x, y)``; accepts scalars or arrays."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    out = np.full(np.broadcast(x, y).shape, phantom.background, dtype=float)
    taken = np.zeros(out.shape, dtype=bool)
    for inc in phantom.inclusions:
        hit = inc.shape.contains(x, y) & ~taken
        out[hit] = inc.value
        taken |= hit
    return out if out.ndim else float(out)


def rasterize(phantom: Phantom, grid) -> np.ndarray:
    out = sigma_at(phantom, grid.X, grid.Y)
    out[~grid.mask] = phantom.background
    return out


def _random_circle(rng, lim: PhantomLimits) -> Circle:
    r = rng.uniform(*lim.radius)
    rmax = 1.0 - lim.margin - r
    rho = rmax * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return Circle((rho * math.cos(phi), rho * math.sin(phi)), r)


def _random_triangle(rng, lim: PhantomLimits) -> Triangle:
    # equilateral template, circumradius drawn from the radius range
    R = rng.uniform(*lim.radius)
    rot = rng.uniform(0.0, 2.0 * math.pi)
    rmax = 1.0 - lim.margin - R
    rho = rmax * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    cx, cy = rho * math.cos(phi), rho * math.sin(phi)
    verts = tuple(
        (cx + R * math.cos(rot + 2.0 * math.pi * q / 3), cy + R * math.sin(rot + 2.0 * math.pi * q / 3))
        for q in range(3)
    )
    return Triangle(verts)


def _bounding_radius(shape) -> float:
    return shape.radius if isinstance(shape, Circle) else shape.circumradius()


def shapes_overlap(a, b, gap: float = 0.0) -> bool:
    """Conservative test via bounding circles around each shape's centre."""
    ca, cb = np.asarray(a.centroid()), np.asarray(b.centroid())
    return float(np.linalg.norm(ca - cb)) < _bounding_radius(a) + _bounding_radius(b) + gap


def sample_phantom(seed: int, family: str = "one_circle", limits: PhantomLimits | None = None) -> Phantom:
    if family not in FAMILIES:
        raise ValueError(f"unknown phantom family {family!r}; expected one of {FAMILIES}")
    lim = limits or PhantomLimits()
    if lim.radius[0] <= 0 or lim.radius[1] < lim.radius[0]:
        raise ValueError(f"bad radius range {lim.radius}")
    rng = np.random.default_rng(seed)
    makers = {
        "one_circle": (_random_circle,),
        "two_circles": (_random_circle, _random_circle),
        "circle_triangle": (_random_circle, _random_triangle),
    }[family]
    for _ in range(lim.max_attempts):
        shapes = [make(rng, lim) for make in makers]
        values = [float(rng.uniform(*lim.value)) for _ in shapes]
        if any(s.max_radius() > 1.0 - lim.margin + 1e-12 for s in shapes):
            continue
        if len(shapes) == 2 and shapes_overlap(shapes[0], shapes[1], lim.gap):
            continue
        return Phantom(tuple(Inclusion(s, v) for s, v in zip(shapes, values)), family=family)
    raise RuntimeError(
        f"could not place {family} phantom after {lim.max_attempts} attempts; limits infeasible"
    )


def homogeneous() -> Phantom:
    return Phantom((), family=None)


def centered_circle(radius: float, value: float) -> Phantom:
    return Phantom((Inclusion(Circle((0.0, 0.0), radius), value),), family="one_circle")
