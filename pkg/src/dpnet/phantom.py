"""Random Shepp-Logan-like phantoms, the data noise model and datasets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .tomo import Geometry, radon_forward

__all__ = [
    "Dataset",
    "Ellipse",
    "EllipsePhantomSpec",
    "NoiseModel",
    "load_dataset",
    "make_dataset",
    "render_phantom",
    "sample_random_phantom",
    "save_dataset",
]


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float  # semi-axis along the rotated x1 direction
    b: float
    rotation: float
    intensity: float

    def mirrored(self) -> "Ellipse":
        return Ellipse(-self.cx, self.cy, self.a, self.b, -self.rotation, self.intensity)

    def max_radius(self) -> float:
        """Largest distance from the origin of any point of the ellipse."""
        t = np.linspace(0.0, 2 * math.pi, 721)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        px = self.cx + self.a * np.cos(t) * c - self.b * np.sin(t) * s
        py = self.cy + self.a * np.cos(t) * s + self.b * np.sin(t) * c
        return float(np.sqrt(px * px + py * py).max())


@dataclass(frozen=True)
class EllipsePhantomSpec:
    """Additive ellipses, optionally with a small grid of dots on top."""

    ellipses: tuple = ()
    dots: tuple = ()  # extra small discs, stored as Ellipse as well

    def mirrored(self) -> "EllipsePhantomSpec":
        return EllipsePhantomSpec(
            tuple(e.mirrored() for e in self.ellipses), tuple(d.mirrored() for d in self.dots)
        )

    def all_shapes(self):
        return self.ellipses + self.dots


def render_phantom(spec: EllipsePhantomSpec, n: int) -> np.ndarray:
    """Sum the intensities of all ellipses containing each pixel centre, clamp to [0, 1]."""
    if n < 2:
        raise ValueError("n must be at least 2")
    h = 2.0 / n
    c = -1.0 + h * (np.arange(n) + 0.5)
    x1, x2 = np.meshgrid(c, -c)
    img = np.zeros((n, n))
    for e in spec.all_shapes():
        cr, sr = math.cos(e.rotation), math.sin(e.rotation)
        dx, dy = x1 - e.cx, x2 - e.cy
        u = dx * cr + dy * sr
        v = -dx * sr + dy * cr
        img[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.intensity
    return np.clip(img, 0.0, 1.0)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))
    return np.random.default_rng(seed)


def sample_random_phantom(seed, dots: bool | None = None) -> EllipsePhantomSpec:
    """Draw a random head-like phantom.

    A bright skull ellipse with a darker brain region inside, 4 to 10 random
    interior ellipses, and (with probability 1/2 unless ``dots`` is given) a
    3 x 3 grid of small bright dots.  Every shape lies inside a disc of
    radius 0.98, enforced by rejection.
    """
    rng = _rng(seed)

    def inside(e: Ellipse, limit: float) -> bool:
        return e.max_radius() <= limit

    while True:
        a = rng.uniform(0.68, 0.85)
        b = rng.uniform(0.8, 0.95)
        rot = rng.uniform(-0.3, 0.3)
        skull = Ellipse(rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), a, b, rot, 1.0)
        if inside(skull, 0.98):
            break
    thick = rng.uniform(0.04, 0.08)
    brain = Ellipse(skull.cx, skull.cy, a - thick, b - thick, rot, -rng.uniform(0.6, 0.8))
    inner_limit = min(a, b) - thick - 0.02
    shapes = [skull, brain]
    for _ in range(int(rng.integers(4, 11))):
        while True:
            r = rng.uniform(0.0, 0.75) * inner_limit
            phi = rng.uniform(0, 2 * math.pi)
            e = Ellipse(
                skull.cx + r * math.cos(phi),
                skull.cy + r * math.sin(phi),
                rng.uniform(0.04, 0.3),
                rng.uniform(0.04, 0.3),
                rng.uniform(-math.pi / 2, math.pi / 2),
                float(rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.35)),
            )
            if _inside_shape(e, brain):
                shapes.append(e)
                break
    if dots is None:
        dots = bool(rng.random() < 0.5)
    dot_list = []
    if dots:
        while True:
            radius = rng.uniform(0.025, 0.04)
            gap = rng.uniform(2.8, 3.6) * radius
            ox = skull.cx + rng.uniform(-0.4, 0.4) * inner_limit
            oy = skull.cy + rng.uniform(-0.4, 0.4) * inner_limit
            intensity = rng.uniform(0.25, 0.4)
            cand = [Ellipse(ox + i * gap, oy + j * gap, radius, radius, 0.0, intensity)
                    for i in (-1, 0, 1) for j in (-1, 0, 1)]
            if all(_inside_shape(d, brain) for d in cand):
                dot_list = cand
                break
    return EllipsePhantomSpec(tuple(shapes), tuple(dot_list))


def _inside_shape(e: Ellipse, outer: Ellipse) -> bool:
    t = np.linspace(0.0, 2 * math.pi, 181)
    c, s = math.cos(e.rotation), math.sin(e.rotation)
    px = e.cx + e.a * np.cos(t) * c - e.b * np.sin(t) * s - outer.cx
    py = e.cy + e.a * np.cos(t) * s + e.b * np.sin(t) * c - outer.cy
    co, so = math.cos(outer.rotation), math.sin(outer.rotation)
    u = px * co + py * so
    v = -px * so + py * co
    return bool(np.all((u / outer.a) ** 2 + (v / outer.b) ** 2 <= 1.0))


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian noise ``delta * eta`` with ``eta ~ ||A x||_inf N(0, I)``."""

    delta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")

    def draw(self, clean: np.ndarray, index: int) -> np.ndarray:
        """Scaled noise realisation ``eta`` (without the delta factor) for sample ``index``."""
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), int(index)]))
        return np.abs(clean).max() * rng.standard_normal(clean.shape)


@dataclass
class Dataset:
    x: np.ndarray  # (n, N, N)
    y: np.ndarray  # (n, n_angles, n_detectors), noisy data
    eta: np.ndarray  # (n, n_angles, n_detectors), noise before the delta factor
    geometry: Geometry
    noise: NoiseModel
    seed: int
    split: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.x)
        if not self.split:
            self.split = ["train"] * n
        if len(self.y) != n or len(self.eta) != n or len(self.split) != n:
            raise ValueError("dataset arrays and split labels must have equal length")

    def __len__(self):
        return len(self.x)

    def indices(self, label: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == label], dtype=int)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.x[idx], self.y[idx], self.eta[idx], self.geometry, self.noise, self.seed,
                       [self.split[i] for i in idx])

    def clean_data(self) -> np.ndarray:
        return np.stack([radon_forward(x, self.geometry) for x in self.x])


def make_dataset(n: int, geom: Geometry, noise: NoiseModel, seed: int = 0, n_test: int | None = None) -> Dataset:
    """Draw ``n`` phantoms and their noisy limited-angle data.

    Sample ``i`` uses the phantom seed ``(seed, i)`` and the noise seed
    ``(noise.seed, i)``, so any subset can be regenerated independently.  The
    last ``n_test`` samples (default ``n // 6``, i.e. the 500/100 ratio) are
    labelled "test".
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if n_test is None:
        n_test = n // 6
    if not 0 <= n_test <= n:
        raise ValueError("n_test must lie in [0, n]")
    xs = np.empty((n,) + geom.image_shape)
    ys = np.empty((n,) + geom.sino_shape)
    etas = np.empty((n,) + geom.sino_shape)
    for i in range(n):
        xs[i] = render_phantom(sample_random_phantom((seed, i)), geom.n)
        clean = radon_forward(xs[i], geom)
        etas[i] = noise.draw(clean, i)
        ys[i] = clean + noise.delta * etas[i]
    split = ["train"] * (n - n_test) + ["test"] * n_test
    return Dataset(xs, ys, etas, geom, noise, int(seed), split)


def save_dataset(ds: Dataset, path) -> Path:
    path = io.ensure_dir(path)
    io.write_array(path / "x.pxr", ds.x)
    io.write_array(path / "y.pxr", ds.y)
    io.write_array(path / "eta.pxr", ds.eta)
    io.write_json(path / "dataset.json", {
        "geometry": ds.geometry.to_dict(),
        "delta": ds.noise.delta,
        "noise_seed": ds.noise.seed,
        "seed": ds.seed,
        "split": ds.split,
        "n": len(ds),
    })
    return path


def load_dataset(path, expect_geometry: Geometry | None = None) -> Dataset:
    path = Path(path)
    if not path.is_dir():
        raise io.MissingFileError(f"no dataset directory at {path}")
    meta = io.read_json(path / "dataset.json")
    try:
        geom = Geometry.from_dict(meta["geometry"])
        n = int(meta["n"])
        noise = NoiseModel(float(meta["delta"]), int(meta["noise_seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise io.CorruptFileError(f"{path}/dataset.json: bad sidecar ({exc})") from exc
    if expect_geometry is not None and expect_geometry != geom:
        raise io.ShapeMismatchError(f"{path}: stored geometry differs from the expected one")
    x = io.read_array(path / "x.pxr", (n,) + geom.image_shape)
    y = io.read_array(path / "y.pxr", (n,) + geom.sino_shape)
    eta = io.read_array(path / "eta.pxr", (n,) + geom.sino_shape)
    return Dataset(x, y, eta, geom, noise, int(meta["seed"]), list(meta["split"]))
