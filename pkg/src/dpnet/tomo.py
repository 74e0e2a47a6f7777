"""Parallel-beam (limited-angle) Radon transform and filtered backprojection.

The image lives on an N x N pixel grid covering [-1, 1]^2; row 0 is the top
(x2 = +1) and column 0 the left edge (x1 = -1).  A ray (theta, s) is the line
x1 cos(theta) + x2 sin(theta) = s.  Line integrals use Joseph's scheme: step
through the image one row (or column) at a time along the dominant
direction, interpolate linearly between the two neighbouring pixel centres
and weight by the path length per step.  The weights are assembled into a
sparse matrix once per geometry, so the backprojection is its exact
transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .linop import LinearOperator

__all__ = [
    "Geometry",
    "RadonTransform",
    "fbp",
    "fbp_operator",
    "radon_adjoint",
    "radon_forward",
    "ramp_filter",
]


@dataclass(frozen=True)
class Geometry:
    """Image size, detector count and projection angles (radians)."""

    n: int
    n_detectors: int
    angles: tuple = field(default=())

    def __post_init__(self):
        if self.n < 2 or self.n_detectors < 2:
            raise ValueError("image size and detector count must be at least 2")
        angles = tuple(float(a) for a in self.angles)
        if not angles:
            raise ValueError("at least one projection angle is required")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("angles must be strictly increasing")
        if angles[0] < -math.pi / 2 - 1e-12 or angles[-1] >= math.pi / 2:
            raise ValueError("angles must lie in [-pi/2, pi/2)")
        object.__setattr__(self, "angles", angles)

    @classmethod
    def limited(cls, n: int = 64, n_detectors: int = 64, n_angles: int = 60,
                lo: float = -math.pi / 3, hi: float = math.pi / 3) -> "Geometry":
        """``n_angles`` equidistant angles in ``[lo, hi)``."""
        step = (hi - lo) / n_angles
        return cls(n, n_detectors, tuple(lo + step * k for k in range(n_angles)))

    @classmethod
    def full(cls, n: int = 64, n_detectors: int = 64, n_angles: int = 90) -> "Geometry":
        return cls.limited(n, n_detectors, n_angles, -math.pi / 2, math.pi / 2)

    @classmethod
    def paper_scale(cls) -> "Geometry":
        return cls.limited(128, 128, 120)

    @property
    def image_shape(self) -> tuple:
        return (self.n, self.n)

    @property
    def sino_shape(self) -> tuple:
        return (len(self.angles), self.n_detectors)

    @property
    def pixel_size(self) -> float:
        return 2.0 / self.n

    @property
    def detector_spacing(self) -> float:
        return 2.0 / (self.n_detectors - 1)

    @property
    def detectors(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n_detectors)

    @property
    def angle_step(self) -> float:
        if len(self.angles) == 1:
            return math.pi
        return (self.angles[-1] - self.angles[0]) / (len(self.angles) - 1)

    def pixel_centres(self) -> np.ndarray:
        h = self.pixel_size
        return -1.0 + h * (np.arange(self.n) + 0.5)

    def to_dict(self) -> dict:
        return {"n": self.n, "n_detectors": self.n_detectors, "angles": list(self.angles)}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(int(d["n"]), int(d["n_detectors"]), tuple(d["angles"]))


def _joseph_weights(theta: float, s: np.ndarray, n: int, h: float):
    """Row indices (detector), flat pixel indices and weights for one angle."""
    c, si = math.cos(theta), math.sin(theta)
    centres = -1.0 + h * (np.arange(n) + 0.5)
    k_idx = np.arange(s.size)
    if abs(c) >= abs(si):
        # one sample per image row, interpolate along the row
        x2 = -centres  # row i sits at x2 = 1 - h(i + 1/2)
        x1 = (s[:, None] - x2[None, :] * si) / c
        frac = (x1 + 1.0) / h - 0.5
        lower = np.floor(frac)
        f = frac - lower
        lower = lower.astype(np.int64)
        step = h / abs(c)
        rows = np.broadcast_to(np.arange(n)[None, :], x1.shape)
        parts = []
        for col, w in ((lower, 1.0 - f), (lower + 1, f)):
            ok = (col >= 0) & (col < n) & (w > 0)
            kk = np.broadcast_to(k_idx[:, None], x1.shape)[ok]
            parts.append((kk, rows[ok] * n + col[ok], step * w[ok]))
    else:
        # one sample per image column, interpolate along the column
        x1 = centres
        x2 = (s[:, None] - x1[None, :] * c) / si
        frac = (1.0 - x2) / h - 0.5
        lower = np.floor(frac)
        f = frac - lower
        lower = lower.astype(np.int64)
        step = h / abs(si)
        cols = np.broadcast_to(np.arange(n)[None, :], x2.shape)
        parts = []
        for row, w in ((lower, 1.0 - f), (lower + 1, f)):
            ok = (row >= 0) & (row < n) & (w > 0)
            kk = np.broadcast_to(k_idx[:, None], x2.shape)[ok]
            parts.append((kk, row[ok] * n + cols[ok], step * w[ok]))
    kk = np.concatenate([p[0] for p in parts])
    pix = np.concatenate([p[1] for p in parts])
    w = np.concatenate([p[2] for p in parts])
    return kk, pix, w


@lru_cache(maxsize=16)
def system_matrix(geom: Geometry) -> sp.csr_matrix:
    """Sparse (n_angles * n_detectors) x (n * n) projection matrix."""
    s = geom.detectors
    h = geom.pixel_size
    rows, cols, vals = [], [], []
    for a, theta in enumerate(geom.angles):
        kk, pix, w = _joseph_weights(theta, s, geom.n, h)
        rows.append(a * geom.n_detectors + kk)
        cols.append(pix)
        vals.append(w)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(geom.angles) * geom.n_detectors, geom.n * geom.n),
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def radon_forward(img: np.ndarray, geom: Geometry) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != geom.image_shape:
        raise ValueError(f"image shape {img.shape} does not match geometry {geom.image_shape}")
    return (system_matrix(geom) @ img.ravel()).reshape(geom.sino_shape)


def radon_adjoint(sino: np.ndarray, geom: Geometry) -> np.ndarray:
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sino_shape:
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry {geom.sino_shape}")
    return (system_matrix(geom).T @ sino.ravel()).reshape(geom.image_shape)


class RadonTransform(LinearOperator):
    """The discrete Radon transform of ``geom`` as a linear operator."""

    def __init__(self, geom: Geometry):
        self.geometry = geom
        mat = system_matrix(geom)
        mat_t = mat.T.tocsr()
        super().__init__(
            geom.image_shape,
            geom.sino_shape,
            lambda x: (mat @ x.ravel()).reshape(geom.sino_shape),
            lambda y: (mat_t @ y.ravel()).reshape(geom.image_shape),
            name="radon",
        )
        self.matrix = mat


@lru_cache(maxsize=16)
def _ramp_response(n_detectors: int, ds: float) -> np.ndarray:
    # Ram-Lak kernel sampled in space, so the DC term of the discrete filter is exact
    size = 1 << math.ceil(math.log2(2 * n_detectors))
    k = np.arange(size)
    signed = np.where(k <= size // 2, k, k - size)
    kernel = np.zeros(size)
    kernel[0] = 1.0 / (4.0 * ds * ds)
    odd = signed % 2 == 1
    kernel[odd] = -1.0 / (math.pi * signed[odd] * ds) ** 2
    return np.real(np.fft.fft(kernel)) * ds


def ramp_filter(sino: np.ndarray, ds: float) -> np.ndarray:
    """Band-limited ramp (|k|, k in cycles per unit length) filter on each row.

    Rows are zero-padded to the next power of two >= 2 * n_detectors before
    the FFT, so there is no circular wrap-around.
    """
    sino = np.asarray(sino, dtype=np.float64)
    n_det = sino.shape[-1]
    resp = _ramp_response(n_det, float(ds))
    spec = np.fft.fft(sino, n=resp.size, axis=-1) * resp
    return np.real(np.fft.ifft(spec, axis=-1))[..., :n_det]


def fbp_scale(geom: Geometry) -> float:
    """Constant turning ``A^T`` of ramp-filtered data into an inversion.

    The backprojection integral over theta in a half circle is approximated by
    ``angle_step * sum_theta``; ``A^T`` sums interpolation weights whose total
    over the detectors at a fixed angle is ``h^2 / ds`` per pixel.  With the
    ramp |k| in cycles per unit (equivalently |xi| / (2 pi)) this gives
    ``angle_step * ds / h^2``.
    """
    h = geom.pixel_size
    return geom.angle_step * geom.detector_spacing / (h * h)


def fbp(sino: np.ndarray, geom: Geometry) -> np.ndarray:
    """Filtered backprojection: ramp filter per angle, then scaled ``A^T``."""
    filtered = ramp_filter(sino, geom.detector_spacing)
    return fbp_scale(geom) * radon_adjoint(filtered, geom)


def fbp_operator(geom: Geometry) -> LinearOperator:
    """FBP as a linear operator from sinograms to images.

    The ramp kernel is even, so its matrix is symmetric and the adjoint is
    ``scale * filter(A x)``.
    """
    radon = RadonTransform(geom)
    c = fbp_scale(geom)
    ds = geom.detector_spacing
    return LinearOperator(
        geom.sino_shape,
        geom.image_shape,
        lambda y: c * radon.adjoint(ramp_filter(y, ds)),
        lambda x: c * ramp_filter(radon.forward(x), ds),
        name="fbp",
    )
