"""Initial reconstruction methods B_alpha.

``fbp`` ignores alpha.  ``tv`` minimises ``||Ax - y||^2 / 2 + alpha ||grad x||_1``
with Chambolle-Pock.  ``tikhonov``, ``landweber`` and ``tsvd`` are the usual
spectral filter methods, which the data-proximity rate checks rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linop import (
    CGLSOptions,
    DenseOperator,
    Gradient,
    LinearOperator,
    cgls,
    operator_norm,
    to_dense,
)

__all__ = [
    "CpState",
    "Regularizer",
    "RateTable",
    "chambolle_pock_tv",
    "filter_data_proximity_rate",
    "loglog_slope",
    "reconstruct",
    "select_tv_alpha",
    "tv_objective",
]

KINDS = ("fbp", "tv", "tikhonov", "landweber", "tsvd")


@dataclass(frozen=True)
class Regularizer:
    kind: str
    alpha: float = 1.0
    iterations: int = 500
    tol: float | None = None  # optional early stop for tv, see chambolle_pock_tv
    isotropic: bool = False
    cgls: CGLSOptions = field(default_factory=lambda: CGLSOptions(max_iterations=2000, residual_tolerance=1e-8))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}, expected one of {KINDS}")
        if self.kind != "fbp" and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")


def _tv(g: np.ndarray, isotropic: bool) -> float:
    if isotropic:
        return float(np.sqrt((g * g).sum(axis=0)).sum())
    return float(np.abs(g).sum())


def tv_objective(x, y, alpha: float, op: LinearOperator, isotropic: bool = False) -> float:
    """``||y - A x||^2 / 2 + alpha * TV(x)`` with forward-difference TV."""
    r = op.forward(x) - y
    return 0.5 * float(np.vdot(r, r)) + alpha * _tv(Gradient(op.domain_shape).forward(x), isotropic)


@dataclass
class CpState:
    x: np.ndarray
    p: np.ndarray  # dual variable of the TV term
    q: np.ndarray  # dual variable of the data term
    tau: float
    sigma: float
    theta: float
    norm_bound: float  # L in tau * sigma * L^2 <= 1
    iteration: int = 0
    objective: list = field(default_factory=list)


def chambolle_pock_tv(
    y: np.ndarray,
    op: LinearOperator,
    alpha: float,
    iterations: int = 500,
    tol: float | None = None,
    isotropic: bool = False,
    x0: np.ndarray | None = None,
    record_objective: bool = False,
) -> CpState:
    """TV-regularised least squares by the primal-dual method of Chambolle and Pock.

    The stacked operator is ``K = (A, c grad)`` with ``c = ||A|| / ||grad||``
    so both blocks have comparable norm; the TV dual box shrinks to
    ``alpha / c`` accordingly.  Step sizes are ``tau = sigma = 1 / L`` where
    ``L`` is 1.05 times a 30-step power-iteration estimate of ``||K||``.

    Runs ``iterations`` steps.  If ``tol`` is given, stops early once the
    relative primal change ``||x_k - x_{k-1}|| / ||x_k||`` drops below it.
    """
    grad = Gradient(op.domain_shape)
    norm_a = operator_norm(op, 30)
    norm_g = math.sqrt(4.0 * len(op.domain_shape))  # exact bound for forward differences
    c = norm_a / norm_g if norm_a > 0 else 1.0
    stacked = LinearOperator(
        op.domain_shape,
        (op.range_size + grad.range_size,),
        lambda x: np.concatenate([op.forward(x).ravel(), c * grad.forward(x).ravel()]),
        lambda v: op.adjoint(v[: op.range_size].reshape(op.range_shape))
        + c * grad.adjoint(v[op.range_size:].reshape(grad.range_shape)),
    )
    L = 1.05 * operator_norm(stacked, 30)
    tau = sigma = 1.0 / L
    box = alpha / c
    x = np.zeros(op.domain_shape) if x0 is None else np.array(x0, dtype=np.float64)
    state = CpState(x, np.zeros(grad.range_shape), np.zeros(op.range_shape), tau, sigma, 1.0, L)
    xbar = x.copy()
    for k in range(iterations):
        state.q = (state.q + sigma * (op.forward(xbar) - y)) / (1.0 + sigma)
        p = state.p + sigma * c * grad.forward(xbar)
        if isotropic:
            mag = np.maximum(1.0, np.sqrt((p * p).sum(axis=0)) / box)
            p = p / mag
        else:
            p = np.clip(p, -box, box)
        state.p = p
        x_new = state.x - tau * (op.adjoint(state.q) + c * grad.adjoint(p))
        xbar = x_new + state.theta * (x_new - state.x)
        change = np.linalg.norm(x_new - state.x)
        state.x = x_new
        state.iteration = k + 1
        if record_objective:
            state.objective.append(tv_objective(x_new, y, alpha, op, isotropic))
        if tol is not None and change <= tol * max(np.linalg.norm(x_new), 1e-300):
            break
    return state


def _tikhonov(op: LinearOperator, y, alpha: float, opts: CGLSOptions) -> np.ndarray:
    if isinstance(op, DenseOperator):
        u, s, vt = op.svd
        coef = s / (s * s + alpha) * (u.T @ y.ravel())
        return (vt.T @ coef).reshape(op.domain_shape)
    return cgls(op, y, opts, shift=alpha).x


def _tsvd(op: LinearOperator, y, alpha: float) -> np.ndarray:
    # filter g(lambda) = 1/lambda on eigenvalues lambda = s^2 >= alpha of A^T A
    dense = to_dense(op)
    u, s, vt = dense.svd
    keep = s * s >= alpha
    coef = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0) * (u.T @ y.ravel())
    return (vt.T @ coef).reshape(op.domain_shape)


def _landweber(op: LinearOperator, y, alpha: float) -> np.ndarray:
    L = 1.05 * operator_norm(op, 30)
    step = 1.0 / (L * L)
    x = np.zeros(op.domain_shape)
    for _ in range(math.ceil(1.0 / alpha)):
        x += step * op.adjoint(y - op.forward(x))
    return x


def reconstruct(reg: Regularizer, y: np.ndarray, op: LinearOperator) -> np.ndarray:
    """Apply ``B_alpha`` to data ``y``.

    ``fbp`` needs a tomography operator (anything carrying a ``geometry``).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.range_shape:
        raise ValueError(f"data shape {y.shape} does not match operator range {op.range_shape}")
    if reg.kind == "fbp":
        from .tomo import fbp

        geom = getattr(op, "geometry", None)
        if geom is None:
            raise TypeError("fbp needs a Radon operator with a geometry")
        return fbp(y, geom)
    if reg.kind == "tv":
        return chambolle_pock_tv(y, op, reg.alpha, reg.iterations, reg.tol, reg.isotropic).x
    if reg.kind == "tikhonov":
        return _tikhonov(op, y, reg.alpha, reg.cgls)
    if reg.kind == "tsvd":
        return _tsvd(op, y, reg.alpha)
    return _landweber(op, y, reg.alpha)


def loglog_slope(deltas, values) -> float:
    """Least-squares slope of log(values) against log(deltas)."""
    d = np.log(np.asarray(deltas, dtype=np.float64))
    v = np.log(np.asarray(values, dtype=np.float64))
    return float(np.polyfit(d, v, 1)[0])


@dataclass
class RateTable:
    deltas: np.ndarray
    residuals: np.ndarray
    alphas: np.ndarray
    slopes: np.ndarray  # slope fitted on the first k+1 points (nan for k = 0)

    @property
    def slope(self) -> float:
        return float(self.slopes[-1])

    def rows(self):
        for d, res, a, s in zip(self.deltas, self.residuals, self.alphas, self.slopes):
            yield d, res, a, s


def filter_data_proximity_rate(
    op: LinearOperator,
    r: float,
    deltas,
    x_true: np.ndarray,
    seed: int = 0,
    kind: str = "tikhonov",
) -> RateTable:
    """Data residual ``||A B_alpha y^delta - y^delta||`` under ``alpha = delta^(2r)``.

    For every delta a noise vector of norm exactly delta is added to
    ``A x_true``.  Returns the residuals and running log-log slopes.
    """
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(np.diff(deltas) >= 0) or np.any(deltas <= 0):
        raise ValueError("deltas must be positive and strictly decreasing")
    op = to_dense(op)
    rng = np.random.default_rng(seed)
    y = op.forward(x_true)
    residuals, alphas = [], []
    for delta in deltas:
        e = rng.standard_normal(op.range_shape)
        y_delta = y + delta * e / np.linalg.norm(e)
        alpha = delta ** (2 * r)
        x = reconstruct(Regularizer(kind, alpha), y_delta, op)
        residuals.append(float(np.linalg.norm(op.forward(x) - y_delta)))
        alphas.append(alpha)
    residuals = np.array(residuals)
    slopes = np.array([np.nan] + [loglog_slope(deltas[: k + 1], residuals[: k + 1]) for k in range(1, len(deltas))])
    return RateTable(deltas, residuals, np.array(alphas), slopes)


def select_tv_alpha(ys, xs, op: LinearOperator, grid=(1e-4, 1e-3, 1e-2, 1e-1), iterations: int = 500) -> tuple[float, dict]:
    """Pick the TV parameter with the smallest mean squared error on a validation set."""
    scores = {}
    for alpha in grid:
        errs = [np.mean((chambolle_pock_tv(y, op, alpha, iterations).x - x) ** 2) for y, x in zip(ys, xs)]
        scores[float(alpha)] = float(np.mean(errs))
    best = min(scores, key=scores.get)
    return best, scores

