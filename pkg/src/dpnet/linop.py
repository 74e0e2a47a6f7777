"""Matrix-free linear operators, CGLS and the null-space/range projections.

Every operator maps arrays of ``domain_shape`` to arrays of ``range_shape``
and carries its adjoint.  The Moore-Penrose inverse is realised by CGLS
started from zero, so iterates stay in the range of the adjoint and the
limit is the minimum-norm least-squares solution.  Small operators can be
densified, in which case projections go through a truncated SVD instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "CGLSOptions",
    "CGLSResult",
    "ConvergenceError",
    "DenseOperator",
    "Gradient",
    "LinearOperator",
    "adjoint_mismatch",
    "apply_pseudoinverse",
    "cgls",
    "identity",
    "nullspace_projector",
    "operator_norm",
    "pseudoinverse_operator",
    "project_nullspace",
    "project_range_complement",
    "to_dense",
    "zero",
]

DENSE_CAP = 4096
SVD_RCOND = 1e-10


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve stops before reaching its tolerance.

    The last iterate and its relative residual are attached, so a caller that
    can live with a less accurate answer may catch this and use ``x``.
    """

    def __init__(self, message: str, x: np.ndarray, residual: float, iterations: int):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.iterations = iterations


class LinearOperator:
    """A linear map given by a forward and an adjoint callable.

    Parameters
    ----------
    domain_shape, range_shape : tuple of int
        Array shapes of inputs and outputs.
    forward, adjoint : callable
        ``forward(x)`` with ``x.shape == domain_shape`` and ``adjoint(y)``
        with ``y.shape == range_shape``.
    name : str, optional
        Used in reprs and error messages.
    """

    def __init__(
        self,
        domain_shape,
        range_shape,
        forward: Callable[[np.ndarray], np.ndarray],
        adjoint: Callable[[np.ndarray], np.ndarray],
        name: str = "op",
    ):
        self.domain_shape = tuple(int(n) for n in domain_shape)
        self.range_shape = tuple(int(n) for n in range_shape)
        self._forward = forward
        self._adjoint = adjoint
        self.name = name

    @property
    def domain_size(self) -> int:
        return math.prod(self.domain_shape)

    @property
    def range_size(self) -> int:
        return math.prod(self.range_shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.domain_shape:
            raise ValueError(f"{self.name}: expected input of shape {self.domain_shape}, got {x.shape}")
        return self._forward(x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.range_shape:
            raise ValueError(f"{self.name}: expected input of shape {self.range_shape}, got {y.shape}")
        return self._adjoint(y)

    __call__ = forward

    @property
    def T(self) -> "LinearOperator":
        return LinearOperator(
            self.range_shape, self.domain_shape, self._adjoint, self._forward, name=f"{self.name}^T"
        )

    def __matmul__(self, other: "LinearOperator") -> "LinearOperator":
        if other.range_shape != self.domain_shape:
            raise ValueError(f"cannot compose {self.name} after {other.name}: shape mismatch")
        return LinearOperator(
            other.domain_shape,
            self.range_shape,
            lambda x: self._forward(other._forward(x)),
            lambda y: other._adjoint(self._adjoint(y)),
            name=f"{self.name}*{other.name}",
        )

    def scaled(self, c: float) -> "LinearOperator":
        c = float(c)
        return LinearOperator(
            self.domain_shape,
            self.range_shape,
            lambda x: c * self._forward(x),
            lambda y: c * self._adjoint(y),
            name=f"{c:g}*{self.name}",
        )

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}: {self.domain_shape} -> {self.range_shape}>"


class DenseOperator(LinearOperator):
    """Operator backed by an explicit matrix (rows = range, cols = domain).

    The pseudoinverse is computed once from a truncated SVD on first use;
    singular values below ``SVD_RCOND`` times the largest are treated as zero.
    """

    def __init__(self, matrix, domain_shape=None, range_shape=None, name: str = "dense"):
        self.matrix = np.array(matrix, dtype=np.float64, ndmin=2)
        m, n = self.matrix.shape
        domain_shape = (n,) if domain_shape is None else tuple(domain_shape)
        range_shape = (m,) if range_shape is None else tuple(range_shape)
        if math.prod(domain_shape) != n or math.prod(range_shape) != m:
            raise ValueError("matrix size does not match the declared shapes")
        mat = self.matrix
        super().__init__(
            domain_shape,
            range_shape,
            lambda x: (mat @ x.ravel()).reshape(range_shape),
            lambda y: (mat.T @ y.ravel()).reshape(domain_shape),
            name=name,
        )
        self._svd = None

    @property
    def svd(self):
        if self._svd is None:
            self._svd = np.linalg.svd(self.matrix, full_matrices=False)
        return self._svd

    @property
    def rank(self) -> int:
        s = self.svd[1]
        if s.size == 0 or s[0] == 0.0:
            return 0
        return int(np.sum(s > SVD_RCOND * s[0]))

    def pinv(self) -> np.ndarray:
        u, s, vt = self.svd
        k = self.rank
        return (vt[:k].T / s[:k]) @ u[:, :k].T

    @property
    def T(self) -> "DenseOperator":
        return DenseOperator(self.matrix.T, self.range_shape, self.domain_shape, name=f"{self.name}^T")


def identity(shape) -> LinearOperator:
    shape = tuple(shape)
    return LinearOperator(shape, shape, lambda x: x.copy(), lambda y: y.copy(), name="id")


def zero(domain_shape, range_shape) -> LinearOperator:
    return LinearOperator(
        domain_shape,
        range_shape,
        lambda x: np.zeros(tuple(range_shape)),
        lambda y: np.zeros(tuple(domain_shape)),
        name="zero",
    )


class Gradient(LinearOperator):
    """Forward differences with Neumann boundary on an n-d grid.

    The output stacks one difference image per axis, so the range shape is
    ``(ndim,) + shape``.  The last difference along each axis is zero; the
    adjoint is the matching negative divergence.
    """

    def __init__(self, shape):
        shape = tuple(int(n) for n in shape)
        ndim = len(shape)

        def fwd(x):
            g = np.zeros((ndim,) + shape)
            for ax in range(ndim):
                d = np.diff(x, axis=ax)
                sl = [slice(None)] * ndim
                sl[ax] = slice(0, shape[ax] - 1)
                g[(ax,) + tuple(sl)] = d
            return g

        def adj(p):
            out = np.zeros(shape)
            for ax in range(ndim):
                q = p[ax]
                lo = [slice(None)] * ndim
                hi = [slice(None)] * ndim
                lo[ax] = slice(0, shape[ax] - 1)
                hi[ax] = slice(1, shape[ax])
                out[tuple(lo)] -= q[tuple(lo)]
                out[tuple(hi)] += q[tuple(lo)]
            return out

        super().__init__(shape, (ndim,) + shape, fwd, adj, name="grad")


def to_dense(op: LinearOperator, cap: int = DENSE_CAP) -> DenseOperator:
    """Assemble the matrix of ``op`` column by column (column j = op(e_j))."""
    if isinstance(op, DenseOperator):
        return op
    n = op.domain_size
    if n > cap:
        raise ValueError(f"domain dimension {n} exceeds the densification cap {cap}")
    mat = np.empty((op.range_size, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        mat[:, j] = op.forward(e.reshape(op.domain_shape)).ravel()
        e[j] = 0.0
    return DenseOperator(mat, op.domain_shape, op.range_shape, name=op.name)


def adjoint_mismatch(op: LinearOperator, rng: np.random.Generator, n_pairs: int = 100) -> float:
    """Worst relative gap |<Ax, y> - <x, A^T y>| / (||Ax|| ||y||) over random pairs."""
    worst = 0.0
    for _ in range(n_pairs):
        x = rng.standard_normal(op.domain_shape)
        y = rng.standard_normal(op.range_shape)
        ax = op.forward(x)
        lhs = np.vdot(ax, y)
        rhs = np.vdot(x, op.adjoint(y))
        scale = np.linalg.norm(ax) * np.linalg.norm(y)
        if scale == 0.0:
            gap = abs(lhs - rhs)
        else:
            gap = abs(lhs - rhs) / scale
        worst = max(worst, gap)
    return worst


def operator_norm(op: LinearOperator, n_iter: int = 30, seed: int = 0) -> float:
    """Estimate ||op|| with power iteration on op^T op."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.domain_shape)
    x /= np.linalg.norm(x)
    s = 0.0
    for _ in range(n_iter):
        z = op.adjoint(op.forward(x))
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        s = math.sqrt(nz)
        x = z / nz
    return s


@dataclass(frozen=True)
class CGLSOptions:
    max_iterations: int = 500
    residual_tolerance: float = 1e-6
    # raise ConvergenceError instead of returning the last iterate
    strict: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not 0.0 <= self.residual_tolerance < 1.0:
            raise ValueError("residual_tolerance must lie in [0, 1)")


@dataclass
class CGLSResult:
    x: np.ndarray
    iterations: int
    residual: float  # relative normal-equation residual
    converged: bool


def cgls(op: LinearOperator, y: np.ndarray, opts: CGLSOptions = CGLSOptions(), shift: float = 0.0) -> CGLSResult:
    """Solve min ||Ax - y||^2 + shift ||x||^2 with CGLS from the zero iterate.

    Stops once the normal-equation residual ``||A^T(y - Ax) - shift x||`` drops
    below ``residual_tolerance * ||A^T y||``, or (for ``shift == 0``) once the
    data residual drops below ``residual_tolerance * ||y||``.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.zeros(op.domain_shape)
    r = y.copy()
    s = op.adjoint(r)
    norm_s0 = np.linalg.norm(s)
    norm_y = np.linalg.norm(y)
    if norm_s0 == 0.0:
        return CGLSResult(x, 0, 0.0, True)
    p = s.copy()
    gamma = np.vdot(s, s)
    tol = opts.residual_tolerance
    rel = 1.0
    for k in range(1, opts.max_iterations + 1):
        q = op.forward(p)
        denom = np.vdot(q, q) + shift * np.vdot(p, p)
        if denom <= 0.0:
            break
        a = gamma / denom
        x += a * p
        r -= a * q
        s = op.adjoint(r) - shift * x
        gamma_new = np.vdot(s, s)
        rel = math.sqrt(gamma_new) / norm_s0
        if rel <= tol or (shift == 0.0 and np.linalg.norm(r) <= tol * norm_y):
            return CGLSResult(x, k, rel, True)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    result = CGLSResult(x, opts.max_iterations, rel, False)
    if opts.strict:
        raise ConvergenceError(
            f"CGLS did not reach tolerance {tol:g} in {opts.max_iterations} iterations "
            f"(relative residual {rel:.3e})",
            x,
            rel,
            opts.max_iterations,
        )
    return result


def apply_pseudoinverse(op: LinearOperator, y: np.ndarray, opts: CGLSOptions = CGLSOptions()) -> np.ndarray:
    """Minimum-norm least-squares solution of ``op(x) = y``.

    Dense operators use the truncated-SVD pseudoinverse; anything else runs
    CGLS from zero.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.range_shape:
        raise ValueError(f"expected data of shape {op.range_shape}, got {y.shape}")
    if isinstance(op, DenseOperator):
        u, s, vt = op.svd
        k = op.rank
        coef = (u[:, :k].T @ y.ravel()) / s[:k]
        return (vt[:k].T @ coef).reshape(op.domain_shape)
    return cgls(op, y, opts).x


def project_range_complement(op: LinearOperator, x: np.ndarray, opts: CGLSOptions = CGLSOptions()) -> np.ndarray:
    """Orthogonal projection onto N(A)^perp = R(A^+), i.e. ``A^+ A x``."""
    return apply_pseudoinverse(op, op.forward(x), opts)


def project_nullspace(op: LinearOperator, x: np.ndarray, opts: CGLSOptions = CGLSOptions()) -> np.ndarray:
    """Orthogonal projection onto N(A), i.e. ``x - A^+ A x``."""
    x = np.asarray(x, dtype=np.float64)
    return x - project_range_complement(op, x, opts)


def pseudoinverse_operator(op: LinearOperator, opts: CGLSOptions = CGLSOptions()) -> LinearOperator:
    """``A^+`` as an operator; its adjoint is ``(A^T)^+``."""
    if isinstance(op, DenseOperator):
        return DenseOperator(op.pinv(), op.range_shape, op.domain_shape, name=f"{op.name}^+")
    adj = op.T
    return LinearOperator(
        op.range_shape,
        op.domain_shape,
        lambda y: apply_pseudoinverse(op, y, opts),
        lambda x: apply_pseudoinverse(adj, x, opts),
        name=f"{op.name}^+",
    )


def nullspace_projector(op: LinearOperator, opts: CGLSOptions = CGLSOptions()) -> LinearOperator:
    """``P_N(A)`` as a (self-adjoint) operator.

    For dense operators the projector matrix ``I - V_k V_k^T`` is formed
    explicitly, which makes repeated application cheap.
    """
    if isinstance(op, DenseOperator):
        vt = op.svd[2][: op.rank]
        mat = np.eye(op.domain_size) - vt.T @ vt
        return DenseOperator(mat, op.domain_shape, op.domain_shape, name=f"P_N({op.name})")
    f = lambda x: project_nullspace(op, x, opts)
    return LinearOperator(op.domain_shape, op.domain_shape, f, f, name=f"P_N({op.name})")
