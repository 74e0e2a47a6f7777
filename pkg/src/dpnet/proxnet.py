"""Data-proximal null-space networks.

Three residual architectures act on an initial reconstruction z:

* ``res``:   z + U(z)
* ``nsn``:   z + P_N U(z)
* ``dpnsn``: z + P_N U(z) + Back Phi_beta(A V(z))

where P_N is the orthogonal projection onto the kernel of A and Phi_beta
clips data-domain vectors radially to the beta-ball.  Back is the
pseudoinverse ("exact" mode) or the FBP ("surrogate" mode).  In exact mode
``||A D(z) - A z|| <= beta`` for every network weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .linop import (
    DENSE_CAP,
    CGLSOptions,
    DenseOperator,
    LinearOperator,
    nullspace_projector,
    pseudoinverse_operator,
)
from .network import LAYERS, Adam, NetParams, net_backward, net_forward
from .regularizers import Regularizer, reconstruct

__all__ = [
    "Architecture",
    "ProximityFn",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainLog",
    "apply_architecture",
    "batch_loss",
    "build_architecture",
    "estimate_beta",
    "load_params",
    "loss_and_grad",
    "phi_apply",
    "reconstruct_full",
    "save_params",
    "train",
]

KINDS = ("res", "nsn", "dpnsn")
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class ProximityFn:
    """Radial clipping to the closed ball of radius beta."""

    beta: float

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return phi_apply(self, z)

    def vjp(self, z: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Transpose Jacobian of Phi at ``z`` applied to ``g``.

        Identity inside the ball (including z = 0); outside it is the exact
        Jacobian ``beta / |z| (I - z z^T / |z|^2)`` of ``beta z / |z|``,
        which is symmetric.
        """
        nz = float(np.linalg.norm(z))
        if nz <= self.beta:
            return np.array(g, dtype=np.float64)
        zh = z / nz
        return (self.beta / nz) * (g - zh * np.vdot(zh, g))


def phi_apply(fn: ProximityFn, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    nz = float(np.linalg.norm(z))
    if nz <= fn.beta:
        return z.copy()
    if fn.beta == 0.0:
        return np.zeros_like(z)
    out = z * (fn.beta / nz)
    # guard against round-off pushing the norm above beta
    while np.linalg.norm(out) > fn.beta or np.sqrt(np.sum(out * out)) > fn.beta:
        out *= 1.0 - 4 * _EPS
    return out


def estimate_beta(eta: np.ndarray, delta: float) -> float:
    """``delta * mean_i ||eta_i||_2`` over the stored noise realisations.

    ``eta`` holds one sample per leading index (a Dataset's ``eta`` array).
    """
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape[0] == 0:
        raise ValueError("cannot estimate beta from an empty dataset")
    norms = np.sqrt((eta.reshape(eta.shape[0], -1) ** 2).sum(axis=1))
    return float(delta * norms.mean())


def _apply_batch(op: LinearOperator, xs: np.ndarray, adjoint: bool = False) -> np.ndarray:
    if isinstance(op, DenseOperator):
        mat = op.matrix.T if adjoint else op.matrix
        shape = op.domain_shape if adjoint else op.range_shape
        return (xs.reshape(len(xs), -1) @ mat.T).reshape((len(xs),) + shape)
    f = op.adjoint if adjoint else op.forward
    return np.stack([f(x) for x in xs])


@dataclass
class Architecture:
    """A residual network together with the linear pieces it is built from.

    ``null_proj`` is P_N(A) and ``back`` maps data to images (A^+ or A^#);
    both need working adjoints for training.
    """

    kind: str
    params: NetParams
    op: LinearOperator
    null_proj: LinearOperator | None = None
    back: LinearOperator | None = None
    beta: float = 0.0
    mode: str = "exact"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}, expected one of {KINDS}")
        if self.kind in ("nsn", "dpnsn") and self.null_proj is None:
            raise ValueError(f"{self.kind} needs a null-space projector")
        if self.kind == "dpnsn" and self.back is None:
            raise ValueError("dpnsn needs a back-mapping (pseudoinverse or FBP)")

    @property
    def phi(self) -> ProximityFn:
        return ProximityFn(self.beta)

    def with_params(self, params: NetParams) -> "Architecture":
        return Architecture(self.kind, params, self.op, self.null_proj, self.back, self.beta, self.mode)

    # the forward pass keeps what the backward pass needs
    def _forward(self, z: np.ndarray):
        u, v, net_cache = net_forward(self.params, z, keep=True)
        out = z.copy()
        cache = {"net": net_cache}
        if self.kind == "res":
            out += u
        else:
            out += _apply_batch(self.null_proj, u)
        if self.kind == "dpnsn":
            w = _apply_batch(self.op, v)
            phi = self.phi
            clipped = np.stack([phi(wi) for wi in w])
            out += _apply_batch(self.back, clipped)
            cache["w"] = w
        return out, cache

    def _backward(self, cache, gout: np.ndarray) -> NetParams:
        if self.kind == "res":
            gu = gout
        else:
            gu = _apply_batch(self.null_proj, gout, adjoint=True)
        if self.kind == "dpnsn":
            gclip = _apply_batch(self.back, gout, adjoint=True)
            phi = self.phi
            gw = np.stack([phi.vjp(wi, gi) for wi, gi in zip(cache["w"], gclip)])
            gv = _apply_batch(self.op, gw, adjoint=True)
        else:
            gv = np.zeros_like(gu)
        return net_backward(self.params, cache["net"], gu, gv)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return apply_architecture(self, z)


def apply_architecture(arch: Architecture, z: np.ndarray) -> np.ndarray:
    """Evaluate the architecture on one image or a batch of images."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 2
    out, _ = arch._forward(z[None] if single else z)
    return out[0] if single else out


def build_architecture(
    kind: str,
    params: NetParams,
    op: LinearOperator,
    beta: float = 0.0,
    mode: str = "exact",
    opts: CGLSOptions = CGLSOptions(),
    dense_cap: int = DENSE_CAP,
) -> Architecture:
    """Assemble the projector and back-mapping for ``op``.

    Operators with at most ``dense_cap`` unknowns are densified once so the
    projections are exact matrix products (truncated SVD); larger ones use
    CGLS on every call.  ``mode="surrogate"`` takes FBP as the back-mapping,
    which needs a tomography operator.
    """
    if mode not in ("exact", "surrogate"):
        raise ValueError("mode must be 'exact' or 'surrogate'")
    work = op
    if not isinstance(op, DenseOperator) and op.domain_size <= dense_cap:
        mat = getattr(op, "matrix", None)
        if mat is not None and hasattr(mat, "toarray"):
            work = DenseOperator(mat.toarray(), op.domain_shape, op.range_shape, name=op.name)
        else:
            from .linop import to_dense

            work = to_dense(op, dense_cap)
    null_proj = back = None
    if kind in ("nsn", "dpnsn"):
        null_proj = nullspace_projector(work, opts)
    if kind == "dpnsn":
        if mode == "surrogate":
            from .tomo import fbp_operator

            geom = getattr(op, "geometry", None)
            if geom is None:
                raise TypeError("surrogate mode needs a Radon operator with a geometry")
            back = fbp_operator(geom)
        else:
            back = pseudoinverse_operator(work, opts)
    return Architecture(kind, params, work, null_proj, back, float(beta), mode)


def reconstruct_full(arch: Architecture, reg: Regularizer, y: np.ndarray, op: LinearOperator | None = None) -> np.ndarray:
    """Initial reconstruction followed by the network: ``D(B_alpha(y))``."""
    return apply_architecture(arch, reconstruct(reg, y, arch.op if op is None else op))


def loss_and_grad(arch: Architecture, z: np.ndarray, x: np.ndarray) -> tuple[float, NetParams]:
    """Empirical risk ``mean_i ||M(z_i) - x_i||^2`` and its parameter gradient."""
    out, cache = arch._forward(z)
    diff = out - x
    n = len(z)
    loss = float(np.sum(diff * diff) / n)
    grads = arch._backward(cache, (2.0 / n) * diff)
    return loss, grads


def batch_loss(arch: Architecture, z: np.ndarray, x: np.ndarray) -> float:
    out, _ = arch._forward(z)
    return float(np.sum((out - x) ** 2) / len(z))


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 4
    optimizer: str = "adam"
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is available")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    initial_loss: float = float("nan")

    def rows(self):
        for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            yield i, t, v


def train(arch: Architecture, z: np.ndarray, x: np.ndarray, cfg: TrainConfig = TrainConfig()) -> tuple[NetParams, TrainLog]:
    """Fit the network weights of ``arch`` with Adam.

    ``z`` are the precomputed initial reconstructions and ``x`` the ground
    truth.  The last ``val_fraction`` of the samples is held out; the weights
    with the smallest validation loss over all epochs are returned (training
    loss when there is no validation split).
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if len(z) == 0:
        raise ValueError("training set is empty")
    n_val = int(round(cfg.val_fraction * len(z)))
    if n_val >= len(z):
        n_val = len(z) - 1
    n_tr = len(z) - n_val
    z_tr, x_tr, z_val, x_val = z[:n_tr], x[:n_tr], z[n_tr:], x[n_tr:]
    rng = np.random.default_rng(cfg.seed)
    params = arch.params.copy()
    opt = Adam(params, cfg.lr)
    log = TrainLog(initial_loss=batch_loss(arch.with_params(params), z_tr, x_tr))
    best, best_score = params.copy(), math.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_tr)
        total = 0.0
        for start in range(0, n_tr, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(arch.with_params(params), z_tr[idx], x_tr[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} in epoch {epoch}")
            total += loss * len(idx)
            opt.step(params, grads)
        log.train_loss.append(total / n_tr)
        score = batch_loss(arch.with_params(params), z_val, x_val) if n_val else total / n_tr
        if not math.isfinite(score):
            raise TrainingDivergedError(f"validation loss became {score} in epoch {epoch}")
        log.val_loss.append(score if n_val else float("nan"))
        if score < best_score:
            best, best_score, log.best_epoch = params.copy(), score, epoch
    return best, log


def save_params(params: NetParams, path, manifest: dict | None = None) -> Path:
    """Write each weight tensor as a PXR1 file plus ``manifest.json``."""
    path = io.ensure_dir(path)
    shapes = {}
    for name in params.names():
        io.write_array(path / f"{name}.pxr", params.arrays[name])
        shapes[name] = list(params.arrays[name].shape)
    meta = dict(manifest or {})
    meta["layers"] = shapes
    io.write_json(path / "manifest.json", meta)
    return path


def load_params(path) -> tuple[NetParams, dict]:
    path = Path(path)
    meta = io.read_json(path / "manifest.json")
    arrays = {}
    for wn, bn in LAYERS:
        for name in (wn, bn):
            arrays[name] = io.read_array(path / f"{name}.pxr", meta["layers"][name])
    return NetParams(arrays), meta


def config_dict(cfg: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
