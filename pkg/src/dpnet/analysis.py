"""Image metrics, convergence / data-proximity rate studies and the method comparison table."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .linop import DenseOperator, LinearOperator, project_nullspace, to_dense
from .network import NetParams, net_forward
from .phantom import Dataset, NoiseModel, make_dataset
from .proxnet import (
    Architecture,
    ProximityFn,
    TrainConfig,
    apply_architecture,
    batch_loss,
    build_architecture,
    estimate_beta,
    loss_and_grad,
    train,
)
from .regularizers import Regularizer, chambolle_pock_tv, loglog_slope, reconstruct, select_tv_alpha
from .tomo import Geometry, RadonTransform, fbp

__all__ = [
    "Metrics",
    "RateReport",
    "TableConfig",
    "compute_metrics",
    "convergence_study",
    "gaussian_window",
    "gradient_check",
    "lipschitz_map",
    "proximity_study",
    "spectral_operator",
    "table_experiment",
    "write_table_csv",
]

REFERENCE_TABLE = {
    "FBP": (0.0137, 24.6556, 0.2867),
    "TV": (0.0020, 33.0772, 0.6089),
    "FBP+RES": (0.0013, 34.9414, 0.8455),
    "TV+RES": (0.0010, 35.7354, 0.9032),
    "FBP+NSN": (0.0012, 35.2030, 0.8437),
    "TV+NSN": (0.0009, 36.6717, 0.9184),
    "TV+DP": (0.0008, 37.1900, 0.9265),
}


@dataclass(frozen=True)
class Metrics:
    mse: float
    psnr: float
    ssim: float


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim(x: np.ndarray, y: np.ndarray, data_range: float, win: np.ndarray) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(img):
        patches = sliding_window_view(img, win.shape)
        return np.einsum("ijkl,kl->ij", patches, win)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def compute_metrics(x_hat: np.ndarray, x_true: np.ndarray) -> Metrics:
    """MSE, PSNR and SSIM of ``x_hat`` against ``x_true``.

    The peak value and the SSIM constants use the data range of the ground
    truth.  SSIM averages over all fully covered 11 x 11 Gaussian windows
    (sigma 1.5).  PSNR is ``inf`` for a perfect reconstruction.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_hat.shape != x_true.shape:
        raise ValueError("images must have the same shape")
    rng = float(x_true.max() - x_true.min())
    if rng == 0.0:
        raise ValueError("ground truth has zero range, PSNR is undefined")
    mse = float(np.mean((x_hat - x_true) ** 2))
    psnr = math.inf if mse == 0 else 10 * math.log10(rng * rng / mse)
    win = gaussian_window(min(11, *x_true.shape), 1.5)
    return Metrics(mse, psnr, _ssim(x_hat, x_true, rng, win))


def mean_metrics(ms) -> Metrics:
    ms = list(ms)
    return Metrics(*(float(np.mean([getattr(m, k) for m in ms])) for k in ("mse", "psnr", "ssim")))


def spectral_operator(m: int, n: int, singular_values, rng: np.random.Generator) -> DenseOperator:
    """Dense ``m x n`` operator ``U diag(s) V^T`` with random orthonormal factors."""
    s = np.asarray(singular_values, dtype=np.float64)
    k = len(s)
    if k > min(m, n):
        raise ValueError("more singular values than the operator can hold")
    u, _ = np.linalg.qr(rng.standard_normal((m, k)))
    v, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return DenseOperator((u * s) @ v.T)


def lipschitz_map(n: int, hidden: int, rng: np.random.Generator, lipschitz: float = 0.5):
    """Fixed one-hidden-layer map ``z -> W2 leaky(W1 z + b)`` with Lipschitz constant at most ``lipschitz``."""
    w1 = rng.standard_normal((hidden, n))
    w2 = rng.standard_normal((n, hidden))
    b = rng.standard_normal(hidden)
    scale = lipschitz / (np.linalg.norm(w1, 2) * np.linalg.norm(w2, 2))
    w2 = w2 * scale

    def apply(z):
        h = w1 @ z + b
        return w2 @ np.where(h > 0, h, 0.1 * h)

    return apply


@dataclass
class RateReport:
    deltas: np.ndarray
    errors: np.ndarray  # worst ||x* - R(y^delta)|| per delta
    residuals: np.ndarray  # worst ||y^delta - A R(y^delta)|| per delta
    alphas: np.ndarray
    betas: np.ndarray
    error_slope: float = float("nan")
    residual_slope: float = float("nan")
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.deltas)
        if not all(len(a) == n for a in (self.errors, self.residuals, self.alphas, self.betas)):
            raise ValueError("rate report columns must have equal length")

    def rows(self):
        return zip(self.deltas, self.errors, self.residuals, self.alphas, self.betas)

    def error_monotone(self, slack: float = 0.1) -> bool:
        """Errors never grow by more than ``slack`` (relative) as delta shrinks."""
        e = self.errors
        return bool(np.all(e[1:] <= (1 + slack) * e[:-1]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "error", "residual", "alpha", "beta"])
            for row in self.rows():
                w.writerow([f"{v:.12g}" for v in row])


def _check_grid(deltas) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 1 or len(deltas) < 2:
        raise ValueError("need at least two noise levels")
    if np.any(np.diff(deltas) >= 0) or np.any(deltas <= 0):
        raise ValueError("deltas must be positive and strictly decreasing")
    return deltas


def _noise(rng: np.random.Generator, shape, delta: float) -> np.ndarray:
    e = rng.standard_normal(shape)
    return delta * e / np.linalg.norm(e)


def convergence_study(
    op: LinearOperator,
    limit_map: Callable[[np.ndarray], np.ndarray],
    x_source: np.ndarray,
    deltas,
    reg_kind: str = "tikhonov",
    alpha_rule: Callable[[float], float] = lambda d: d,
    beta_rule: Callable[[float], float] = lambda d: d,
    range_map: Callable[[np.ndarray], np.ndarray] | None = None,
    k: int = 20,
    seed: int = 0,
) -> RateReport:
    """Measure convergence of ``D_beta(B_alpha(y^delta))`` to ``x* = (I + P_N U)(x_source)``.

    The network is fixed: its null-space stream is the limit map ``U`` and
    its range stream ``range_map`` (default ``U``) passes through
    ``Phi_beta``, so ``D`` approaches ``I + P_N U`` as beta shrinks.  For
    each delta, ``k`` noise vectors of norm exactly delta are drawn and the
    worst error and data residual are kept.
    """
    deltas = _check_grid(deltas)
    op = to_dense(op)
    x_source = np.asarray(x_source, dtype=np.float64)
    if np.linalg.norm(project_nullspace(op, x_source)) > 1e-8 * max(np.linalg.norm(x_source), 1e-300):
        raise ValueError("x_source must lie in the range of the pseudoinverse")
    range_map = limit_map if range_map is None else range_map
    pinv = op.pinv()
    vt = op.svd[2][: op.rank]

    def p_null(v):
        return v - vt.T @ (vt @ v)

    def network(z, beta):
        clipped = ProximityFn(beta)(op.forward(range_map(z)))
        return z + p_null(limit_map(z)) + pinv @ clipped

    x_star = x_source + p_null(limit_map(x_source))
    y = op.forward(x_star)
    rng = np.random.default_rng(seed)
    errors, residuals, alphas, betas = [], [], [], []
    for delta in deltas:
        alpha, beta = alpha_rule(delta), beta_rule(delta)
        reg = Regularizer(reg_kind, alpha)
        worst_e = worst_r = 0.0
        for _ in range(k):
            y_delta = y + _noise(rng, y.shape, delta)
            rec = network(reconstruct(reg, y_delta, op), beta)
            worst_e = max(worst_e, float(np.linalg.norm(x_star - rec)))
            worst_r = max(worst_r, float(np.linalg.norm(y_delta - op.forward(rec))))
        errors.append(worst_e)
        residuals.append(worst_r)
        alphas.append(alpha)
        betas.append(beta)
    rep = RateReport(deltas, np.array(errors), np.array(residuals), np.array(alphas), np.array(betas))
    rep.error_slope = loglog_slope(deltas, rep.errors)
    rep.residual_slope = loglog_slope(deltas, rep.residuals)
    rep.manifest = {"study": "convergence", "reg": reg_kind, "k": k, "seed": seed,
                    "operator_shape": [op.range_size, op.domain_size], "rank": op.rank}
    return rep


def proximity_study(
    arch: Architecture,
    op: LinearOperator,
    xs,
    deltas,
    r: float,
    reg_kind: str = "tikhonov",
    beta_scale: float = 1.0,
    seed: int = 0,
) -> RateReport:
    """Data residual of ``D(B_alpha(y^delta))`` with ``alpha = delta^(2r)`` and ``beta = c delta^r``.

    ``arch`` supplies the network and kind; its beta is replaced per noise
    level.  Each sample in ``xs`` gets one noise vector of norm exactly
    delta; the worst residual (and error) over samples is recorded.
    """
    deltas = _check_grid(deltas)
    rng = np.random.default_rng(seed)
    errors, residuals, alphas, betas = [], [], [], []
    for delta in deltas:
        alpha = delta ** (2 * r)
        beta = beta_scale * delta ** r
        a = Architecture(arch.kind, arch.params, arch.op, arch.null_proj, arch.back, beta, arch.mode)
        reg = Regularizer(reg_kind, alpha)
        worst_e = worst_r = 0.0
        for x in xs:
            y_delta = op.forward(x) + _noise(rng, op.range_shape, delta)
            rec = apply_architecture(a, reconstruct(reg, y_delta, op))
            worst_e = max(worst_e, float(np.linalg.norm(rec - x)))
            worst_r = max(worst_r, float(np.linalg.norm(y_delta - op.forward(rec))))
        errors.append(worst_e)
        residuals.append(worst_r)
        alphas.append(alpha)
        betas.append(beta)
    rep = RateReport(deltas, np.array(errors), np.array(residuals), np.array(alphas), np.array(betas))
    rep.error_slope = loglog_slope(deltas, rep.errors)
    rep.residual_slope = loglog_slope(deltas, rep.residuals)
    rep.manifest = {"study": "proximity", "arch": arch.kind, "r": r, "reg": reg_kind,
                    "beta_scale": beta_scale, "seed": seed}
    return rep


@dataclass
class GradientCheck:
    max_rel_error: float  # over all weights
    max_abs_error: float
    kink_crossings: int  # weights whose +-h step changed an activation or clipping pattern
    n_weights: int


def gradient_check(arch: Architecture, z: np.ndarray, x: np.ndarray, h: float = 1e-5) -> GradientCheck:
    """Compare backprop with central differences of the training loss, weight by weight.

    The relative error of weight ``i`` is ``|g_a - g_n| / max(|g_a|, |g_n|, f)``
    with floor ``f = 1e-6 max|g_n|`` so that weights with a vanishing
    gradient do not divide by round-off.  Central differences are only
    valid where the loss is smooth: a step that flips a leaky-ReLU sign or
    moves a data vector across the clipping sphere is counted in
    ``kink_crossings`` so callers can tell such weights apart.
    """
    _, grads = loss_and_grad(arch, z, x)
    theta = arch.params.flat()
    ga = grads.flat()

    def pattern(params):
        _, v, cache = net_forward(params, z, keep=True)
        bits = [(cache[1] > 0).ravel(), (cache[3] > 0).ravel()]
        if arch.kind == "dpnsn":
            w = np.stack([arch.op.forward(vi) for vi in v])
            bits.append(np.linalg.norm(w.reshape(len(w), -1), axis=1) > arch.beta)
        return np.concatenate(bits)

    base = pattern(arch.params)
    gn = np.empty_like(theta)
    kinks = 0
    for i in range(theta.size):
        vals, flipped = [], False
        for step in (h, -h):
            t = theta.copy()
            t[i] += step
            q = arch.params.with_flat(t)
            vals.append(batch_loss(arch.with_params(q), z, x))
            flipped = flipped or bool(np.any(pattern(q) != base))
        gn[i] = (vals[0] - vals[1]) / (2 * h)
        kinks += flipped
    floor = 1e-6 * max(float(np.abs(gn).max()), 1e-300)
    diff = np.abs(ga - gn)
    rel = diff / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
    return GradientCheck(float(rel.max()), float(diff.max()), int(kinks), int(theta.size))


@dataclass(frozen=True)
class TableConfig:
    n: int = 32
    n_detectors: int = 32
    n_angles: int = 30
    delta: float = 0.05
    n_train: int = 60
    n_test: int = 20
    seed: int = 0
    tv_alpha: float | None = None  # None: grid search on a validation split
    tv_alpha_grid: tuple = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
    tv_val_samples: int = 10
    cp_iterations: int = 500
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 4
    val_fraction: float = 0.1
    mode: str = "surrogate"

    def geometry(self) -> Geometry:
        return Geometry.limited(self.n, self.n_detectors, self.n_angles)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.batch_size, "adam", self.seed, self.val_fraction)


@dataclass
class TableResult:
    rows: dict  # method -> Metrics
    tv_alpha: float
    beta: float
    recon: dict  # method -> first test reconstruction
    ground_truth: np.ndarray
    logs: dict
    manifest: dict


ROWS = ("FBP", "TV", "FBP+RES", "TV+RES", "FBP+NSN", "TV+NSN", "TV+DP")


def table_experiment(cfg: TableConfig = TableConfig(), dataset: Dataset | None = None, progress=None) -> TableResult:
    """Train and evaluate the seven method combinations on one dataset.

    Initial reconstructions are computed once per sample.  Every network
    starts from the same seeded weights and sees the same training order.
    """
    say = progress or (lambda msg: None)
    geom = cfg.geometry()
    if dataset is None:
        dataset = make_dataset(cfg.n_train + cfg.n_test, geom, NoiseModel(cfg.delta, cfg.seed), cfg.seed,
                               n_test=cfg.n_test)
    geom = dataset.geometry
    op = RadonTransform(geom)
    tr, te = dataset.indices("train"), dataset.indices("test")
    if len(tr) == 0 or len(te) == 0:
        raise ValueError("dataset needs both train and test samples")

    alpha = cfg.tv_alpha
    scores = {}
    if alpha is None:
        val = tr[: cfg.tv_val_samples]
        alpha, scores = select_tv_alpha(dataset.y[val], dataset.x[val], op, cfg.tv_alpha_grid, cfg.cp_iterations)
    say(f"TV alpha = {alpha:g}")
    z_fbp = np.stack([fbp(y, geom) for y in dataset.y])
    z_tv = np.stack([chambolle_pock_tv(y, op, alpha, cfg.cp_iterations).x for y in dataset.y])
    beta = estimate_beta(dataset.eta[tr], dataset.noise.delta)
    say(f"beta = {beta:.6g}")

    tcfg = cfg.train_config()
    init = NetParams.init(cfg.seed)
    outputs = {"FBP": z_fbp[te], "TV": z_tv[te]}
    logs = {}
    nets = {"FBP+RES": ("res", z_fbp), "TV+RES": ("res", z_tv), "FBP+NSN": ("nsn", z_fbp),
            "TV+NSN": ("nsn", z_tv), "TV+DP": ("dpnsn", z_tv)}
    shared = {}
    for name, (kind, z) in nets.items():
        if kind not in shared:
            shared[kind] = build_architecture(kind, init, op, beta=beta, mode=cfg.mode)
        arch = shared[kind]
        params, log = train(arch, z[tr], dataset.x[tr], tcfg)
        logs[name] = log
        outputs[name] = apply_architecture(arch.with_params(params), z[te])
        say(f"{name}: best epoch {log.best_epoch}, val loss {min(log.val_loss):.6g}")

    rows = {name: mean_metrics(compute_metrics(o, x) for o, x in zip(outputs[name], dataset.x[te])) for name in ROWS}
    manifest = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "tv_alpha": alpha,
        "tv_alpha_scores": {f"{a:g}": s for a, s in scores.items()},
        "beta": beta,
        "best_epochs": {k: v.best_epoch for k, v in logs.items()},
        "reference_values": {k: dict(zip(("mse", "psnr", "ssim"), v)) for k, v in REFERENCE_TABLE.items()},
    }
    recon = {name: outputs[name][0] for name in ROWS}
    return TableResult(rows, alpha, beta, recon, dataset.x[te][0], logs, manifest)


def write_table_csv(rows: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mse", "psnr", "ssim"])
        for name, m in rows.items():
            w.writerow([name, f"{m.mse:.12g}", f"{m.psnr:.12g}", f"{m.ssim:.12g}"])
