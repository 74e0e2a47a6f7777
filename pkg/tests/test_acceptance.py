"""Acceptance criteria 1 to 12, each at its stated tolerance and time budget.

Every test is named ``test_criterion_NN_...``; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run.
"""

import json
import time

import numpy as np
import pytest

from dpnet.analysis import (
    REFERENCE_TABLE,
    TableConfig,
    convergence_study,
    gradient_check,
    lipschitz_map,
    spectral_operator,
    table_experiment,
)
from dpnet.cli import main
from dpnet.linop import (
    CGLSOptions,
    DenseOperator,
    Gradient,
    LinearOperator,
    adjoint_mismatch,
    apply_pseudoinverse,
    nullspace_projector,
    to_dense,
)
from dpnet.network import NetParams
from dpnet.proxnet import ProximityFn, apply_architecture, build_architecture
from dpnet.regularizers import filter_data_proximity_rate
from dpnet.tomo import Geometry, RadonTransform

DELTAS = np.geomspace(1e-1, 1e-3, 9)  # two decades


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_criterion_01_adjoints():
    rng = np.random.default_rng(101)
    with Timer() as t:
        errs = {}
        for n, k in ((8, 4), (64, 60)):
            g = Geometry.limited(n, n, k)
            errs[f"radon {n}x{n}/{k}"] = adjoint_mismatch(RadonTransform(g), rng, 100)
            errs[f"gradient {n}x{n}"] = adjoint_mismatch(Gradient((n, n)), rng, 100)
    print(errs, f"{t.seconds:.1f}s")
    assert max(errs.values()) <= 1e-8
    assert t.seconds < 30


def test_criterion_02_pseudoinverse():
    rng = np.random.default_rng(102)
    with Timer() as t:
        worst = 0.0
        for i in range(20):
            # the last operator has the largest admissible size
            m, n = (20, 30) if i == 19 else (int(rng.integers(2, 21)), int(rng.integers(2, 31)))
            mat = rng.standard_normal((m, n))
            y = rng.standard_normal(m)
            matrix_free = LinearOperator((n,), (m,), lambda x, a=mat: a @ x, lambda v, a=mat: a.T @ v)
            got = apply_pseudoinverse(matrix_free, y, CGLSOptions(max_iterations=5000, residual_tolerance=1e-12))
            ref = np.linalg.pinv(mat) @ y
            worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    print(f"worst relative error {worst:.3e}, {t.seconds:.2f}s")
    assert worst <= 1e-6
    assert t.seconds < 10


@pytest.mark.parametrize("which", ["dense", "radon"])
def test_criterion_03_projection_algebra(which):
    rng = np.random.default_rng(103)
    if which == "dense":
        op = DenseOperator(rng.standard_normal((15, 25)))
    else:
        op = to_dense(RadonTransform(Geometry.limited(8, 8, 6)))
    P = nullspace_projector(op)
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal(op.domain_shape)
        px = P.forward(x)
        s = np.linalg.norm(x)
        worst = max(
            worst,
            np.linalg.norm(P.forward(px) - px) / s,  # idempotence
            abs(np.vdot(px, x - px)) / s ** 2,  # orthogonality
            abs(np.linalg.norm(px) ** 2 + np.linalg.norm(x - px) ** 2 - s ** 2) / s ** 2,  # Pythagoras
        )
    print(f"{which}: worst defect {worst:.3e}")
    assert worst <= 1e-6


def test_criterion_04_phi():
    rng = np.random.default_rng(104)
    violations, n = 0, 0
    for beta in (0.0, 1e-3, 0.7, 5.0):
        phi = ProximityFn(beta)
        special = [0.0, beta, np.nextafter(beta, 0), np.nextafter(beta, np.inf), beta * (1 + 1e-15), 1e300]
        for i in range(25_000):
            z = rng.standard_normal(6)
            target = special[i] if i < len(special) else rng.uniform(0, 3 * beta + 1)
            z = np.zeros(6) if target == 0 else z * (target / np.linalg.norm(z))
            violations += np.linalg.norm(phi(z)) > beta
            n += 1
    assert n == 100_000
    phi = ProximityFn(0.7)
    ratio = 0.0
    for _ in range(10_000):
        a, b = rng.standard_normal((2, 6)) * rng.uniform(0, 2)
        ratio = max(ratio, np.linalg.norm(phi(a) - phi(b)) / np.linalg.norm(a - b))
    print(f"{violations} violations of the bound, Lipschitz ratio {ratio!r}")
    assert violations == 0
    assert ratio <= 1.0 + 1e-12


GEOM = Geometry.limited(32, 32, 30)
OP = RadonTransform(GEOM)


def test_criterion_05_nullspace_consistency():
    rng = np.random.default_rng(105)
    arch = build_architecture("nsn", NetParams.init(int(rng.integers(1 << 30))), OP)
    worst = 0.0
    for _ in range(50):
        z = rng.random(GEOM.image_shape)
        az = OP.forward(z)
        worst = max(worst, np.linalg.norm(OP.forward(apply_architecture(arch, z)) - az) / np.linalg.norm(az))
    print(f"worst relative data change {worst:.3e}")
    assert worst <= 1e-5


@pytest.mark.parametrize("beta", [0.0, 0.01, 1.0])
def test_criterion_06_beta_proximity(beta):
    rng = np.random.default_rng(106)
    arch = build_architecture("dpnsn", NetParams.init(int(rng.integers(1 << 30))), OP, beta=beta, mode="exact")
    excess = -np.inf
    for _ in range(20):
        z = rng.random(GEOM.image_shape)
        az = OP.forward(z)
        gap = np.linalg.norm(OP.forward(apply_architecture(arch, z)) - az)
        excess = max(excess, gap - beta - 1e-5 * np.linalg.norm(az))
    print(f"beta {beta}: largest excess {excess:.3e}")
    assert excess <= 0


def test_criterion_07_gradient_check():
    op = RadonTransform(Geometry.limited(8, 8, 6))
    rng = np.random.default_rng(1)
    z, x = rng.random((2, 8, 8)), rng.random((2, 8, 8))
    with Timer() as t:
        results = {kind: gradient_check(build_architecture(kind, NetParams.init(1), op, beta=0.92), z, x, h=1e-5)
                   for kind in ("res", "nsn", "dpnsn")}
    for kind, gc in results.items():
        print(f"{kind}: {gc.n_weights} weights, max relative error {gc.max_rel_error:.2e}, "
              f"{gc.kink_crossings} kink crossings")
    assert all(gc.n_weights == NetParams.init(1).size for gc in results.values())
    assert all(gc.kink_crossings == 0 for gc in results.values())
    assert max(gc.max_rel_error for gc in results.values()) <= 1e-4
    assert t.seconds < 120


@pytest.mark.parametrize("r", [0.5, 0.9])
def test_criterion_08_filter_proximity_rate(r):
    with Timer() as t:
        slopes = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            A = spectral_operator(40, 60, np.geomspace(1.0, 1e-3, 40), rng)
            slopes.append(filter_data_proximity_rate(A, r, DELTAS, rng.standard_normal(60), seed).slope)
    print(f"r = {r}: slopes {np.round(slopes, 3).tolist()}, {t.seconds:.1f}s")
    assert min(slopes) >= r - 0.1
    assert t.seconds < 60


def source_problem(seed):
    rng = np.random.default_rng(seed)
    A = spectral_operator(30, 40, np.geomspace(1.0, 0.2, 30), rng)
    U, V = lipschitz_map(40, 20, rng, 0.5), lipschitz_map(40, 20, rng, 0.5)
    x_source = A.matrix.T @ (A.matrix @ rng.standard_normal(40))
    return A, U, V, x_source


def test_criterion_09_convergence():
    A, U, V, x_source = source_problem(109)
    rep = convergence_study(A, U, x_source, DELTAS, beta_rule=lambda d: d, range_map=V)
    print("errors", np.array2string(rep.errors, precision=3))
    assert rep.error_monotone(0.1)
    assert rep.errors[-1] <= rep.errors[0] / 10


def test_criterion_10_rates():
    with Timer() as t:
        A, U, V, x_source = source_problem(110)
        rep = convergence_study(A, U, x_source, DELTAS, range_map=V)
    print(f"error slope {rep.error_slope:.3f}, residual slope {rep.residual_slope:.3f}, {t.seconds:.1f}s")
    assert abs(rep.error_slope - 1) <= 0.15
    assert abs(rep.residual_slope - 1) <= 0.15
    assert t.seconds < 120


def test_criterion_11_table_ordering():
    cfg = TableConfig()
    assert (cfg.n, cfg.cp_iterations, cfg.epochs, cfg.n_train, cfg.n_test) == (32, 500, 50, 60, 20)
    with Timer() as t:
        res = table_experiment(cfg)
    for name, m in res.rows.items():
        print(f"{name:<8s} MSE {m.mse:.5f}  PSNR {m.psnr:.2f}  SSIM {m.ssim:.4f}  reference MSE {REFERENCE_TABLE[name][0]}")
    print(f"{t.seconds:.0f}s")
    mse = {k: m.mse for k, m in res.rows.items()}
    assert mse["TV"] < mse["FBP"]
    assert mse["TV+DP"] < mse["TV"]
    assert t.seconds < 30 * 60


def output_files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_12_determinism(tmp_path):
    small = ["size=16", "n_detectors=16", "n_angles=12", "cp_iterations=50"]
    for run in ("a", "b"):
        root = tmp_path / run
        assert main(["verify", "--out", str(root / "verify")]) == 0
        assert main(["gen-data", "--out", str(root / "data"), "--n", "12", *small]) == 0
        assert main(["train", "--out", str(root / "train"), "--data", str(root / "data"), "--epochs", "3", *small]) == 0
    a, b = output_files(tmp_path / "a"), output_files(tmp_path / "b")
    assert a.keys() == b.keys()
    assert {"verify/report.json", "train/loss.csv", "train/training.png", "data/manifest.json"} <= a.keys()
    differing = [k for k in a if a[k] != b[k]]
    assert differing == []
    assert json.loads(a["verify/report.json"])["passed"]
