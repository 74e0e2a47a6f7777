"""The property suite behind ``dpnet verify``.

Each check returns a :class:`Check` with the measured value and the
tolerance it was compared against.  The JSON report contains no timings
so that repeated runs write identical files.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .analysis import convergence_study, gradient_check, lipschitz_map, spectral_operator
from .linop import (
    CGLSOptions,
    DenseOperator,
    Gradient,
    LinearOperator,
    adjoint_mismatch,
    apply_pseudoinverse,
    nullspace_projector,
    project_range_complement,
    to_dense,
)
from .network import NetParams
from .proxnet import ProximityFn, apply_architecture, build_architecture
from .regularizers import filter_data_proximity_rate
from .tomo import Geometry, RadonTransform

__all__ = ["Check", "FAULTS", "REPORT_SCHEMA", "run_suite"]

FAULTS = ("adjoint-sign",)

# documented layout of the report file
REPORT_SCHEMA = {
    "type": "object",
    "required": ["passed", "seed", "checks"],
    "properties": {
        "passed": {"type": "boolean"},
        "seed": {"type": "integer"},
        "fault": {"type": ["string", "null"]},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "value", "tolerance", "detail"],
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "value": {"type": ["number", "null"]},
                    "tolerance": {"type": "number"},
                    "detail": {"type": "string"},
                },
            },
        },
    },
}


@dataclass
class Check:
    name: str
    passed: bool
    value: float | None  # None when the check raised
    tolerance: float
    detail: str = ""


def _radon(geom: Geometry, fault: str | None) -> LinearOperator:
    op = RadonTransform(geom)
    if fault == "adjoint-sign":
        return LinearOperator(op.domain_shape, op.range_shape, op.forward, lambda y: -op.adjoint(y), "broken")
    return op


def _adjoints(rng, fault) -> list[Check]:
    out = []
    for geom in (Geometry.limited(8, 8, 4), Geometry.limited(64, 64, 60)):
        err = adjoint_mismatch(_radon(geom, fault), rng, 100)
        out.append(Check(f"adjoint/radon-{geom.n}x{geom.n}-{len(geom.angles)}", err <= 1e-8, err, 1e-8))
    err = adjoint_mismatch(Gradient((16, 16)), rng, 100)
    out.append(Check("adjoint/gradient-16x16", err <= 1e-8, err, 1e-8))
    return out


def _pinv(rng) -> Check:
    worst = 0.0
    for _ in range(20):
        m, n = int(rng.integers(2, 21)), int(rng.integers(2, 31))
        A = DenseOperator(rng.standard_normal((m, n)))
        y = rng.standard_normal(m)
        ref = np.linalg.pinv(A.matrix) @ y
        got = apply_pseudoinverse(LinearOperator((n,), (m,), A.forward, A.adjoint), y,
                                  CGLSOptions(max_iterations=5000, residual_tolerance=1e-12))
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    return Check("pinv/cgls-vs-svd", worst <= 1e-6, worst, 1e-6)


def _projections(rng, fault) -> list[Check]:
    out = []
    # the tomography operator is densified so the projector is exact up to the SVD
    cases = [("dense", DenseOperator(rng.standard_normal((12, 20)))),
             ("radon", to_dense(_radon(Geometry.limited(8, 8, 6), fault)))]
    for name, op in cases:
        P = nullspace_projector(op)
        worst = 0.0
        for _ in range(10):
            x = rng.standard_normal(op.domain_shape)
            px = P.forward(x)
            scale = np.linalg.norm(x)
            idem = np.linalg.norm(P.forward(px) - px)
            ortho = abs(np.vdot(px, x - px))
            pyth = abs(np.linalg.norm(px) ** 2 + np.linalg.norm(x - px) ** 2 - scale ** 2) / scale
            kernel = np.linalg.norm(op.forward(px))
            worst = max(worst, idem / scale, ortho / scale ** 2, pyth / scale, kernel / scale)
        out.append(Check(f"projection/{name}", worst <= 1e-6, worst, 1e-6))
        # range complement agrees with the null-space projector
        x = rng.standard_normal(op.domain_shape)
        diff = np.linalg.norm(project_range_complement(op, x) - (x - P.forward(x))) / np.linalg.norm(x)
        out.append(Check(f"projection/{name}-complement", diff <= 1e-6, float(diff), 1e-6))
    return out


def _phi(rng, n_bound: int, n_lip: int) -> list[Check]:
    beta = 0.7
    phi = ProximityFn(beta)
    eps = 1e-12
    worst = 0.0
    for i in range(n_bound):
        z = rng.standard_normal(8)
        target = (0.0, beta - eps, beta, beta + eps, 10 * beta)[i % 5] if i < 5000 else rng.uniform(0, 20 * beta)
        z = np.zeros(8) if target == 0 else z * (target / np.linalg.norm(z))
        worst = max(worst, float(np.linalg.norm(phi(z))) - beta)
    bound = Check("phi/norm-bound", worst <= 0.0, worst, 0.0, "max(||phi(z)|| - beta), zero tolerance")
    ratio = 0.0
    for _ in range(n_lip):
        a, b = rng.standard_normal((2, 8)) * rng.uniform(0, 3)
        d = np.linalg.norm(a - b)
        if d > 0:
            ratio = max(ratio, float(np.linalg.norm(phi(a) - phi(b)) / d))
    lip = Check("phi/lipschitz", ratio <= 1.0 + 1e-12, ratio, 1.0 + 1e-12)
    return [bound, lip]


def _structure(rng, fault) -> list[Check]:
    op = _radon(Geometry.limited(16, 16, 12), fault)
    out = []
    nsn = build_architecture("nsn", NetParams.init(int(rng.integers(1 << 30))), op)
    worst = 0.0
    for _ in range(50):
        z = rng.random(op.domain_shape)
        az = op.forward(z)
        worst = max(worst, float(np.linalg.norm(op.forward(apply_architecture(nsn, z)) - az) / np.linalg.norm(az)))
    out.append(Check("network/nsn-data-consistency", worst <= 1e-5, worst, 1e-5, "||A M(z) - A z|| / ||A z||"))
    for beta in (0.0, 0.01, 1.0):
        arch = build_architecture("dpnsn", NetParams.init(int(rng.integers(1 << 30))), op, beta=beta)
        excess = -math.inf
        for _ in range(20):
            z = rng.random(op.domain_shape)
            az = op.forward(z)
            gap = np.linalg.norm(op.forward(apply_architecture(arch, z)) - az)
            excess = max(excess, float(gap - beta - 1e-5 * np.linalg.norm(az)))
        out.append(Check(f"network/dpnsn-proximity-beta={beta:g}", excess <= 0, excess, 0.0,
                         "max(||A D(z) - A z|| - beta - 1e-5 ||A z||)"))
    return out


def _gradients(fault) -> list[Check]:
    op = _radon(Geometry.limited(8, 8, 6), fault)
    rng = np.random.default_rng(1)
    z, x = rng.random((2, 8, 8)), rng.random((2, 8, 8))
    out = []
    for kind in ("res", "nsn", "dpnsn"):
        gc = gradient_check(build_architecture(kind, NetParams.init(1), op, beta=0.92), z, x)
        ok = gc.max_rel_error <= 1e-4 and gc.kink_crossings == 0
        out.append(Check(f"gradient/{kind}", ok, gc.max_rel_error, 1e-4,
                         f"{gc.n_weights} weights, {gc.kink_crossings} kink crossings"))
    return out


def _rates() -> list[Check]:
    out = []
    deltas = np.geomspace(1e-1, 1e-3, 9)
    for r in (0.5, 0.9):
        worst = math.inf
        for seed in range(5):
            rng = np.random.default_rng(seed)
            A = spectral_operator(40, 60, np.geomspace(1.0, 1e-3, 40), rng)
            worst = min(worst, filter_data_proximity_rate(A, r, deltas, rng.standard_normal(60), seed).slope)
        out.append(Check(f"rate/tikhonov-proximity-r={r:g}", worst >= r - 0.1, worst, r - 0.1,
                         "smallest fitted slope over 5 seeds"))
    rng = np.random.default_rng(0)
    A = spectral_operator(30, 40, np.geomspace(1.0, 0.2, 30), rng)
    U, V = lipschitz_map(40, 20, rng, 0.5), lipschitz_map(40, 20, rng, 0.5)
    x_source = A.matrix.T @ (A.matrix @ rng.standard_normal(40))
    rep = convergence_study(A, U, x_source, deltas, range_map=V)
    shrink = float(rep.errors[-1] / rep.errors[0])
    out.append(Check("convergence/monotone", rep.error_monotone(0.1), float(np.max(rep.errors[1:] / rep.errors[:-1])), 1.1))
    out.append(Check("convergence/shrink", shrink <= 0.1, shrink, 0.1, "final / initial error over two decades"))
    for label, slope in (("error", rep.error_slope), ("residual", rep.residual_slope)):
        out.append(Check(f"convergence/{label}-slope", abs(slope - 1) <= 0.15, slope, 0.15, "target slope 1"))
    return out


def run_suite(seed: int = 0, fault: str | None = None, quick: bool = False) -> dict:
    """Run every check and return the report dictionary.

    ``fault`` injects a known defect (see :data:`FAULTS`) to show that the
    suite catches it.  ``quick`` skips the slow gradient checks and uses
    fewer clipping samples.
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}, expected one of {FAULTS}")
    rng = np.random.default_rng(seed)
    groups = [
        ("adjoint", lambda: _adjoints(rng, fault)),
        ("pinv", lambda: [_pinv(rng)]),
        ("projection", lambda: _projections(rng, fault)),
        ("phi", lambda: _phi(rng, 10_000 if quick else 100_000, 1_000 if quick else 10_000)),
        ("network", lambda: _structure(rng, fault)),
        ("gradient", lambda: [] if quick else _gradients(fault)),
        ("rate", _rates),
    ]
    checks = []
    for name, group in groups:
        try:
            checks += group()
        except Exception as exc:  # a crashing group is a failed check, not a crashed suite
            checks.append(Check(f"{name}/error", False, None, 0.0, f"{type(exc).__name__}: {exc}"))
    rows = [asdict(c) for c in checks]
    for row in rows:
        row["passed"] = bool(row["passed"])
        row["value"] = None if row["value"] is None else float(row["value"])
        row["tolerance"] = float(row["tolerance"])
    return {"passed": all(r["passed"] for r in rows), "seed": int(seed), "fault": fault, "checks": rows}
