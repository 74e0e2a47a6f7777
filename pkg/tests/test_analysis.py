import csv
import math

import numpy as np
import pytest

from dpnet.analysis import (
    ROWS,
    RateReport,
    TableConfig,
    compute_metrics,
    convergence_study,
    gaussian_window,
    lipschitz_map,
    proximity_study,
    spectral_operator,
    table_experiment,
    write_table_csv,
)
from dpnet.linop import DenseOperator
from dpnet.network import NetParams
from dpnet.proxnet import build_architecture
from dpnet.regularizers import Regularizer, reconstruct

DELTAS = np.geomspace(1e-1, 1e-3, 9)


def ssim_direct(a, b, rng_value):
    """SSIM by explicit window loops."""
    win = gaussian_window(11, 1.5)
    c1, c2 = (0.01 * rng_value) ** 2, (0.03 * rng_value) ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestMetrics:
    def test_identity(self):
        x = np.random.default_rng(0).random((16, 16))
        m = compute_metrics(x, x)
        assert m.mse == 0.0 and m.psnr == math.inf and m.ssim == pytest.approx(1.0)

    def test_constant_offset(self):
        x = np.random.default_rng(1).random((16, 16))
        x = (x - x.min()) / np.ptp(x)  # unit range
        m = compute_metrics(x + 0.1, x)
        assert m.mse == pytest.approx(0.01)
        assert m.psnr == pytest.approx(20.0)

    def test_direct_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((20, 17)), rng.random((20, 17))
        m = compute_metrics(a, b)
        assert m.mse == pytest.approx(np.mean((a - b) ** 2), abs=1e-12)
        assert m.ssim == pytest.approx(ssim_direct(a, b, np.ptp(b)), abs=1e-10)
        assert -1 <= m.ssim <= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((4, 4)), np.ones((4, 4)))
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_window(self):
        w = gaussian_window()
        assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(w, w.T)


def test_rate_report_lengths():
    with pytest.raises(ValueError):
        RateReport(np.ones(3), np.ones(3), np.ones(2), np.ones(3), np.ones(3))


def dense_problem(seed):
    rng = np.random.default_rng(seed)
    A = spectral_operator(30, 40, np.geomspace(1.0, 0.2, 30), rng)
    x_source = A.matrix.T @ (A.matrix @ rng.standard_normal(40))
    return A, x_source, rng


class TestConvergence:
    def test_classical_special_case(self):
        A, x_source, _ = dense_problem(0)
        rep = convergence_study(A, lambda z: np.zeros_like(z), x_source, DELTAS, reg_kind="tsvd",
                                beta_rule=lambda d: 0.0, k=5)
        assert rep.errors[-1] < rep.errors[0] / 10
        assert rep.error_monotone(0.1)
        np.testing.assert_array_equal(rep.betas, 0.0)

    def test_generic_rates(self):
        A, x_source, rng = dense_problem(1)
        U, V = lipschitz_map(40, 20, rng, 0.5), lipschitz_map(40, 20, rng, 0.5)
        rep = convergence_study(A, U, x_source, DELTAS, range_map=V)
        assert abs(rep.error_slope - 1) <= 0.15
        assert abs(rep.residual_slope - 1) <= 0.15
        assert rep.manifest["k"] == 20

    def test_noise_free_endpoint(self):
        # delta = 0, beta = 0: the data are reproduced up to solver round-off
        A, x_source, _ = dense_problem(2)
        y = A.forward(x_source)
        z = reconstruct(Regularizer("tsvd", 1e-12), y, A)
        # treat the 40-vector as a one-row image for the convolutional network
        A2 = DenseOperator(A.matrix, (1, 40), (30,))
        arch = build_architecture("dpnsn", NetParams.init(2), A2, beta=0.0)
        out = arch(z.reshape(1, 40))
        assert np.linalg.norm(y - A2.forward(out)) <= 1e-10 * np.linalg.norm(y)

    def test_source_precondition(self):
        A, _, _ = dense_problem(3)
        # a null-space vector is not in the range of the pseudoinverse
        null = np.linalg.svd(A.matrix)[2][-1]
        with pytest.raises(ValueError):
            convergence_study(A, lambda z: z, null, DELTAS)

    def test_grid_validation(self):
        A, x_source, _ = dense_problem(4)
        with pytest.raises(ValueError):
            convergence_study(A, lambda z: z, x_source, DELTAS[::-1])
        with pytest.raises(ValueError):
            convergence_study(A, lambda z: z, x_source, [0.1])


class TestProximityStudy:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.op = spectral_operator(40, 64, np.geomspace(1.0, 1e-3, 40), rng)
        self.op = DenseOperator(self.op.matrix, (8, 8), (40,))
        self.xs = [rng.random((8, 8)) for _ in range(3)]

    def study(self, kind, params, r=0.5, scale=1.0):
        arch = build_architecture(kind, params, self.op)
        return proximity_study(arch, self.op, self.xs, DELTAS, r, beta_scale=scale, seed=3)

    def test_nsn_keeps_filter_residual(self):
        base = self.study("res", NetParams.zeros_like(NetParams.init(0)), scale=0.0)
        nsn = self.study("nsn", NetParams.init(1), scale=0.0)
        np.testing.assert_allclose(nsn.residuals, base.residuals, rtol=1e-8)

    def test_dpnsn_within_beta(self):
        base = self.study("res", NetParams.zeros_like(NetParams.init(0)))
        dp = self.study("dpnsn", NetParams.init(2))
        assert np.all(dp.residuals <= base.residuals + dp.betas + 1e-10)

    @pytest.mark.parametrize("r", [0.5, 0.9])
    def test_slope(self, r):
        rep = self.study("dpnsn", NetParams.init(3), r=r)
        assert rep.residual_slope >= r - 0.1
        np.testing.assert_allclose(rep.alphas, DELTAS ** (2 * r))
        np.testing.assert_allclose(rep.betas, DELTAS ** r)


class TestTable:
    CFG = TableConfig(n=16, n_detectors=16, n_angles=12, n_train=6, n_test=2, tv_alpha=3e-3,
                      cp_iterations=30, epochs=1)

    def test_schema_and_determinism(self, tmp_path):
        a = table_experiment(self.CFG)
        b = table_experiment(self.CFG)
        write_table_csv(a.rows, tmp_path / "a.csv")
        write_table_csv(b.rows, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        with open(tmp_path / "a.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "mse", "psnr", "ssim"]
        assert [r[0] for r in rows[1:]] == list(ROWS)
        assert all(len(r) == 4 for r in rows)
        assert a.manifest["reference_values"]["TV+DP"]["mse"] == 0.0008

    def test_alpha_search(self):
        cfg = TableConfig(n=16, n_detectors=16, n_angles=12, n_train=6, n_test=2, tv_alpha=None,
                          tv_alpha_grid=(1e-3, 1e-2), tv_val_samples=2, cp_iterations=20, epochs=1)
        res = table_experiment(cfg)
        assert res.tv_alpha in (1e-3, 1e-2)
        assert set(res.manifest["tv_alpha_scores"]) == {"0.001", "0.01"}
