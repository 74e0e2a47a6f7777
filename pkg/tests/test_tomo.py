import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpnet.linop import adjoint_mismatch, to_dense
from dpnet.phantom import render_phantom, sample_random_phantom
from dpnet.regularizers import chambolle_pock_tv
from dpnet.tomo import (
    Geometry,
    RadonTransform,
    fbp,
    fbp_operator,
    radon_adjoint,
    radon_forward,
    ramp_filter,
    system_matrix,
)


def disk(geom, radius, cx=0.0, cy=0.0):
    c = geom.pixel_centres()
    x1, x2 = np.meshgrid(c, -c)
    return ((x1 - cx) ** 2 + (x2 - cy) ** 2 <= radius ** 2).astype(float)


class TestGeometry:
    def test_limited_defaults(self):
        g = Geometry.limited()
        assert g.image_shape == (64, 64)
        assert g.sino_shape == (60, 64)
        assert g.angles[0] == pytest.approx(-math.pi / 3)
        assert g.angles[-1] < math.pi / 3
        assert g.angle_step == pytest.approx(2 * math.pi / 3 / 60)

    def test_spacings(self):
        g = Geometry.limited(32, 17, 5)
        assert g.pixel_size == pytest.approx(2 / 32)
        assert g.detector_spacing == pytest.approx(2 / 16)
        np.testing.assert_allclose(g.detectors, np.linspace(-1, 1, 17))

    @pytest.mark.parametrize("angles", [(), (0.3, 0.1), (0.0, 0.0), (-2.0, 0.0), (0.0, math.pi / 2)])
    def test_bad_angles(self, angles):
        with pytest.raises(ValueError):
            Geometry(8, 8, angles)

    def test_small_sizes_rejected(self):
        with pytest.raises(ValueError):
            Geometry(1, 8, (0.0,))
        with pytest.raises(ValueError):
            Geometry(8, 1, (0.0,))

    def test_dict_round_trip(self):
        g = Geometry.limited(16, 12, 7)
        assert Geometry.from_dict(g.to_dict()) == g


class TestRadon:
    def test_zero(self):
        g = Geometry.limited(16, 16, 6)
        assert not radon_forward(np.zeros(g.image_shape), g).any()
        assert not radon_adjoint(np.zeros(g.sino_shape), g).any()

    def test_shape_checks(self):
        g = Geometry.limited(8, 8, 4)
        with pytest.raises(ValueError):
            radon_forward(np.zeros((9, 9)), g)
        with pytest.raises(ValueError):
            radon_adjoint(np.zeros((4, 9)), g)

    def test_disk_chords(self):
        g = Geometry.full(64, 64, 30)
        sino = radon_forward(disk(g, 0.5), g)
        s = g.detectors
        exact = 2 * np.sqrt(np.clip(0.25 - s ** 2, 0, None))
        assert np.abs(sino - exact).max() <= 2 * g.pixel_size
        assert np.ptp(sino, axis=0).max() <= 2 * g.pixel_size

    def test_translation_covariance(self):
        g = Geometry.full(64, 129, 12)
        base = radon_forward(disk(g, 0.1), g)
        dx = 0.25
        moved = radon_forward(disk(g, 0.1, cx=dx), g)
        s = g.detectors
        for k, theta in enumerate(g.angles):
            c0 = (s * base[k]).sum() / base[k].sum()
            c1 = (s * moved[k]).sum() / moved[k].sum()
            assert c1 - c0 == pytest.approx(dx * math.cos(theta), abs=0.25 * g.pixel_size)

    @pytest.mark.parametrize("geom", [Geometry.limited(8, 8, 4), Geometry.limited(64, 64, 60), Geometry.full(20, 31, 13)])
    def test_adjoint(self, geom):
        assert adjoint_mismatch(RadonTransform(geom), np.random.default_rng(0), 100) <= 1e-8

    def test_adjoint_is_transpose(self):
        g = Geometry.limited(8, 8, 4)
        mat = to_dense(RadonTransform(g)).matrix
        np.testing.assert_allclose(mat, system_matrix(g).toarray(), atol=1e-15)
        rng = np.random.default_rng(1)
        y = rng.standard_normal(g.sino_shape)
        np.testing.assert_allclose(radon_adjoint(y, g).ravel(), mat.T @ y.ravel(), atol=1e-12)

    def test_mirror_symmetry(self):
        # mirroring the image in x1 maps angle theta to -theta and s to -s
        g = Geometry(32, 33, (-0.7, -0.2, 0.2, 0.7))
        rng = np.random.default_rng(2)
        img = rng.random(g.image_shape)
        a = radon_forward(img, g)
        b = radon_forward(img[:, ::-1], g)
        np.testing.assert_allclose(b[::-1, ::-1], a, atol=1e-10)


class TestFBP:
    def test_ramp_response_is_ramp(self):
        ds = 0.05
        row = np.zeros((1, 64))
        row[0, 32] = 1.0
        out = ramp_filter(row, ds)
        # the filtered delta is the sampled Ram-Lak kernel
        assert out[0, 32] == pytest.approx(1 / (4 * ds), rel=1e-12)
        assert out[0, 33] == pytest.approx(-1 / (math.pi ** 2 * ds), rel=1e-12)
        assert out[0, 34] == pytest.approx(0.0, abs=1e-12)

    def test_zero(self):
        g = Geometry.limited(16, 16, 8)
        assert not fbp(np.zeros(g.sino_shape), g).any()

    def test_full_angle_blob(self):
        g = Geometry.full(64, 64, 90)
        c = g.pixel_centres()
        x1, x2 = np.meshgrid(c, -c)
        img = np.exp(-((x1 - 0.1) ** 2 + (x2 + 0.05) ** 2) / (2 * 0.2 ** 2))
        rec = fbp(radon_forward(img, g), g)
        assert np.linalg.norm(rec - img) / np.linalg.norm(img) <= 0.15

    def test_operator_adjoint(self):
        assert adjoint_mismatch(fbp_operator(Geometry.limited(12, 12, 6)), np.random.default_rng(3), 20) <= 1e-10

    def test_limited_angle_fbp_worse_than_tv(self):
        g = Geometry.limited(32, 32, 30)
        rng = np.random.default_rng(4)
        x = render_phantom(sample_random_phantom(11), 32)
        clean = radon_forward(x, g)
        y = clean + 0.05 * np.abs(clean).max() * rng.standard_normal(g.sino_shape)
        mse_fbp = np.mean((fbp(y, g) - x) ** 2)
        mse_tv = np.mean((chambolle_pock_tv(y, RadonTransform(g), 3e-3, 500).x - x) ** 2)
        assert mse_tv < mse_fbp


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 12), nd=st.integers(2, 14), k=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_adjoint_random_geometries(n, nd, k, seed):
    rng = np.random.default_rng(seed)
    angles = np.sort(rng.uniform(-math.pi / 2, math.pi / 2 - 1e-9, k))
    if k > 1 and np.min(np.diff(angles)) <= 0:
        return
    g = Geometry(n, nd, tuple(angles))
    assert adjoint_mismatch(RadonTransform(g), rng, 5) <= 1e-10
