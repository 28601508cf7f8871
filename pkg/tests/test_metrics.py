import math

import numpy as np
import pytest

from degradasr.degrade import DegradeError, add_gaussian_noise
from degradasr.metrics import (
    FallbackPerceptual, MetricReport, perceptual_distance, psnr, ssim,
)
from conftest import synthetic_image


class TestPsnr:
    def test_identical_is_inf(self):
        a = synthetic_image(0, 32)
        assert math.isinf(psnr(a, a))

    def test_zero_db(self):
        a = np.zeros((16, 16, 3))
        b = np.ones((16, 16, 3))
        assert abs(psnr(a, b, max_val=1.0) - 0.0) < 1e-6

    def test_255_scale_analytic(self):
        # MSE = 1 on the 0-255 scale -> 20*log10(255)
        a = np.zeros((16, 16, 3))
        b = np.ones((16, 16, 3))  # differs by exactly 1 intensity unit
        assert abs(psnr(a, b, max_val=255.0) - 20 * math.log10(255)) < 1e-6

    def test_symmetric_and_monotone(self):
        a = synthetic_image(1, 32)
        b1 = add_gaussian_noise(a, 5.0, 0)
        b2 = add_gaussian_noise(a, 25.0, 0)
        assert psnr(a, b1) == psnr(b1, a)
        assert psnr(a, b1) > psnr(a, b2)

    def test_shape_mismatch(self):
        with pytest.raises(DegradeError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    def test_self_is_one(self):
        a = synthetic_image(2, 48)
        assert abs(ssim(a, a) - 1.0) < 1e-9

    def test_symmetric(self):
        a = synthetic_image(3, 48)
        b = add_gaussian_noise(a, 12.0, 1)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_constant_images_closed_form(self):
        # zero-variance case: SSIM = (2*mu_x*mu_y + C1)/(mu_x^2 + mu_y^2 + C1)
        mx, my = 0.5, 0.6
        a = np.full((32, 32, 3), mx)
        b = np.full((32, 32, 3), my)
        c1 = 0.01 ** 2
        expected = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
        assert abs(ssim(a, b) - expected) < 1e-9

    def test_too_small_rejected(self):
        with pytest.raises(DegradeError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestPerceptual:
    def test_identical_zero(self):
        a = synthetic_image(4, 64)
        assert perceptual_distance(a, a) == 0.0

    def test_non_negative(self):
        a = synthetic_image(5, 64)
        b = synthetic_image(6, 64)
        assert perceptual_distance(a, b) >= 0.0

    def test_monotone_in_noise(self):
        a = synthetic_image(7, 64)
        plugin = FallbackPerceptual(seed=1)
        dists = [perceptual_distance(a, add_gaussian_noise(a, s, 0), plugin)
                 for s in (5.0, 15.0, 30.0)]
        assert dists[0] < dists[1] < dists[2]

    def test_fallback_disabled_raises(self):
        a = synthetic_image(8, 32)
        with pytest.raises(DegradeError):
            perceptual_distance(a, a, plugin=None, allow_fallback=False)


class TestMetricReport:
    def test_aggregate_is_row_mean(self):
        rep = MetricReport()
        rep.add("a", 30.0, 0.9, 0.1)
        rep.add("b", 20.0, 0.7, 0.3)
        agg = rep.aggregate()
        assert abs(agg["psnr"] - 25.0) < 1e-12
        assert abs(agg["ssim"] - 0.8) < 1e-12
        assert abs(agg["perceptual"] - 0.2) < 1e-12

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        rows = [(f"i{k}", rng.uniform(10, 40), rng.uniform(0, 1)) for k in range(20)]
        r1, r2 = MetricReport(), MetricReport()
        for rid, p, s in rows:
            r1.add(rid, p, s)
        for rid, p, s in reversed(rows):
            r2.add(rid, p, s)
        a1, a2 = r1.aggregate(), r2.aggregate()
        assert abs(a1["psnr"] - a2["psnr"]) < 1e-12
        assert abs(a1["ssim"] - a2["ssim"]) < 1e-12

    def test_csv_round_numbers(self, tmp_path):
        rep = MetricReport()
        rep.add("x", math.inf, 1.0)
        path = tmp_path / "report.csv"
        rep.to_csv(path)
        text = path.read_text()
        assert text.startswith("id,psnr,ssim,perceptual\n")
        assert "# mean_psnr=" in text
