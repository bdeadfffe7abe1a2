import logging
import math

import numpy as np
import pytest

from ovnlm.cube_io import SpectralCube
from ovnlm.metrics import psnr
from ovnlm.noise_model import (
    CovarianceError,
    DegenerateBandError,
    NoiseCovariance,
    add_gaussian_noise,
    estimate_noise_covariance_mad,
    read_covariance_csv,
    sigma_for_target_psnr,
    write_covariance_csv,
)


def test_zero_covariance_leaves_cube_unchanged(make_cube) -> None:
    cube = make_cube(4, 4, 3)

    noisy = add_gaussian_noise(cube, NoiseCovariance(np.zeros((3, 3))), seed=1)

    assert noisy == cube


def test_injected_noise_has_requested_variance() -> None:
    zero = SpectralCube(np.zeros((64, 64, 3)))

    noisy = add_gaussian_noise(zero, NoiseCovariance.isotropic(3, 100.0), seed=7)

    variances = noisy.pixels.var(axis=0)
    assert np.all((variances >= 85) & (variances <= 115))


def test_noise_is_reproducible_and_independent_of_workers(make_cube) -> None:
    cube = make_cube(40, 9, 2)
    cov = NoiseCovariance(np.array([[4.0, 1.0], [1.0, 9.0]]))

    first = add_gaussian_noise(cube, cov, seed=11, workers=1)
    second = add_gaussian_noise(cube, cov, seed=11, workers=4)
    other = add_gaussian_noise(cube, cov, seed=12, workers=1)

    assert first == second
    assert not first == other


def test_correlated_noise_follows_covariance() -> None:
    cov = NoiseCovariance(np.array([[4.0, 3.0], [3.0, 9.0]]))
    zero = SpectralCube(np.zeros((128, 128, 2)))

    samples = add_gaussian_noise(zero, cov, seed=3).pixels

    np.testing.assert_allclose(np.cov(samples.T), cov.matrix, atol=0.5)


def test_noise_rejects_mismatched_bands_and_negative_seed(make_cube) -> None:
    cube = make_cube(2, 2, 2)

    with pytest.raises(CovarianceError):
        add_gaussian_noise(cube, NoiseCovariance.isotropic(3, 1.0), seed=0)
    with pytest.raises(ValueError):
        add_gaussian_noise(cube, NoiseCovariance.isotropic(2, 1.0), seed=-1)


def test_non_psd_covariance_cannot_drive_noise(make_cube) -> None:
    cov = NoiseCovariance(np.array([[1.0, 2.0], [2.0, 1.0]]))

    assert not cov.is_psd()
    with pytest.raises(CovarianceError):
        add_gaussian_noise(make_cube(2, 2, 2), cov, seed=0)
    assert cov.project_psd().is_psd()


def test_sigma_for_target_psnr() -> None:
    cube = SpectralCube(np.full((2, 2, 1), 255.0))

    assert sigma_for_target_psnr(cube, 20.0) == pytest.approx(25.5)
    assert sigma_for_target_psnr(cube, math.inf) == 0.0


def test_sigma_for_target_psnr_requires_positive_peak() -> None:
    with pytest.raises(ValueError):
        sigma_for_target_psnr(SpectralCube(np.zeros((2, 2, 1))), 20.0)


def test_target_psnr_is_reached_by_injection(make_cube) -> None:
    clean = make_cube(128, 128, 3, seed=5)
    sigma = sigma_for_target_psnr(clean, 19.0)

    noisy = add_gaussian_noise(clean, NoiseCovariance.isotropic(3, sigma**2), seed=2)

    assert 18.8 <= psnr(clean, noisy) <= 19.2


def test_mad_of_constant_band_is_zero(make_cube) -> None:
    data = np.array(make_cube(8, 8, 2).data)
    data[:, :, 1] = 42.0

    cov = estimate_noise_covariance_mad(SpectralCube(data))

    assert cov.matrix[1, 1] == 0.0
    assert cov.matrix[0, 1] == 0.0


def test_mad_zero_band_warns_or_raises_in_strict_mode(make_cube, caplog) -> None:
    data = np.array(make_cube(8, 8, 2).data)
    data[:, :, 0] = 3.0
    cube = SpectralCube(data)

    with caplog.at_level(logging.WARNING, logger="ovnlm.noise_model"):
        estimate_noise_covariance_mad(cube)
    assert "zero MAD" in caplog.text
    with pytest.raises(DegenerateBandError):
        estimate_noise_covariance_mad(cube, strict=True)


def test_mad_variance_of_gaussian_noise() -> None:
    rng = np.random.default_rng(21)
    cube = SpectralCube(rng.normal(0.0, 12.0, size=(256, 256, 1)))

    cov = estimate_noise_covariance_mad(cube)

    assert cov.matrix[0, 0] == pytest.approx(144.0, rel=0.10)


def test_duplicated_band_is_fully_correlated() -> None:
    rng = np.random.default_rng(8)
    band = rng.normal(50.0, 5.0, size=(64, 64, 1))
    cube = SpectralCube(np.concatenate([band, band], axis=2))

    cov = estimate_noise_covariance_mad(cube)

    correlation = cov.matrix[0, 1] / math.sqrt(cov.matrix[0, 0] * cov.matrix[1, 1])
    assert 0.9 <= correlation <= 1.0 + 1e-9
    assert cov.is_psd()


def test_diagonal_only_estimate_has_no_cross_terms() -> None:
    rng = np.random.default_rng(2)
    band = rng.normal(0.0, 3.0, size=(32, 32, 1))
    cube = SpectralCube(np.concatenate([band, band], axis=2))

    cov = estimate_noise_covariance_mad(cube, diagonal_only=True)

    assert cov.matrix[0, 1] == 0.0


def test_covariance_floor_raises_small_variances() -> None:
    cov = NoiseCovariance(np.diag([0.0, 5.0]))

    floored = cov.with_floor(1.0)

    assert floored.diagonal.tolist() == [1.0, 5.0]


def test_covariance_csv_round_trip(tmp_path) -> None:
    cov = NoiseCovariance(np.array([[2.5, 0.1], [0.1, 1.0 / 3.0]]))
    path = tmp_path / "cov.csv"

    write_covariance_csv(cov, path)

    np.testing.assert_array_equal(read_covariance_csv(path).matrix, cov.matrix)


def test_covariance_csv_must_be_square(tmp_path) -> None:
    path = tmp_path / "bad.csv"
    path.write_text("1,2,3\n4,5,6\n", encoding="utf-8")

    with pytest.raises(CovarianceError):
        read_covariance_csv(path)


def test_mad_estimate_scales_with_intensity_squared(make_cube) -> None:
    cube = make_cube(20, 20, 3, seed=41)
    k = 3.0

    base = estimate_noise_covariance_mad(cube).matrix
    scaled = estimate_noise_covariance_mad(SpectralCube(k * cube.data)).matrix

    np.testing.assert_allclose(scaled, k * k * base, rtol=1e-9, atol=1e-9 * np.abs(base).max())


def test_mad_estimate_entries_respect_the_psd_bound() -> None:
    rng = np.random.default_rng(42)
    for seed in range(10):
        root = rng.normal(size=(4, 4))
        truth = NoiseCovariance(root @ root.T + 0.1 * np.eye(4))
        noisy = add_gaussian_noise(SpectralCube(np.zeros((5, 5, 4))), truth, seed=seed)

        estimate = estimate_noise_covariance_mad(noisy).matrix
        bound = np.sqrt(np.outer(np.diag(estimate), np.diag(estimate)))

        assert np.all(np.abs(estimate) <= bound + 1e-9)
