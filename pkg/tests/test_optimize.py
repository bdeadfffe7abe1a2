import logging
import math

import numpy as np
import pytest

from ovnlm import optimize
from ovnlm.cube_io import SpectralCube
from ovnlm.noise_model import NoiseCovariance, add_gaussian_noise
from ovnlm.optimize import (
    OptimizationError,
    OptimizerConfig,
    ParamVector,
    auto_metric_shape,
    central_gradient,
    default_init,
    optimize_params,
)
from ovnlm.similarity import CandidateSets
from ovnlm.sure import RiskReport, sure_risk
from ovnlm.synthetic import piecewise_constant_cube
from ovnlm.vnlm import FilterParams


@pytest.fixture
def noisy_scene():
    clean = piecewise_constant_cube(12, 12, 2, regions=4, seed=3)
    cov = NoiseCovariance.isotropic(2, 100.0)
    return add_gaussian_noise(clean, cov, seed=5), cov


def test_default_init_scales_with_noise_and_patch() -> None:
    params = default_init(NoiseCovariance.isotropic(3, 4.0), patch_radius=3)

    assert params.h == pytest.approx(2.0 * 49)
    np.testing.assert_allclose(params.phi, np.eye(3))
    assert params.metric_shape == "full"


def test_default_init_normalizes_phi_to_trace_p() -> None:
    params = default_init(NoiseCovariance(np.diag([1.0, 3.0])), patch_radius=1)

    np.testing.assert_allclose(params.phi, np.diag([0.5, 1.5]))


def test_default_init_falls_back_on_zero_covariance(caplog) -> None:
    with caplog.at_level(logging.WARNING, logger="ovnlm.optimize"):
        params = default_init(NoiseCovariance(np.zeros((2, 2))), patch_radius=3)

    assert params.h == 1.0
    assert "zero trace" in caplog.text


def test_identity_init_ignores_anisotropic_noise() -> None:
    params = default_init(NoiseCovariance(np.diag([1.0, 9.0])), patch_radius=1, metric_shape="identity")

    np.testing.assert_array_equal(params.phi, np.eye(2))
    assert params.h == pytest.approx(math.sqrt(5.0) * 9)


def test_identity_shape_rejects_a_non_scalar_metric() -> None:
    with pytest.raises(ValueError, match="Identity metric shape"):
        FilterParams(h=1.0, phi=np.diag([0.2, 1.8]), patch_radius=1, metric_shape="identity")
    assert FilterParams(h=1.0, phi=3.0 * np.eye(2), patch_radius=1, metric_shape="identity").bands == 2


def test_metric_shape_defaults_to_diagonal_for_many_bands() -> None:
    assert auto_metric_shape(4) == "full"
    assert auto_metric_shape(9) == "diagonal"


def test_every_parameter_vector_decodes_to_a_feasible_metric() -> None:
    rng = np.random.default_rng(0)
    for shape in ("diagonal", "full"):
        vector = ParamVector(FilterParams(h=1.0, phi=np.eye(3), patch_radius=1, metric_shape=shape))
        for _ in range(10):
            params = vector.decode(rng.normal(size=vector.size) * 3.0)
            assert params.h > 0
            assert np.linalg.eigvalsh(params.phi)[0] >= -1e-10


def test_identity_shape_keeps_phi_fixed() -> None:
    phi = np.diag([2.0, 2.0])
    vector = ParamVector(FilterParams(h=3.0, phi=phi, patch_radius=1, metric_shape="identity"))

    assert vector.size == 1
    decoded = vector.decode(np.array([math.log(5.0)]))
    assert decoded.h == pytest.approx(5.0)
    np.testing.assert_array_equal(decoded.phi, phi)


def test_full_shape_encoding_reproduces_phi() -> None:
    phi = np.array([[2.0, 0.4], [0.4, 1.0]])
    vector = ParamVector(FilterParams(h=3.0, phi=phi, patch_radius=1))

    decoded = vector.decode(vector.encode(FilterParams(h=3.0, phi=phi, patch_radius=1)))

    np.testing.assert_allclose(decoded.phi, phi, rtol=1e-12)
    assert decoded.h == pytest.approx(3.0, rel=1e-15)


def test_central_gradient_of_quadratic_is_exact() -> None:
    gradient = central_gradient(lambda x: float(x @ x), np.array([1.0, -2.0, 0.5]), 1e-4, workers=2)

    np.testing.assert_allclose(gradient, [2.0, -4.0, 1.0], rtol=1e-8)


def test_flat_risk_stops_at_the_start() -> None:
    cube = SpectralCube(np.full((6, 6, 2), 50.0))
    cov = NoiseCovariance.isotropic(2, 4.0)
    init = FilterParams.identity(2, h=10.0, patch_radius=1)

    best, trace = optimize_params(cube, cov, init, OptimizerConfig(iter_max=1), CandidateSets.full(cube.n_pixels))

    assert best is init
    assert len(trace) == 1
    assert trace.stop_reason == "risk-plateau"


def test_trace_is_monotone_and_feasible(noisy_scene) -> None:
    noisy, cov = noisy_scene
    init = default_init(cov, patch_radius=1)

    best, trace = optimize_params(noisy, cov, init, OptimizerConfig(iter_max=4), CandidateSets.full(noisy.n_pixels))

    risks = trace.risks
    assert all(later <= earlier for earlier, later in zip(risks, risks[1:]))
    assert trace.entries[0].iteration == 0
    assert trace.stop_reason in optimize.STOP_REASONS
    for entry in trace.entries:
        assert entry.h > 0
        assert np.linalg.eigvalsh(np.reshape(entry.phi, (2, 2)))[0] >= -1e-10
    final = sure_risk(noisy, best, CandidateSets.full(noisy.n_pixels), cov).risk
    assert final == pytest.approx(risks[-1], rel=1e-12)


def test_identity_shape_beats_a_grid_search(noisy_scene) -> None:
    noisy, cov = noisy_scene
    candidates = CandidateSets.full(noisy.n_pixels)
    base = FilterParams.identity(2, h=1.0, patch_radius=1)
    sigma = 10.0
    grid = np.geomspace(sigma / 4, 8 * sigma, 10)
    grid_risks = [sure_risk(noisy, base.with_h(h), candidates, cov).risk for h in grid]
    start = base.with_h(9 * sigma)

    best, trace = optimize_params(noisy, cov, start, OptimizerConfig(iter_max=6), candidates)

    assert trace.risks[-1] <= min(grid_risks) + 1e-6
    assert all(later <= earlier for earlier, later in zip(trace.risks, trace.risks[1:]))
    np.testing.assert_array_equal(best.phi, np.eye(2))


def test_identity_shape_is_invariant_to_metric_scale(noisy_scene) -> None:
    noisy, cov = noisy_scene
    candidates = CandidateSets.full(noisy.n_pixels)
    config = OptimizerConfig(iter_max=8, xi=0.0)

    _, plain = optimize_params(noisy, cov, FilterParams.identity(2, h=30.0, patch_radius=1), config, candidates)
    scaled_init = FilterParams(h=15.0, phi=4.0 * np.eye(2), patch_radius=1, metric_shape="identity")
    _, scaled = optimize_params(noisy, cov, scaled_init, config, candidates)

    assert scaled.risks[0] == pytest.approx(plain.risks[0], rel=1e-10)
    assert scaled.risks[-1] == pytest.approx(plain.risks[-1], rel=1e-5)


def test_line_search_failure_keeps_best_parameters(noisy_scene, caplog) -> None:
    class Stuck:
        def step(self, objective, theta, value, gradient):
            return None

        def update(self, step, gradient_change):
            raise AssertionError("update must not run without an accepted step")

    noisy, cov = noisy_scene
    init = FilterParams.identity(2, h=40.0, patch_radius=1)

    with caplog.at_level(logging.WARNING, logger="ovnlm.optimize"):
        best, trace = optimize_params(
            noisy, cov, init, OptimizerConfig(iter_max=3), CandidateSets.full(noisy.n_pixels), stepper=Stuck()
        )

    assert best is init
    assert trace.stop_reason == "line-search-failure"
    assert "Line search" in caplog.text


def test_non_finite_initial_risk_is_an_error(noisy_scene, monkeypatch) -> None:
    noisy, cov = noisy_scene
    broken = RiskReport(data_term=math.nan, trace_term=0.0, divergence_term=0.0, risk=math.nan)
    monkeypatch.setattr(optimize, "sure_risk", lambda *args, **kwargs: broken)

    with pytest.raises(OptimizationError):
        optimize_params(noisy, cov, FilterParams.identity(2, h=10.0, patch_radius=1), OptimizerConfig(iter_max=2))


def test_gradient_workers_do_not_change_the_result(noisy_scene) -> None:
    noisy, cov = noisy_scene
    candidates = CandidateSets.full(noisy.n_pixels)
    init = default_init(cov, patch_radius=1, metric_shape="diagonal")

    _, serial = optimize_params(noisy, cov, init, OptimizerConfig(iter_max=2), candidates)
    _, threaded = optimize_params(noisy, cov, init, OptimizerConfig(iter_max=2, gradient_workers=3), candidates)

    assert serial.risks == threaded.risks


def test_optimizer_config_validation() -> None:
    with pytest.raises(ValueError):
        OptimizerConfig(iter_max=0)
    with pytest.raises(ValueError):
        OptimizerConfig(xi=-1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(metric_shape="sparse")


def test_identity_override_uses_a_scalar_metric(noisy_scene) -> None:
    noisy, cov = noisy_scene
    init = FilterParams(h=30.0, phi=np.diag([0.5, 1.5]), patch_radius=1, metric_shape="diagonal")

    best, trace = optimize_params(
        noisy, cov, init, OptimizerConfig(iter_max=2, metric_shape="identity"), CandidateSets.full(noisy.n_pixels)
    )

    np.testing.assert_allclose(best.phi, np.eye(2))
    assert best.metric_shape == "identity"
    assert all(entry.phi == [1.0, 0.0, 0.0, 1.0] for entry in trace.entries)
