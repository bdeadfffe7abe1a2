import json
import math
import time

import pytest

from ovnlm.cli import run
from ovnlm.cube_io import write_cube
from ovnlm.eval import bench
from ovnlm.eval.bench import BenchConfig, BenchRow, check_trends, nlm_h, reference_h, run_bench
from ovnlm.noise_model import NoiseCovariance, add_gaussian_noise, sigma_for_target_psnr
from ovnlm.optimize import OptimizationTrace
from ovnlm.similarity import CandidateSets
from ovnlm.sure import RiskReport, sure_risk
from ovnlm.synthetic import piecewise_constant_cube
from ovnlm.vnlm import FilterParams


def _row(varsigma, psnr_out, seconds, candidates, variant="ovnlm"):
    return BenchRow(
        variant=variant,
        varsigma=varsigma,
        h=10.0,
        input_psnr=19.0,
        output_psnr=psnr_out,
        ssim_mean=0.9,
        seconds=seconds,
        candidate_mean=candidates,
    )


def test_reference_h_and_nlm_rescaling() -> None:
    assert reference_h(2.0, 1, 4) == pytest.approx(2.0 * math.sqrt(36))
    assert nlm_h(6.0, 0, 1, 1.0) == pytest.approx(6.0 * math.sqrt(1.0 / (2 * math.pi)))


def test_bench_config_rejects_unknown_variants() -> None:
    with pytest.raises(ValueError):
        BenchConfig(variants=("nlm", "bm3d"))
    with pytest.raises(ValueError):
        BenchConfig(variants=())


def test_run_bench_rows_are_sorted_and_scored() -> None:
    clean = piecewise_constant_cube(12, 12, 2, regions=3, seed=2)
    config = BenchConfig(target_psnrs=(25.0,), varsigma_grid=(100.0, 2.0), patch_radius=1)

    rows = run_bench(clean, config)

    assert [(row.variant, row.varsigma) for row in rows] == [
        ("nlm", None),
        ("ovnlm", 2.0),
        ("ovnlm", 100.0),
        ("vnlm-full", None),
    ]
    for row in rows:
        assert row.seconds >= 0
        assert 1 <= row.candidate_mean <= clean.n_pixels
        assert row.input_psnr == pytest.approx(25.0, abs=1.0)
        assert row.risk is None
        assert row.tune_seconds >= 0
    assert rows[3].candidate_mean == clean.n_pixels
    assert rows[0].h == pytest.approx(nlm_h(rows[0].h_init, 1, 2, 1.0))
    assert len({row.h_init for row in rows}) == 1


def test_h_grid_rows_carry_the_risk() -> None:
    clean = piecewise_constant_cube(10, 10, 2, regions=3, seed=4)
    config = BenchConfig(target_psnrs=(22.0,), variants=("vnlm-full",), h_grid=(5.0, 50.0, 500.0), patch_radius=1)

    rows = run_bench(clean, config)

    assert [row.h for row in rows] == [5.0, 50.0, 500.0]
    assert all(row.risk is not None and math.isfinite(row.risk) for row in rows)


def test_multiple_noise_levels_share_one_row_each() -> None:
    clean = piecewise_constant_cube(10, 10, 2, regions=3, seed=4)
    config = BenchConfig(target_psnrs=(22.5, 15.0), variants=("vnlm-full",), patch_radius=1)

    rows = run_bench(clean, config)

    assert len(rows) == 2
    assert rows[0].input_psnr > rows[1].input_psnr


def test_check_trends_accepts_small_slack() -> None:
    rows = [_row(2.0, 30.0, 1.0, 10.0), _row(10.0, 29.95, 0.95, 12.0), _row(100.0, 31.0, 2.0, 40.0)]

    assert check_trends(rows) == []


def test_check_trends_reports_each_broken_column() -> None:
    rows = [_row(2.0, 30.0, 1.0, 10.0), _row(10.0, 29.0, 0.5, 9.0)]

    violations = check_trends(rows)

    assert len(violations) == 3
    assert any("candidate mean" in item for item in violations)
    assert any("output PSNR" in item for item in violations)
    assert any("time" in item for item in violations)


def test_bench_command_writes_csv_and_snapshot(tmp_path, capsys) -> None:
    clean = tmp_path / "clean.msc"
    write_cube(piecewise_constant_cube(10, 10, 2, regions=3, seed=1), clean)
    rows_csv = tmp_path / "rows.csv"
    report = tmp_path / "report.md"

    status = run(
        [
            "bench", "--in", str(clean), "--out", str(rows_csv), "--variants", "ovnlm,vnlm-full",
            "--varsigma-grid", "10,100", "--target-psnr", "24", "--patch-radius", "1",
            "--save-results", "--write-report", str(report),
        ]
    )

    assert status == 0
    lines = rows_csv.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "variant,varsigma,h,input_psnr,output_psnr,ssim_mean,seconds,candidate_mean,risk,h_init,tune_seconds"
    assert len(lines) == 4
    snapshots = list((tmp_path / "results").glob("*_bench.json"))
    assert len(snapshots) == 1
    payload = json.loads(snapshots[0].read_text(encoding="utf-8"))
    assert payload["config"]["varsigma_grid"] == [10.0, 100.0]
    assert len(payload["rows"]) == 3
    assert "| ovnlm | 10 |" in report.read_text(encoding="utf-8")
    assert "rows: 3" in capsys.readouterr().out


def test_assert_trends_fails_the_command(tmp_path, monkeypatch) -> None:
    clean = tmp_path / "clean.msc"
    write_cube(piecewise_constant_cube(6, 6, 1, regions=2, seed=1), clean)
    broken = [_row(2.0, 30.0, 1.0, 10.0), _row(10.0, 25.0, 1.0, 10.0)]
    monkeypatch.setattr(bench, "run_bench", lambda cube, config: broken)

    status = run(["bench", "--in", str(clean), "--out", str(tmp_path / "rows.csv"), "--assert-trends"])

    assert status == 1


def test_vector_rows_are_tuned_by_risk() -> None:
    clean = piecewise_constant_cube(10, 10, 2, regions=3, seed=4)
    config = BenchConfig(target_psnrs=(20.0,), variants=("vnlm-full",), patch_radius=1, iter_max=4)

    (row,) = run_bench(clean, config)

    sigma = sigma_for_target_psnr(clean, 20.0)
    cov = NoiseCovariance.isotropic(2, sigma * sigma)
    noisy = add_gaussian_noise(clean, cov, seed=0)
    candidates = CandidateSets.full(clean.n_pixels)
    start_risk = sure_risk(noisy, FilterParams.identity(2, row.h_init, patch_radius=1), candidates, cov).risk
    tuned_risk = sure_risk(noisy, FilterParams.identity(2, row.h, patch_radius=1), candidates, cov).risk
    assert row.h_init == pytest.approx(reference_h(sigma, 1, 2))
    assert tuned_risk <= start_risk


def test_untuned_rows_keep_the_reference_h() -> None:
    clean = piecewise_constant_cube(10, 10, 2, regions=3, seed=4)
    config = BenchConfig(target_psnrs=(20.0,), variants=("vnlm-full", "nlm"), patch_radius=1, tune=False, nlm_h_rule="same")

    rows = run_bench(clean, config)

    assert [row.variant for row in rows] == ["nlm", "vnlm-full"]
    assert all(row.h == row.h_init for row in rows)
    assert all(row.tune_seconds == 0.0 for row in rows)


def test_bench_config_rejects_unknown_nlm_h_rule() -> None:
    with pytest.raises(ValueError):
        BenchConfig(nlm_h_rule="halved")


def test_timing_excludes_tuning(monkeypatch) -> None:
    def slow_tuning(noisy, cov, init, cfg, candidates):
        time.sleep(0.3)
        return init, OptimizationTrace()

    monkeypatch.setattr(bench, "optimize_params", slow_tuning)
    clean = piecewise_constant_cube(6, 6, 1, regions=2, seed=1)

    (row,) = run_bench(clean, BenchConfig(variants=("vnlm-full",), patch_radius=1))

    assert row.tune_seconds >= 0.3
    assert row.seconds < 0.3


def test_timing_excludes_the_risk_of_an_h_sweep(monkeypatch) -> None:
    def slow_risk(noisy, params, candidates, cov, workers=None):
        time.sleep(0.3)
        return RiskReport.from_terms(1.0, 0.0, 0.0)

    monkeypatch.setattr(bench, "sure_risk", slow_risk)
    clean = piecewise_constant_cube(6, 6, 1, regions=2, seed=1)

    (row,) = run_bench(clean, BenchConfig(variants=("vnlm-full",), h_grid=(20.0,), patch_radius=1))

    assert row.risk == 1.0
    assert row.seconds < 0.3
    assert row.tune_seconds == 0.0
