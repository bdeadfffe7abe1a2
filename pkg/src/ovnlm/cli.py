"""Command-line interface: noise injection, denoising, scoring and benchmarks."""

from __future__ import annotations

import argparse
from collections.abc import Sequence
import csv
import logging
from pathlib import Path
import sys

import numpy as np

from ovnlm.config import get_settings
from ovnlm.csv_io import (
    format_cell,
    model_table,
    quality_report_table,
    render_csv,
    risk_report_table,
    trace_table,
    write_csv,
)
from ovnlm.cube_io import (
    CubeIOError,
    SpectralCube,
    export_band_stack,
    import_band_stack,
    read_cube,
    write_cube,
)
from ovnlm.eval import bench
from ovnlm.metrics import psnr, quality_report
from ovnlm.noise_model import (
    CovarianceError,
    NoiseCovariance,
    add_gaussian_noise,
    estimate_noise_covariance_mad,
    read_covariance_csv,
    sigma_for_target_psnr,
    write_covariance_csv,
)
from ovnlm.optimize import OptimizerConfig, default_init, optimize_params
from ovnlm.similarity import CandidateSets, SimilarityConfig, build_candidate_sets
from ovnlm.sure import evaluate_risk
from ovnlm.synthetic import piecewise_constant_cube
from ovnlm.vnlm import METRIC_SHAPES, FilterParams

logger = logging.getLogger(__name__)


class UsageError(ValueError):
    pass


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=None, help="Worker threads (0 = all cores; default OVNLM_THREADS).")
    common.add_argument("--log-level", default=None, help="Logging level (default OVNLM_LOG_LEVEL).")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="ovnlm", description="Optimized vector non-local means denoiser for multispectral cubes")
    commands = parser.add_subparsers(dest="command", required=True)

    add_noise = commands.add_parser("add-noise", parents=[common], help="Contaminate a clean cube with Gaussian noise.")
    add_noise.add_argument("--in", dest="input", required=True, help="Clean MSC1 cube.")
    add_noise.add_argument("--out", required=True, help="Noisy MSC1 cube to write.")
    add_noise.add_argument("--seed", type=int, default=0, help="Noise seed.")
    level = add_noise.add_mutually_exclusive_group(required=True)
    level.add_argument("--sigma", type=float, help="i.i.d. noise standard deviation.")
    level.add_argument("--target-psnr", type=float, help="Expected input PSNR in dB.")
    level.add_argument("--cov", help="CSV file with the P x P noise covariance.")

    denoise = commands.add_parser("denoise", parents=[common], help="Denoise a noisy cube.")
    denoise.add_argument("--in", dest="input", required=True, help="Noisy MSC1 cube.")
    denoise.add_argument("--out", required=True, help="Denoised MSC1 cube to write.")
    denoise.add_argument("--patch-radius", type=int, default=None, help="Patch radius r (default OVNLM_PATCH_RADIUS).")
    denoise.add_argument("--varsigma", type=float, default=None, help="Preselection cutoff (default OVNLM_VARSIGMA).")
    denoise.add_argument("--no-preselect", action="store_true", help="Use the whole image for every pixel.")
    denoise.add_argument("--optimize", action="store_true", help="Tune (h, Phi) by SURE; the default unless --h is given.")
    denoise.add_argument("--h", type=float, default=None, help="Smoothing parameter (fixed, or the start with --optimize).")
    denoise.add_argument("--phi", default=None, help="'identity' or a CSV file: one row (diagonal) or P rows (full).")
    denoise.add_argument("--metric-shape", choices=METRIC_SHAPES, default=None, help="Shape of Phi to optimize.")
    denoise.add_argument("--iter-max", type=int, default=None, help="Optimizer iterations (default OVNLM_ITER_MAX).")
    denoise.add_argument("--xi", type=float, default=None, help="Stop when the risk decrease is <= xi.")
    denoise.add_argument("--cov", default=None, help="CSV noise covariance.")
    denoise.add_argument("--estimate-cov", action="store_true", help="Estimate the covariance with MAD (the default).")
    denoise.add_argument("--cov-floor", type=float, default=None, help="Raise covariance diagonal entries to at least this value.")
    denoise.add_argument("--ref", default=None, help="Clean cube; prints PSNR and SSIM of the result.")
    denoise.add_argument("--risk-csv", default=None, help="Write the risk report as CSV.")
    denoise.add_argument("--trace-csv", default=None, help="Write the optimization trace as CSV.")
    denoise.add_argument("--quality-csv", default=None, help="Write the quality report as CSV (needs --ref).")
    denoise.add_argument(
        "--candidate-counts", default=None, help="Write per-pixel candidate counts as a one-band MSC1 cube."
    )

    bench_parser = commands.add_parser(
        "bench",
        parents=[common],
        help="Benchmark variants; timing covers the denoise call only (preselection included), not I/O.",
    )
    bench.add_arguments(bench_parser)

    metrics = commands.add_parser("metrics", parents=[common], help="PSNR and SSIM of a test cube.")
    metrics.add_argument("--ref", required=True, help="Reference (clean) cube.")
    metrics.add_argument("--test", required=True, help="Cube to score.")
    metrics.add_argument("--c1", type=float, default=None, help="SSIM constant c1 (default (0.01 D)^2).")
    metrics.add_argument("--c2", type=float, default=None, help="SSIM constant c2 (default (0.03 D)^2).")
    metrics.add_argument("--out", default=None, help="Also write the report as CSV.")

    estimate = commands.add_parser("estimate-noise", parents=[common], help="MAD estimate of the noise covariance.")
    estimate.add_argument("--in", dest="input", required=True, help="Noisy MSC1 cube.")
    estimate.add_argument("--out", required=True, help="Covariance CSV to write.")
    estimate.add_argument("--strict", action="store_true", help="Fail on zero-MAD bands instead of zero-filling.")
    estimate.add_argument("--diagonal-only", action="store_true", help="Estimate per-band variances only.")

    convert = commands.add_parser("convert", parents=[common], help="PGM band stack <-> MSC1 cube.")
    convert.add_argument("--in", dest="input", nargs="+", required=True, help="PGM files (band order) or one MSC1 cube.")
    convert.add_argument("--out", default=None, help="MSC1 cube to write from PGM input.")
    convert.add_argument("--out-dir", default=None, help="Directory for PGM bands from a cube.")
    convert.add_argument("--stem", default="band", help="File name stem for exported bands.")

    synth = commands.add_parser("synth", parents=[common], help="Write a synthetic piecewise-constant cube.")
    synth.add_argument("--out", required=True, help="MSC1 cube to write.")
    synth.add_argument("--height", type=int, default=64)
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--bands", type=int, default=4)
    synth.add_argument("--regions", type=int, default=6)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--peak", type=float, default=255.0)
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _read_phi(path: str, bands: int) -> tuple[np.ndarray, str]:
    target = Path(path)
    try:
        with target.open(newline="", encoding="utf-8") as handle:
            rows = [row for row in csv.reader(handle) if row and any(cell.strip() for cell in row)]
    except OSError as exc:
        raise CubeIOError(f"Cannot read Phi file {target}: {exc}") from exc
    try:
        values = np.array([[float(cell) for cell in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{target}: Phi rows must be comma-separated numbers") from exc
    if values.shape == (1, bands):
        return np.diag(values[0]), "diagonal"
    if values.shape == (bands, bands):
        return values, "full"
    raise ValueError(f"{target}: expected 1 row or {bands} rows of {bands} values, got shape {values.shape}")


def _load_covariance(args: argparse.Namespace, noisy: SpectralCube) -> NoiseCovariance:
    if args.cov and args.estimate_cov:
        raise UsageError("--cov and --estimate-cov are mutually exclusive")
    if args.cov:
        cov = read_covariance_csv(args.cov)
    else:
        cov = estimate_noise_covariance_mad(noisy)
        logger.info("Estimated noise covariance trace %.6g", cov.trace)
    if args.cov_floor is not None:
        cov = cov.with_floor(args.cov_floor)
    if cov.bands != noisy.bands:
        raise CovarianceError(f"Covariance has {cov.bands} bands, cube has {noisy.bands}")
    return cov


def cmd_add_noise(args: argparse.Namespace) -> int:
    clean = read_cube(args.input)
    if args.cov:
        cov = read_covariance_csv(args.cov)
    else:
        sigma = args.sigma if args.sigma is not None else sigma_for_target_psnr(clean, args.target_psnr)
        if not sigma >= 0:
            raise UsageError(f"--sigma must be >= 0, got {sigma}")
        cov = NoiseCovariance.isotropic(clean.bands, sigma * sigma)
    noisy = add_gaussian_noise(clean, cov, args.seed, args.workers)
    write_cube(noisy, args.out)
    print(f"input_psnr: {format_cell(psnr(clean, noisy))}")
    return 0


def cmd_denoise(args: argparse.Namespace) -> int:
    settings = get_settings()
    if args.no_preselect and args.varsigma is not None:
        raise UsageError("--no-preselect and --varsigma are mutually exclusive")
    if args.quality_csv and not args.ref:
        raise UsageError("--quality-csv needs --ref")

    noisy = read_cube(args.input)
    cov = _load_covariance(args, noisy)
    radius = settings.patch_radius if args.patch_radius is None else args.patch_radius

    if args.no_preselect:
        candidates = CandidateSets.full(noisy.n_pixels)
    else:
        varsigma = settings.varsigma if args.varsigma is None else args.varsigma
        similarity = SimilarityConfig(varsigma=varsigma).with_x_s0_from(noisy)
        candidates = build_candidate_sets(noisy, cov, similarity, args.workers)
    if args.candidate_counts:
        write_cube(candidates.count_cube(noisy.height, noisy.width), args.candidate_counts)

    start = default_init(cov, radius, args.metric_shape)
    phi, shape = start.phi, start.metric_shape
    if args.phi == "identity":
        phi, shape = np.eye(noisy.bands), "identity"
    elif args.phi is not None:
        phi, shape = _read_phi(args.phi, noisy.bands)
    shape = args.metric_shape or shape
    if shape == "identity" and np.abs(phi - phi[0, 0] * np.eye(noisy.bands)).max() > 1e-12 * abs(phi[0, 0]):
        raise UsageError("--metric-shape identity needs a scalar multiple of the identity as --phi")
    params = FilterParams(
        h=start.h if args.h is None else args.h,
        phi=phi,
        patch_radius=radius,
        metric_shape=shape,
    )

    if args.optimize or args.h is None:
        config = OptimizerConfig(
            iter_max=settings.iter_max if args.iter_max is None else args.iter_max,
            xi=args.xi,
            workers=args.workers,
        )
        params, trace = optimize_params(noisy, cov, params, config, candidates)
        logger.info("Optimization stopped (%s) after %d iterate(s)", trace.stop_reason, len(trace))
        if args.trace_csv:
            write_csv(args.trace_csv, *trace_table(trace))

    report, denoised = evaluate_risk(noisy, params, candidates, cov, args.workers)
    write_cube(denoised, args.out)
    print(f"h: {format_cell(params.h)}")
    print(render_csv(*risk_report_table(report)), end="")
    if args.risk_csv:
        write_csv(args.risk_csv, *risk_report_table(report))

    if args.ref:
        quality = quality_report(read_cube(args.ref), denoised)
        print(render_csv(*quality_report_table(quality)), end="")
        if args.quality_csv:
            write_csv(args.quality_csv, *quality_report_table(quality))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    settings = get_settings()
    try:
        config = bench.BenchConfig(
            target_psnrs=args.target_psnr,
            variants=args.variants,
            varsigma_grid=args.varsigma_grid,
            h_grid=args.h_grid,
            patch_radius=settings.patch_radius if args.patch_radius is None else args.patch_radius,
            nlm_h_rule=args.nlm_h,
            tune=not args.no_tune,
            iter_max=args.iter_max,
            seed=args.seed,
            workers=args.workers,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    clean = read_cube(args.input)
    rows = bench.run_bench(clean, config)
    write_csv(args.out, *model_table(rows))
    print(f"rows: {len(rows)}")

    if args.save_results or args.write_report:
        results_path = bench.write_results(rows, config, args.input)
        print(f"results: {results_path}")
        if args.write_report:
            bench.write_report(rows, Path(args.write_report), results_path, args.input)

    if args.assert_trends:
        violations = bench.check_trends(rows)
        for violation in violations:
            logger.error("Trend violated: %s", violation)
        if violations:
            return 1
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    report = quality_report(read_cube(args.ref), read_cube(args.test), args.c1, args.c2)
    print(render_csv(*quality_report_table(report)), end="")
    if args.out:
        write_csv(args.out, *quality_report_table(report))
    return 0


def cmd_estimate_noise(args: argparse.Namespace) -> int:
    cov = estimate_noise_covariance_mad(read_cube(args.input), strict=args.strict, diagonal_only=args.diagonal_only)
    write_covariance_csv(cov, args.out)
    print(f"trace: {format_cell(cov.trace)}")
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    if bool(args.out) == bool(args.out_dir):
        raise UsageError("convert needs exactly one of --out (PGM -> cube) or --out-dir (cube -> PGM)")
    if args.out_dir:
        if len(args.input) != 1:
            raise UsageError("--out-dir takes exactly one input cube")
        written = export_band_stack(read_cube(args.input[0]), args.out_dir, args.stem)
        print(f"bands: {len(written)}")
        return 0
    cube = import_band_stack(args.input)
    write_cube(cube, args.out)
    print(f"shape: {cube.height}x{cube.width}x{cube.bands}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cube = piecewise_constant_cube(args.height, args.width, args.bands, args.regions, args.seed, args.peak)
    write_cube(cube, args.out)
    return 0


COMMANDS = {
    "add-noise": cmd_add_noise,
    "denoise": cmd_denoise,
    "bench": cmd_bench,
    "metrics": cmd_metrics,
    "estimate-noise": cmd_estimate_noise,
    "convert": cmd_convert,
    "synth": cmd_synth,
}


def configure_logging(level: str | None) -> None:
    name = (level or get_settings().log_level).upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str] | None = None) -> int:
    """Exit status: 0 success, 2 usage error, 1 runtime error."""
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ovnlm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1
