"""Benchmark harness: variant, varsigma, noise-level and h sweeps.

For every input noise level the clean cube is contaminated once (shared seed),
then each variant denoises it and is scored and timed. The vector variants
are SURE-tuned from reference_h first unless an h grid is swept. Timing covers
the denoise call only (candidate preselection included for ovnlm); tuning time
is reported in its own column.
"""

from __future__ import annotations

import argparse
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
import json
import logging
import math
from pathlib import Path
import sys
import time
from typing import NamedTuple

from pydantic import BaseModel

from ovnlm.config import get_settings
from ovnlm.cube_io import SpectralCube
from ovnlm.metrics import psnr, ssim_global
from ovnlm.noise_model import NoiseCovariance, add_gaussian_noise, sigma_for_target_psnr
from ovnlm.optimize import OptimizerConfig, optimize_params
from ovnlm.patches import kernel_weights
from ovnlm.similarity import CandidateSets, SimilarityConfig, build_candidate_sets
from ovnlm.sure import sure_risk
from ovnlm.vnlm import FilterParams, bandwise_nlm_denoise, vnlm_denoise

logger = logging.getLogger(__name__)

VARIANTS = ("nlm", "vnlm-full", "ovnlm")
# "rescaled" maps h to the Gaussian-weighted single-band distance; "same" passes it through.
NLM_H_RULES = ("rescaled", "same")
PSNR_SLACK_DB = 0.1
TIME_SLACK = 0.10


class BenchRow(BaseModel):
    variant: str
    varsigma: float | None
    h: float
    input_psnr: float
    output_psnr: float
    ssim_mean: float
    seconds: float
    candidate_mean: float
    risk: float | None = None
    h_init: float | None = None
    tune_seconds: float = 0.0


@dataclass(frozen=True)
class BenchConfig:
    target_psnrs: tuple[float, ...] = (19.0,)
    variants: tuple[str, ...] = VARIANTS
    varsigma_grid: tuple[float, ...] = (100.0,)
    # None means one run at reference_h(sigma, ...) per noise level.
    h_grid: tuple[float, ...] | None = None
    patch_radius: int = field(default_factory=lambda: get_settings().patch_radius)
    nlm_kernel_std: float = 1.0
    nlm_h_rule: str = "rescaled"
    # SURE-tune h for the vector variants, starting from reference_h. Ignored with an h grid.
    tune: bool = True
    iter_max: int = 8
    seed: int = 0
    workers: int | None = None

    def __post_init__(self) -> None:
        if not self.variants:
            raise ValueError("At least one variant is required")
        unknown = [name for name in self.variants if name not in VARIANTS]
        if unknown:
            raise ValueError(f"Unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
        if not self.target_psnrs:
            raise ValueError("At least one target PSNR is required")
        if "ovnlm" in self.variants and not self.varsigma_grid:
            raise ValueError("The ovnlm variant needs a non-empty varsigma grid")
        if self.h_grid is not None and (not self.h_grid or any(not h > 0 for h in self.h_grid)):
            raise ValueError(f"h grid values must be > 0, got {self.h_grid}")
        if self.nlm_h_rule not in NLM_H_RULES:
            raise ValueError(f"Unknown nlm h rule {self.nlm_h_rule!r}; choose from {list(NLM_H_RULES)}")
        if self.iter_max < 1:
            raise ValueError(f"iter_max must be >= 1, got {self.iter_max}")


def reference_h(sigma: float, patch_radius: int, bands: int) -> float:
    """sigma * sqrt(|K| * P): the spread of a pure-noise patch distance, in intensity units."""
    return sigma * math.sqrt((2 * patch_radius + 1) ** 2 * bands)


def nlm_h(h: float, patch_radius: int, bands: int, kernel_std: float) -> float:
    """Rescale a vector-filter h to the Gaussian-weighted single-band distance."""
    mass = float(kernel_weights(patch_radius, "gaussian", kernel_std).sum())
    return h * math.sqrt(mass / ((2 * patch_radius + 1) ** 2 * bands))


class VectorRun(NamedTuple):
    denoised: SpectralCube
    params: FilterParams
    seconds: float
    tune_seconds: float
    candidate_mean: float
    risk: float | None


def _score(
    variant: str,
    varsigma: float | None,
    h_init: float,
    clean: SpectralCube,
    noisy: SpectralCube,
    denoised: SpectralCube,
    seconds: float,
    candidate_mean: float,
    h: float | None = None,
    risk: float | None = None,
    tune_seconds: float = 0.0,
) -> BenchRow:
    _, ssim_mean = ssim_global(clean, denoised)
    return BenchRow(
        variant=variant,
        varsigma=varsigma,
        h=h_init if h is None else h,
        input_psnr=psnr(clean, noisy),
        output_psnr=psnr(clean, denoised),
        ssim_mean=ssim_mean,
        seconds=seconds,
        candidate_mean=candidate_mean,
        risk=risk,
        h_init=h_init,
        tune_seconds=tune_seconds,
    )


def _run_vector(
    noisy: SpectralCube,
    cov: NoiseCovariance,
    params: FilterParams,
    varsigma: float | None,
    config: BenchConfig,
) -> VectorRun:
    """Timed section: candidate preselection plus the denoise call. Tuning and risk are reported apart."""
    start = time.perf_counter()
    if varsigma is None:
        candidates = CandidateSets.full(noisy.n_pixels)
    else:
        cfg = SimilarityConfig(varsigma=varsigma).with_x_s0_from(noisy)
        candidates = build_candidate_sets(noisy, cov, cfg, config.workers)
    seconds = time.perf_counter() - start

    tune_seconds = 0.0
    if config.tune and config.h_grid is None:
        tune_start = time.perf_counter()
        optimizer = OptimizerConfig(iter_max=config.iter_max, workers=config.workers)
        params, trace = optimize_params(noisy, cov, params, optimizer, candidates)
        tune_seconds = time.perf_counter() - tune_start
        logger.info("Tuned h=%.6g (%s) for varsigma=%s", params.h, trace.stop_reason, varsigma)

    start = time.perf_counter()
    denoised = vnlm_denoise(noisy, params, candidates, config.workers)
    seconds += time.perf_counter() - start

    risk = None
    if config.h_grid is not None:
        risk = sure_risk(noisy, params, candidates, cov, config.workers).risk
    return VectorRun(denoised, params, seconds, tune_seconds, candidates.mean_size(), risk)


def run_bench(clean: SpectralCube, config: BenchConfig) -> list[BenchRow]:
    rows: list[BenchRow] = []
    bands = clean.bands
    for target in config.target_psnrs:
        sigma = sigma_for_target_psnr(clean, target)
        cov = NoiseCovariance.isotropic(bands, sigma * sigma)
        noisy = add_gaussian_noise(clean, cov, config.seed, config.workers)
        h_values = config.h_grid or (reference_h(max(sigma, 1e-12), config.patch_radius, bands),)
        logger.info("Bench at target %.2f dB (sigma=%.4g), %d h value(s)", target, sigma, len(h_values))

        for h in h_values:
            params = FilterParams.identity(bands, h, patch_radius=config.patch_radius)
            for variant in config.variants:
                if variant == "nlm":
                    band_h = h
                    if config.nlm_h_rule == "rescaled":
                        band_h = nlm_h(h, config.patch_radius, bands, config.nlm_kernel_std)
                    start = time.perf_counter()
                    denoised = bandwise_nlm_denoise(
                        noisy, band_h, config.nlm_kernel_std, config.patch_radius, config.workers
                    )
                    seconds = time.perf_counter() - start
                    rows.append(
                        _score(variant, None, h, clean, noisy, denoised, seconds, float(clean.n_pixels), h=band_h)
                    )
                    continue
                grid = (None,) if variant == "vnlm-full" else config.varsigma_grid
                for varsigma in grid:
                    run = _run_vector(noisy, cov, params, varsigma, config)
                    rows.append(
                        _score(
                            variant,
                            varsigma,
                            h,
                            clean,
                            noisy,
                            run.denoised,
                            run.seconds,
                            run.candidate_mean,
                            h=run.params.h,
                            risk=run.risk,
                            tune_seconds=run.tune_seconds,
                        )
                    )

    rows.sort(
        key=lambda row: (
            row.variant,
            -math.inf if row.varsigma is None else row.varsigma,
            -row.input_psnr,
            row.h if row.h_init is None else row.h_init,
        )
    )
    return rows


def check_trends(rows: Sequence[BenchRow]) -> list[str]:
    """Nondecreasing candidate size, PSNR (0.1 dB slack) and time (10% slack) in varsigma.

    Rows are compared within one noise level and one starting h.
    """
    groups: dict[tuple[float, float], list[BenchRow]] = {}
    for row in rows:
        if row.variant == "ovnlm":
            groups.setdefault((row.input_psnr, row.h if row.h_init is None else row.h_init), []).append(row)

    violations: list[str] = []
    for (input_psnr, h), group in groups.items():
        group = sorted(group, key=lambda row: row.varsigma or 0.0)
        for previous, current in zip(group, group[1:]):
            label = f"input {input_psnr:.2f} dB, h={h:.4g}, varsigma {previous.varsigma:g}->{current.varsigma:g}"
            if current.candidate_mean < previous.candidate_mean:
                violations.append(f"{label}: candidate mean fell {previous.candidate_mean:.2f}->{current.candidate_mean:.2f}")
            if current.output_psnr < previous.output_psnr - PSNR_SLACK_DB:
                violations.append(f"{label}: output PSNR fell {previous.output_psnr:.3f}->{current.output_psnr:.3f}")
            if current.seconds < previous.seconds * (1.0 - TIME_SLACK):
                violations.append(f"{label}: time fell {previous.seconds:.3f}s->{current.seconds:.3f}s")
    return violations


def write_results(rows: Sequence[BenchRow], config: BenchConfig, source: str) -> Path:
    settings = get_settings()
    output_dir = Path(settings.eval_output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    timestamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    results_path = output_dir / f"{timestamp}_bench.json"
    payload = {
        "run_time_utc": datetime.now(timezone.utc).isoformat(),
        "input": source,
        "config": {
            "target_psnrs": list(config.target_psnrs),
            "variants": list(config.variants),
            "varsigma_grid": list(config.varsigma_grid),
            "h_grid": None if config.h_grid is None else list(config.h_grid),
            "patch_radius": config.patch_radius,
            "nlm_h_rule": config.nlm_h_rule,
            "tune": config.tune,
            "iter_max": config.iter_max,
            "seed": config.seed,
        },
        "rows": [row.model_dump() for row in rows],
    }
    results_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return results_path


def write_report(rows: Sequence[BenchRow], report_path: Path, results_path: Path, source: str) -> None:
    run_time = datetime.now(timezone.utc).isoformat()
    lines = [
        "# Benchmark Report",
        "",
        "## Run Metadata",
        "",
        f"- Run time (UTC): {run_time}",
        f"- Input: `{source}`",
        f"- Results JSON: `{results_path.as_posix()}`",
        "",
        "## Rows",
        "",
        "| Variant | varsigma | h | Input PSNR | Output PSNR | SSIM | Seconds | Tune seconds | Mean candidates |",
        "| --- | --- | --- | --- | --- | --- | --- | --- | --- |",
    ]
    for row in rows:
        varsigma = "-" if row.varsigma is None else f"{row.varsigma:g}"
        lines.append(
            f"| {row.variant} | {varsigma} | {row.h:.4g} | {row.input_psnr:.2f} | {row.output_psnr:.2f} "
            f"| {row.ssim_mean:.4f} | {row.seconds:.3f} | {row.tune_seconds:.3f} | {row.candidate_mean:.1f} |"
        )
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _float_list(text: str) -> tuple[float, ...]:
    items = [item.strip() for item in text.split(",") if item.strip()]
    try:
        return tuple(float(item) for item in items)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _name_list(text: str) -> tuple[str, ...]:
    return tuple(item.strip() for item in text.split(",") if item.strip())


def add_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--in", dest="input", required=True, help="Clean MSC1 cube.")
    parser.add_argument("--target-psnr", type=_float_list, default=(19.0,), help="Input PSNR level(s) in dB, comma list.")
    parser.add_argument("--variants", type=_name_list, default=VARIANTS, help="Comma list of nlm, vnlm-full, ovnlm.")
    parser.add_argument("--varsigma-grid", type=_float_list, default=(100.0,), help="Comma list of varsigma values for ovnlm.")
    parser.add_argument("--h-grid", type=_float_list, default=None, help="Comma list of h values; rows then carry the SURE risk.")
    parser.add_argument("--patch-radius", type=int, default=None, help="Patch radius r (patch is (2r+1)^2).")
    parser.add_argument("--nlm-h", choices=NLM_H_RULES, default="rescaled", help="How the nlm variant maps h to one band.")
    parser.add_argument("--no-tune", action="store_true", help="Skip SURE tuning of h for the vector variants.")
    parser.add_argument("--iter-max", type=int, default=8, help="Optimizer iterations per tuned row.")
    parser.add_argument("--seed", type=int, default=0, help="Noise seed shared by all variants.")
    parser.add_argument("--out", required=True, help="Output CSV of bench rows.")
    parser.add_argument("--assert-trends", action="store_true", help="Exit 1 when ovnlm rows break the varsigma trends.")
    parser.add_argument("--write-report", default=None, help="Also write a markdown report to this path.")
    parser.add_argument(
        "--save-results",
        action="store_true",
        help="Write a JSON snapshot under OVNLM_EVAL_OUTPUT_DIR.",
    )


def main(argv: Sequence[str] | None = None) -> int:
    from ovnlm.cli import run

    return run(["bench", *(sys.argv[1:] if argv is None else argv)])


if __name__ == "__main__":
    raise SystemExit(main())
