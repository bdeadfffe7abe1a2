"""Optimized vector non-local means denoising for multispectral image cubes."""
