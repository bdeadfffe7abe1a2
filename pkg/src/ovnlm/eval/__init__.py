"""Benchmark harness for the OVNLM denoiser."""
