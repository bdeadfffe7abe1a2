"""CLI entrypoint for the OVNLM denoiser."""

from ovnlm.cli import run


if __name__ == "__main__":
    raise SystemExit(run())
