"""Distortion and rate metrics reported by the CLI."""

from __future__ import annotations

import math

import numpy as np

INF_SENTINEL = "inf"


def mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR in dB for images on the [0, 1] scale; ``math.inf`` when identical."""
    err = mse(x, x_hat)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def format_psnr(value: float) -> str:
    return INF_SENTINEL if math.isinf(value) else f"{value:.4f}"


def bpp(stream, height: int, width: int) -> float:
    """8 x container bytes / pixels; ``stream`` is bytes, a Bitstream, or a byte count."""
    n = stream if isinstance(stream, int) else len(stream)
    return 8.0 * n / (height * width)
