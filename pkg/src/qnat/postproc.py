"""Post-measurement normalization and quantization of outcome batches.

Both act column-wise on an ``(m, n_qubits)`` outcome matrix.  Normalization
uses the statistics of the batch it is given (no running averages, no
affine parameters); quantization clips to ``[p_min, p_max]`` and snaps to
``levels`` equally spaced centroids that include both endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics

__all__ = [
    "EPSILON",
    "NormStats",
    "QuantConfig",
    "normalize_batch",
    "normalize_backward",
    "quantize",
    "quantize_ste_mask",
    "quant_penalty",
    "quant_penalty_grad",
    "denoise_report",
    "DenoiseReport",
]

EPSILON = 1e-8


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = EPSILON


@dataclass(frozen=True)
class QuantConfig:
    levels: int = 5
    p_min: float = -2.0
    p_max: float = 2.0

    def __post_init__(self):
        if int(self.levels) != self.levels or self.levels < 2:
            raise ValueError("levels must be an integer >= 2")
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be below p_max")

    @property
    def step(self) -> float:
        return (self.p_max - self.p_min) / (self.levels - 1)

    def centroids(self) -> np.ndarray:
        return self.p_min + self.step * np.arange(self.levels)


def normalize_batch(a, epsilon: float = EPSILON) -> tuple[np.ndarray, NormStats]:
    """Per column: (y - mean) / sqrt(population variance + epsilon)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected an (m, n_qubits) matrix")
    if a.shape[0] < 2:
        raise ValueError("normalization needs a batch of at least 2 samples")
    mean = a.mean(axis=0)
    std = np.sqrt(a.var(axis=0) + epsilon)
    return (a - mean) / std, NormStats(mean, std, epsilon)


def normalize_backward(grad_out: np.ndarray, normalized: np.ndarray, stats: NormStats) -> np.ndarray:
    """Gradient w.r.t. the raw batch, statistics differentiated as functions of it."""
    g = np.asarray(grad_out, dtype=float)
    return (g - g.mean(axis=0) - normalized * (g * normalized).mean(axis=0)) / stats.std


def quantize(values, cfg: QuantConfig) -> np.ndarray:
    """Clip then snap to the nearest centroid; exact ties go away from zero."""
    v = np.clip(np.asarray(values, dtype=float), cfg.p_min, cfg.p_max)
    step = cfg.step
    k = (v - cfg.p_min) / step
    lo = np.clip(np.floor(k), 0, cfg.levels - 1)
    hi = np.minimum(lo + 1, cfg.levels - 1)
    frac = k - lo
    c_lo = cfg.p_min + lo * step
    c_hi = cfg.p_min + hi * step
    tie_hi = (np.abs(c_hi) > np.abs(c_lo)) | ((np.abs(c_hi) == np.abs(c_lo)) & (c_hi >= 0))
    take_hi = (frac > 0.5) | ((frac == 0.5) & tie_hi)
    return np.where(take_hi, c_hi, c_lo)


def quantize_ste_mask(values, cfg: QuantConfig) -> np.ndarray:
    """Straight-through derivative of :func:`quantize`: 1 inside the clip range."""
    v = np.asarray(values, dtype=float)
    return ((v >= cfg.p_min) & (v <= cfg.p_max)).astype(float)


def quant_penalty(values, cfg: QuantConfig) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.sum((v - quantize(v, cfg)) ** 2))


def quant_penalty_grad(values, cfg: QuantConfig) -> np.ndarray:
    """d/dy of sum (y - Q(y))^2 with Q(y) held fixed."""
    v = np.asarray(values, dtype=float)
    return 2.0 * (v - quantize(v, cfg))


@dataclass(frozen=True)
class DenoiseReport:
    mse_before: float
    mse_after: float
    snr_before: float
    snr_after: float
    before: "metrics.ErrorMap"
    after: "metrics.ErrorMap"


def denoise_report(clean, noisy, cfg: QuantConfig) -> DenoiseReport:
    """Error metrics of (clean, noisy) before and after quantizing both."""
    clean = np.asarray(clean, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {noisy.shape}")
    before = metrics.error_map(clean, noisy)
    after = metrics.error_map(quantize(clean, cfg), quantize(noisy, cfg))
    return DenoiseReport(before.mse, after.mse, before.snr, after.snr, before, after)
