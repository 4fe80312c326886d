"""Error metrics comparing noise-free and noisy outcome matrices.

Matrix norms are Frobenius norms, so that ``mse``, ``snr`` and ``rmd`` all
describe the same entrywise difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SNR_SENTINEL", "ErrorMap", "snr", "rmd", "mse", "error_map", "per_qubit_snr", "accuracy"]

# reported in place of an infinite SNR (identical matrices)
SNR_SENTINEL = 1e18


def _pair(a, a_noisy) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(a_noisy, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def snr(a, a_noisy) -> float:
    """||A||^2 / ||A - A_noisy||^2; SNR_SENTINEL when the difference vanishes."""
    a, b = _pair(a, a_noisy)
    err = float(np.sum((a - b) ** 2))
    if err == 0.0:
        return SNR_SENTINEL
    return float(np.sum(a**2)) / err


def rmd(a, a_noisy) -> float:
    """Relative matrix distance, the reciprocal of :func:`snr`."""
    a, b = _pair(a, a_noisy)
    sig = float(np.sum(a**2))
    err = float(np.sum((a - b) ** 2))
    if sig == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return err / sig


def mse(a, a_noisy) -> float:
    a, b = _pair(a, a_noisy)
    return float(np.mean((a - b) ** 2))


def per_qubit_snr(a, a_noisy) -> np.ndarray:
    """SNR of each column (qubit) across the batch."""
    a, b = _pair(a, a_noisy)
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    return np.array([snr(a[:, j], b[:, j]) for j in range(a.shape[1])])


@dataclass(frozen=True)
class ErrorMap:
    diff: np.ndarray
    mse: float
    snr: float
    rmd: float

    @property
    def snr_infinite(self) -> bool:
        return self.snr == SNR_SENTINEL

    def to_dict(self) -> dict:
        return {"mse": self.mse, "snr": self.snr, "snr_infinite": self.snr_infinite, "rmd": self.rmd}


def error_map(a, a_noisy) -> ErrorMap:
    a, b = _pair(a, a_noisy)
    return ErrorMap(a - b, mse(a, b), snr(a, b), rmd(a, b))


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(p == y))
