"""Linear effect of a single-qubit channel on a Z expectation.

For a channel with Kraus operators O_k, write Omega = sum_k O_k^dag Z O_k.
Expanding the input state in the Pauli basis gives, exactly,

    tr(Z E(rho)) = gamma * tr(Z rho) + beta_rho

with gamma = tr(Z Omega) / 2 and
beta_rho = tr(X Omega) tr(X rho) / 2 + tr(Y Omega) tr(Y rho) / 2 + tr(Omega) / 2.
The last term vanishes for unital channels (every Pauli channel) and is
the whole of beta for amplitude damping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import qnn
from .errors import ConfigError
from .qcore import PAULI, DensityMatrix, KrausChannel

__all__ = [
    "NoiseLinearMap",
    "omega",
    "gamma_of",
    "beta_of",
    "linear_map",
    "verify_linear_map",
    "random_channel",
    "random_density",
    "verify_random",
    "ModelNoiseFit",
    "characterize_model_noise",
]

_X, _Y, _Z = PAULI["X"], PAULI["Y"], PAULI["Z"]


def _single(channel: KrausChannel) -> None:
    if channel.n_qubits != 1:
        raise ValueError(f"expected a single-qubit channel, got {channel.n_qubits} qubits")


def _rho(rho) -> np.ndarray:
    return rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)


def omega(channel: KrausChannel) -> np.ndarray:
    _single(channel)
    om = sum(o.conj().T @ _Z @ o for o in channel.operators)
    return 0.5 * (om + om.conj().T)


def gamma_of(channel: KrausChannel) -> float:
    return float(0.5 * np.trace(_Z @ omega(channel)).real)


def beta_of(channel: KrausChannel, rho) -> float:
    om = omega(channel)
    r = _rho(rho)
    val = (0.5 * np.trace(_X @ om) * np.trace(_X @ r)
           + 0.5 * np.trace(_Y @ om) * np.trace(_Y @ r)
           + 0.5 * np.trace(om))
    return float(val.real)


@dataclass(frozen=True)
class NoiseLinearMap:
    """gamma plus the state-dependent beta coefficients of one channel."""

    gamma: float
    offset: float  # tr(Omega) / 2, nonzero only for non-unital channels
    beta_x: float  # tr(X Omega) / 2, multiplies tr(X rho)
    beta_y: float  # tr(Y Omega) / 2, multiplies tr(Y rho)
    unital: bool

    def beta(self, rho) -> float:
        r = _rho(rho)
        return float((self.beta_x * np.trace(_X @ r) + self.beta_y * np.trace(_Y @ r)).real + self.offset)

    def apply(self, e_z: float, rho) -> float:
        return self.gamma * e_z + self.beta(rho)


def linear_map(channel: KrausChannel) -> NoiseLinearMap:
    om = omega(channel)
    return NoiseLinearMap(
        gamma=gamma_of(channel),
        offset=float(0.5 * np.trace(om).real),
        beta_x=float(0.5 * np.trace(_X @ om).real),
        beta_y=float(0.5 * np.trace(_Y @ om).real),
        unital=channel.is_unital(),
    )


def verify_linear_map(channel: KrausChannel, rho) -> float:
    """|tr(Z E(rho)) - (gamma tr(Z rho) + beta_rho)| by direct evolution."""
    _single(channel)
    r = _rho(rho)
    out = sum(o @ r @ o.conj().T for o in channel.operators)
    noisy = np.trace(_Z @ out).real
    clean = np.trace(_Z @ r).real
    return float(abs(noisy - (gamma_of(channel) * clean + beta_of(channel, r))))


def random_channel(rng: np.random.Generator, n_ops: int | None = None) -> KrausChannel:
    """K random complex 2x2 matrices made complete by M_k -> M_k S^(-1/2)."""
    k = int(rng.integers(1, 5)) if n_ops is None else n_ops
    mats = rng.normal(size=(k, 2, 2)) + 1j * rng.normal(size=(k, 2, 2))
    s = sum(m.conj().T @ m for m in mats)
    w, v = np.linalg.eigh(s)
    inv_sqrt = v @ np.diag(w**-0.5) @ v.conj().T
    return KrausChannel([m @ inv_sqrt for m in mats])


def random_density(rng: np.random.Generator, dim: int = 2, rank: int | None = None) -> np.ndarray:
    """Normalized Wishart matrix G G^dag / tr."""
    r = dim if rank is None else rank
    g = rng.normal(size=(dim, r)) + 1j * rng.normal(size=(dim, r))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


@dataclass(frozen=True)
class TrialResult:
    residual: float
    gamma: float
    beta: float
    n_ops: int
    unital: bool


def verify_random(trials: int, seed: int) -> list[TrialResult]:
    """Residuals over ``trials`` random (channel, state) pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        ch = random_channel(rng)
        rho = random_density(rng)
        out.append(TrialResult(verify_linear_map(ch, rho), gamma_of(ch), beta_of(ch, rho),
                               len(ch.operators), ch.is_unital()))
    return out


# ---------------------------------------------------------------------------
# empirical fit on a whole model

@dataclass(frozen=True)
class ModelNoiseFit:
    """Per block and qubit: noisy = gamma * clean + beta_i."""

    gamma: list[np.ndarray]  # per block, (n_qubits,)
    beta: list[np.ndarray]  # per block, (batch, n_qubits): f(y_i) - gamma y_i
    beta_mean: list[np.ndarray]
    beta_var: list[np.ndarray]
    residual: list[np.ndarray]  # RMS residual of the straight-line fit


def _fit(clean: np.ndarray, noisy: np.ndarray):
    gam, b, resid = [], [], []
    for j in range(clean.shape[1]):
        a = np.stack([clean[:, j], np.ones(clean.shape[0])], axis=1)
        (g, c), *_ = np.linalg.lstsq(a, noisy[:, j], rcond=None)
        gam.append(g)
        b.append(noisy[:, j] - g * clean[:, j])
        resid.append(np.sqrt(np.mean((noisy[:, j] - g * clean[:, j] - c) ** 2)))
    return np.array(gam), np.stack(b, axis=1), np.array(resid)


def characterize_model_noise(model: "qnn.ModelSpec", params, inputs,
                             noise: "qnn.NoiseModel | KrausChannel",
                             post: "qnn.PostprocConfig | None" = None) -> ModelNoiseFit:
    """Fit the linear map between clean and noisy outcomes of each block.

    Every block sees the same clean inputs in both runs, so the fit isolates
    that block's noise.  ``noise`` is either a noise model (errors on every
    gate, readout included) or a single-qubit channel applied to each qubit
    after the block's last gate.
    """
    n = model.n_qubits
    if n > qnn.oracle_qubit_cap():
        raise ConfigError(f"{n} qubits exceeds the density-matrix cap {qnn.oracle_qubit_cap()}",
                          "QNAT_ORACLE_QUBIT_CAP")
    from .execute import ChannelOp, run_density, run_statevector

    theta = np.asarray(params, dtype=float)
    clean_fw = qnn.forward(model, theta, inputs, post=post)
    block_inputs = [np.asarray(inputs, dtype=float)] + clean_fw.next_inputs
    fit = ModelNoiseFit([], [], [], [], [])
    for k in range(len(model.blocks)):
        x = block_inputs[k]
        clean = run_statevector(model.prims(k), n, model.n_params, theta, x).outcomes
        if isinstance(noise, KrausChannel):
            _single(noise)
            items = list(model.prims(k)) + [ChannelOp((q,), noise.operators) for q in range(n)]
            noisy = run_density(items, n, theta, x)
        else:
            cfg = qnn.NoiseConfig(noise, 1.0, exact=True)
            noisy = qnn._exact_block(model, k, theta, x, cfg, None)
        g, b, r = _fit(clean, noisy)
        fit.gamma.append(g)
        fit.beta.append(b)
        fit.beta_mean.append(b.mean(axis=0))
        fit.beta_var.append(b.var(axis=0))
        fit.residual.append(r)
    return fit
