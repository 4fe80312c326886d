"""Batched execution of lowered circuits.

:func:`run_statevector` evaluates a block for a batch of encoder inputs and,
on request, its Jacobians with respect to trainable parameters and encoder
inputs by the two-term parameter-shift rule.  All shifted copies of the
circuit are stacked into one array of rows so a whole step costs a few
vectorized passes over the gate list.

:func:`run_density` is the exact-noise path: Pauli (or arbitrary Kraus)
channels interleaved with the gates, evaluated on density matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .circuit import _ROTATIONS, Prim
from .qcore import (
    apply_kraus_rho_rows,
    apply_unitary_rho_rows,
    apply_unitary_rows,
    expectation_z_rho_rows,
    expectation_z_rows,
    gate_unitary,
)

SHIFT = math.pi / 2

# cap on (rows x 2**n) complex entries held at once
_MAX_ENTRIES = 1 << 21


@dataclass
class BlockResult:
    outcomes: np.ndarray  # (B, n) expectation values after readout
    jac_params: np.ndarray | None = None  # (B, n, P)
    jac_inputs: np.ndarray | None = None  # (B, n, n_inputs)


@lru_cache(maxsize=None)
def _pauli_action(word: str, qubits: tuple[int, ...], n: int) -> tuple[tuple[int, ...], np.ndarray]:
    """(flip_axes, phase) with (P psi)[i] = phase[i] * psi[i ^ mask].

    ``flip_axes`` are the tensor axes (qubit q is axis n - q) reversed by the
    X and Y letters, so the permutation is a cheap ``np.flip``.
    """
    idx = np.arange(2**n)
    flips = []
    phase = np.ones(2**n, dtype=complex)
    for letter, q in zip(word, qubits):
        bit = (idx >> q) & 1
        if letter in "XY":
            flips.append(n - q)
        if letter == "Y":
            phase *= np.where(bit == 1, 1j, -1j)
        elif letter == "Z":
            phase *= np.where(bit == 1, -1.0, 1.0)
    return tuple(flips), phase


def _rotate_rows(states: np.ndarray, kind: str, qubits: tuple[int, ...], n: int, ang: np.ndarray) -> np.ndarray:
    """exp(-i a/2 P) applied row-wise, P the generator of ``kind``."""
    flips, phase = _pauli_action(_ROTATIONS[kind], qubits, n)
    c = np.cos(ang / 2)[:, None]
    s = np.sin(ang / 2)[:, None]
    if not flips:  # diagonal generator
        return states * (c - 1j * s * phase)
    moved = np.flip(states.reshape((states.shape[0],) + (2,) * n), flips).reshape(states.shape)
    return c * states - 1j * s * (phase * moved)


def _occurrences(prims: Sequence[Prim], want_inputs: bool) -> list[int]:
    occ = []
    for k, p in enumerate(prims):
        if p.angle is None:
            continue
        if want_inputs or any(key[0] == "p" for key, _ in p.angle.terms):
            occ.append(k)
    return occ


def _simulate(prims: Sequence[Prim], n: int, theta: np.ndarray, inputs: np.ndarray,
              shifts: dict[int, np.ndarray], n_copies: int) -> np.ndarray:
    """Expectations for ``n_copies`` stacked copies of the batch.

    ``shifts[k]`` is an (n_copies,) vector of angle offsets for prim ``k``.
    Returns (n_copies * B, n).
    """
    B = inputs.shape[0]
    R = n_copies * B
    states = np.zeros((R, 2**n), dtype=complex)
    states[:, 0] = 1.0
    for k, p in enumerate(prims):
        if p.matrix is not None:
            states = apply_unitary_rows(states, p.matrix, p.qubits, n)
            continue
        base = p.angle.evaluate(theta, inputs)
        base = np.broadcast_to(np.asarray(base, dtype=float), (B,))
        ang = np.tile(base, n_copies)
        if k in shifts:
            ang = ang + np.repeat(shifts[k], B)
        states = _rotate_rows(states, p.kind, p.qubits, n, ang)
    return expectation_z_rows(states, n)


def _measure(e: np.ndarray, readout: tuple[np.ndarray, np.ndarray] | None,
             shots: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if readout is not None:
        slope, intercept = readout
        e = e * slope + intercept
    if shots:
        p0 = np.clip((1 + e) / 2, 0.0, 1.0)
        e = 2.0 * rng.binomial(shots, p0) / shots - 1.0
    return e


def run_statevector(prims: Sequence[Prim], n: int, n_params: int, theta: np.ndarray,
                    inputs: np.ndarray, *, jac: bool = False, input_jac: bool = False,
                    readout: tuple[np.ndarray, np.ndarray] | None = None,
                    shots: int | None = None, rng: np.random.Generator | None = None) -> BlockResult:
    """Evaluate a block on every input row.

    ``readout`` is the per-qubit affine map (slope, intercept) of the
    confusion matrices; with ``shots`` each expectation (shifted ones
    included) is replaced by a binomial estimate.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    B = inputs.shape[0]
    if shots and rng is None:
        raise ValueError("shot sampling needs a generator")
    occ = _occurrences(prims, input_jac) if (jac or input_jac) else []
    base = _measure(_simulate(prims, n, theta, inputs, {}, 1), readout, shots, rng)
    result = BlockResult(base)
    if not (jac or input_jac):
        return result

    n_inputs = inputs.shape[1]
    jp = np.zeros((B, n, n_params))
    jx = np.zeros((B, n, n_inputs)) if input_jac else None
    per_chunk = max(1, _MAX_ENTRIES // (B * 2**n * 2))
    for start in range(0, len(occ), per_chunk):
        chunk = occ[start:start + per_chunk]
        m = len(chunk)
        shifts = {}
        for j, k in enumerate(chunk):
            v = np.zeros(2 * m)
            v[2 * j] = SHIFT
            v[2 * j + 1] = -SHIFT
            shifts[k] = v
        e = _measure(_simulate(prims, n, theta, inputs, shifts, 2 * m), readout, shots, rng)
        e = e.reshape(2 * m, B, n)
        for j, k in enumerate(chunk):
            d = 0.5 * (e[2 * j] - e[2 * j + 1])
            for (kind, i), c in prims[k].angle.terms:
                if kind == "p":
                    if jac:
                        jp[:, :, i] += c * d
                elif jx is not None:
                    jx[:, :, i] += c * d
    result.jac_params = jp if jac else None
    result.jac_inputs = jx
    return result


# ---------------------------------------------------------------------------
# density-matrix path

@dataclass(frozen=True)
class ChannelOp:
    qubits: tuple[int, ...]
    operators: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class PauliOp:
    """Pauli channel on one qubit: probabilities for X, Y, Z."""

    qubit: int
    px: float
    py: float
    pz: float


_PX = np.array([[0, 1], [1, 0]], dtype=complex)
_PY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_PZ = np.array([[1, 0], [0, -1]], dtype=complex)


def run_density(items: Sequence, n: int, theta: np.ndarray, inputs: np.ndarray,
                readout: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Exact noisy expectations (B, n) for a list of Prim / PauliOp / ChannelOp."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    B = inputs.shape[0]
    rhos = np.zeros((B, 2**n, 2**n), dtype=complex)
    rhos[:, 0, 0] = 1.0
    for it in items:
        if isinstance(it, Prim):
            if it.matrix is not None:
                mats = it.matrix
            else:
                ang = np.broadcast_to(np.asarray(it.angle.evaluate(theta, inputs), dtype=float), (B,))
                mats = gate_unitary(it.kind, (ang,))
            rhos = apply_unitary_rho_rows(rhos, mats, it.qubits, n)
        elif isinstance(it, PauliOp):
            p_id = 1.0 - it.px - it.py - it.pz
            out = p_id * rhos
            for p, P in ((it.px, _PX), (it.py, _PY), (it.pz, _PZ)):
                if p:
                    out = out + p * apply_unitary_rho_rows(rhos, P, (it.qubit,), n)
            rhos = out
        elif isinstance(it, ChannelOp):
            rhos = apply_kraus_rho_rows(rhos, it.operators, it.qubits, n)
        else:
            raise TypeError(f"unsupported circuit item {it!r}")
    e = expectation_z_rho_rows(rhos, n)
    return _measure(e, readout, None, None)
