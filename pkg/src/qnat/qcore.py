"""Exact pure- and mixed-state simulation of small qubit registers.

Conventions used everywhere in the package:

* little-endian indexing: qubit 0 is the least significant bit of a
  basis-state index, so ``|q1 q0> = |1 0>`` lives at index 2;
* a k-qubit gate acting on ``qubits=(a, b, ...)`` uses a matrix whose
  first listed qubit is the *most* significant bit of the local index
  (textbook CNOT with control ``a``);
* complex128 throughout.

The public functions work on :class:`StateVector` / :class:`DensityMatrix`
values.  The ``*_rows`` kernels operate on stacks of states (one row per
circuit evaluation) and are what the QNN executor uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "GATE_ARITY",
    "GATE_NPARAMS",
    "GateOp",
    "StateVector",
    "DensityMatrix",
    "KrausChannel",
    "gate_unitary",
    "apply_gate",
    "apply_channel",
    "expectation_z",
    "sample_shots",
    "to_density",
    "zero_state",
    "PAULI",
]

# kind -> number of qubits
GATE_ARITY: dict[str, int] = {
    "X": 1, "Y": 1, "Z": 1, "H": 1, "SX": 1, "S": 1, "T": 1, "ID": 1,
    "SQRT_H": 1, "RX": 1, "RY": 1, "RZ": 1, "U1": 1, "U3": 1,
    "CU3": 2, "CNOT": 2, "CZ": 2, "CRX": 2, "SWAP": 2, "SQRT_SWAP": 2,
    "RZZ": 2, "RXX": 2, "RZX": 2,
}

# kind -> number of angle parameters
GATE_NPARAMS: dict[str, int] = {k: 0 for k in GATE_ARITY}
GATE_NPARAMS.update({"RX": 1, "RY": 1, "RZ": 1, "U1": 1, "CRX": 1,
                     "RZZ": 1, "RXX": 1, "RZX": 1, "U3": 3, "CU3": 3})

_I2 = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
_H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)

PAULI = {"I": _I2, "X": _X, "Y": _Y, "Z": _Z}

_FIXED: dict[str, np.ndarray] = {
    "ID": _I2,
    "X": _X,
    "Y": _Y,
    "Z": _Z,
    "H": _H,
    "SX": 0.5 * np.array([[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]]),
    "S": np.diag([1, 1j]).astype(complex),
    "T": np.diag([1, np.exp(1j * np.pi / 4)]),
    # principal square root of H: eigenvalue +1 -> 1, -1 -> -i
    "SQRT_H": 0.5 * (1 - 1j) * _I2 + 0.5 * (1 + 1j) * _H,
    "CNOT": np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex),
    "CZ": np.diag([1, 1, 1, -1]).astype(complex),
    "SWAP": np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex),
    "SQRT_SWAP": np.array(
        [[1, 0, 0, 0],
         [0, (1 + 1j) / 2, (1 - 1j) / 2, 0],
         [0, (1 - 1j) / 2, (1 + 1j) / 2, 0],
         [0, 0, 0, 1]]),
}


def _assemble(entries: list[list]) -> np.ndarray:
    """Stack a nested list of scalars/arrays into a (..., d, d) array."""
    flat = np.broadcast_arrays(*[np.asarray(e, dtype=complex) for row in entries for e in row])
    d = len(entries)
    out = np.stack(flat, axis=-1)
    return out.reshape(out.shape[:-1] + (d, d))


def _controlled(u: np.ndarray) -> np.ndarray:
    batch = u.shape[:-2]
    out = np.zeros(batch + (4, 4), dtype=complex)
    out[..., 0, 0] = 1
    out[..., 1, 1] = 1
    out[..., 2:, 2:] = u
    return out


def _u3(theta, phi, lam) -> np.ndarray:
    c, s = np.cos(np.asarray(theta) / 2), np.sin(np.asarray(theta) / 2)
    return _assemble([[c, -np.exp(1j * np.asarray(lam)) * s],
                      [np.exp(1j * np.asarray(phi)) * s,
                       np.exp(1j * (np.asarray(phi) + np.asarray(lam))) * c]])


def _pauli_rotation(pauli: np.ndarray, theta) -> np.ndarray:
    """exp(-i theta/2 P) for a Pauli string matrix P (P^2 = I)."""
    t = np.asarray(theta, dtype=float)[..., None, None]
    eye = np.eye(pauli.shape[0], dtype=complex)
    return np.cos(t / 2) * eye - 1j * np.sin(t / 2) * pauli


def gate_unitary(kind: str, params: Sequence = ()) -> np.ndarray:
    """Matrix of a gate.

    ``params`` entries may be scalars or equal-length 1-D arrays; with arrays
    the result is a stack of shape ``(R, d, d)``.
    """
    if kind not in GATE_ARITY:
        raise ValueError(f"unknown gate kind {kind!r}")
    if len(params) != GATE_NPARAMS[kind]:
        raise ValueError(f"{kind} takes {GATE_NPARAMS[kind]} parameters, got {len(params)}")
    if kind in _FIXED:
        return _FIXED[kind].copy()
    if kind == "RX":
        return _pauli_rotation(_X, params[0])
    if kind == "RY":
        return _pauli_rotation(_Y, params[0])
    if kind == "RZ":
        return _pauli_rotation(_Z, params[0])
    if kind == "U1":
        lam = np.asarray(params[0])
        return _assemble([[1.0, 0.0], [0.0, np.exp(1j * lam)]])
    if kind == "U3":
        return _u3(*params)
    if kind == "CU3":
        return _controlled(_u3(*params))
    if kind == "CRX":
        return _controlled(_pauli_rotation(_X, params[0]))
    if kind == "RZZ":
        return _pauli_rotation(np.kron(_Z, _Z), params[0])
    if kind == "RXX":
        return _pauli_rotation(np.kron(_X, _X), params[0])
    if kind == "RZX":
        return _pauli_rotation(np.kron(_Z, _X), params[0])
    raise AssertionError(kind)  # pragma: no cover


@dataclass(frozen=True)
class GateOp:
    kind: str
    qubits: tuple[int, ...]
    params: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in GATE_ARITY:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        object.__setattr__(self, "params", tuple(self.params))
        if len(self.qubits) != GATE_ARITY[self.kind]:
            raise ValueError(f"{self.kind} acts on {GATE_ARITY[self.kind]} qubit(s), got {self.qubits}")
        if len(set(self.qubits)) != len(self.qubits):
            raise ValueError(f"duplicate qubit indices in {self.qubits}")
        if len(self.params) != GATE_NPARAMS[self.kind]:
            raise ValueError(f"{self.kind} takes {GATE_NPARAMS[self.kind]} parameters")

    def unitary(self) -> np.ndarray:
        return gate_unitary(self.kind, self.params)


def _check_qubits(qubits: Sequence[int], n: int) -> None:
    for q in qubits:
        if not 0 <= q < n:
            raise IndexError(f"qubit {q} out of range for {n} qubits")
    if len(set(qubits)) != len(qubits):
        raise ValueError(f"duplicate qubit indices in {tuple(qubits)}")


class StateVector:
    """Normalized pure state of ``n_qubits`` qubits."""

    __slots__ = ("n_qubits", "amplitudes")

    def __init__(self, amplitudes, n_qubits: int | None = None, atol: float = 1e-10):
        amps = np.array(amplitudes, dtype=complex).ravel()
        n = int(round(np.log2(amps.size))) if n_qubits is None else n_qubits
        if amps.size != 2**n:
            raise ValueError(f"expected {2**n} amplitudes, got {amps.size}")
        norm = np.vdot(amps, amps).real
        if abs(norm - 1) > atol:
            raise ValueError(f"state not normalized (norm^2={norm})")
        amps.flags.writeable = False
        self.n_qubits = n
        self.amplitudes = amps

    @classmethod
    def basis(cls, index: int, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=complex)
        amps[index] = 1
        return cls(amps, n_qubits)

    def __repr__(self):
        return f"StateVector(n_qubits={self.n_qubits})"


class DensityMatrix:
    """Mixed state: Hermitian, unit trace, positive semidefinite."""

    __slots__ = ("n_qubits", "entries")

    def __init__(self, entries, n_qubits: int | None = None, atol: float = 1e-10, check_psd: bool = True):
        rho = np.array(entries, dtype=complex)
        d = rho.shape[0]
        if rho.shape != (d, d):
            raise ValueError("density matrix must be square")
        n = int(round(np.log2(d))) if n_qubits is None else n_qubits
        if d != 2**n:
            raise ValueError(f"expected dimension {2**n}, got {d}")
        if not np.allclose(rho, rho.conj().T, atol=atol, rtol=0):
            raise ValueError("density matrix not Hermitian")
        if abs(np.trace(rho) - 1) > atol:
            raise ValueError(f"trace {np.trace(rho).real} != 1")
        if check_psd and np.linalg.eigvalsh(rho).min() < -1e-9:
            raise ValueError("density matrix has negative eigenvalues")
        rho.flags.writeable = False
        self.n_qubits = n
        self.entries = rho

    def purity(self) -> float:
        return float(np.real(np.trace(self.entries @ self.entries)))

    def __repr__(self):
        return f"DensityMatrix(n_qubits={self.n_qubits})"


class KrausChannel:
    """CPTP map given by Kraus operators with sum O^dag O = I."""

    __slots__ = ("n_qubits", "operators")

    def __init__(self, operators: Sequence[np.ndarray], atol: float = 1e-10):
        ops = tuple(np.array(o, dtype=complex) for o in operators)
        if not ops:
            raise ValueError("channel needs at least one Kraus operator")
        d = ops[0].shape[0]
        if any(o.shape != (d, d) for o in ops):
            raise ValueError("Kraus operators must be square and equally sized")
        n = int(round(np.log2(d)))
        if 2**n != d:
            raise ValueError("Kraus dimension must be a power of two")
        total = sum(o.conj().T @ o for o in ops)
        if not np.allclose(total, np.eye(d), atol=atol, rtol=0):
            raise ValueError("Kraus operators violate completeness")
        self.n_qubits = n
        self.operators = ops

    def is_unital(self, atol: float = 1e-10) -> bool:
        total = sum(o @ o.conj().T for o in self.operators)
        return bool(np.allclose(total, np.eye(total.shape[0]), atol=atol, rtol=0))

    @classmethod
    def identity(cls, n_qubits: int = 1) -> "KrausChannel":
        return cls([np.eye(2**n_qubits)])

    @classmethod
    def depolarizing(cls, p: float) -> "KrausChannel":
        """rho -> (1-p) rho + p I/2."""
        if not 0 <= p <= 1:
            raise ValueError("p must be in [0, 1]")
        return cls([np.sqrt(1 - 3 * p / 4) * _I2, np.sqrt(p / 4) * _X,
                    np.sqrt(p / 4) * _Y, np.sqrt(p / 4) * _Z])

    @classmethod
    def bit_flip(cls, p: float) -> "KrausChannel":
        if not 0 <= p <= 1:
            raise ValueError("p must be in [0, 1]")
        return cls([np.sqrt(1 - p) * _I2, np.sqrt(p) * _X])

    @classmethod
    def amplitude_damping(cls, gamma: float) -> "KrausChannel":
        if not 0 <= gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        return cls([np.array([[1, 0], [0, np.sqrt(1 - gamma)]]),
                    np.array([[0, np.sqrt(gamma)], [0, 0]])])

    def __repr__(self):
        return f"KrausChannel(n_qubits={self.n_qubits}, rank={len(self.operators)})"


# ---------------------------------------------------------------------------
# batched kernels

def _apply_on_axes(t: np.ndarray, mats: np.ndarray, axes: list[int]) -> np.ndarray:
    """Contract ``mats`` (d,d) or (R,d,d) into tensor axes ``axes`` of t (R, 2, 2, ...)."""
    k = len(axes)
    front = list(range(1, k + 1))
    t = np.moveaxis(t, axes, front)
    shape = t.shape
    t = t.reshape(shape[0], 2**k, -1)
    t = np.matmul(mats, t)
    return np.moveaxis(t.reshape(shape), front, axes)


def apply_unitary_rows(states: np.ndarray, mats: np.ndarray, qubits: Sequence[int], n: int) -> np.ndarray:
    """Apply one gate to every row of ``states`` (R, 2**n)."""
    R = states.shape[0]
    t = states.reshape((R,) + (2,) * n)
    axes = [1 + (n - 1 - q) for q in qubits]
    return _apply_on_axes(t, mats, axes).reshape(R, 2**n)


def apply_unitary_rho_rows(rhos: np.ndarray, mats: np.ndarray, qubits: Sequence[int], n: int) -> np.ndarray:
    """rho -> U rho U^dag on every matrix of ``rhos`` (R, 2**n, 2**n)."""
    return _sandwich(rhos, mats, np.conj(mats), qubits, n)


def _sandwich(rhos, left, right_conj, qubits, n):
    R = rhos.shape[0]
    t = rhos.reshape((R,) + (2,) * (2 * n))
    row_axes = [1 + (n - 1 - q) for q in qubits]
    col_axes = [1 + n + (n - 1 - q) for q in qubits]
    t = _apply_on_axes(t, left, row_axes)
    t = _apply_on_axes(t, right_conj, col_axes)
    return t.reshape(R, 2**n, 2**n)


def apply_kraus_rho_rows(rhos: np.ndarray, operators: Sequence[np.ndarray], qubits: Sequence[int], n: int) -> np.ndarray:
    out = np.zeros_like(rhos)
    for op in operators:
        out += _sandwich(rhos, op, np.conj(op), qubits, n)
    return out


def z_signs(n: int) -> np.ndarray:
    """(2**n, n) matrix of +/-1 Z eigenvalues per basis index and qubit."""
    idx = np.arange(2**n)[:, None]
    bits = (idx >> np.arange(n)[None, :]) & 1
    return 1.0 - 2.0 * bits


def expectation_z_rows(states: np.ndarray, n: int) -> np.ndarray:
    """(R, n) Pauli-Z expectations of state rows."""
    probs = states.real**2 + states.imag**2
    return probs @ z_signs(n)


def expectation_z_rho_rows(rhos: np.ndarray, n: int) -> np.ndarray:
    diag = np.real(np.diagonal(rhos, axis1=1, axis2=2))
    return diag @ z_signs(n)


# ---------------------------------------------------------------------------
# single-state API

def zero_state(n_qubits: int) -> StateVector:
    return StateVector.basis(0, n_qubits)


def apply_gate(state: StateVector, gate: GateOp) -> StateVector:
    _check_qubits(gate.qubits, state.n_qubits)
    out = apply_unitary_rows(state.amplitudes[None, :], gate.unitary(), gate.qubits, state.n_qubits)
    return StateVector(out[0], state.n_qubits)


def apply_channel(rho: DensityMatrix, channel: KrausChannel, qubits: Sequence[int]) -> DensityMatrix:
    qubits = tuple(qubits)
    if len(qubits) != channel.n_qubits:
        raise ValueError(f"channel acts on {channel.n_qubits} qubit(s), got {qubits}")
    _check_qubits(qubits, rho.n_qubits)
    out = apply_kraus_rho_rows(rho.entries[None], channel.operators, qubits, rho.n_qubits)[0]
    out = 0.5 * (out + out.conj().T)
    return DensityMatrix(out, rho.n_qubits, check_psd=False)


def expectation_z(state: StateVector | DensityMatrix, qubit: int) -> float:
    n = state.n_qubits
    if not 0 <= qubit < n:
        raise IndexError(f"qubit {qubit} out of range for {n} qubits")
    if isinstance(state, DensityMatrix):
        return float(expectation_z_rho_rows(state.entries[None], n)[0, qubit])
    return float(expectation_z_rows(state.amplitudes[None], n)[0, qubit])


def sample_shots(state: StateVector, qubit: int, shots: int, rng: np.random.Generator) -> float:
    """Empirical mean of ``shots`` +/-1 outcomes of a Z measurement."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    e = expectation_z(state, qubit)
    p0 = min(max((1 + e) / 2, 0.0), 1.0)
    n0 = rng.binomial(shots, p0)
    return (2 * n0 - shots) / shots


def to_density(state: StateVector) -> DensityMatrix:
    a = state.amplitudes
    return DensityMatrix(np.outer(a, a.conj()), state.n_qubits, check_psd=False)
