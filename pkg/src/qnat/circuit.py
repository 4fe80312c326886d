"""Parametric gate templates, basis compilation and differentiable lowering.

Gate angles in a template are :class:`Affine` expressions over two kinds of
variables: trainable parameters (``("p", i)``) and encoder inputs
(``("x", j)``).  A template is compiled once and then evaluated for many
rows (samples x shifted copies) at a time.

Two rewrites are provided:

``compile_to_basis``
    hardware basis {X, SX, RZ, CNOT, ID}; every angle lands in an RZ.
``lower``
    smallest rewrite in which every variable-dependent gate is a rotation
    ``exp(-i a/2 P)`` with a Pauli-string generator ``P``, so the two-term
    shift rule is exact per occurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .qcore import GATE_ARITY, GATE_NPARAMS, GateOp, gate_unitary

PI = math.pi


@dataclass(frozen=True)
class Affine:
    """const + sum(coef * var) with var keys like ("p", 3) or ("x", 0)."""

    const: float = 0.0
    terms: tuple[tuple[tuple[str, int], float], ...] = ()

    @staticmethod
    def var(kind: str, index: int, coef: float = 1.0) -> "Affine":
        return Affine(0.0, (((kind, int(index)), float(coef)),))

    def _merge(self, other: "Affine", sign: float) -> "Affine":
        acc: dict = {}
        for key, c in self.terms:
            acc[key] = acc.get(key, 0.0) + c
        for key, c in other.terms:
            acc[key] = acc.get(key, 0.0) + sign * c
        terms = tuple((k, c) for k, c in acc.items() if c != 0.0)
        return Affine(self.const + sign * other.const, terms)

    def __add__(self, other):
        return self._merge(as_affine(other), 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._merge(as_affine(other), -1.0)

    def __rsub__(self, other):
        return as_affine(other)._merge(self, -1.0)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, k):
        k = float(k)
        return Affine(self.const * k, tuple((key, c * k) for key, c in self.terms if c * k != 0.0))

    __rmul__ = __mul__

    def __truediv__(self, k):
        return self * (1.0 / float(k))

    @property
    def is_constant(self) -> bool:
        return not self.terms

    def evaluate(self, theta: np.ndarray, inputs: np.ndarray | None) -> np.ndarray | float:
        """Scalar if constant, else one value per input row."""
        if not self.terms:
            return self.const
        out = self.const
        for (kind, i), c in self.terms:
            if kind == "p":
                out = out + c * theta[i]
            else:
                out = out + c * inputs[:, i]
        return out


Angle = Union[Affine, float, int]


def as_affine(a: Angle) -> Affine:
    return a if isinstance(a, Affine) else Affine(float(a))


@dataclass(frozen=True)
class TGate:
    """Template gate: like GateOp but angles may be symbolic."""

    kind: str
    qubits: tuple[int, ...]
    angles: tuple[Affine, ...] = ()

    def __post_init__(self):
        if self.kind not in GATE_ARITY and self.kind not in _ROTATIONS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        object.__setattr__(self, "angles", tuple(as_affine(a) for a in self.angles))
        if self.kind in GATE_ARITY:
            if len(self.qubits) != GATE_ARITY[self.kind]:
                raise ValueError(f"{self.kind} acts on {GATE_ARITY[self.kind]} qubit(s)")
            if len(self.angles) != GATE_NPARAMS[self.kind]:
                raise ValueError(f"{self.kind} takes {GATE_NPARAMS[self.kind]} angles")

    @property
    def params(self):
        return self.angles

    @property
    def is_constant(self) -> bool:
        return all(a.is_constant for a in self.angles)

    def to_gateop(self) -> GateOp:
        if not self.is_constant:
            raise ValueError("gate has unresolved symbolic angles")
        return GateOp(self.kind, self.qubits, tuple(a.const for a in self.angles))


def from_gateop(g: GateOp) -> TGate:
    return TGate(g.kind, g.qubits, tuple(Affine(float(p)) for p in g.params))


# ---------------------------------------------------------------------------
# compilation to the hardware basis

BASIS = frozenset({"X", "SX", "RZ", "CNOT", "ID"})


def _zyz_angles(u: np.ndarray) -> tuple[float, float, float]:
    """U3 angles (theta, phi, lam) equal to ``u`` up to global phase."""
    u = u / np.sqrt(np.linalg.det(u))
    theta = 2 * math.atan2(abs(u[1, 0]), abs(u[0, 0]))
    if abs(u[0, 0]) > 1e-12 and abs(u[1, 0]) > 1e-12:
        a = np.angle(u[1, 1])  # (phi + lam)/2
        b = np.angle(u[1, 0])  # (phi - lam)/2
        phi, lam = a + b, a - b
    elif abs(u[1, 0]) <= 1e-12:
        phi, lam = 0.0, 2 * float(np.angle(u[1, 1]))
    else:
        phi, lam = 2 * float(np.angle(u[1, 0])), 0.0
    return float(theta), float(phi), float(lam)


def _u3_basis(q, theta, phi, lam) -> list[TGate]:
    # U3(t, p, l) ~ RZ(p + pi) SX RZ(t + pi) SX RZ(l)
    return [TGate("RZ", (q,), (lam,)), TGate("SX", (q,)), TGate("RZ", (q,), (as_affine(theta) + PI,)),
            TGate("SX", (q,)), TGate("RZ", (q,), (as_affine(phi) + PI,))]


def _h(q):
    return TGate("H", (q,))


def _rzz_to_cnot(a, b, angle) -> list[TGate]:
    return [TGate("CNOT", (a, b)), TGate("RZ", (b,), (angle,)), TGate("CNOT", (a, b))]


def _cu3_parts(c, t, theta, phi, lam) -> list[TGate]:
    theta, phi, lam = as_affine(theta), as_affine(phi), as_affine(lam)
    return [
        TGate("U1", (c,), ((lam + phi) / 2,)),
        TGate("U1", (t,), ((lam - phi) / 2,)),
        TGate("CNOT", (c, t)),
        TGate("U3", (t,), (-theta / 2, 0.0, -(phi + lam) / 2)),
        TGate("CNOT", (c, t)),
        TGate("U3", (t,), (theta / 2, phi, 0.0)),
    ]


def _crx_parts(c, t, theta) -> list[TGate]:
    theta = as_affine(theta)
    return [
        TGate("U1", (t,), (PI / 2,)),
        TGate("CNOT", (c, t)),
        TGate("U3", (t,), (-theta / 2, 0.0, 0.0)),
        TGate("CNOT", (c, t)),
        TGate("U3", (t,), (theta / 2, -PI / 2, 0.0)),
    ]


def _sqrt_swap_parts(a, b) -> list[TGate]:
    # sqrt(SWAP) ~ exp(-i pi/8 (XX + YY + ZZ)): three commuting rotations by pi/4
    ang = PI / 4
    yy = [TGate("SX", (a,)), TGate("SX", (b,)), TGate("RZZ", (a, b), (ang,)),
          TGate("SX", (a,)), TGate("SX", (a,)), TGate("SX", (a,)),
          TGate("SX", (b,)), TGate("SX", (b,)), TGate("SX", (b,))]
    return [TGate("RXX", (a, b), (ang,))] + yy + [TGate("RZZ", (a, b), (ang,))]


def _rewrite_basis(g: TGate) -> list[TGate] | None:
    """One rewriting step toward the basis, or None if already basis."""
    k, q = g.kind, g.qubits
    if k in BASIS:
        return None
    if k == "U1":
        return [TGate("RZ", q, g.angles)]
    if k == "Z":
        return [TGate("RZ", q, (PI,))]
    if k == "Y":
        return [TGate("RZ", q, (PI,)), TGate("X", q)]
    if k == "S":
        return [TGate("RZ", q, (PI / 2,))]
    if k == "T":
        return [TGate("RZ", q, (PI / 4,))]
    if k == "H":
        return [TGate("RZ", q, (PI / 2,)), TGate("SX", q), TGate("RZ", q, (PI / 2,))]
    if k == "SQRT_H":
        return _u3_basis(q[0], *_zyz_angles(gate_unitary("SQRT_H")))
    if k == "RX":
        return _u3_basis(q[0], g.angles[0], -PI / 2, PI / 2)
    if k == "RY":
        return _u3_basis(q[0], g.angles[0], 0.0, 0.0)
    if k == "U3":
        return _u3_basis(q[0], *g.angles)
    a, b = q if len(q) == 2 else (None, None)
    if k == "CZ":
        return [_h(b), TGate("CNOT", q), _h(b)]
    if k == "SWAP":
        return [TGate("CNOT", (a, b)), TGate("CNOT", (b, a)), TGate("CNOT", (a, b))]
    if k == "RZZ":
        return _rzz_to_cnot(a, b, g.angles[0])
    if k == "RXX":
        return [_h(a), _h(b)] + _rzz_to_cnot(a, b, g.angles[0]) + [_h(a), _h(b)]
    if k == "RZX":
        return [_h(b)] + _rzz_to_cnot(a, b, g.angles[0]) + [_h(b)]
    if k == "CU3":
        return _cu3_parts(a, b, *g.angles)
    if k == "CRX":
        return _crx_parts(a, b, g.angles[0])
    if k == "SQRT_SWAP":
        return _sqrt_swap_parts(a, b)
    raise ValueError(f"cannot compile gate kind {k!r}")


def _rewrite_all(circuit: Iterable, step) -> list:
    out = []
    stack = list(reversed([g if isinstance(g, TGate) else from_gateop(g) for g in circuit]))
    while stack:
        g = stack.pop()
        parts = step(g)
        if parts is None:
            out.append(g)
        else:
            stack.extend(reversed(parts))
    return out


def compile_to_basis(circuit: Sequence[TGate | GateOp]) -> list:
    """Rewrite a circuit over {X, SX, RZ, CNOT, ID}, equal up to global phase.

    GateOp input gives GateOp output; template input keeps symbolic angles.
    """
    as_ops = bool(circuit) and all(isinstance(g, GateOp) for g in circuit)
    out = _rewrite_all(circuit, _rewrite_basis)
    return [g.to_gateop() for g in out] if as_ops else out


# ---------------------------------------------------------------------------
# lowering to shift-rule primitives

# generator Pauli string per rotation kind (first letter on first qubit)
_ROTATIONS = {"RX": "X", "RY": "Y", "RZ": "Z", "RZZ": "ZZ", "RXX": "XX", "RZX": "ZX"}


def _rewrite_lower(g: TGate) -> list[TGate] | None:
    k, q = g.kind, g.qubits
    if g.is_constant:
        return None
    if k in _ROTATIONS:
        return None
    if k == "U1":
        return [TGate("RZ", q, g.angles)]
    if k == "U3":
        theta, phi, lam = g.angles
        return [TGate("RZ", q, (lam,)), TGate("RY", q, (theta,)), TGate("RZ", q, (phi,))]
    if k == "CU3":
        return _cu3_parts(q[0], q[1], *g.angles)
    if k == "CRX":
        return _crx_parts(q[0], q[1], g.angles[0])
    raise ValueError(f"no shift-rule lowering for {k!r}")


@dataclass(frozen=True)
class Prim:
    """Executable gate: fixed matrix, or Pauli rotation with a variable angle."""

    qubits: tuple[int, ...]
    matrix: np.ndarray | None = None
    kind: str | None = None
    angle: Affine | None = None


def lower(circuit: Sequence[TGate | GateOp]) -> list[Prim]:
    prims = []
    for g in _rewrite_all(circuit, _rewrite_lower):
        if g.is_constant:
            prims.append(Prim(g.qubits, matrix=gate_unitary(g.kind, tuple(a.const for a in g.angles))))
        else:
            prims.append(Prim(g.qubits, kind=g.kind, angle=g.angles[0]))
    return _fuse(prims)


def _fuse(prims: list[Prim]) -> list[Prim]:
    """Merge runs of adjacent fixed single-qubit matrices on the same qubit."""
    out: list[Prim] = []
    pending: dict[int, int] = {}  # qubit -> index in out of last fusable fixed 1q prim
    for p in prims:
        if p.matrix is not None and len(p.qubits) == 1:
            q = p.qubits[0]
            j = pending.get(q)
            if j is not None:
                prev = out[j]
                out[j] = Prim(prev.qubits, matrix=p.matrix @ prev.matrix)
                continue
            pending[q] = len(out)
            out.append(p)
            continue
        for q in p.qubits:
            pending.pop(q, None)
        out.append(p)
    return out


def circuit_unitary(circuit: Sequence[TGate | GateOp], n: int) -> np.ndarray:
    """Dense unitary of a constant circuit (column j = image of basis state j)."""
    from .qcore import apply_unitary_rows

    states = np.eye(2**n, dtype=complex)
    for g in circuit:
        if isinstance(g, TGate):
            g = g.to_gateop()
        states = apply_unitary_rows(states, g.unitary(), g.qubits, n)
    return states.T


def equal_up_to_phase(a: np.ndarray, b: np.ndarray, atol: float = 1e-9) -> bool:
    prod = a @ b.conj().T
    phase = prod[0, 0]
    if abs(abs(phase) - 1) > atol:
        return False
    return bool(np.allclose(prod, phase * np.eye(a.shape[0]), atol=atol, rtol=0))
