"""Hardware-style noise models and the training-time noise injectors.

A :class:`NoiseModel` stores, per ``(gate kind, qubit tuple)``, the Pauli
error distribution attached to that gate plus one 2x2 readout confusion
matrix per qubit.  During training the error distribution is *sampled*:
each gate independently draws X, Y, Z or nothing and the drawn Pauli is
inserted right after it.  For evaluation the same model can be applied
exactly as Pauli channels on a density matrix (see :func:`pauli_channel`).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .qcore import GATE_ARITY, PAULI, KrausChannel

log = logging.getLogger(__name__)

__all__ = [
    "PauliErrorSpec",
    "ReadoutMatrix",
    "GateError",
    "NoiseModel",
    "ErrorStats",
    "scale_by_factor",
    "sample_error_gates",
    "sample_error_draws",
    "apply_readout_error",
    "apply_readout_to_expectation",
    "pauli_channel",
    "perturb_outcomes",
    "perturb_angles",
    "benchmark_error_stats",
    "load_noise_model",
]

_SUM_TOL = 1e-9
_PAULI_LETTERS = ("X", "Y", "Z")


@dataclass(frozen=True)
class PauliErrorSpec:
    px: float = 0.0
    py: float = 0.0
    pz: float = 0.0

    def __post_init__(self):
        for name in ("px", "py", "pz"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.px + self.py + self.pz > 1.0 + 1e-12:
            raise ValueError("Pauli error probabilities sum above 1")

    @property
    def p_none(self) -> float:
        return 1.0 - (self.px + self.py + self.pz)

    @property
    def probs(self) -> tuple[float, float, float, float]:
        """(p_x, p_y, p_z, p_none)."""
        return (self.px, self.py, self.pz, self.p_none)

    def is_trivial(self) -> bool:
        return self.px == 0 and self.py == 0 and self.pz == 0


def scale_by_factor(spec: PauliErrorSpec, T: float) -> PauliErrorSpec:
    """Multiply the X/Y/Z probabilities by the noise factor ``T``."""
    if T < 0:
        raise ValueError("noise factor must be >= 0")
    if T == 1:
        return spec
    if T * (spec.px + spec.py + spec.pz) > 1.0 + 1e-12:
        raise ValueError(f"noise factor {T} pushes error probability above 1")
    return PauliErrorSpec(T * spec.px, T * spec.py, T * spec.pz)


@dataclass(frozen=True)
class ReadoutMatrix:
    """Row = prepared state, column = observed bit."""

    m: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))

    def __post_init__(self):
        arr = np.asarray(self.m, dtype=float)
        if arr.shape != (2, 2):
            raise ValueError("readout matrix must be 2x2")
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("readout entries must lie in [0, 1]")
        if np.any(np.abs(arr.sum(axis=1) - 1) > _SUM_TOL):
            raise ValueError("readout rows must sum to 1")
        object.__setattr__(self, "m", tuple(tuple(float(x) for x in row) for row in arr))

    def array(self) -> np.ndarray:
        return np.asarray(self.m, dtype=float)

    def is_identity(self) -> bool:
        return self.m == ((1.0, 0.0), (0.0, 1.0))


IDENTITY_READOUT = ReadoutMatrix()


def apply_readout_error(p0: float, m: ReadoutMatrix) -> tuple[float, float]:
    """Observed (P(0), P(1)) given the true probability of ``|0>``."""
    if not 0.0 <= p0 <= 1.0:
        raise ValueError("p0 must be in [0, 1]")
    (m00, m01), (m10, m11) = m.m
    p1 = 1.0 - p0
    return p0 * m00 + p1 * m10, p0 * m01 + p1 * m11


def apply_readout_to_expectation(e_z, m: ReadoutMatrix):
    """Map a Z expectation through the confusion matrix (vectorized)."""
    (m00, m01), (m10, m11) = m.m
    e = np.asarray(e_z, dtype=float)
    p0 = (1 + e) / 2
    p1 = (1 - e) / 2
    out = (p0 * m00 + p1 * m10) - (p0 * m01 + p1 * m11)
    return float(out) if out.ndim == 0 else out


def readout_affine(matrices: Sequence[ReadoutMatrix]) -> tuple[np.ndarray, np.ndarray]:
    """Per-qubit (slope, intercept) with e' = slope * e + intercept."""
    arr = np.array([r.array() for r in matrices]).reshape(-1, 2, 2)
    m00, m01, m10, m11 = arr[:, 0, 0], arr[:, 0, 1], arr[:, 1, 0], arr[:, 1, 1]
    slope = 0.5 * ((m00 - m01) - (m10 - m11))
    intercept = 0.5 * ((m00 - m01) + (m10 - m11))
    return slope, intercept


@dataclass(frozen=True)
class GateError:
    """Errors attached to one gate instance.

    ``specs`` has one independent single-qubit spec per operand.  Two-qubit
    gates may instead carry ``joint``: probabilities of two-letter Pauli
    strings (first letter on the first operand); the identity string takes
    the remaining mass.
    """

    specs: tuple[PauliErrorSpec, ...] = ()
    joint: Mapping[str, float] | None = None

    def scaled(self, T: float) -> "GateError":
        if T == 1:
            return self
        if self.joint is not None:
            total = sum(self.joint.values())
            if T * total > 1 + 1e-12:
                raise ValueError(f"noise factor {T} pushes error probability above 1")
            return GateError(joint=MappingProxyType({k: T * v for k, v in self.joint.items()}))
        return GateError(specs=tuple(scale_by_factor(s, T) for s in self.specs))

    def n_draws(self) -> int:
        return 1 if self.joint is not None else len(self.specs)

    def __reduce__(self):
        # mapping proxies do not pickle; sweeps ship models to worker processes
        return (_gate_error, (self.specs, None if self.joint is None else dict(self.joint)))


def _gate_error(specs, joint):
    return GateError(specs, None if joint is None else MappingProxyType(joint))


@dataclass(frozen=True)
class NoiseModel:
    n_qubits: int
    gate_errors: Mapping[tuple[str, tuple[int, ...]], GateError] = field(default_factory=dict)
    readout: tuple[ReadoutMatrix, ...] = ()
    noise_factor: float = 1.0

    def __post_init__(self):
        if self.noise_factor < 0:
            raise ValueError("noise_factor must be >= 0")
        for (kind, qubits) in self.gate_errors:
            if any(q >= self.n_qubits or q < 0 for q in qubits):
                raise ValueError(f"gate error on {kind}{qubits} references qubit beyond {self.n_qubits}")
        if len(self.readout) > self.n_qubits:
            raise ValueError("more readout matrices than qubits")
        object.__setattr__(self, "gate_errors", MappingProxyType(dict(self.gate_errors)))
        object.__setattr__(self, "readout", tuple(self.readout))

    def __reduce__(self):
        return (self.__class__, (self.n_qubits, dict(self.gate_errors), self.readout, self.noise_factor))

    def error_for(self, kind: str, qubits: Sequence[int]) -> GateError | None:
        return self.gate_errors.get((kind, tuple(qubits)))

    def readout_for(self, n: int) -> list[ReadoutMatrix]:
        return [self.readout[q] if q < len(self.readout) else IDENTITY_READOUT for q in range(n)]

    def has_readout(self) -> bool:
        return any(not r.is_identity() for r in self.readout)

    @classmethod
    def uniform(cls, n_qubits: int, px: float, py: float | None = None, pz: float | None = None,
                readout: ReadoutMatrix | None = None, kinds: Iterable[str] | None = None,
                noise_factor: float = 1.0) -> "NoiseModel":
        """Same Pauli spec on every gate kind and every ordered qubit tuple."""
        spec = PauliErrorSpec(px, px if py is None else py, px if pz is None else pz)
        kinds = list(GATE_ARITY) if kinds is None else list(kinds)
        errors = {}
        for kind in kinds:
            if GATE_ARITY[kind] == 1:
                for q in range(n_qubits):
                    errors[(kind, (q,))] = GateError((spec,))
            else:
                for a in range(n_qubits):
                    for b in range(n_qubits):
                        if a != b:
                            errors[(kind, (a, b))] = GateError((spec, spec))
        ro = () if readout is None else (readout,) * n_qubits
        return cls(n_qubits, errors, ro, noise_factor)

    def to_dict(self) -> dict:
        entries = []
        for (kind, qubits), err in self.gate_errors.items():
            e = {"gate": kind, "qubits": list(qubits)}
            if err.joint is not None:
                e["pauli2"] = dict(err.joint)
            elif len({s for s in err.specs}) == 1:
                s = err.specs[0]
                e.update(px=s.px, py=s.py, pz=s.pz)
            else:
                e.update(px=[s.px for s in err.specs], py=[s.py for s in err.specs],
                         pz=[s.pz for s in err.specs])
            entries.append(e)
        return {
            "n_qubits": self.n_qubits,
            "noise_factor": self.noise_factor,
            "gate_errors": entries,
            "readout": [[list(row) for row in r.m] for r in self.readout],
        }


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", where)
    return float(value)


def noise_model_from_dict(d: Mapping) -> NoiseModel:
    """Validate and build a noise model from its JSON object."""
    if not isinstance(d, Mapping):
        raise ConfigError("noise model must be a JSON object")
    if "n_qubits" not in d:
        raise ConfigError("missing", "n_qubits")
    n = d["n_qubits"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError(f"expected a positive integer, got {n!r}", "n_qubits")
    T = _num(d.get("noise_factor", 1.0), "noise_factor")
    if T < 0:
        raise ConfigError("must be >= 0", "noise_factor")
    errors: dict = {}
    for i, e in enumerate(d.get("gate_errors", [])):
        where = f"gate_errors[{i}]"
        if not isinstance(e, Mapping):
            raise ConfigError("expected an object", where)
        kind = e.get("gate")
        if kind not in GATE_ARITY:
            raise ConfigError(f"unknown gate kind {kind!r}", f"{where}.gate")
        qubits = e.get("qubits")
        if (not isinstance(qubits, list) or len(qubits) != GATE_ARITY[kind]
                or any(isinstance(q, bool) or not isinstance(q, int) for q in qubits)):
            raise ConfigError(f"expected {GATE_ARITY[kind]} integer qubit indices", f"{where}.qubits")
        if any(not 0 <= q < n for q in qubits) or len(set(qubits)) != len(qubits):
            raise ConfigError(f"invalid qubit indices {qubits} for {n} qubits", f"{where}.qubits")
        if "pauli2" in e:
            if len(qubits) != 2:
                raise ConfigError("only valid for two-qubit gates", f"{where}.pauli2")
            joint = {}
            for key, p in e["pauli2"].items():
                if len(key) != 2 or any(c not in "IXYZ" for c in key) or key == "II":
                    raise ConfigError(f"bad Pauli string {key!r}", f"{where}.pauli2")
                p = _num(p, f"{where}.pauli2.{key}")
                if not 0 <= p <= 1:
                    raise ConfigError(f"probability {p} outside [0, 1]", f"{where}.pauli2.{key}")
                joint[key] = p
            if sum(joint.values()) > 1 + _SUM_TOL:
                raise ConfigError("probabilities sum above 1", f"{where}.pauli2")
            errors[(kind, tuple(qubits))] = GateError(joint=MappingProxyType(joint))
            continue
        per_operand = []
        for k in range(len(qubits)):
            vals = []
            for name in ("px", "py", "pz"):
                v = e.get(name, 0.0)
                if isinstance(v, list):
                    if len(v) != len(qubits):
                        raise ConfigError(f"expected {len(qubits)} values", f"{where}.{name}")
                    v = v[k]
                v = _num(v, f"{where}.{name}")
                if not 0 <= v <= 1:
                    raise ConfigError(f"probability {v} outside [0, 1]", f"{where}.{name}")
                vals.append(v)
            if sum(vals) > 1 + _SUM_TOL:
                raise ConfigError(f"px+py+pz = {sum(vals)} exceeds 1", where)
            total = sum(vals)
            if total > 1:
                # within tolerance of 1: absorb the rounding excess
                vals = [x / total for x in vals]
            per_operand.append(PauliErrorSpec(*vals))
        errors[(kind, tuple(qubits))] = GateError(tuple(per_operand))
    readout = []
    for q, m in enumerate(d.get("readout", [])):
        where = f"readout[{q}]"
        try:
            arr = np.asarray(m, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("expected a 2x2 numeric matrix", where) from None
        if arr.shape != (2, 2):
            raise ConfigError("expected a 2x2 matrix", where)
        if np.any(arr < 0) or np.any(arr > 1):
            raise ConfigError("entries must lie in [0, 1]", where)
        if np.any(np.abs(arr.sum(axis=1) - 1) > _SUM_TOL):
            raise ConfigError("rows must sum to 1", where)
        readout.append(ReadoutMatrix(tuple(map(tuple, arr))))
    if len(readout) > n:
        raise ConfigError(f"{len(readout)} matrices for {n} qubits", "readout")
    return NoiseModel(n, errors, tuple(readout), T)


def load_noise_model(path: str | Path) -> NoiseModel:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from None
    return noise_model_from_dict(data)


# ---------------------------------------------------------------------------
# error-gate sampling

def _plan(circuit: Sequence, model: NoiseModel, T: float):
    """Per gate: scaled GateError or None."""
    plan = []
    missing = set()
    for g in circuit:
        err = model.error_for(g.kind, g.qubits)
        if err is None:
            missing.add((g.kind, tuple(g.qubits)))
        plan.append(None if err is None else err.scaled(T))
    if missing:
        log.debug("no error spec for %d gate instance(s); no insertion", len(missing))
    return plan


def _pick(u: np.ndarray, probs: Sequence[float]) -> np.ndarray:
    """Categorical index for uniforms ``u``; len(probs) means 'no error'."""
    edges = np.cumsum(probs)
    return np.searchsorted(edges, u, side="right")


_JOINT_ORDER = tuple(a + b for a in "IXYZ" for b in "IXYZ" if a + b != "II")


def sample_error_draws(circuit: Sequence, model: NoiseModel, rng: np.random.Generator,
                       size: int | None = None, T: float | None = None):
    """Draw error letters for ``size`` trajectories at once.

    Returns ``(plan, letters)`` where ``letters`` is an object array of
    shape (size, n_slots) holding Pauli strings ('' for none).  One uniform
    number is consumed per slot, in circuit order, so ``size=None`` and
    ``size=1`` consume identical streams.
    """
    T = model.noise_factor if T is None else T
    plan = _plan(circuit, model, T)
    slots = []  # (gate index, operand index or -1 for joint, GateError)
    for gi, err in enumerate(plan):
        if err is None:
            continue
        if err.joint is not None:
            slots.append((gi, -1, err))
        else:
            slots.extend((gi, k, err) for k in range(len(err.specs)))
    n_rows = 1 if size is None else size
    u = rng.random((n_rows, len(slots)))
    letters = np.empty((n_rows, len(slots)), dtype=object)
    for j, (gi, k, err) in enumerate(slots):
        if k < 0:
            keys = _JOINT_ORDER
            probs = [err.joint.get(key, 0.0) for key in keys]
        else:
            keys = _PAULI_LETTERS
            s = err.specs[k]
            probs = [s.px, s.py, s.pz]
        idx = _pick(u[:, j], probs)
        table = np.array(list(keys) + [""], dtype=object)
        letters[:, j] = table[np.minimum(idx, len(keys))]
    return slots, letters


def sample_error_gates(circuit: Sequence, model: NoiseModel, rng: np.random.Generator,
                       T: float | None = None) -> list:
    """Return a new gate list with sampled Pauli error gates inserted.

    Gates are any objects with ``kind``/``qubits`` attributes constructible as
    ``type(g)(kind, qubits)``.  ``T`` overrides the model's noise factor.
    """
    slots, letters = sample_error_draws(circuit, model, rng, None, T)
    inserts: dict[int, list[tuple[str, int]]] = {}
    for j, (gi, k, _err) in enumerate(slots):
        word = letters[0, j]
        if not word:
            continue
        g = circuit[gi]
        if k < 0:
            ops = [(c, g.qubits[i]) for i, c in enumerate(word) if c != "I"]
        else:
            ops = [(word, g.qubits[k])]
        inserts.setdefault(gi, []).extend(ops)
    out = []
    for gi, g in enumerate(circuit):
        out.append(g)
        for letter, q in inserts.get(gi, ()):
            out.append(type(g)(letter, (q,)))
    return out


def pauli_channel(spec: PauliErrorSpec) -> KrausChannel:
    return KrausChannel([np.sqrt(max(spec.p_none, 0.0)) * PAULI["I"], np.sqrt(spec.px) * PAULI["X"],
                         np.sqrt(spec.py) * PAULI["Y"], np.sqrt(spec.pz) * PAULI["Z"]])


def joint_pauli_channel(joint: Mapping[str, float]) -> KrausChannel:
    """Two-qubit Pauli channel; operator for "AB" is kron(A, B)."""
    p_id = 1.0 - sum(joint.values())
    ops = [np.sqrt(max(p_id, 0.0)) * np.eye(4)]
    for key, p in joint.items():
        ops.append(np.sqrt(p) * np.kron(PAULI[key[0]], PAULI[key[1]]))
    return KrausChannel(ops)


# ---------------------------------------------------------------------------
# direct perturbation ablations

@dataclass(frozen=True)
class ErrorStats:
    mu_err: np.ndarray
    sigma_err: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu_err, dtype=float).copy()
        sd = np.asarray(self.sigma_err, dtype=float).copy()
        if mu.shape != sd.shape:
            raise ValueError("mu_err and sigma_err shapes differ")
        if np.any(sd < 0):
            raise ValueError("sigma_err must be >= 0")
        object.__setattr__(self, "mu_err", mu)
        object.__setattr__(self, "sigma_err", sd)

    def to_dict(self) -> dict:
        return {"mu_err": self.mu_err.tolist(), "sigma_err": self.sigma_err.tolist()}


def benchmark_error_stats(clean, noisy) -> ErrorStats:
    clean = np.asarray(clean, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {noisy.shape}")
    err = noisy - clean
    return ErrorStats(err.mean(axis=0), err.std(axis=0))


def perturb_outcomes(outcomes, stats: ErrorStats, rng: np.random.Generator) -> np.ndarray:
    """Add per-qubit Gaussian N(mu_err, sigma_err^2) noise to every row."""
    y = np.asarray(outcomes, dtype=float)
    if y.shape[-1] != stats.mu_err.shape[-1]:
        raise ValueError(f"stats cover {stats.mu_err.shape[-1]} qubits, outcomes have {y.shape[-1]}")
    return y + rng.normal(stats.mu_err, stats.sigma_err, size=y.shape)


def perturb_angles(params, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    theta = np.asarray(params, dtype=float)
    return theta + rng.normal(0.0, sigma, size=theta.shape)
