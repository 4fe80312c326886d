"""Multi-block quantum neural networks.

A model is a list of blocks.  Each block encodes classical values with
single-qubit rotations, applies trainable layers from one of the design
spaces, and measures every qubit in the Z basis.  Outcomes of a block,
after optional normalization and quantization, become the RY angles of
the next block's encoder.  The last block feeds a classification head.

Gate templates carry symbolic angles (see :mod:`qnat.circuit`): trainable
slot ``i`` is ``("p", i)`` and encoder feature ``j`` is ``("x", j)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import noise as _noise
from . import postproc
from .circuit import Affine, Prim, TGate, compile_to_basis, lower
from .errors import ConfigError
from .execute import BlockResult, ChannelOp, PauliOp, run_density, run_statevector
from .noise import ErrorStats, NoiseModel

__all__ = [
    "DESIGN_SPACES",
    "ENCODER_PRESETS",
    "HEADS",
    "ModelConfig",
    "ModelSpec",
    "BlockSpec",
    "LayerSpec",
    "NoiseConfig",
    "PostprocConfig",
    "StepNoise",
    "ForwardResult",
    "build_model",
    "model_config_from_dict",
    "encode",
    "head_logits",
    "forward",
    "sample_step_noise",
    "compile_to_basis",
    "oracle_qubit_cap",
]

DESIGN_SPACES = ("U3_CU3", "ZZ_RY", "RXYZ", "ZX_XX", "RXYZ_U1_CU3", "RY_CNOT")
HEADS = ("two_class_pair_sum", "direct_softmax")
DEFAULT_QUBIT_CAP = 10


def oracle_qubit_cap() -> int:
    """Largest register simulated with density matrices."""
    raw = os.environ.get("QNAT_ORACLE_QUBIT_CAP")
    if raw is None:
        return DEFAULT_QUBIT_CAP
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", "QNAT_ORACLE_QUBIT_CAP") from None


# ---------------------------------------------------------------------------
# encoders

def _rotation_rows(kinds: Sequence[str], qubits_per_row: Sequence[Sequence[int]]):
    slots, f = [], 0
    for kind, qubits in zip(kinds, qubits_per_row):
        for q in qubits:
            slots.append((kind, q, f))
            f += 1
    return tuple(slots)


ENCODER_PRESETS = {
    "img16": _rotation_rows(("RY", "RX", "RZ", "RY"), [range(4)] * 4),
    "img36": _rotation_rows(("RY", "RX", "RZ", "RY"), [range(10)] * 3 + [range(6)]),
    "vowel10": _rotation_rows(("RY", "RX", "RZ"), [range(4), range(4), range(2)]),
}


def _encoder_slots(spec, n_qubits: int):
    if isinstance(spec, str):
        if spec == "ry":
            return tuple(("RY", q, q) for q in range(n_qubits))
        if spec not in ENCODER_PRESETS:
            raise ConfigError(f"unknown preset {spec!r}", "encoder")
        return ENCODER_PRESETS[spec]
    slots = []
    for i, s in enumerate(spec):
        try:
            kind, q, f = s
        except (TypeError, ValueError):
            raise ConfigError("expected [kind, qubit, feature]", f"encoder[{i}]") from None
        if kind not in ("RX", "RY", "RZ"):
            raise ConfigError(f"encoder gates are RX/RY/RZ, got {kind!r}", f"encoder[{i}]")
        slots.append((kind, int(q), int(f)))
    return tuple(slots)


# ---------------------------------------------------------------------------
# trainable layers

def _ring(n: int):
    if n < 2:
        return []
    if n == 2:
        return [(0, 1), (1, 0)]
    return [(i, (i + 1) % n) for i in range(n)]


class _Slots:
    """Hands out consecutive trainable slots."""

    def __init__(self, start: int):
        self.next = start

    def take(self, k: int) -> tuple[Affine, ...]:
        out = tuple(Affine.var("p", self.next + i) for i in range(k))
        self.next += k
        return out


def _design_gates(tag: str, n: int, slots: _Slots) -> list[TGate]:
    each = range(n)
    ring = _ring(n)
    g: list[TGate] = []
    if tag == "U3_CU3":
        g += [TGate("U3", (q,), slots.take(3)) for q in each]
        g += [TGate("CU3", pair, slots.take(3)) for pair in ring]
    elif tag == "ZZ_RY":
        g += [TGate("RZZ", pair, slots.take(1)) for pair in ring]
        g += [TGate("RY", (q,), slots.take(1)) for q in each]
    elif tag == "RXYZ":
        g += [TGate("SQRT_H", (q,)) for q in each]
        for kind in ("RX", "RY", "RZ"):
            g += [TGate(kind, (q,), slots.take(1)) for q in each]
        g += [TGate("CZ", pair) for pair in ring]
    elif tag == "ZX_XX":
        g += [TGate("RZX", pair, slots.take(1)) for pair in ring]
        g += [TGate("RXX", pair, slots.take(1)) for pair in ring]
    elif tag == "RXYZ_U1_CU3":
        g += [TGate("RX", (q,), slots.take(1)) for q in each]
        g += [TGate("S", (q,)) for q in each]
        g += [TGate("CNOT", pair) for pair in ring]
        g += [TGate("RY", (q,), slots.take(1)) for q in each]
        g += [TGate("T", (q,)) for q in each]
        g += [TGate("SWAP", pair) for pair in ring]
        g += [TGate("RZ", (q,), slots.take(1)) for q in each]
        g += [TGate("H", (q,)) for q in each]
        g += [TGate("SQRT_SWAP", pair) for pair in ring]
        g += [TGate("U1", (q,), slots.take(1)) for q in each]
        g += [TGate("CU3", pair, slots.take(3)) for pair in ring]
    elif tag == "RY_CNOT":
        g += [TGate("RY", (q,), slots.take(1)) for q in each]
        g += [TGate("CNOT", (q, q + 1)) for q in range(n - 1)]
    else:
        raise ConfigError(f"unknown design space {tag!r}", "design_space")
    return g


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class ModelConfig:
    n_qubits: int = 4
    n_blocks: int = 2
    design_space: str = "U3_CU3"
    layers_per_block: int = 1
    head: str = "direct_softmax"
    encoder: str | tuple = "img16"
    n_features: int | None = None

    def to_dict(self) -> dict:
        enc = self.encoder if isinstance(self.encoder, str) else [list(s) for s in self.encoder]
        d = {"n_qubits": self.n_qubits, "n_blocks": self.n_blocks, "design_space": self.design_space,
             "layers_per_block": self.layers_per_block, "head": self.head, "encoder": enc}
        if self.n_features is not None:
            d["n_features"] = self.n_features
        return d


def _int_field(d: Mapping, name: str, default=None, minimum: int = 0) -> int:
    v = d.get(name, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"expected an integer, got {v!r}", name)
    if v < minimum:
        raise ConfigError(f"must be >= {minimum}", name)
    return v


def model_config_from_dict(d: Mapping) -> ModelConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("model config must be a JSON object")
    known = {"n_qubits", "n_blocks", "design_space", "layers_per_block", "head", "encoder", "n_features"}
    extra = set(d) - known
    if extra:
        raise ConfigError("unknown key", sorted(extra)[0])
    if "n_qubits" not in d:
        raise ConfigError("missing", "n_qubits")
    enc = d.get("encoder", "img16")
    if not isinstance(enc, str):
        if not isinstance(enc, list):
            raise ConfigError("expected a preset name or a slot list", "encoder")
        enc = tuple(tuple(s) if isinstance(s, list) else s for s in enc)
    nf = d.get("n_features")
    return ModelConfig(
        n_qubits=_int_field(d, "n_qubits", minimum=1),
        n_blocks=_int_field(d, "n_blocks", 1, minimum=0),
        design_space=str(d.get("design_space", "U3_CU3")),
        layers_per_block=_int_field(d, "layers_per_block", 1, minimum=1),
        head=str(d.get("head", "direct_softmax")),
        encoder=enc,
        n_features=None if nf is None else _int_field(d, "n_features", minimum=1),
    )


@dataclass(frozen=True)
class LayerSpec:
    design_space: str
    gates: tuple[TGate, ...]


@dataclass(frozen=True)
class BlockSpec:
    encoder: tuple[tuple[str, int, int], ...]
    layers: tuple[LayerSpec, ...]

    @property
    def n_inputs(self) -> int:
        return 1 + max(f for _, _, f in self.encoder) if self.encoder else 0

    def template(self) -> list[TGate]:
        enc = [TGate(kind, (q,), (Affine.var("x", f),)) for kind, q, f in self.encoder]
        return enc + [g for layer in self.layers for g in layer.gates]


@dataclass(frozen=True)
class ModelSpec:
    n_qubits: int
    blocks: tuple[BlockSpec, ...]
    head: str
    n_params: int
    param_index: Mapping[tuple[int, int, int, int], int] = field(compare=False, repr=False)
    config: ModelConfig | None = field(default=None, compare=False, repr=False)
    _prims: tuple = field(default=(), compare=False, repr=False)

    @property
    def n_features(self) -> int:
        return self.blocks[0].n_inputs

    @property
    def n_classes(self) -> int:
        return 2 if self.head == "two_class_pair_sum" else self.n_qubits

    def prims(self, k: int) -> list[Prim]:
        return self._prims[k]


def build_model(config: ModelConfig, seed: int | None = 0) -> tuple[ModelSpec, np.ndarray]:
    """Architecture for ``config`` and parameters drawn uniform on [0, 2pi)."""
    n = config.n_qubits
    if n < 1:
        raise ConfigError("must be >= 1", "n_qubits")
    if config.n_blocks < 1:
        raise ConfigError("a model needs at least one block", "n_blocks")
    if config.layers_per_block < 1:
        raise ConfigError("must be >= 1", "layers_per_block")
    if config.head not in HEADS:
        raise ConfigError(f"unknown head {config.head!r}", "head")
    if config.head == "two_class_pair_sum" and n < 4:
        raise ConfigError("the pair-sum head needs at least 4 qubits", "head")
    if config.design_space not in DESIGN_SPACES:
        raise ConfigError(f"unknown design space {config.design_space!r}", "design_space")

    first = _encoder_slots(config.encoder, n)
    if not first:
        raise ConfigError("encoder has no slots", "encoder")
    for kind, q, f in first:
        if not 0 <= q < n:
            raise ConfigError(f"qubit {q} outside a {n}-qubit register", "encoder")
    feats = sorted(f for _, _, f in first)
    if feats != list(range(len(feats))):
        raise ConfigError("feature indices must cover 0..F-1 exactly once", "encoder")
    if config.n_features is not None and config.n_features != len(feats):
        raise ConfigError(f"{config.n_features} features but {len(feats)} encoder slots", "n_features")

    slots = _Slots(0)
    index: dict[tuple[int, int, int, int], int] = {}
    blocks = []
    for b in range(config.n_blocks):
        enc = first if b == 0 else tuple(("RY", q, q) for q in range(n))
        layers = []
        for l in range(config.layers_per_block):
            gates = tuple(_design_gates(config.design_space, n, slots))
            for gi, g in enumerate(gates):
                for s, a in enumerate(g.angles):
                    for (kind, i), _c in a.terms:
                        index[(b, l, gi, s)] = i
            layers.append(LayerSpec(config.design_space, gates))
        blocks.append(BlockSpec(enc, tuple(layers)))
    prims = tuple(lower(bl.template()) for bl in blocks)
    spec = ModelSpec(n, tuple(blocks), config.head, slots.next, index, config, prims)
    rng = np.random.default_rng(seed)
    params = rng.uniform(0.0, 2 * np.pi, size=spec.n_params)
    return spec, params


def encode(block: BlockSpec, features) -> list:
    """Concrete encoder gates (GateOp) with raw feature values as angles."""
    from .qcore import GateOp

    x = np.asarray(features, dtype=float).ravel()
    out = []
    for kind, q, f in block.encoder:
        if f >= x.size:
            raise IndexError(f"encoder reads feature {f}, got {x.size} features")
        out.append(GateOp(kind, (q,), (float(x[f]),)))
    return out


def head_logits(outcomes, head: str) -> np.ndarray:
    """Logits from last-block outcomes; works on one row or a batch."""
    y = np.asarray(outcomes, dtype=float)
    if head == "direct_softmax":
        return y.copy()
    if head == "two_class_pair_sum":
        if y.shape[-1] < 4:
            raise ValueError("the pair-sum head needs at least 4 qubits")
        return np.stack([y[..., 0] + y[..., 1], y[..., 2] + y[..., 3]], axis=-1)
    raise ValueError(f"unknown head {head!r}")


def head_backward(grad_logits: np.ndarray, head: str, n_qubits: int) -> np.ndarray:
    g = np.asarray(grad_logits, dtype=float)
    if head == "direct_softmax":
        return g
    out = np.zeros(g.shape[:-1] + (n_qubits,))
    out[..., 0] = out[..., 1] = g[..., 0]
    out[..., 2] = out[..., 3] = g[..., 1]
    return out


# ---------------------------------------------------------------------------
# noise and post-processing configuration

@dataclass(frozen=True)
class NoiseConfig:
    """How noise enters a forward pass.

    ``exact`` evaluates the model's Pauli channels on density matrices
    (trajectory averaging above the qubit cap); otherwise one error-gate
    sample is drawn per call and shared by the whole batch.
    ``outcome_stats`` adds Gaussian outcome noise per block instead of, or on
    top of, gate errors.
    """

    model: NoiseModel | None = None
    noise_factor: float | None = None
    compile: bool = False
    exact: bool = False
    readout: bool = True
    outcome_stats: tuple[ErrorStats, ...] | None = None
    trajectories: int = 256

    @property
    def T(self) -> float:
        if self.noise_factor is not None:
            return self.noise_factor
        return self.model.noise_factor if self.model is not None else 0.0


@dataclass(frozen=True)
class PostprocConfig:
    normalize: bool = False
    quant: postproc.QuantConfig | None = None


@dataclass(frozen=True)
class StepNoise:
    """One sampled set of error gates per block plus the readout map."""

    prims: tuple[list[Prim], ...]
    readout: tuple[np.ndarray, np.ndarray] | None


def _block_circuit(model: ModelSpec, k: int, compile_: bool) -> list[TGate]:
    t = model.blocks[k].template()
    return compile_to_basis(t) if compile_ else t


def _readout(noise: NoiseConfig | None, n: int):
    if noise is None or noise.model is None or not noise.readout or not noise.model.has_readout():
        return None
    return _noise.readout_affine(noise.model.readout_for(n))


def sample_step_noise(model: ModelSpec, noise: NoiseConfig, rng: np.random.Generator) -> StepNoise:
    prims = []
    for k in range(len(model.blocks)):
        if noise.model is None:
            prims.append(model.prims(k))
            continue
        circ = _block_circuit(model, k, noise.compile)
        noisy = _noise.sample_error_gates(circ, noise.model, rng, T=noise.T)
        prims.append(model.prims(k) if len(noisy) == len(circ) and not noise.compile else lower(noisy))
    return StepNoise(tuple(prims), _readout(noise, model.n_qubits))


def _density_items(circ: Sequence[TGate], nm: NoiseModel, T: float):
    items, noisy = [], False
    for g in circ:
        items.extend(lower([g]))
        err = nm.error_for(g.kind, g.qubits)
        if err is None:
            continue
        err = err.scaled(T)
        if err.joint is not None:
            if sum(err.joint.values()) > 0:
                items.append(ChannelOp(g.qubits, _noise.joint_pauli_channel(err.joint).operators))
                noisy = True
            continue
        for q, s in zip(g.qubits, err.specs):
            if not s.is_trivial():
                items.append(PauliOp(q, s.px, s.py, s.pz))
                noisy = True
    return items, noisy


def _exact_block(model: ModelSpec, k: int, theta, inputs, noise: NoiseConfig,
                 rng: np.random.Generator | None) -> np.ndarray:
    n = model.n_qubits
    readout = _readout(noise, n)
    if noise.model is None:
        return run_statevector(model.prims(k), n, model.n_params, theta, inputs, readout=readout).outcomes
    circ = _block_circuit(model, k, noise.compile)
    if n <= oracle_qubit_cap():
        items, noisy = _density_items(circ, noise.model, noise.T)
        if not noisy:
            prims = model.prims(k) if not noise.compile else lower(circ)
            return run_statevector(prims, n, model.n_params, theta, inputs, readout=readout).outcomes
        return run_density(items, n, theta, inputs, readout)
    if rng is None:
        raise ValueError("trajectory averaging above the qubit cap needs a generator")
    acc = 0.0
    for _ in range(noise.trajectories):
        prims = lower(_noise.sample_error_gates(circ, noise.model, rng, T=noise.T))
        acc = acc + run_statevector(prims, n, model.n_params, theta, inputs).outcomes
    e = acc / noise.trajectories
    if readout is not None:
        e = e * readout[0] + readout[1]
    return e


# ---------------------------------------------------------------------------
# forward pass

@dataclass
class ForwardResult:
    logits: np.ndarray
    outcomes: list[np.ndarray]  # measured outcomes per block (after readout / shots / perturbation)
    normalized: list[np.ndarray | None]  # normalized outcomes (non-final blocks)
    norm_stats: list[postproc.NormStats | None]
    pre_quant: list[np.ndarray]  # values handed to the quantizer (non-final blocks)
    next_inputs: list[np.ndarray]  # values fed to the next block's encoder (non-final blocks)
    block_results: list[BlockResult | None]


def _shots(e: np.ndarray, shots: int | None, rng) -> np.ndarray:
    if not shots:
        return e
    p0 = np.clip((1 + e) / 2, 0.0, 1.0)
    return 2.0 * rng.binomial(shots, p0) / shots - 1.0


def forward(model: ModelSpec, params, features, noise: NoiseConfig | None = None,
            post: PostprocConfig | None = None, rng: np.random.Generator | None = None, *,
            step: StepNoise | None = None, jac: bool = False, shots: int | None = None) -> ForwardResult:
    """Run every block on a feature batch and return logits plus per-block outcomes.

    With ``jac`` the per-block parameter/input Jacobians are attached
    (sampled-noise or noise-free only).  ``step`` fixes the error-gate
    sample; otherwise one is drawn from ``rng`` when ``noise`` has a model.
    """
    theta = np.asarray(params, dtype=float)
    if theta.shape != (model.n_params,):
        raise ValueError(f"expected {model.n_params} parameters, got shape {theta.shape}")
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.n_features:
        raise ValueError(f"model reads {model.n_features} features, got {x.shape[1]}")
    post = post or PostprocConfig()
    n = model.n_qubits
    exact = noise is not None and noise.exact
    if exact and jac:
        raise ValueError("Jacobians are only available on the sampled-noise path")
    needs_rng = shots or (noise is not None and (noise.outcome_stats is not None
                                                 or (noise.model is not None and step is None and not exact)))
    if needs_rng and rng is None:
        raise ValueError("this configuration samples noise and needs a generator")
    if step is None and noise is not None and noise.model is not None and not exact:
        step = sample_step_noise(model, noise, rng)

    n_blocks = len(model.blocks)
    res = ForwardResult(None, [], [], [], [], [], [])
    inputs = x
    for k in range(n_blocks):
        last = k == n_blocks - 1
        if exact:
            y = _shots(_exact_block(model, k, theta, inputs, noise, rng), shots, rng)
            br = None
        else:
            prims = step.prims[k] if step is not None else model.prims(k)
            readout = step.readout if step is not None else None
            br = run_statevector(prims, n, model.n_params, theta, inputs, jac=jac,
                                 input_jac=jac and k > 0, readout=readout, shots=shots, rng=rng)
            y = br.outcomes
        res.block_results.append(br)
        stats = noise.outcome_stats if noise is not None else None
        if last:
            if stats is not None:
                y = _noise.perturb_outcomes(y, stats[k], rng)
            res.outcomes.append(y)
            res.normalized.append(None)
            res.norm_stats.append(None)
            break
        res.outcomes.append(y)
        z, ns = (postproc.normalize_batch(y) if post.normalize else (y, None))
        res.normalized.append(z if post.normalize else None)
        res.norm_stats.append(ns)
        if stats is not None:
            z = _noise.perturb_outcomes(z, stats[k], rng)
        res.pre_quant.append(z)
        inputs = postproc.quantize(z, post.quant) if post.quant is not None else z
        res.next_inputs.append(inputs)
    res.logits = head_logits(res.outcomes[-1], model.head)
    return res
