"""Losses, gradients, optimizers and the noise-injected training loop.

Gradients of quantum expectations come from the two-term parameter-shift
rule (see :mod:`qnat.execute`); everything classical after measurement is
differentiated by hand:

* head and softmax cross-entropy;
* quantization with a straight-through estimator (identity inside the clip
  range, zero outside) plus the penalty ``sum (z - Q(z))^2`` with Q held fixed;
* batch normalization with the batch statistics differentiated;
* the next block's encoder, through the input Jacobians of each block.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics, postproc, qnn
from .data import Dataset, Splits
from .errors import ConfigError
from .noise import ErrorStats, NoiseModel, benchmark_error_stats, perturb_angles

__all__ = [
    "TrainConfig",
    "train_config_from_dict",
    "TrainReport",
    "EvalResult",
    "OptState",
    "cross_entropy",
    "cross_entropy_batch",
    "total_loss",
    "loss_and_grad",
    "param_shift_grad",
    "finite_diff_grad",
    "central_difference",
    "optimizer_step",
    "train_loop",
    "evaluate",
    "sweep",
    "SweepCell",
    "ablate",
    "AblationRow",
]

GRAD_MODES = ("param_shift", "finite_diff")
INJECTIONS = ("gate_insertion", "outcome_perturb", "angle_perturb", "none")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    epochs: int = 30
    batch_size: int = 32
    noise_factor: float | None = None  # None: the noise model's own factor
    quant_levels: int | None = None  # None disables quantization
    p_min: float = -2.0
    p_max: float = 2.0
    lambda_quant: float = 0.1
    normalize: bool = False
    seed: int = 0
    grad_mode: str = "param_shift"
    shots: int | None = None
    optimizer: str = "adam"
    compile: bool = False
    injection: str = "gate_insertion"
    angle_sigma: float = 0.0
    fd_step: float = 1e-5

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("must be > 0", "lr")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "epochs")
        if self.batch_size < 2:
            raise ConfigError("must be >= 2 (normalization needs a batch)", "batch_size")
        if self.noise_factor is not None and self.noise_factor < 0:
            raise ConfigError("must be >= 0", "noise_factor")
        if self.quant_levels is not None and self.quant_levels < 2:
            raise ConfigError("must be >= 2", "quant_levels")
        if not self.p_min < self.p_max:
            raise ConfigError("p_min must be below p_max", "p_min")
        if self.lambda_quant < 0:
            raise ConfigError("must be >= 0", "lambda_quant")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"expected one of {GRAD_MODES}", "grad_mode")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("expected 'adam' or 'sgd'", "optimizer")
        if self.shots is not None and self.shots < 1:
            raise ConfigError("must be >= 1", "shots")
        if self.injection not in INJECTIONS:
            raise ConfigError(f"expected one of {INJECTIONS}", "injection")
        if self.angle_sigma < 0:
            raise ConfigError("must be >= 0", "angle_sigma")

    @property
    def quant(self) -> postproc.QuantConfig | None:
        if self.quant_levels is None:
            return None
        return postproc.QuantConfig(self.quant_levels, self.p_min, self.p_max)

    @property
    def post(self) -> qnn.PostprocConfig:
        return qnn.PostprocConfig(self.normalize, self.quant)

    def to_dict(self) -> dict:
        return asdict(self)


_TRAIN_TYPES = {
    "lr": float, "epochs": int, "batch_size": int, "noise_factor": (float, type(None)),
    "quant_levels": (int, type(None)), "p_min": float, "p_max": float, "lambda_quant": float,
    "normalize": bool, "seed": int, "grad_mode": str, "shots": (int, type(None)),
    "optimizer": str, "compile": bool, "injection": str, "angle_sigma": float, "fd_step": float,
}


def train_config_from_dict(d: Mapping) -> TrainConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("training config must be a JSON object")
    kw = {}
    for key, value in d.items():
        if key not in _TRAIN_TYPES:
            raise ConfigError("unknown key", key)
        want = _TRAIN_TYPES[key]
        types = want if isinstance(want, tuple) else (want,)
        if float in types and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
        if not ok:
            raise ConfigError(f"bad value {value!r}", key)
        kw[key] = value
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits, label: int) -> float:
    z = np.asarray(logits, dtype=float)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} outside [0, {z.shape[-1]})")
    m = z.max()
    return float(m + np.log(np.sum(np.exp(z - m))) - z[label])


def cross_entropy_batch(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError("label outside the class range")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    b = z.shape[0]
    loss = float(np.mean(lse - z[np.arange(b), y]))
    p = np.exp(z - lse[:, None])
    p[np.arange(b), y] -= 1.0
    return loss, p / b


@dataclass
class LossParts:
    ce: float
    penalty: float  # (1/B) sum over non-final blocks of sum (z - Q(z))^2
    total: float
    forward: qnn.ForwardResult


def _forward_loss(model, theta, x, labels, cfg: TrainConfig, noise, step, rng, jac) -> LossParts:
    fw = qnn.forward(model, theta, x, noise, cfg.post, rng, step=step, jac=jac, shots=cfg.shots)
    ce, _ = cross_entropy_batch(fw.logits, labels)
    pen = 0.0
    q = cfg.quant
    if q is not None:
        pen = sum(postproc.quant_penalty(z, q) for z in fw.pre_quant) / x.shape[0]
    return LossParts(ce, pen, ce + cfg.lambda_quant * pen, fw)


def total_loss(model, params, batch, labels, cfg: TrainConfig, noise=None, step=None, rng=None) -> float:
    """Mean cross-entropy plus lambda times the mean quantization penalty."""
    x = np.atleast_2d(np.asarray(batch, dtype=float))
    return _forward_loss(model, np.asarray(params, float), x, labels, cfg, noise, step, rng, False).total


def _backward(model: qnn.ModelSpec, parts: LossParts, labels, cfg: TrainConfig) -> np.ndarray:
    fw = parts.forward
    b = fw.logits.shape[0]
    _, g_logits = cross_entropy_batch(fw.logits, labels)
    g_y = qnn.head_backward(g_logits, model.head, model.n_qubits)
    grad = np.zeros(model.n_params)
    q = cfg.quant
    for k in range(len(model.blocks) - 1, -1, -1):
        br = fw.block_results[k]
        grad += np.einsum("bi,bip->p", g_y, br.jac_params)
        if k == 0:
            break
        g_in = np.einsum("bi,bij->bj", g_y, br.jac_inputs)
        j = k - 1
        pre = fw.pre_quant[j]
        if q is not None:
            g_in = g_in * postproc.quantize_ste_mask(pre, q)
            g_in = g_in + (cfg.lambda_quant / b) * postproc.quant_penalty_grad(pre, q)
        if fw.norm_stats[j] is not None:
            g_in = postproc.normalize_backward(g_in, fw.normalized[j], fw.norm_stats[j])
        g_y = g_in
    return grad


def _seeded(seed):
    return None if seed is None else np.random.default_rng(seed)


def loss_and_grad(model, params, batch, labels, cfg: TrainConfig, noise=None, step=None,
                  noise_seed: int | None = None) -> tuple[LossParts, np.ndarray]:
    """Loss and gradient with one fixed noise realisation.

    ``step`` fixes the error gates; ``noise_seed`` seeds any outcome
    perturbation so every evaluation of the loss sees the same draws.
    """
    theta = np.asarray(params, dtype=float)
    x = np.atleast_2d(np.asarray(batch, dtype=float))
    y = np.asarray(labels)
    if cfg.grad_mode == "finite_diff":
        parts = _forward_loss(model, theta, x, y, cfg, noise, step, _seeded(noise_seed), False)
        return parts, finite_diff_grad(model, theta, x, y, cfg, noise, step, noise_seed, cfg.fd_step)
    parts = _forward_loss(model, theta, x, y, cfg, noise, step, _seeded(noise_seed), True)
    return parts, _backward(model, parts, y, cfg)


def param_shift_grad(model, params, batch, labels, cfg: TrainConfig, noise=None, step=None,
                     noise_seed: int | None = None) -> np.ndarray:
    cfg = replace(cfg, grad_mode="param_shift")
    return loss_and_grad(model, params, batch, labels, cfg, noise, step, noise_seed)[1]


def central_difference(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    if not h > 0:
        raise ValueError("h must be > 0")
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e.flat[j] = h
        g.flat[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def finite_diff_grad(model, params, batch, labels, cfg: TrainConfig, noise=None, step=None,
                     noise_seed: int | None = None, h: float = 1e-5) -> np.ndarray:
    x = np.atleast_2d(np.asarray(batch, dtype=float))

    def f(t):
        return _forward_loss(model, t, x, labels, cfg, noise, step, _seeded(noise_seed), False).total

    return central_difference(f, params, h)


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptState":
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(params, grad, state: OptState, cfg: TrainConfig,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One update; returns (new params, new state)."""
    p = np.asarray(params, dtype=float)
    g = np.asarray(grad, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {p.shape}")
    if cfg.optimizer == "sgd":
        return p - cfg.lr * g, OptState(state.m, state.v, state.t + 1)
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return p - cfg.lr * mhat / (np.sqrt(vhat) + eps), OptState(m, v, t)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    accuracy: float
    loss: float
    predictions: np.ndarray
    logits: np.ndarray
    outcomes: list[np.ndarray]  # per block, concatenated over evaluation batches


def _batches(n: int, batch_size: int, order=None) -> list[np.ndarray]:
    idx = np.arange(n) if order is None else order
    if n == 0:
        return []
    return np.array_split(idx, math.ceil(n / batch_size))


def evaluate(model: qnn.ModelSpec, params, ds: Dataset, noise_model: NoiseModel | None = None,
             post: qnn.PostprocConfig | None = None, *, batch_size: int = 32, shots: int | None = None,
             seed: int = 0, compile: bool = False, outcome_stats=None) -> EvalResult:
    """Accuracy and outcomes; noise, if given, is evaluated exactly at T = 1.

    Batches of ``batch_size`` are normalized with their own statistics.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    noise = None
    if noise_model is not None or outcome_stats is not None:
        noise = qnn.NoiseConfig(noise_model, 1.0, compile=compile, exact=noise_model is not None,
                                outcome_stats=outcome_stats)
    rng = np.random.default_rng(seed)
    logits, outs = [], None
    for idx in _batches(len(ds), batch_size):
        fw = qnn.forward(model, params, ds.features[idx], noise, post, rng, shots=shots)
        logits.append(fw.logits)
        if outs is None:
            outs = [[] for _ in fw.outcomes]
        for k, y in enumerate(fw.outcomes):
            outs[k].append(y)
    lg = np.concatenate(logits)
    pred = lg.argmax(axis=1)
    loss, _ = cross_entropy_batch(lg, ds.labels)
    return EvalResult(metrics.accuracy(pred, ds.labels), loss, pred, lg, [np.concatenate(o) for o in outs])


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainReport:
    epochs: list[dict]
    best_epoch: int
    params: np.ndarray
    initial_params: np.ndarray
    config: dict
    n_params: int
    final_val_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "n_params": self.n_params,
            "best_epoch": self.best_epoch,
            "final_val_accuracy": self.final_val_accuracy,
            "epochs": self.epochs,
        }


def _noise_for_training(noise_model: NoiseModel | None, cfg: TrainConfig, outcome_stats):
    T = cfg.noise_factor
    if T is None:
        T = noise_model.noise_factor if noise_model is not None else 0.0
    if cfg.injection == "outcome_perturb":
        return qnn.NoiseConfig(None, outcome_stats=tuple(outcome_stats) if outcome_stats else None)
    if cfg.injection != "gate_insertion" or noise_model is None or T == 0:
        return None
    return qnn.NoiseConfig(noise_model, T, compile=cfg.compile, readout=True)


def train_loop(model: qnn.ModelSpec, params, splits: Splits, noise_model: NoiseModel | None,
               cfg: TrainConfig, *, outcome_stats: Sequence[ErrorStats] | None = None,
               log: Callable[[dict], None] | None = None) -> TrainReport:
    """Mini-batch training; returns the parameters with the lowest validation loss.

    Every step draws a fresh error-gate sample (probabilities scaled by the
    noise factor) shared by the batch and all shifted evaluations.
    Validation is evaluated exactly under ``noise_model`` at T = 1.
    """
    if cfg.injection == "outcome_perturb" and outcome_stats is None:
        raise ConfigError("outcome perturbation needs benchmarked error statistics", "injection")
    theta0 = np.asarray(params, dtype=float).copy()
    theta = theta0.copy()
    rng = np.random.default_rng(cfg.seed)
    noise = _noise_for_training(noise_model, cfg, outcome_stats)
    train = splits.train
    state = OptState.zeros(model.n_params)
    history = []
    best = (math.inf, -1, theta0.copy())
    for epoch in range(cfg.epochs):
        losses, correct = [], 0
        for idx in _batches(len(train), cfg.batch_size, rng.permutation(len(train))):
            x, y = train.features[idx], train.labels[idx]
            step = None
            if noise is not None and noise.model is not None:
                step = qnn.sample_step_noise(model, noise, rng)
            noise_seed = int(rng.integers(2**63))
            t_eval = theta
            if cfg.injection == "angle_perturb" and cfg.angle_sigma > 0:
                t_eval = perturb_angles(theta, cfg.angle_sigma, rng)
            parts, g = loss_and_grad(model, t_eval, x, y, cfg, noise, step, noise_seed)
            theta, state = optimizer_step(theta, g, state, cfg)
            losses.append(parts.total * len(idx))
            correct += int(np.sum(parts.forward.logits.argmax(axis=1) == y))
        row = {"epoch": epoch + 1, "train_loss": float(np.sum(losses) / len(train)),
               "train_accuracy": correct / len(train)}
        if len(splits.val):
            ev = evaluate(model, theta, splits.val, noise_model, cfg.post, batch_size=cfg.batch_size,
                          seed=cfg.seed, compile=cfg.compile)
            row.update(val_loss=ev.loss, val_accuracy=ev.accuracy)
            if ev.loss < best[0]:
                best = (ev.loss, epoch + 1, theta.copy())
        else:
            best = (math.nan, epoch + 1, theta.copy())
        history.append(row)
        if log is not None:
            log(row)
    final_acc = None
    best_theta = best[2]
    if history and "val_accuracy" in history[0]:
        final_acc = history[best[1] - 1]["val_accuracy"]
    return TrainReport(history, best[1], best_theta, theta0, cfg.to_dict(), model.n_params, final_acc)


# ---------------------------------------------------------------------------
# hyperparameter sweep

@dataclass
class SweepCell:
    noise_factor: float
    quant_levels: int | None
    val_loss: float | None = None
    val_accuracy: float | None = None
    error: str | None = None
    params: np.ndarray | None = field(default=None, repr=False)

    def key(self):
        # disabled quantization counts as zero levels for the tie-break
        return (math.inf if self.val_loss is None else self.val_loss, self.noise_factor,
                0 if self.quant_levels is None else self.quant_levels)


def _run_cell(args) -> SweepCell:
    model_cfg, splits, noise_model, cfg, T, levels = args
    try:
        model, theta = qnn.build_model(model_cfg, cfg.seed)
        c = replace(cfg, noise_factor=T, quant_levels=levels)
        rep = train_loop(model, theta, splits, noise_model, c)
        best = rep.epochs[rep.best_epoch - 1] if rep.best_epoch > 0 else {}
        return SweepCell(T, levels, best.get("val_loss"), best.get("val_accuracy"), None, rep.params)
    except Exception as exc:  # a failed cell is reported, the sweep continues
        return SweepCell(T, levels, error=f"{type(exc).__name__}: {exc}")


def sweep(model_cfg: qnn.ModelConfig, splits: Splits, noise_model: NoiseModel | None, cfg: TrainConfig,
          noise_factors: Sequence[float], levels: Sequence[int | None], jobs: int = 1):
    """Train every (T, levels) cell; the best has the lowest validation loss.

    Ties go to the lower T, then fewer levels.  Returns (cells, best index).
    """
    grid = [(model_cfg, splits, noise_model, cfg, float(T), lv) for T in noise_factors for lv in levels]
    if not grid:
        raise ValueError("empty sweep grid")
    if jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            cells = list(ex.map(_run_cell, grid))
    else:
        cells = [_run_cell(a) for a in grid]
    ok = [i for i, c in enumerate(cells) if c.error is None and c.val_loss is not None]
    best = min(ok, key=lambda i: cells[i].key()) if ok else None
    return cells, best


# ---------------------------------------------------------------------------
# injection ablation

@dataclass
class AblationRow:
    mode: str
    accuracy: float
    val_accuracy: float | None
    details: dict = field(default_factory=dict)


def benchmark_block_stats(model, params, ds: Dataset, noise_model: NoiseModel,
                          post: qnn.PostprocConfig, batch_size: int = 32) -> list[ErrorStats]:
    """Per-block error statistics between clean and exactly-noisy runs.

    Statistics are taken where outcome noise is injected: on the
    normalized values of non-final blocks (when normalizing) and on the
    raw outcomes of the final block.
    """
    noisy_cfg = qnn.NoiseConfig(noise_model, 1.0, exact=True)
    clean_rows, noisy_rows = None, None
    for idx in _batches(len(ds), batch_size):
        fc = qnn.forward(model, params, ds.features[idx], None, post)
        fn = qnn.forward(model, params, ds.features[idx], noisy_cfg, post)
        c = fc.pre_quant + [fc.outcomes[-1]]
        n = fn.pre_quant + [fn.outcomes[-1]]
        if clean_rows is None:
            clean_rows = [[] for _ in c]
            noisy_rows = [[] for _ in n]
        for k in range(len(c)):
            clean_rows[k].append(c[k])
            noisy_rows[k].append(n[k])
    return [benchmark_error_stats(np.concatenate(a), np.concatenate(b))
            for a, b in zip(clean_rows, noisy_rows)]


def calibrate_angle_sigma(model, params, ds: Dataset, target: float, post: qnn.PostprocConfig,
                          seed: int = 0, grid: Sequence[float] | None = None) -> float:
    """Angle noise level whose final-outcome error std is closest to ``target``."""
    grid = np.geomspace(1e-3, 1.0, 31) if grid is None else grid
    x = ds.features[: min(len(ds), 64)]
    clean = qnn.forward(model, params, x, None, post).outcomes[-1]
    best, best_gap = float(grid[0]), math.inf
    for s in grid:
        rng = np.random.default_rng(seed)
        errs = []
        for _ in range(8):
            t = perturb_angles(params, float(s), rng)
            errs.append(qnn.forward(model, t, x, None, post).outcomes[-1] - clean)
        gap = abs(float(np.std(np.stack(errs))) - target)
        if gap < best_gap:
            best, best_gap = float(s), gap
    return best


def ablate(modes: Sequence[str], model_cfg: qnn.ModelConfig, splits: Splits, noise_model: NoiseModel,
           cfg: TrainConfig) -> list[AblationRow]:
    """Train once per injection mode and evaluate all under the same exact noise.

    ``baseline`` trains without injection; its parameters are also the
    reference from which outcome statistics are benchmarked on the
    validation set.
    """
    if noise_model is None:
        raise ConfigError("ablation needs a noise model", "noise")
    bench = splits.val if len(splits.val) else splits.train
    model, theta0 = qnn.build_model(model_cfg, cfg.seed)
    base_cfg = replace(cfg, injection="none")
    base = train_loop(model, theta0, splits, noise_model, base_cfg)
    test = splits.test if len(splits.test) else splits.val
    rows = []
    stats = None
    for mode in modes:
        details: dict = {}
        if mode == "baseline":
            rep = base
        elif mode == "gate_insertion":
            rep = train_loop(model, theta0, splits, noise_model, replace(cfg, injection="gate_insertion"))
        elif mode == "outcome_perturb":
            if stats is None:
                stats = benchmark_block_stats(model, base.params, bench, noise_model, cfg.post, cfg.batch_size)
            details["error_stats"] = [s.to_dict() for s in stats]
            details["benchmark_split"] = "val" if len(splits.val) else "train"
            rep = train_loop(model, theta0, splits, noise_model, replace(cfg, injection="outcome_perturb"),
                             outcome_stats=stats)
        elif mode == "angle_perturb":
            if stats is None:
                stats = benchmark_block_stats(model, base.params, bench, noise_model, cfg.post, cfg.batch_size)
            target = float(np.mean(stats[-1].sigma_err))
            sigma = calibrate_angle_sigma(model, base.params, bench, target, cfg.post, cfg.seed)
            details.update(angle_sigma=sigma, target_sigma_err=target)
            rep = train_loop(model, theta0, splits, noise_model,
                             replace(cfg, injection="angle_perturb", angle_sigma=sigma))
        else:
            raise ConfigError(f"unknown ablation mode {mode!r}", "mode")
        ev = evaluate(model, rep.params, test, noise_model, cfg.post, batch_size=cfg.batch_size,
                      seed=cfg.seed, compile=cfg.compile)
        rows.append(AblationRow(mode, ev.accuracy, rep.final_val_accuracy, details))
    return rows


def save_params(path: str | Path, params: np.ndarray) -> None:
    """JSON list of repr floats: exact round trip, byte-stable output."""
    Path(path).write_text(json.dumps([float(v) for v in params]) + "\n")


def load_params(path: str | Path) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc), str(path)) from None
    if not isinstance(data, list) or not all(isinstance(v, (int, float)) for v in data):
        raise ConfigError("expected a JSON list of numbers", str(path))
    return np.array(data, dtype=float)
