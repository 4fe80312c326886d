"""Command-line entry point.

Subcommands: train, eval, verify-theorem, sweep, ablate, snr-report.
Exit codes: 0 success, 1 verification failure, 2 configuration error.
Every report is written both as an aligned text table and as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, metrics, postproc, qnn, theory
from .data import Splits, splits_from_manifest
from .errors import ConfigError
from .noise import NoiseModel, noise_model_from_dict
from .qcore import KrausChannel
from .train import (TrainConfig, ablate, evaluate, load_params, save_params, sweep,
                    train_config_from_dict, train_loop)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
RESIDUAL_TOL = 1e-10

log = logging.getLogger("qnat")


# ---------------------------------------------------------------------------
# helpers

def _read_json(path: str | None, what: str):
    if path is None:
        raise ConfigError("required", f"--{what}")
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(exc.strerror or str(exc), f"--{what} {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", f"--{what} {path}") from None


def _resolve_data(d: dict, base: Path) -> dict:
    """Copy of a data manifest with file paths made absolute."""
    out = dict(d)
    for key in ("train", "test", "train_images", "train_labels", "test_images", "test_labels"):
        if key in out and isinstance(out[key], str) and out[key] and not Path(out[key]).is_absolute():
            out[key] = str((base / out[key]).resolve())
    return out


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _emit(out: str | None, name: str, text: str, payload: dict) -> None:
    print(text)
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}.txt").write_text(text + "\n")
        (d / f"{name}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class _Run:
    """Resolved configs shared by most subcommands."""

    def __init__(self, model_d: dict, train_d: dict, data_d: dict, noise_d: dict | None, seed: int | None,
                 shots: int | None = None):
        self.model_d, self.train_d, self.data_d, self.noise_d = model_d, train_d, data_d, noise_d
        self.model_cfg = qnn.model_config_from_dict(model_d)
        self.train_cfg = train_config_from_dict(train_d)
        if seed is not None:
            self.train_cfg = replace(self.train_cfg, seed=seed)
        if shots is not None:
            self.train_cfg = replace(self.train_cfg, shots=shots)
        self.noise: NoiseModel | None = None if noise_d is None else noise_model_from_dict(noise_d)
        if self.noise is not None and self.noise.n_qubits < self.model_cfg.n_qubits:
            raise ConfigError(f"noise model covers {self.noise.n_qubits} qubits, model has "
                              f"{self.model_cfg.n_qubits}", "n_qubits")
        self.splits: Splits = splits_from_manifest(data_d, ".", self.train_cfg.seed
                                                   if "seed" not in data_d else None)

    @classmethod
    def from_args(cls, a, need_train: bool = True) -> "_Run":
        model_d = _read_json(a.model, "model")
        train_d = _read_json(a.train, "train") if (a.train or need_train) else {}
        data_path = a.data
        data_d = _read_json(data_path, "data")
        if not isinstance(data_d, dict):
            raise ConfigError("data manifest must be a JSON object", "--data")
        data_d = _resolve_data(data_d, Path(data_path).parent)
        noise_d = _read_json(a.noise, "noise") if getattr(a, "noise", None) else None
        return cls(model_d, train_d, data_d, noise_d, getattr(a, "seed", None),
                   getattr(a, "shots", None) if need_train else None)

    def manifest(self, artifacts: dict) -> dict:
        return {
            "version": __version__,
            "seed": self.train_cfg.seed,
            "model": self.model_cfg.to_dict(),
            "train": self.train_cfg.to_dict(),
            "data": self.data_d,
            "noise": None if self.noise is None else self.noise.to_dict(),
            "artifacts": artifacts,
        }


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(a) -> int:
    if a.replay:
        m = _read_json(a.replay, "replay")
        try:
            run = _Run(m["model"], m["train"], m["data"], m.get("noise"), None)
        except KeyError as exc:
            raise ConfigError("missing", f"manifest.{exc.args[0]}") from None
    else:
        run = _Run.from_args(a)
    if a.out is None:
        raise ConfigError("required", "--out")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model, theta = qnn.build_model(run.model_cfg, run.train_cfg.seed)
    rep = train_loop(model, theta, run.splits, run.noise, run.train_cfg)
    save_params(out / "params.json", rep.params)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = [[e["epoch"], e["train_loss"], e["train_accuracy"], e.get("val_loss"), e.get("val_accuracy")]
            for e in rep.epochs]
    text = table(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"], rows)
    text += f"\nparameters: {rep.n_params}  best epoch: {rep.best_epoch}"
    if rep.final_val_accuracy is not None:
        text += f"  val accuracy: {rep.final_val_accuracy:.6g}"
    (out / "report.txt").write_text(text + "\n")
    manifest = run.manifest({"params": "params.json", "metrics": "metrics.json", "report": "report.txt"})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(text)
    return EXIT_OK


def cmd_eval(a) -> int:
    run = _Run.from_args(a, need_train=False)
    model, _ = qnn.build_model(run.model_cfg, 0)
    params = load_params(a.params)
    if params.shape != (model.n_params,):
        raise ConfigError(f"file holds {params.size} parameters, model needs {model.n_params}", "--params")
    ds = getattr(run.splits, a.split)
    cfg = run.train_cfg
    clean = evaluate(model, params, ds, None, cfg.post, batch_size=cfg.batch_size, shots=a.shots, seed=cfg.seed)
    payload = {"split": a.split, "n_samples": len(ds), "accuracy": clean.accuracy, "loss": clean.loss}
    rows = [["noise-free", clean.accuracy, None]]
    if run.noise is not None:
        noisy = evaluate(model, params, ds, run.noise, cfg.post, batch_size=cfg.batch_size, shots=a.shots,
                         seed=cfg.seed, compile=cfg.compile)
        blocks = []
        for k, (c, n) in enumerate(zip(clean.outcomes, noisy.outcomes)):
            em = metrics.error_map(c, n)
            blocks.append({"block": k, **em.to_dict()})
        payload.update(noisy_accuracy=noisy.accuracy, noisy_loss=noisy.loss, blocks=blocks)
        rows.append(["noisy", noisy.accuracy, blocks[-1]["snr"]])
        text = table(["setting", "Acc.", "SNR"], rows)
        text += "\n\n" + table(["block", "SNR", "MSE"], [[b["block"], b["snr"], b["mse"]] for b in blocks])
    else:
        text = table(["setting", "Acc."], [r[:2] for r in rows])
    _emit(a.out, "eval", text, payload)
    return EXIT_OK


def _named_channels():
    return [
        ("identity", KrausChannel.identity()),
        ("depolarizing(0.1)", KrausChannel.depolarizing(0.1)),
        ("bit_flip(0.1)", KrausChannel.bit_flip(0.1)),
        ("amplitude_damping(0.3)", KrausChannel.amplitude_damping(0.3)),
    ]


def cmd_verify_theorem(a) -> int:
    if a.trials < 1:
        raise ConfigError("must be >= 1", "--trials")
    rho = theory.random_density(np.random.default_rng(a.seed))
    named = []
    for name, ch in _named_channels():
        lm = theory.linear_map(ch)
        named.append({"channel": name, "gamma": lm.gamma, "beta_x": lm.beta_x, "beta_y": lm.beta_y,
                      "offset": lm.offset, "unital": lm.unital,
                      "residual": theory.verify_linear_map(ch, rho)})
    trials = theory.verify_random(a.trials, a.seed)
    residuals = [t.residual for t in trials]
    worst = max(residuals + [r["residual"] for r in named])
    ok = worst < RESIDUAL_TOL
    payload = {"trials": a.trials, "seed": a.seed, "max_residual": worst, "tolerance": RESIDUAL_TOL,
               "passed": ok, "non_unital_trials": sum(not t.unital for t in trials),
               "named": named, "residuals": residuals}
    text = table(["channel", "gamma", "beta_x", "beta_y", "offset", "unital", "residual"],
                 [[r["channel"], r["gamma"], r["beta_x"], r["beta_y"], r["offset"], r["unital"], r["residual"]]
                  for r in named])
    text += (f"\n\nrandom trials: {a.trials}  non-unital: {payload['non_unital_trials']}"
             f"  max residual: {worst:.3e}  {'PASS' if ok else 'FAIL'}")
    _emit(a.out, "verify_theorem", text, payload)
    return EXIT_OK if ok else EXIT_FAIL


def _floats(s: str, what: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}", what) from None


def _levels(s: str) -> list[int | None]:
    out = []
    for v in s.split(","):
        v = v.strip()
        if not v:
            continue
        if v.lower() in ("none", "off", "0"):
            out.append(None)
            continue
        try:
            out.append(int(v))
        except ValueError:
            raise ConfigError(f"expected integers or 'none', got {v!r}", "--levels") from None
    return out


def cmd_sweep(a) -> int:
    run = _Run.from_args(a)
    Ts = _floats(a.T, "--T")
    levels = _levels(a.levels)
    if not Ts or not levels:
        raise ConfigError("empty grid", "--T/--levels")
    cells, best = sweep(run.model_cfg, run.splits, run.noise, run.train_cfg, Ts, levels, jobs=a.jobs)
    rows, payload_cells = [], []
    for i, c in enumerate(cells):
        mark = "*" if i == best else ""
        rows.append([c.noise_factor, c.quant_levels, c.val_loss, c.val_accuracy, c.error or "", mark])
        payload_cells.append({"noise_factor": c.noise_factor, "quant_levels": c.quant_levels,
                              "val_loss": c.val_loss, "val_accuracy": c.val_accuracy, "error": c.error})
    text = table(["T", "levels", "val_loss", "val_acc", "error", "best"], rows)
    payload = {"cells": payload_cells, "best": best}
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        for i, c in enumerate(cells):
            if c.params is not None:
                save_params(Path(a.out) / f"params_T{c.noise_factor:g}_L{c.quant_levels}.json", c.params)
        manifest = run.manifest({"report": "sweep.json"})
        manifest["grid"] = {"T": Ts, "levels": levels}
        (Path(a.out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _emit(a.out, "sweep", text, payload)
    return EXIT_OK if best is not None else EXIT_FAIL


ABLATION_MODES = ("baseline", "gate_insertion", "outcome_perturb", "angle_perturb")


def cmd_ablate(a) -> int:
    run = _Run.from_args(a)
    modes = [m.strip() for m in a.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad or not modes:
        raise ConfigError(f"modes must come from {ABLATION_MODES}", "--modes")
    if run.noise is None:
        raise ConfigError("required", "--noise")
    rows = ablate(modes, run.model_cfg, run.splits, run.noise, run.train_cfg)
    text = table(["mode", "noisy_acc", "val_acc"], [[r.mode, r.accuracy, r.val_accuracy] for r in rows])
    payload = {"rows": [{"mode": r.mode, "accuracy": r.accuracy, "val_accuracy": r.val_accuracy, **r.details}
                        for r in rows]}
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        (Path(a.out) / "manifest.json").write_text(
            json.dumps({**run.manifest({"report": "ablate.json"}), "modes": modes,
                        "outcome_stats_source": "validation set"}, indent=2, sort_keys=True) + "\n")
    _emit(a.out, "ablate", text, payload)
    return EXIT_OK


def cmd_snr_report(a) -> int:
    run = _Run.from_args(a, need_train=False)
    if run.noise is None:
        raise ConfigError("required", "--noise")
    model, _ = qnn.build_model(run.model_cfg, 0)
    params = load_params(a.params)
    if params.shape != (model.n_params,):
        raise ConfigError(f"file holds {params.size} parameters, model needs {model.n_params}", "--params")
    ds = getattr(run.splits, a.split)
    cfg = run.train_cfg
    raw = qnn.PostprocConfig()
    clean = evaluate(model, params, ds, None, raw, batch_size=len(ds))
    noisy = evaluate(model, params, ds, run.noise, raw, batch_size=len(ds), compile=cfg.compile)
    q = cfg.quant or postproc.QuantConfig()
    rows, blocks = [], []
    out = Path(a.out) if a.out else None
    for k, (c, n) in enumerate(zip(clean.outcomes, noisy.outcomes)):
        base = metrics.error_map(c, n)
        zc, _ = postproc.normalize_batch(c)
        zn, _ = postproc.normalize_batch(n)
        normed = metrics.error_map(zc, zn)
        quant = postproc.denoise_report(zc, zn, q)
        entry = {"block": k, "raw": base.to_dict(), "normalized": normed.to_dict(),
                 "quantized": quant.after.to_dict(),
                 "per_qubit_snr_raw": metrics.per_qubit_snr(c, n).tolist(),
                 "per_qubit_snr_normalized": metrics.per_qubit_snr(zc, zn).tolist()}
        blocks.append(entry)
        rows.append([k, base.snr, base.mse, normed.snr, normed.mse, quant.snr_after, quant.mse_after])
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            for tag, em in (("raw", base), ("normalized", normed), ("quantized", quant.after)):
                np.savetxt(out / f"error_map_block{k}_{tag}.csv", em.diff, delimiter=",", fmt="%.10g")
    text = table(["block", "SNR", "MSE", "SNR+norm", "MSE+norm", "SNR+quant", "MSE+quant"], rows)
    _emit(a.out, "snr_report", text, {"split": a.split, "quant": {"levels": q.levels, "p_min": q.p_min,
                                                                  "p_max": q.p_max}, "blocks": blocks})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnat", description="Noise-aware training of quantum neural networks.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, params=False, split=False):
        sp.add_argument("--model", help="model config JSON")
        sp.add_argument("--noise", help="noise model JSON")
        sp.add_argument("--train", help="training config JSON")
        sp.add_argument("--data", help="dataset manifest JSON")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the training seed")
        sp.add_argument("--shots", type=int, help="measure with this many shots")
        if params:
            sp.add_argument("--params", required=True, help="parameter file from train")
        if split:
            sp.add_argument("--split", choices=("train", "val", "test"), default="test")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--replay", help="rerun from a run manifest")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate saved parameters")
    common(sp, params=True, split=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify-theorem", help="check the linear noise map on random channels")
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify_theorem)

    sp = sub.add_parser("sweep", help="grid over noise factor and quantization levels")
    common(sp)
    sp.add_argument("--T", default="0.1,0.5,1,1.5", help="comma-separated noise factors")
    sp.add_argument("--levels", default="3,4,5,6", help="comma-separated levels ('none' disables)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="compare noise injection methods")
    common(sp)
    sp.add_argument("--modes", default=",".join(ABLATION_MODES))
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("snr-report", help="clean vs noisy outcome metrics per block")
    common(sp, params=True, split=True)
    sp.set_defaults(func=cmd_snr_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, format="%(message)s")
    try:
        return a.func(a)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
