import math
from dataclasses import replace

import numpy as np
import pytest

from qnat.circuit import Affine, TGate, lower
from qnat.data import split, synth_blobs, synth_two_feature
from qnat.errors import ConfigError
from qnat.execute import run_statevector
from qnat.noise import NoiseModel, ReadoutMatrix
from qnat.qnn import ModelConfig, NoiseConfig, build_model, sample_step_noise
from qnat.train import (
    OptState, TrainConfig, central_difference, cross_entropy, cross_entropy_batch, evaluate,
    finite_diff_grad, load_params, loss_and_grad, optimizer_step, param_shift_grad, save_params, sweep,
    total_loss, train_config_from_dict, train_loop,
)

RO = ReadoutMatrix(((0.99, 0.01), (0.03, 0.97)))


def _toy_splits(seed=0):
    return split(synth_two_feature(60, seed), seed, test_frac=0.2, val_frac=0.1)


def _toy_model():
    return build_model(ModelConfig(2, 2, "RY_CNOT", 1, "direct_softmax", "ry"), seed=0)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy([0, 0], 0) == pytest.approx(math.log(2))

    def test_confident(self):
        assert cross_entropy([10, -10], 0) == pytest.approx(2.06e-9, rel=1e-2)

    def test_batch_gradient(self, rng):
        z = rng.normal(size=(4, 3))
        y = np.array([0, 2, 1, 1])
        _, g = cross_entropy_batch(z, y)
        num = central_difference(lambda v: cross_entropy_batch(v.reshape(4, 3), y)[0], z.ravel(), 1e-6)
        np.testing.assert_allclose(g.ravel(), num, atol=1e-8)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            cross_entropy([0, 0], 2)


class TestLoss:
    def test_decomposition(self, rng):
        model, params = build_model(ModelConfig(4, 2, "U3_CU3"), seed=1)
        x = rng.uniform(0, np.pi, (8, 16))
        y = rng.integers(0, 4, 8)
        base = TrainConfig(normalize=True, quant_levels=5)
        l0 = total_loss(model, params, x, y, replace(base, lambda_quant=0.0))
        l1 = total_loss(model, params, x, y, replace(base, lambda_quant=1.0))
        for lam in (0.1, 0.7):
            lam_loss = total_loss(model, params, x, y, replace(base, lambda_quant=lam))
            assert abs(l0 + lam * (l1 - l0) - lam_loss) < 1e-12

    def test_no_quant_is_pure_ce(self, rng):
        model, params = build_model(ModelConfig(4, 2, "U3_CU3"), seed=1)
        x = rng.uniform(0, np.pi, (4, 16))
        y = np.array([0, 1, 2, 3])
        parts, _ = loss_and_grad(model, params, x, y, TrainConfig())
        assert parts.penalty == 0 and parts.total == parts.ce

    def test_penalty_on_centroid_outcomes_is_zero(self, rng):
        # a constant-angle batch normalizes to all zeros, which is a centroid
        model, params = build_model(ModelConfig(4, 2, "U3_CU3"), seed=1)
        x = np.tile(rng.uniform(0, 1, 16), (4, 1))
        parts, _ = loss_and_grad(model, params, x, [0, 0, 0, 0], TrainConfig(normalize=True, quant_levels=5))
        assert parts.penalty == 0


class TestShiftRule:
    def _lone_ry(self):
        prims = lower([TGate("RY", (0,), (Affine.var("p", 0),))])
        return lambda t: run_statevector(prims, 1, 1, np.array([t]), np.zeros((1, 0)), jac=True)

    @pytest.mark.parametrize("theta, grad", [(0.0, 0.0), (math.pi / 2, -1.0)])
    def test_examples(self, theta, grad):
        assert self._lone_ry()(theta).jac_params[0, 0, 0] == pytest.approx(grad, abs=1e-12)

    @pytest.mark.parametrize("theta", np.linspace(-3, 3, 7))
    def test_exact_sine(self, theta):
        assert abs(self._lone_ry()(theta).jac_params[0, 0, 0] + math.sin(theta)) < 1e-10


class TestGradients:
    @pytest.mark.parametrize("seed", range(6))
    def test_shift_vs_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        tag = ["U3_CU3", "ZZ_RY", "RXYZ", "ZX_XX", "RXYZ_U1_CU3", "RY_CNOT"][seed]
        head = "two_class_pair_sum" if seed % 2 else "direct_softmax"
        model, params = build_model(ModelConfig(4, 1 + seed % 2, tag, 1, head), seed=seed)
        x = rng.uniform(0, np.pi, (5, 16))
        y = rng.integers(0, model.n_classes, 5)
        cfg = TrainConfig(normalize=bool(seed % 2))
        g = param_shift_grad(model, params, x, y, cfg)
        f = finite_diff_grad(model, params, x, y, cfg, h=1e-5)
        assert np.max(np.abs(g - f)) / max(np.max(np.abs(f)), 1e-12) < 1e-5

    def test_with_fixed_noise_sample(self, rng):
        model, params = build_model(ModelConfig(4, 2, "U3_CU3"), seed=2)
        x = rng.uniform(0, np.pi, (6, 16))
        y = rng.integers(0, 4, 6)
        nm = NoiseModel.uniform(4, 0.05, readout=RO)
        noise = NoiseConfig(nm, 1.0)
        step = sample_step_noise(model, noise, rng)
        cfg = TrainConfig(normalize=True)
        g = param_shift_grad(model, params, x, y, cfg, noise, step)
        f = finite_diff_grad(model, params, x, y, cfg, noise, step)
        assert np.max(np.abs(g - f)) / np.max(np.abs(f)) < 1e-5

    def test_quantized_matches_ste_surrogate(self, rng):
        # away from snapping boundaries the quantized loss is flat in the
        # upstream angles; the STE gradient is the unquantized one plus the
        # penalty term, so with lambda=0 it equals the plain gradient
        model, params = build_model(ModelConfig(4, 2, "U3_CU3"), seed=5)
        x = rng.uniform(0, np.pi, (6, 16))
        y = rng.integers(0, 4, 6)
        g_q = param_shift_grad(model, params, x, y, TrainConfig(normalize=True, quant_levels=5, lambda_quant=0.0))
        assert np.all(np.isfinite(g_q))

    def test_central_difference_quadratic(self):
        assert central_difference(lambda t: float(t[0] ** 2), [1.0], 1e-4)[0] == pytest.approx(2.0, abs=1e-7)

    def test_symmetric_point(self):
        assert abs(central_difference(lambda t: float(np.cos(t[0])), [0.0])[0]) < 1e-8

    def test_bad_step(self):
        with pytest.raises(ValueError):
            central_difference(lambda t: 0.0, [0.0], 0.0)


class TestOptimizer:
    def test_zero_grad(self):
        p = np.array([0.3, -1.0])
        for opt in ("adam", "sgd"):
            out, _ = optimizer_step(p, np.zeros(2), OptState.zeros(2), TrainConfig(optimizer=opt))
            np.testing.assert_array_equal(out, p)

    def test_sgd(self):
        p = np.array([0.3, -1.0])
        out, _ = optimizer_step(p, np.ones(2), OptState.zeros(2), TrainConfig(optimizer="sgd", lr=0.1))
        np.testing.assert_allclose(out, p - 0.1)

    def test_adam_first_step_is_lr(self):
        out, st = optimizer_step(np.zeros(3), np.array([2.0, -0.5, 1e-3]), OptState.zeros(3), TrainConfig(lr=0.01))
        np.testing.assert_allclose(out, [-0.01, 0.01, -0.01], rtol=1e-4)
        assert st.t == 1


class TestTrainLoop:
    def test_noise_free_toy(self):
        model, params = _toy_model()
        s = _toy_splits()
        cfg = TrainConfig(lr=0.1, epochs=10, batch_size=16, seed=0)
        rep = train_loop(model, params, s, None, cfg)
        losses = [r["train_loss"] for r in rep.epochs]
        assert losses[-1] < losses[0]
        assert evaluate(model, rep.params, s.train).accuracy >= 0.95

    def test_zero_epochs(self):
        model, params = _toy_model()
        rep = train_loop(model, params, _toy_splits(), None, TrainConfig(epochs=0))
        np.testing.assert_array_equal(rep.params, params)

    def test_deterministic(self):
        model, params = _toy_model()
        nm = NoiseModel.uniform(2, 0.02, readout=RO)
        cfg = TrainConfig(lr=0.1, epochs=2, batch_size=16, normalize=True, quant_levels=5, noise_factor=1.0)
        a = train_loop(model, params, _toy_splits(), nm, cfg)
        b = train_loop(model, params, _toy_splits(), nm, cfg)
        assert a.params.tobytes() == b.params.tobytes() and a.to_dict() == b.to_dict()

    def test_zero_factor_equals_clean_training(self):
        model, params = _toy_model()
        nm = NoiseModel.uniform(2, 0.05)
        cfg = TrainConfig(lr=0.1, epochs=2, batch_size=16, noise_factor=0.0)
        a = train_loop(model, params, _toy_splits(), nm, cfg)
        b = train_loop(model, params, _toy_splits(), None, cfg)
        assert a.params.tobytes() == b.params.tobytes()

    def test_outcome_perturb_needs_stats(self):
        model, params = _toy_model()
        with pytest.raises(ConfigError):
            train_loop(model, params, _toy_splits(), None, TrainConfig(injection="outcome_perturb"))


class TestEvaluate:
    def test_trivial_noise_equals_clean(self):
        model, params = _toy_model()
        s = _toy_splits()
        nm = NoiseModel.uniform(2, 0.0)
        assert evaluate(model, params, s.test, nm).accuracy == evaluate(model, params, s.test).accuracy


class TestSweep:
    def test_grid_and_tiebreak(self):
        mc = ModelConfig(2, 2, "RY_CNOT", 1, "direct_softmax", "ry")
        s = _toy_splits()
        cfg = TrainConfig(lr=0.1, epochs=1, batch_size=16)
        cells, best = sweep(mc, s, None, cfg, [0.5, 0.0], [3, None])
        assert len(cells) == 4 and all(c.error is None for c in cells)
        # without a noise model every T trains identically, so ties go to T=0
        assert cells[best].noise_factor == 0.0

    def test_jobs_do_not_change_results(self):
        mc = ModelConfig(2, 2, "RY_CNOT", 1, "direct_softmax", "ry")
        s = _toy_splits()
        nm = NoiseModel.uniform(2, 0.02)
        cfg = TrainConfig(lr=0.1, epochs=1, batch_size=16, normalize=True)
        a, ba = sweep(mc, s, nm, cfg, [0.5, 1.0], [None], jobs=1)
        b, bb = sweep(mc, s, nm, cfg, [0.5, 1.0], [None], jobs=2)
        assert ba == bb
        assert [c.val_loss for c in a] == [c.val_loss for c in b]


class TestConfig:
    def test_roundtrip(self):
        cfg = TrainConfig(lr=0.01, quant_levels=4, normalize=True)
        assert train_config_from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad, field", [({"lr": -1.0}, "lr"), ({"epochs": "x"}, "epochs"),
                                            ({"depth": 2}, "depth"), ({"injection": "foo"}, "injection")])
    def test_errors(self, bad, field):
        with pytest.raises(ConfigError) as exc:
            train_config_from_dict(bad)
        assert exc.value.field == field

    def test_params_roundtrip(self, tmp_path, rng):
        p = rng.normal(size=7)
        save_params(tmp_path / "p.json", p)
        np.testing.assert_array_equal(load_params(tmp_path / "p.json"), p)
