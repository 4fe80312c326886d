import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qnat.errors import ConfigError
from qnat.noise import NoiseModel, PauliErrorSpec, pauli_channel
from qnat.postproc import normalize_batch
from qnat.qcore import PAULI, KrausChannel
from qnat.qnn import ModelConfig, build_model
from qnat.theory import (
    beta_of, characterize_model_noise, gamma_of, linear_map, omega, random_channel, random_density,
    verify_linear_map, verify_random,
)

Z = PAULI["Z"]
probs = st.floats(0, 1)


class TestOmega:
    def test_identity(self):
        np.testing.assert_allclose(omega(KrausChannel.identity()), Z)

    @pytest.mark.parametrize("p", [0.0, 0.1, 0.5])
    def test_bit_flip(self, p):
        np.testing.assert_allclose(omega(KrausChannel.bit_flip(p)), (1 - 2 * p) * Z, atol=1e-15)

    @pytest.mark.parametrize("g", [0.0, 0.3, 1.0])
    def test_amplitude_damping(self, g):
        np.testing.assert_allclose(omega(KrausChannel.amplitude_damping(g)), np.diag([1, 2 * g - 1]), atol=1e-15)

    def test_two_qubit_rejected(self):
        with pytest.raises(ValueError):
            omega(KrausChannel.identity(2))


class TestGammaBeta:
    def test_identity(self):
        assert gamma_of(KrausChannel.identity()) == 1
        assert beta_of(KrausChannel.identity(), random_density(np.random.default_rng(0))) == 0

    @pytest.mark.parametrize("p", [0.0, 0.05, 0.3, 1.0])
    def test_depolarizing(self, p):
        assert abs(gamma_of(KrausChannel.depolarizing(p)) - (1 - p)) < 1e-12

    def test_bit_flip_point_one(self):
        assert gamma_of(KrausChannel.bit_flip(0.1)) == pytest.approx(0.8, abs=1e-12)

    @pytest.mark.parametrize("g", [0.1, 0.5, 0.9])
    def test_amplitude_damping(self, g, rng):
        ch = KrausChannel.amplitude_damping(g)
        assert abs(gamma_of(ch) - (1 - g)) < 1e-12
        assert abs(beta_of(ch, random_density(rng)) - g) < 1e-12

    @settings(max_examples=50)
    @given(probs, probs, probs, st.integers(0, 2**32 - 1))
    def test_pauli_channels_have_zero_beta(self, a, b, c, seed):
        s = a + b + c
        if s > 1:
            a, b, c = a / s, b / s, c / s
        ch = pauli_channel(PauliErrorSpec(a, b, c))
        assert abs(np.trace(omega(ch))) < 1e-12
        assert abs(beta_of(ch, random_density(np.random.default_rng(seed)))) < 1e-12

    def test_linear_map_fields(self, rng):
        ch = random_channel(rng)
        m = linear_map(ch)
        rho = random_density(rng)
        assert m.gamma == gamma_of(ch)
        assert m.beta(rho) == pytest.approx(beta_of(ch, rho), abs=1e-14)
        assert m.unital == ch.is_unital()


class TestVerify:
    def test_identity_residual(self, rng):
        assert verify_linear_map(KrausChannel.identity(), random_density(rng)) == 0

    def test_amplitude_damping_on_one(self):
        g = 0.35
        rho = np.diag([0.0, 1.0]).astype(complex)
        ch = KrausChannel.amplitude_damping(g)
        assert verify_linear_map(ch, rho) < 1e-15
        assert (1 - g) * (-1) + g == pytest.approx(2 * g - 1)

    def test_random_trials(self):
        res = verify_random(200, seed=3)
        assert max(r.residual for r in res) < 1e-10

    def test_reproducible(self):
        a = [r.residual for r in verify_random(20, 8)]
        b = [r.residual for r in verify_random(20, 8)]
        assert a == b

    def test_zero_trials(self):
        with pytest.raises(ValueError):
            verify_random(0, 0)

    def test_random_objects_valid(self, rng):
        for _ in range(20):
            ch = random_channel(rng)
            total = sum(o.conj().T @ o for o in ch.operators)
            np.testing.assert_allclose(total, np.eye(2), atol=1e-12)
            rho = random_density(rng)
            assert abs(np.trace(rho) - 1) < 1e-12 and np.linalg.eigvalsh(rho).min() > -1e-12


class TestNormalizationCancels:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(-0.5, 0.5))
    def test_linear_map_then_normalize(self, seed, gamma, beta):
        a = np.random.default_rng(seed).uniform(-1, 1, (32, 4))
        clean, _ = normalize_batch(a, epsilon=0.0)
        noisy, _ = normalize_batch(gamma * a + beta, epsilon=0.0)
        np.testing.assert_allclose(noisy, clean, atol=1e-9)


class TestModelFit:
    def _setup(self, rng):
        model, params = build_model(ModelConfig(4, 2, "U3_CU3"), seed=0)
        return model, params, rng.uniform(0, np.pi, (24, 16))

    def test_noiseless(self, rng):
        model, params, x = self._setup(rng)
        fit = characterize_model_noise(model, params, x, NoiseModel.uniform(4, 0.0))
        for g, b in zip(fit.gamma, fit.beta):
            np.testing.assert_allclose(g, 1, atol=1e-9)
            np.testing.assert_allclose(b, 0, atol=1e-9)

    def test_depolarizing_after_last_layer(self, rng):
        model, params, x = self._setup(rng)
        fit = characterize_model_noise(model, params, x, KrausChannel.depolarizing(0.2))
        for g, b in zip(fit.gamma, fit.beta):
            np.testing.assert_allclose(g, 0.8, atol=1e-9)
            np.testing.assert_allclose(b, 0, atol=1e-9)

    def test_gamma_independent_of_batch(self, rng):
        model, params, x = self._setup(rng)
        ch = KrausChannel.amplitude_damping(0.2)
        a = characterize_model_noise(model, params, x[:12], ch)
        b = characterize_model_noise(model, params, x[12:], ch)
        for ga, gb in zip(a.gamma, b.gamma):
            np.testing.assert_allclose(ga, gb, atol=1e-6)

    def test_small_noise_limit(self, rng):
        model, params, x = self._setup(rng)
        devs = []
        for p in (0.02, 0.005, 0.001):
            fit = characterize_model_noise(model, params, x, NoiseModel.uniform(4, p))
            devs.append(max(np.max(np.abs(fit.gamma[0] - 1)), np.max(np.abs(fit.beta[0]))))
        assert devs[0] > devs[1] > devs[2] and devs[2] < 0.05

    def test_cap(self, rng, monkeypatch):
        model, params, x = self._setup(rng)
        monkeypatch.setenv("QNAT_ORACLE_QUBIT_CAP", "3")
        with pytest.raises(ConfigError):
            characterize_model_noise(model, params, x, KrausChannel.depolarizing(0.1))
