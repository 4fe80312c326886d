import numpy as np
import pytest

from qnat.errors import ConfigError
from qnat.noise import NoiseModel, ReadoutMatrix
from qnat.postproc import QuantConfig
from qnat.qcore import GateOp, StateVector, apply_gate, expectation_z, zero_state
from qnat.qnn import (
    DESIGN_SPACES, ENCODER_PRESETS, ModelConfig, NoiseConfig, PostprocConfig, build_model, encode,
    forward, head_logits, model_config_from_dict,
)
from qnat.circuit import compile_to_basis
from qnat.execute import run_statevector


def _model(**kw):
    cfg = dict(n_qubits=4, n_blocks=2, design_space="U3_CU3", encoder="img16")
    cfg.update(kw)
    return build_model(ModelConfig(**cfg), seed=3)


def _reference_forward(model, theta, x):
    """Gate-by-gate oracle through the public single-state API, no postproc."""
    n = model.n_qubits
    rows = []
    for sample in x:
        inputs = sample
        for block in model.blocks:
            psi = zero_state(n)
            for g in encode(block, inputs):
                psi = apply_gate(psi, g)
            for layer in block.layers:
                for tg in layer.gates:
                    angles = tuple(float(a.evaluate(theta, None)) for a in tg.angles)
                    psi = apply_gate(psi, GateOp(tg.kind, tg.qubits, angles))
            inputs = np.array([expectation_z(psi, q) for q in range(n)])
        rows.append(inputs)
    return np.array(rows)


class TestBuild:
    def test_u3_cu3_count(self):
        spec, params = build_model(ModelConfig(4, 1, "U3_CU3"))
        assert spec.n_params == 24 and params.shape == (24,)

    def test_zero_blocks(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(4, 0))

    def test_img16_pattern(self):
        spec, _ = _model()
        enc = spec.blocks[0].encoder
        assert len(enc) == 16
        assert [k for k, _, _ in enc] == ["RY"] * 4 + ["RX"] * 4 + ["RZ"] * 4 + ["RY"] * 4
        assert [q for _, q, _ in enc] == list(range(4)) * 4

    @pytest.mark.parametrize("tag", DESIGN_SPACES)
    def test_index_map_is_bijection(self, tag):
        spec, _ = build_model(ModelConfig(4, 2, tag, layers_per_block=2))
        assert sorted(set(spec.param_index.values())) == list(range(spec.n_params))

    def test_params_in_range(self):
        _, params = _model()
        assert np.all((params >= 0) & (params < 2 * np.pi))

    def test_seeded(self):
        assert np.array_equal(_model()[1], _model()[1])

    @pytest.mark.parametrize("bad, field", [
        ({"n_qubits": 4, "design_space": "NOPE"}, "design_space"),
        ({"n_qubits": 2, "head": "two_class_pair_sum", "encoder": "ry"}, "head"),
        ({"n_qubits": 4, "encoder": "unknown"}, "encoder"),
        ({"n_qubits": 4, "encoder": "img16", "n_features": 3}, "n_features"),
    ])
    def test_config_errors(self, bad, field):
        with pytest.raises(ConfigError) as exc:
            build_model(model_config_from_dict(bad))
        assert exc.value.field == field

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            model_config_from_dict({"n_qubits": 4, "depth": 3})

    def test_config_roundtrip(self):
        cfg = ModelConfig(4, 3, "ZZ_RY", 2, "two_class_pair_sum", "img16")
        assert model_config_from_dict(cfg.to_dict()) == cfg

    def test_presets(self):
        assert len(ENCODER_PRESETS["img36"]) == 36
        assert len(ENCODER_PRESETS["vowel10"]) == 10


class TestEncode:
    def test_zero_features_identity(self):
        spec, _ = _model()
        psi = zero_state(4)
        for g in encode(spec.blocks[0], np.zeros(16)):
            psi = apply_gate(psi, g)
        np.testing.assert_allclose(psi.amplitudes, zero_state(4).amplitudes, atol=1e-15)

    def test_pi_flips(self):
        spec, _ = _model(encoder="ry")
        x = np.zeros(4)
        x[2] = np.pi
        psi = zero_state(4)
        for g in encode(spec.blocks[0], x):
            psi = apply_gate(psi, g)
        assert expectation_z(psi, 2) == pytest.approx(-1)
        assert expectation_z(psi, 0) == pytest.approx(1)

    def test_order(self):
        spec, _ = _model()
        gates = encode(spec.blocks[0], np.arange(16) / 10)
        assert [g.kind for g in gates[::4]] == ["RY", "RX", "RZ", "RY"]
        assert gates[5].params == (0.5,)


class TestHeads:
    def test_pair_sum(self):
        np.testing.assert_allclose(head_logits([0.1, 0.2, 0.3, 0.4], "two_class_pair_sum"), [0.3, 0.7])

    def test_zero(self):
        assert not head_logits(np.zeros(4), "two_class_pair_sum").any()

    def test_direct(self):
        y = np.linspace(-1, 1, 10)
        np.testing.assert_array_equal(head_logits(y, "direct_softmax"), y)


class TestForward:
    def test_identity_params(self):
        spec, params = build_model(ModelConfig(4, 1, "RY_CNOT", encoder="ry"))
        out = forward(spec, np.zeros_like(params), np.zeros((2, 4)))
        np.testing.assert_allclose(out.logits, np.ones((2, 4)), atol=1e-15)

    @pytest.mark.parametrize("tag", DESIGN_SPACES)
    def test_matches_gate_by_gate_oracle(self, tag, rng):
        spec, params = build_model(ModelConfig(4, 2, tag, encoder="img16"), seed=1)
        x = rng.uniform(0, np.pi, (3, 16))
        out = forward(spec, params, x)
        np.testing.assert_allclose(out.outcomes[-1], _reference_forward(spec, params, x), atol=1e-10)

    def test_noise_free_model_equals_clean(self, rng):
        spec, params = _model()
        x = rng.uniform(0, 1, (5, 16))
        nm = NoiseModel.uniform(4, 0.0)
        clean = forward(spec, params, x).logits
        for noise in (NoiseConfig(nm, exact=True), NoiseConfig(nm)):
            np.testing.assert_array_equal(forward(spec, params, x, noise, rng=rng).logits, clean)

    def test_deterministic(self, rng):
        spec, params = _model()
        x = rng.uniform(0, 1, (4, 16))
        a = forward(spec, params, x).logits
        b = forward(spec, params, x).logits
        assert a.tobytes() == b.tobytes()

    def test_compiled_equivalent(self, rng):
        spec, params = build_model(ModelConfig(4, 2, "RXYZ_U1_CU3"), seed=4)
        x = rng.uniform(0, 1, (3, 16))
        for k in range(2):
            circ = compile_to_basis(spec.blocks[k].template())
            from qnat.circuit import lower
            a = run_statevector(lower(circ), 4, spec.n_params, params, x).outcomes
            b = run_statevector(spec.prims(k), 4, spec.n_params, params, x).outcomes
            np.testing.assert_allclose(a, b, atol=1e-8)

    def test_inter_block_sensitivity(self, rng):
        spec, params = _model()
        x = rng.uniform(0, 1, (4, 16))
        base = forward(spec, params, x)
        y = base.next_inputs[0].copy()
        y[0, 1] += 0.3
        br = run_statevector(spec.prims(1), 4, spec.n_params, params, y)
        assert not np.allclose(br.outcomes[0], base.outcomes[1][0])
        np.testing.assert_allclose(br.outcomes[1:], base.outcomes[1][1:], atol=1e-14)

    def test_postproc_applied_only_to_non_final(self, rng):
        spec, params = _model(n_blocks=3)
        x = rng.uniform(0, 1, (8, 16))
        out = forward(spec, params, x, post=PostprocConfig(True, QuantConfig()))
        assert len(out.next_inputs) == 2
        for z in out.next_inputs:
            assert np.all(np.isin(z, QuantConfig().centroids()))
        assert out.normalized[-1] is None

    def test_exact_noise_contracts(self, rng):
        spec, params = _model()
        x = rng.uniform(0, 1, (4, 16))
        clean = forward(spec, params, x)
        noisy = forward(spec, params, x, NoiseConfig(NoiseModel.uniform(4, 0.02), exact=True))
        assert np.all(np.abs(noisy.outcomes[0]) <= np.abs(clean.outcomes[0]) + 1e-12)

    def test_readout_only(self, rng):
        spec, params = _model(n_blocks=1)
        x = rng.uniform(0, 1, (4, 16))
        ro = ReadoutMatrix(((0.99, 0.01), (0.03, 0.97)))
        nm = NoiseModel(4, {}, (ro,) * 4)
        noisy = forward(spec, params, x, NoiseConfig(nm, exact=True)).outcomes[0]
        clean = forward(spec, params, x).outcomes[0]
        np.testing.assert_allclose(noisy, 0.96 * clean + 0.02, atol=1e-14)

    def test_trajectory_average_above_cap(self, rng, monkeypatch):
        spec, params = _model(n_blocks=1)
        x = rng.uniform(0, 1, (2, 16))
        nm = NoiseModel.uniform(4, 0.01)
        exact = forward(spec, params, x, NoiseConfig(nm, exact=True)).outcomes[0]
        monkeypatch.setenv("QNAT_ORACLE_QUBIT_CAP", "2")
        approx = forward(spec, params, x, NoiseConfig(nm, exact=True, trajectories=400), rng=rng).outcomes[0]
        assert np.max(np.abs(approx - exact)) < 0.1

    def test_wrong_shapes(self):
        spec, params = _model()
        with pytest.raises(ValueError):
            forward(spec, params[:-1], np.zeros((1, 16)))
        with pytest.raises(ValueError):
            forward(spec, params, np.zeros((1, 15)))

    def test_sampled_noise_needs_rng(self):
        spec, params = _model()
        with pytest.raises(ValueError):
            forward(spec, params, np.zeros((1, 16)), NoiseConfig(NoiseModel.uniform(4, 0.1)))

    def test_shots(self, rng):
        spec, params = _model(n_blocks=1)
        out = forward(spec, params, np.zeros((2, 16)), shots=8192, rng=rng).outcomes[0]
        clean = forward(spec, params, np.zeros((2, 16))).outcomes[0]
        assert np.max(np.abs(out - clean)) < 0.05
