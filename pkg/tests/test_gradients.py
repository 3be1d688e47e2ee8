"""Analytic gradients checked against central finite differences.

Every parameter tensor of the encoder is exercised at least once; the
component nonlinearities (GELU, layer norm) also get standalone
difference-quotient oracles so a failure localizes.
"""

import numpy as np

from titlerec import encoder as enc

from conftest import (
    central_difference,
    grads_agree,
    random_sequence,
    random_targets,
    scalar_loss,
)


class TestGeluOracle:
    def test_matches_difference_quotient(self):
        xs = np.linspace(-4.0, 4.0, 41)
        h = 1e-5
        numeric = (enc.gelu(xs + h) - enc.gelu(xs - h)) / (2 * h)
        assert np.allclose(enc.gelu_grad(xs), numeric, atol=1e-8)

    def test_known_values(self):
        assert enc.gelu(np.array([0.0]))[0] == 0.0
        # gelu(x) -> x for large x, -> 0 for very negative x
        assert abs(enc.gelu(np.array([10.0]))[0] - 10.0) < 1e-12
        assert abs(enc.gelu(np.array([-10.0]))[0]) < 1e-12
        assert abs(enc.gelu_grad(np.array([0.0]))[0] - 0.5) < 1e-12


class TestLayerNormOracle:
    def test_backward_matches_difference_quotient(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 6))
        gain = rng.normal(1.0, 0.2, size=6)
        bias = rng.normal(0.0, 0.2, size=6)
        weight = rng.normal(size=(4, 6))
        eps = 1e-5

        def scalar(x_val, gain_val, bias_val):
            out, _, _ = enc.layer_norm(x_val, gain_val, bias_val, eps)
            return float(np.sum(weight * out))

        _, x_hat, inv = enc.layer_norm(x, gain, bias, eps)
        d_x, d_gain, d_bias = enc.layer_norm_backward(weight, x_hat, inv, gain)

        h = 1e-6
        for arr, grad, label in ((x, d_x, "x"), (gain, d_gain, "gain"), (bias, d_bias, "bias")):
            flat = arr.reshape(-1)
            grad_flat = grad.reshape(-1)
            for index in range(flat.size):
                original = flat[index]
                flat[index] = original + h
                up = scalar(x, gain, bias)
                flat[index] = original - h
                down = scalar(x, gain, bias)
                flat[index] = original
                numeric = (up - down) / (2 * h)
                assert grads_agree(grad_flat[index], numeric, rel_tol=1e-5), (label, index)

    def test_normalized_rows(self):
        rng = np.random.default_rng(5)
        x = rng.normal(3.0, 2.0, size=(5, 8))
        out, x_hat, _ = enc.layer_norm(x, np.ones(8), np.zeros(8), 1e-5)
        assert np.allclose(out, x_hat)
        assert np.allclose(x_hat.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(x_hat.std(axis=-1), 1.0, atol=1e-3)


def check_coordinates(params, seq, targets, np_label, coords, **scales):
    """Assert analytic grads match FD for a list of (tensor, flat index)."""
    trace = enc.forward(params, seq)
    mlm_sum, np_sum, grads = enc.loss_and_grads(params, trace, targets, np_label, **scales)
    for name, index in coords:
        analytic = grads[name].reshape(-1)[index]
        numeric = central_difference(params, seq, targets, np_label, name, index, **scales)
        assert grads_agree(analytic, numeric), (name, index, analytic, numeric)


class TestFullGraphFiniteDifference:
    def test_every_tensor_once(self, tiny_config, tiny_params, tiny_seq):
        rng = np.random.default_rng(0)
        targets = [(1, 5), (3, 9)]
        coords = [
            (name, int(rng.integers(0, tiny_params[name].size)))
            for name in tiny_params.names()
        ]
        check_coordinates(tiny_params, tiny_seq, targets, 1, coords)

    def test_random_setups(self):
        rng = np.random.default_rng(42)
        configs = [
            enc.EncoderConfig(vocab_size=13, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=6),
            enc.EncoderConfig(vocab_size=9, d_model=6, n_heads=3, n_layers=2, d_ff=10, max_len=7),
            enc.EncoderConfig(vocab_size=20, d_model=12, n_heads=4, n_layers=2, d_ff=8, max_len=9),
        ]
        for trial, config in enumerate(configs):
            params = enc.init_params(config, seed=trial)
            # non-trivial biases so their gradients are not trivially zero
            for name in params.names():
                if params[name].ndim == 1:
                    params[name] = params[name] + rng.normal(0.0, 0.05, params[name].shape)
            seq = random_sequence(config, rng)
            targets = random_targets(config, seq, rng)
            np_label = int(rng.integers(0, 2))
            names = params.names()
            coords = [
                (names[int(rng.integers(0, len(names)))], 0) for _ in range(4)
            ]
            coords += [
                ("token_embedding", int(seq.ids[0]) * config.d_model),
                ("mlm_head.weight", int(rng.integers(0, config.d_model * config.vocab_size))),
                ("np_head.weight", int(rng.integers(0, config.d_model))),
            ]
            check_coordinates(params, seq, targets, np_label, coords)

    def test_mlm_only_path(self, tiny_params, tiny_seq):
        check_coordinates(
            tiny_params, tiny_seq, [(2, 6)], None,
            [("mlm_head.bias", 6), ("layer1.ffn.w1", 7), ("token_embedding", 5 * 8)],
        )

    def test_np_only_path(self, tiny_params, tiny_seq):
        check_coordinates(
            tiny_params, tiny_seq, [], 0,
            [("np_head.bias", 0), ("np_head.weight", 3), ("layer0.attn.w_q", 11)],
        )

    def test_scaled_loss(self, tiny_params, tiny_seq):
        check_coordinates(
            tiny_params, tiny_seq, [(1, 8), (2, 4)], 1,
            [("mlm_head.weight", 9), ("layer0.ln1.gain", 2)],
            mlm_scale=0.25, np_scale=2.0,
        )

    def test_scale_linearity(self, tiny_params, tiny_seq):
        targets = [(1, 5)]
        trace = enc.forward(tiny_params, tiny_seq)
        full = enc.backward(tiny_params, trace, targets, 1, mlm_scale=1.0, np_scale=1.0)
        trace = enc.forward(tiny_params, tiny_seq)
        half = enc.backward(tiny_params, trace, targets, 1, mlm_scale=0.5, np_scale=0.5)
        for name in full:
            assert np.allclose(half[name], 0.5 * full[name], rtol=1e-12, atol=0.0)


class TestPadGradientIsolation:
    def test_pad_rows_receive_zero_grad(self, tiny_params, tiny_seq):
        trace = enc.forward(tiny_params, tiny_seq)
        grads = enc.backward(tiny_params, trace, [(1, 5), (4, 3)], np_label=1)
        live = tiny_seq.seq_len
        # PAD positions cannot influence the loss, exactly
        assert np.all(grads["position_embedding"][live:] == 0.0)
        # token id 0 only ever appears at PAD positions in tiny_seq
        assert np.all(grads["token_embedding"][0] == 0.0)

    def test_unused_vocab_rows_receive_zero_grad(self, tiny_params, tiny_seq):
        trace = enc.forward(tiny_params, tiny_seq)
        grads = enc.backward(tiny_params, trace, [(1, 5)], np_label=None)
        used = set(tiny_seq.ids[: tiny_seq.seq_len])
        for token_id in range(tiny_params.config.vocab_size):
            if token_id not in used:
                assert np.all(grads["token_embedding"][token_id] == 0.0)


class TestLossValues:
    def test_scalar_loss_is_finite_and_positive(self, tiny_params, tiny_seq):
        value = scalar_loss(tiny_params, tiny_seq, [(1, 5), (2, 6)], 1)
        assert np.isfinite(value) and value > 0.0

    def test_mlm_sum_adds_per_position_nll(self, tiny_params, tiny_seq):
        trace = enc.forward(tiny_params, tiny_seq)
        lone_a, _ = enc.sequence_loss(tiny_params, trace, [(1, 5)], None)
        lone_b, _ = enc.sequence_loss(tiny_params, trace, [(2, 6)], None)
        both, _ = enc.sequence_loss(tiny_params, trace, [(1, 5), (2, 6)], None)
        assert abs(both - (lone_a + lone_b)) < 1e-12

    def test_np_loss_is_exact_bce(self, tiny_params, tiny_seq):
        trace = enc.forward(tiny_params, tiny_seq)
        p = enc.np_probability(tiny_params, trace)
        _, np_pos = enc.sequence_loss(tiny_params, trace, [], 1)
        _, np_neg = enc.sequence_loss(tiny_params, trace, [], 0)
        assert abs(np_pos - (-np.log(p))) < 1e-12
        assert abs(np_neg - (-np.log1p(-p))) < 1e-12
