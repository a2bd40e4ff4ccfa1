"""LSTM/GRU cells, quantized inference, and perplexity evaluation."""

import numpy as np
import pytest

from multibit import (
    RnnWeights,
    eval_ppw,
    gru_step,
    lstm_step,
    quantize_rnn,
    quantized_gru_step,
    quantized_lstm_step,
    random_rnn_weights,
    relative_mse,
)


def zero_lstm(V=4, d=3, h=2):
    return RnnWeights(
        W_e=np.zeros((V, d)), W_i=np.zeros((4 * h, d)), W_h=np.zeros((4 * h, h)),
        b_i=np.zeros(4 * h), b_h=np.zeros(4 * h),
        W_s=np.zeros((V, h)), b_s=np.zeros(V),
    )


def zero_gru(V=4, d=3, h=2):
    return RnnWeights(
        W_e=np.zeros((V, d)), W_i=np.zeros((3 * h, d)), W_h=np.zeros((3 * h, h)),
        b_i=np.zeros(3 * h), b_h=np.zeros(3 * h),
        W_s=np.zeros((V, h)), b_s=np.zeros(V),
    )


class TestLstmStep:
    def test_all_zero_parameters(self):
        w = zero_lstm()
        h_t, c_t = lstm_step(w, np.zeros(3), np.zeros(2), np.zeros(2))
        # gates sit at 0.5, the candidate at tanh(0)=0
        np.testing.assert_array_equal(c_t, np.zeros(2))
        np.testing.assert_array_equal(h_t, np.zeros(2))

    def test_saturated_forget_gate_preserves_cell(self):
        w = zero_lstm()
        b_i = w.b_i.copy()
        b_i[2:4] = 20.0  # forget-gate block for h=2
        w = RnnWeights(w.W_e, w.W_i, w.W_h, b_i, w.b_h, w.W_s, w.b_s)
        c_prev = np.array([0.7, -1.3])
        h_t, c_t = lstm_step(w, np.zeros(3), np.zeros(2), c_prev)
        np.testing.assert_allclose(c_t, c_prev, atol=1e-6)
        np.testing.assert_allclose(h_t, 0.5 * np.tanh(c_prev), atol=1e-6)

    def test_hidden_state_bounded(self, rng):
        w = random_rnn_weights(8, 4, 6, seed=0)
        h = np.zeros(6)
        c = np.zeros(6)
        for _ in range(50):
            x = 5.0 * rng.standard_normal(4)
            h, c = lstm_step(w, x, h, c)
            assert np.all(np.abs(h) < 1.0)

    def test_update_algebra_is_exact(self, rng):
        """c and h are the literal gate expressions, no reordering."""
        w = random_rnn_weights(6, 3, 4, seed=1)
        x = rng.standard_normal(3)
        h_prev = rng.uniform(-1, 1, 4)
        c_prev = rng.standard_normal(4)
        pre = w.W_i @ x + w.b_i + w.W_h @ h_prev + w.b_h
        i = 1 / (1 + np.exp(-pre[:4]))
        f = 1 / (1 + np.exp(-pre[4:8]))
        o = 1 / (1 + np.exp(-pre[8:12]))
        g = np.tanh(pre[12:])
        h_t, c_t = lstm_step(w, x, h_prev, c_prev)
        np.testing.assert_allclose(c_t - f * c_prev - i * g, 0.0, atol=1e-12)
        np.testing.assert_allclose(h_t - o * np.tanh(c_t), 0.0, atol=1e-15)

    def test_dimension_mismatch(self):
        w = zero_lstm()
        with pytest.raises(ValueError, match="mismatch"):
            lstm_step(w, np.zeros(99), np.zeros(2), np.zeros(2))

    def test_gru_weights_rejected(self):
        with pytest.raises(ValueError, match="LSTM"):
            lstm_step(zero_gru(), np.zeros(3), np.zeros(2), np.zeros(2))


class TestGruStep:
    def test_all_zero_parameters_halve_state(self):
        h_prev = np.array([0.8, -0.4])
        h_t = gru_step(zero_gru(), np.zeros(3), h_prev)
        np.testing.assert_allclose(h_t, 0.5 * h_prev)

    def test_saturated_update_gate_keeps_state(self):
        w = zero_gru()
        b_i = w.b_i.copy()
        b_i[2:4] = 20.0  # update-gate block for h=2
        w = RnnWeights(w.W_e, w.W_i, w.W_h, b_i, w.b_h, w.W_s, w.b_s)
        h_prev = np.array([0.3, -0.9])
        np.testing.assert_allclose(gru_step(w, np.zeros(3), h_prev), h_prev,
                                   atol=1e-6)

    def test_state_bounded_by_convexity(self, rng):
        w = random_rnn_weights(8, 4, 5, cell_type="gru", seed=2)
        h = rng.uniform(-1, 1, 5)
        for _ in range(40):
            h = gru_step(w, rng.standard_normal(4), h)
            assert np.all(np.abs(h) <= 1.0 + 1e-12)


class TestQuantizeRnn:
    def test_high_bit_reconstruction_error_small(self):
        w = random_rnn_weights(32, 16, 16, seed=3)
        q = quantize_rnn(w, 8, 8)
        for name in ("W_e", "W_i", "W_h", "W_s"):
            full = getattr(w, name)
            recon = getattr(q, name).reconstruct()
            for r in range(full.shape[0]):
                assert relative_mse(full[r], recon[r]) <= 1e-3

    def test_biases_untouched(self):
        w = random_rnn_weights(8, 4, 4, seed=4)
        q = quantize_rnn(w, 2, 2)
        np.testing.assert_array_equal(q.b_i, w.b_i)
        np.testing.assert_array_equal(q.b_h, w.b_h)
        np.testing.assert_array_equal(q.b_s, w.b_s)

    def test_error_monotone_in_bits(self):
        w = random_rnn_weights(16, 8, 8, seed=5)
        errs = []
        for k in (1, 2, 3, 4):
            q = quantize_rnn(w, k, 2)
            errs.append(relative_mse(w.W_h.ravel(), q.W_h.reconstruct().ravel()))
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_bit_range_validated(self):
        w = random_rnn_weights(4, 2, 2, seed=0)
        with pytest.raises(ValueError, match="1..8"):
            quantize_rnn(w, 9, 2)


class TestQuantizedSteps:
    def test_high_bit_step_close_to_full(self, rng):
        # the worst single step over a trajectory sits right at the 1e-2
        # scale and flips with the seed; the mean is stably below it
        w = random_rnn_weights(64, 32, 32, seed=6)
        q = quantize_rnn(w, 8, 8)
        h = np.zeros(32)
        c = np.zeros(32)
        devs = []
        for t in range(20):
            x_row = int(rng.integers(0, 64))
            hf, cf = lstm_step(w, w.W_e[x_row], h, c)
            hq, cq = quantized_lstm_step(q, q.W_e.row_code(x_row), h, c)
            devs.append(float(np.max(np.abs(hq - hf))))
            h, c = hf, cf
        assert np.mean(devs) <= 1e-2
        assert max(devs) <= 3e-2

    def test_zero_state_quantizes_exactly(self):
        w = random_rnn_weights(16, 8, 8, seed=7)
        q = quantize_rnn(w, 8, 4)
        hq, _ = quantized_lstm_step(q, q.W_e.row_code(3), np.zeros(8), np.zeros(8))
        # deviation comes from weight quantization only
        hf, _ = lstm_step(w, q.W_e.reconstruct()[3], np.zeros(8), np.zeros(8))
        pre_q = q.W_i.reconstruct() @ q.W_e.reconstruct()[3] + w.b_i + w.b_h
        i, f, o = (1 / (1 + np.exp(-pre_q[:8])), 1 / (1 + np.exp(-pre_q[8:16])),
                   1 / (1 + np.exp(-pre_q[16:24])))
        g = np.tanh(pre_q[24:])
        np.testing.assert_allclose(hq, o * np.tanh(i * g), atol=1e-9)

    def test_deviation_monotone_in_bits(self, rng):
        w = random_rnn_weights(32, 16, 16, seed=8)
        tokens = rng.integers(0, 32, size=60)
        devs = []
        for k in (2, 3, 4):
            q = quantize_rnn(w, k, k)
            h = hq = np.zeros(16)
            c = cq = np.zeros(16)
            total = 0.0
            for t in tokens:
                h, c = lstm_step(w, w.W_e[t], h, c)
                hq, cq = quantized_lstm_step(q, q.W_e.row_code(int(t)), hq, cq)
                total += float(np.max(np.abs(h - hq)))
            devs.append(total / len(tokens))
        assert devs[0] > devs[1] > devs[2]

    def test_quantized_gru_step_close_at_high_bits(self, rng):
        w = random_rnn_weights(16, 8, 8, cell_type="gru", seed=9)
        q = quantize_rnn(w, 8, 8)
        h = rng.uniform(-0.5, 0.5, 8)
        hf = gru_step(w, w.W_e[5], h)
        hq = quantized_gru_step(q, q.W_e.row_code(5), h)
        assert np.max(np.abs(hq - hf)) <= 2e-2


class TestModelFileRoundTrip:
    def test_tiny_model_bit_exact(self, tmp_path):
        """V=4, d=h=2 survives the weight and quantized formats unchanged."""
        from multibit import load_quantized, load_weights, save_quantized, save_weights
        from multibit.cli import weights_from_container, weights_to_container
        from multibit.model_io import QuantizedContainer

        w = random_rnn_weights(4, 2, 2, seed=17)
        wfile = tmp_path / "w.mbqw"
        save_weights(wfile, weights_to_container(w))
        w32 = weights_from_container(load_weights(wfile))  # float32-valued now
        save_weights(tmp_path / "w2.mbqw", weights_to_container(w32))
        assert (tmp_path / "w2.mbqw").read_bytes() == wfile.read_bytes()

        q = quantize_rnn(w32, 3, 2)
        qfile = tmp_path / "q.mbqq"
        container = QuantizedContainer()
        for name in ("W_e", "W_i", "W_h", "W_s"):
            container.add(name, getattr(q, name))
        save_quantized(qfile, container)
        back = load_quantized(qfile)
        for name in ("W_e", "W_i", "W_h", "W_s"):
            orig = getattr(q, name)
            got = back.tensors[name]
            assert np.array_equal(got.row_alphas, orig.row_alphas)
            assert np.array_equal(got.plane_words, orig.plane_words)


class TestEvalPpw:
    def test_uniform_model_gives_vocab_size(self, rng):
        V = 23
        w = random_rnn_weights(V, 6, 5, seed=10, zero_softmax=True)
        tokens = rng.integers(0, V, size=50)
        report = eval_ppw(w, tokens)
        assert report.ppw == pytest.approx(V, rel=1e-9)
        assert report.token_count == 49

    def test_confident_model_approaches_one(self):
        V, d, h = 5, 3, 4
        w = random_rnn_weights(V, d, h, seed=11, zero_softmax=True)
        b_s = np.full(V, -50.0)
        b_s[2] = 50.0
        w = RnnWeights(w.W_e, w.W_i, w.W_h, w.b_i, w.b_h, w.W_s, b_s)
        report = eval_ppw(w, np.full(30, 2))
        assert report.ppw == pytest.approx(1.0, abs=1e-9)

    def test_ppw_at_least_one(self, rng):
        w = random_rnn_weights(12, 4, 4, seed=12)
        report = eval_ppw(w, rng.integers(0, 12, size=40))
        assert report.ppw >= 1.0
        assert report.mean_nll >= 0.0

    def test_deterministic_bitwise(self, rng):
        w = random_rnn_weights(16, 6, 6, seed=13)
        q = quantize_rnn(w, 3, 3)
        tokens = rng.integers(0, 16, size=40)
        a = eval_ppw(q, tokens)
        b = eval_ppw(q, tokens)
        assert a.mean_nll == b.mean_nll and a.ppw == b.ppw

    def test_deterministic_across_thread_counts(self, rng):
        # the eval path avoids threaded reductions, so BLAS pool size
        # must not change a single bit
        from threadpoolctl import threadpool_limits

        w = random_rnn_weights(16, 6, 6, seed=13)
        tokens = rng.integers(0, 16, size=40)
        with threadpool_limits(limits=1):
            one = eval_ppw(w, tokens)
        with threadpool_limits(limits=4):
            four = eval_ppw(w, tokens)
        assert one.mean_nll == four.mean_nll and one.ppw == four.ppw

    def test_gru_eval_runs_both_paths(self, rng):
        w = random_rnn_weights(12, 6, 6, cell_type="gru", seed=14)
        tokens = rng.integers(0, 12, size=30)
        full = eval_ppw(w, tokens)
        quant = eval_ppw(quantize_rnn(w, 8, 8), tokens)
        assert abs(np.log(quant.ppw) - np.log(full.ppw)) <= 0.05

    def test_high_bit_log_ppw_gap_small(self, rng):
        w = random_rnn_weights(64, 32, 32, seed=15)
        tokens = rng.integers(0, 64, size=120)
        full = eval_ppw(w, tokens)
        quant = eval_ppw(quantize_rnn(w, 8, 8), tokens)
        assert abs(np.log(quant.ppw) - np.log(full.ppw)) <= 0.05

    def test_token_validation(self):
        w = random_rnn_weights(8, 4, 4, seed=16)
        with pytest.raises(ValueError, match="vocabulary"):
            eval_ppw(w, [0, 99])
        with pytest.raises(ValueError, match="two tokens"):
            eval_ppw(w, [3])

    def test_rejects_other_models(self):
        with pytest.raises(TypeError):
            eval_ppw(object(), [0, 1])
