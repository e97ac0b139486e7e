"""Decoder building blocks, greedy decoding, checkpoints, gradient checks."""

import numpy as np
import pytest

from groundcap import autodiff as ad
from groundcap import numeric
from groundcap.data import BOS_ID, EOS_ID
from groundcap.errors import DataValidationError, DomainError, ShapeError
from groundcap.model import (
    DecoderState,
    ModelConfig,
    ModelParams,
    attend,
    batch_forward,
    decode_step,
    greedy_decode,
    load_checkpoint,
    lstm_step,
    mean_pool,
    project_features,
    save_checkpoint,
    select_greedy_token,
    sequence_logprob,
)

FD_TOL = 1e-4


def toy_params(vocab=6, d_in=3, d=4, seed=0, att=None):
    cfg = ModelConfig(vocab_size=vocab, feature_size=d_in, hidden_size=d, att_size=att)
    return ModelParams.init(cfg, np.random.default_rng(seed))


class TestProjection:
    def test_identity(self):
        v = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(project_features(v, np.eye(2)), v)

    def test_zero(self):
        v = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(project_features(v, np.zeros((3, 2))), np.zeros((1, 3)))

    def test_hand_value(self):
        w = np.array([[1.0, 1.0], [0.0, 2.0]])
        np.testing.assert_array_equal(project_features(np.array([[3.0, 4.0]]), w), [[7.0, 8.0]])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            project_features(np.ones((2, 3)), np.ones((4, 2)))


class TestMeanPool:
    def test_single_vector(self):
        v = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(mean_pool(v), v[0])

    def test_opposite_vectors_cancel(self):
        u = np.array([1.0, 2.0])
        np.testing.assert_array_equal(mean_pool(np.stack([u, -u])), np.zeros(2))

    def test_hand_mean(self):
        np.testing.assert_array_equal(mean_pool(np.array([[1.0, 3.0], [3.0, 5.0]])), [2.0, 4.0])

    def test_empty_is_domain_error(self):
        with pytest.raises(DomainError):
            mean_pool(np.zeros((0, 3)))


class TestLstmStep:
    def test_all_zero_weights_give_zero_state(self):
        d, n = 3, 5
        h, c = lstm_step(
            np.ones(n), (np.zeros(d), np.zeros(d)),
            np.zeros((4 * d, n)), np.zeros((4 * d, d)), np.zeros(4 * d),
        )
        np.testing.assert_array_equal(h, np.zeros(d))
        np.testing.assert_array_equal(c, np.zeros(d))

    def test_saturated_forget_gate_preserves_cell(self, rng):
        d, n = 4, 3
        b = np.zeros(4 * d)
        b[d : 2 * d] = 20.0
        c_prev = rng.normal(size=d)
        _, c = lstm_step(
            rng.normal(size=n), (rng.normal(size=d), c_prev),
            np.zeros((4 * d, n)), np.zeros((4 * d, d)), b,
        )
        np.testing.assert_allclose(c, c_prev, atol=1e-8)

    def test_matches_scripted_reference(self, rng):
        d, n = 4, 6
        x = rng.normal(size=n)
        h_prev = rng.normal(size=d)
        c_prev = rng.normal(size=d)
        wx = rng.normal(size=(4 * d, n)) * 0.3
        wh = rng.normal(size=(4 * d, d)) * 0.3
        b = rng.normal(size=4 * d) * 0.1

        pre = wx @ x + wh @ h_prev + b
        sig = lambda t: 1.0 / (1.0 + np.exp(-t))
        i, f, o = sig(pre[:d]), sig(pre[d : 2 * d]), sig(pre[2 * d : 3 * d])
        g = np.tanh(pre[3 * d :])
        c_ref = f * c_prev + i * g
        h_ref = o * np.tanh(c_ref)

        h, c = lstm_step(x, (h_prev, c_prev), wx, wh, b)
        np.testing.assert_allclose(h, h_ref, atol=1e-12)
        np.testing.assert_allclose(c, c_ref, atol=1e-12)


class TestAttend:
    def test_single_object_returns_it(self, rng):
        d = 4
        z = rng.normal(size=(1, d))
        ct = attend(rng.normal(size=d), z, rng.normal(size=(d, 2 * d)), rng.normal(size=d))
        np.testing.assert_allclose(ct, z[0], atol=1e-12)

    def test_identical_objects_return_that_vector(self, rng):
        d = 4
        row = rng.normal(size=d)
        z = np.tile(row, (5, 1))
        ct = attend(rng.normal(size=d), z, rng.normal(size=(d, 2 * d)), rng.normal(size=d))
        np.testing.assert_allclose(ct, row, atol=1e-12)

    def test_zero_score_vector_gives_mean(self, rng):
        d = 3
        z = rng.normal(size=(4, d))
        ct = attend(rng.normal(size=d), z, rng.normal(size=(d, 2 * d)), np.zeros(d))
        np.testing.assert_allclose(ct, z.mean(axis=0), atol=1e-12)

    def test_empty_objects_is_domain_error(self, rng):
        with pytest.raises(DomainError):
            attend(np.zeros(3), np.zeros((0, 3)), np.zeros((3, 6)), np.zeros(3))


class TestDecodeStep:
    def test_distribution_sums_to_one(self, rng):
        params = toy_params(seed=3)
        z = rng.normal(size=(3, 4))
        probs, _ = decode_step(BOS_ID, DecoderState.zeros(4), z, mean_pool(z), params)
        assert abs(probs.sum() - 1.0) < 1e-12
        assert (probs > 0).all()

    def test_zero_output_head_gives_uniform(self, rng):
        params = toy_params(seed=4)
        params.arrays["out.w"][:] = 0.0
        params.arrays["out.b"][:] = 0.0
        z = rng.normal(size=(2, 4))
        probs, _ = decode_step(BOS_ID, DecoderState.zeros(4), z, mean_pool(z), params)
        np.testing.assert_allclose(probs, np.full(6, 1 / 6), atol=1e-12)

    def test_invalid_token_id(self, rng):
        params = toy_params()
        z = rng.normal(size=(2, 4))
        with pytest.raises(DomainError):
            decode_step(99, DecoderState.zeros(4), z, mean_pool(z), params)

    def test_matches_composition_of_primitives(self, rng):
        params = toy_params(seed=5)
        a = params.arrays
        z = rng.normal(size=(3, 4))
        z_bar = mean_pool(z)
        state = DecoderState(
            rng.normal(size=4), rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
        )
        probs, new = decode_step(2, state, z, z_bar, params)

        x = a["embedding"][:, 2]
        h1, c1 = lstm_step(
            np.concatenate([x, z_bar, state.h2]), (state.h1, state.c1),
            a["lstm1.wx"], a["lstm1.wh"], a["lstm1.b"],
        )
        ct = attend(h1, z, a["att.proj"], a["att.score"])
        h2, c2 = lstm_step(
            np.concatenate([ct, h1]), (state.h2, state.c2),
            a["lstm2.wx"], a["lstm2.wh"], a["lstm2.b"],
        )
        ref = numeric.softmax(a["out.w"] @ h2 + a["out.b"])
        np.testing.assert_allclose(probs, ref, atol=1e-12)
        np.testing.assert_allclose(new.h2, h2, atol=1e-12)

    def test_first_step_sees_objects_only_through_their_mean(self, rng):
        params = toy_params(seed=6)
        base = rng.normal(size=(2, 4))
        shifted = base + np.array([[0.5, -0.2, 0.1, 0.3], [-0.5, 0.2, -0.1, -0.3]])  # same mean
        np.testing.assert_allclose(mean_pool(base), mean_pool(shifted), atol=1e-12)
        _, s1 = decode_step(BOS_ID, DecoderState.zeros(4), base, mean_pool(base), params)
        _, s2 = decode_step(BOS_ID, DecoderState.zeros(4), shifted, mean_pool(shifted), params)
        np.testing.assert_allclose(s1.h1, s2.h1, atol=1e-12)


class TestSequenceLogprob:
    def test_total_is_sum_of_steps(self, rng):
        params = toy_params(seed=7)
        feats = rng.normal(size=(3, 3))
        lps = sequence_logprob(feats, [3, 4, EOS_ID], params)
        assert lps.shape == (3,)
        assert np.isfinite(lps).all()

    def test_deterministic_without_dropout(self, rng):
        params = toy_params(seed=8)
        feats = rng.normal(size=(2, 3))
        a = sequence_logprob(feats, [3, EOS_ID], params)
        b = sequence_logprob(feats, [3, EOS_ID], params)
        np.testing.assert_array_equal(a, b)

    def test_dropout_requires_rng(self, rng):
        params = toy_params()
        with pytest.raises(DomainError):
            sequence_logprob(rng.normal(size=(2, 3)), [3], params, dropout_rate=0.2)

    def test_matches_hand_rolled_oracle(self, rng):
        # d=4, |V|=6 toy model recomputed with explicit formulas
        params = toy_params(vocab=6, d_in=3, d=4, seed=9)
        a = params.arrays
        feats = rng.normal(size=(2, 3))
        tokens = [4, 3, 5, EOS_ID]

        sig = lambda t: 1.0 / (1.0 + np.exp(-t))

        def cell(x, h, c, wx, wh, b):
            pre = wx @ x + wh @ h + b
            d = h.shape[0]
            i, f, o = sig(pre[:d]), sig(pre[d : 2 * d]), sig(pre[2 * d : 3 * d])
            g = np.tanh(pre[3 * d :])
            c2 = f * c + i * g
            return o * np.tanh(c2), c2

        z = feats @ a["input_proj"].T
        zb = z.mean(axis=0)
        h1 = c1 = h2 = c2 = np.zeros(4)
        y_prev = BOS_ID
        expected = []
        for tok in tokens:
            x = a["embedding"][:, y_prev]
            h1, c1 = cell(np.concatenate([x, zb, h2]), h1, c1, a["lstm1.wx"], a["lstm1.wh"], a["lstm1.b"])
            u = np.tanh(a["att.proj"][:, :4] @ h1 + z @ a["att.proj"][:, 4:].T)
            e = u @ a["att.score"]
            alpha = np.exp(e - e.max())
            alpha = alpha / alpha.sum()
            ct = alpha @ z
            h2, c2 = cell(np.concatenate([ct, h1]), h2, c2, a["lstm2.wx"], a["lstm2.wh"], a["lstm2.b"])
            logits = a["out.w"] @ h2 + a["out.b"]
            expected.append(logits[tok] - np.log(np.exp(logits - logits.max()).sum()) - logits.max())
            y_prev = tok

        got = sequence_logprob(feats, tokens, params)
        np.testing.assert_allclose(got, np.array(expected), atol=1e-10)


class TestGreedyDecode:
    def test_rigged_eos_gives_empty_caption(self, rng):
        params = toy_params(seed=10)
        params.arrays["out.w"][:] = 0.0
        params.arrays["out.b"][:] = 0.0
        params.arrays["out.b"][EOS_ID] = 5.0
        assert greedy_decode(rng.normal(size=(2, 4)), params) == []

    def test_no_eos_hits_length_cap(self, rng):
        params = toy_params(seed=11)
        params.arrays["out.w"][:] = 0.0
        params.arrays["out.b"][:] = 0.0
        params.arrays["out.b"][3] = 5.0
        out = greedy_decode(rng.normal(size=(2, 4)), params, max_len=16)
        assert out == [3] * 16

    def test_matches_manual_argmax_trace(self, rng):
        params = toy_params(seed=12)
        z = project_features(rng.normal(size=(3, 3)), params.arrays["input_proj"])
        z_bar = mean_pool(z)
        state = DecoderState.zeros(4)
        y = BOS_ID
        expected = []
        for _ in range(16):
            probs, state = decode_step(y, state, z, z_bar, params)
            y = int(np.argmax(probs))
            if y == EOS_ID:
                break
            expected.append(y)
        assert greedy_decode(z, params, max_len=16) == expected

    def test_argmax_invariant_under_monotone_transform(self, rng):
        logits = rng.normal(size=12)
        base = select_greedy_token(logits)
        assert select_greedy_token(3.0 * logits + 7.0) == base
        assert select_greedy_token(np.exp(logits)) == base
        assert select_greedy_token(numeric.softmax(logits)) == base

    def test_tie_breaks_to_lowest_id(self):
        assert select_greedy_token(np.array([0.2, 0.4, 0.4])) == 1


class TestPermutationInvariance:
    def test_object_order_does_not_matter(self, rng):
        params = toy_params(seed=13)
        feats = rng.normal(size=(4, 3))
        perm = feats[[2, 0, 3, 1]]
        z, zp = (project_features(f, params.arrays["input_proj"]) for f in (feats, perm))
        np.testing.assert_allclose(mean_pool(z), mean_pool(zp), atol=1e-12)
        h1 = rng.normal(size=4)
        ct = attend(h1, z, params.arrays["att.proj"], params.arrays["att.score"])
        ctp = attend(h1, zp, params.arrays["att.proj"], params.arrays["att.score"])
        np.testing.assert_allclose(ct, ctp, atol=1e-12)
        lps = sequence_logprob(feats, [3, EOS_ID], params)
        lps_p = sequence_logprob(perm, [3, EOS_ID], params)
        np.testing.assert_allclose(lps, lps_p, atol=1e-12)


class TestBatchForward:
    def test_matches_per_example_path(self, rng):
        params = toy_params(seed=14)
        feats = [rng.normal(size=(k, 3)) for k in (2, 4, 1)]
        tokens = [[3, EOS_ID], [4, 5, EOS_ID], [EOS_ID]]
        with ad.no_grad():
            out = batch_forward(
                params.constants(), params.config, feats,
                [[0] * f.shape[0] for f in feats], [0, 1, 2], tokens,
            )
        for e in range(3):
            expected = sequence_logprob(feats[e], tokens[e], params).mean()
            assert out.per_example_logprob.data[e] == pytest.approx(expected, abs=1e-12)

    def test_shared_image_projection(self, rng):
        params = toy_params(seed=15)
        feats = [rng.normal(size=(3, 3))]
        tokens = [[3, EOS_ID], [4, EOS_ID]]  # two captions of one image
        with ad.no_grad():
            out = batch_forward(
                params.constants(), params.config, feats, [[0, 0, 0]], [0, 0], tokens
            )
        assert out.projected_flat.data.shape == (3, 4)

    def test_full_gradient_check_small_dims(self, rng, fd_grad, rel_err):
        cfg = ModelConfig(vocab_size=6, feature_size=3, hidden_size=4)
        params = ModelParams.init(cfg, np.random.default_rng(16))
        feats = [rng.normal(size=(2, 3)), rng.normal(size=(3, 3))]
        tokens = [[3, 4, EOS_ID], [5, EOS_ID]]

        def loss_from(arrays: dict) -> float:
            p = ModelParams(config=cfg, arrays=arrays)
            with ad.no_grad():
                out = batch_forward(
                    p.constants(), cfg, feats, [[0, 0], [0, 0, 0]], [0, 1], tokens
                )
            return float(-out.per_example_logprob.data.mean())

        tape = ad.GradientTape()
        tensors = params.tensors(tape)
        out = batch_forward(tensors, cfg, feats, [[0, 0], [0, 0, 0]], [0, 1], tokens)
        nll = ad.neg(ad.mean_(out.per_example_logprob))
        grads = ad.backward(tape, nll)

        for name in params.arrays:
            arr = params.arrays[name]

            def fn(block, _name=name):
                merged = {k: (block if k == _name else v) for k, v in params.arrays.items()}
                return loss_from(merged)

            fd = fd_grad(fn, [arr])[0]
            assert rel_err(grads[name], fd) <= FD_TOL, name


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        params = toy_params(seed=17)
        path = tmp_path / "ckpt.json"
        save_checkpoint(params, path, extra={"epoch": 3})
        loaded, extra = load_checkpoint(path)
        assert extra == {"epoch": 3}
        assert loaded.config == params.config
        for name, arr in params.arrays.items():
            np.testing.assert_array_equal(loaded.arrays[name], arr)

    def test_shape_validation(self, tmp_path):
        params = toy_params(seed=18)
        path = tmp_path / "ckpt.json"
        save_checkpoint(params, path)
        import json

        payload = json.loads(path.read_text())
        payload["params"]["out.b"]["data"] = payload["params"]["out.b"]["data"][:-1]
        payload["params"]["out.b"]["shape"] = [5]
        path.write_text(json.dumps(payload))
        with pytest.raises(DataValidationError):
            load_checkpoint(path)

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(DataValidationError):
            load_checkpoint(path)

    def test_forget_gate_bias_initialised(self):
        params = toy_params()
        d = params.config.hidden_size
        assert (params.arrays["lstm1.b"][d : 2 * d] == 1.0).all()
        assert (params.arrays["lstm1.b"][:d] == 0.0).all()
