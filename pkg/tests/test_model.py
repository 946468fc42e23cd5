import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcm import tensor as T
from mpcm.model import (
    ModelConfig,
    aggregate,
    context_encode,
    filter_passage,
    init_lstm,
    lstm_cell,
    lstm_step,
    lstm_weights,
    match_passage,
    mp_cosine,
    multi_perspective_match,
    predict_boundaries,
    relevancy,
    run_lstm,
    word_representation,
)
from mpcm.tensor import NumericError, Tensor, grad_check_params
from mpcm.training import model_loss

from conftest import make_model, tiny_config


def lstm_params(rng, d_in, hidden, prefix="l"):
    return init_lstm(rng, prefix, d_in, hidden)


class TestLstmCell:
    def test_zero_weights_and_inputs(self):
        w = (Tensor(np.zeros((4, 12))), Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))
        h, c = lstm_cell(Tensor(np.zeros(4)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), w)
        assert np.array_equal(h.data, np.zeros(3)) and np.array_equal(c.data, np.zeros(3))

    def test_forget_bias_initialised_to_one(self, rng):
        p = lstm_params(rng, 4, 3)
        assert p["l.b"].data.tolist() == [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0]

    def test_pure(self, rng):
        p = lstm_params(rng, 4, 3)
        x, h0, c0 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
        a = lstm_cell(x, h0, c0, lstm_weights(p, "l"))
        b = lstm_cell(x, h0, c0, lstm_weights(p, "l"))
        assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)

    def test_non_finite_names_step(self, rng):
        p = lstm_params(rng, 2, 2)
        x = Tensor(np.array([np.nan, 0.0]))
        with pytest.raises(NumericError, match="step 7"):
            lstm_cell(x, Tensor(np.zeros(2)), Tensor(np.zeros(2)), lstm_weights(p, "l"), step=7)

    def test_sequence_gradient_matches_finite_differences(self, rng):
        p = lstm_params(rng, 4, 3)
        xs = rng.normal(size=(3, 4))
        probe = rng.normal(size=3)

        def loss():
            h, c = Tensor(np.zeros(3)), Tensor(np.zeros(3))
            for t in range(3):
                h, c = lstm_cell(Tensor(xs[t]), h, c, lstm_weights(p, "l"), step=t)
            return (h * probe).sum()

        report = grad_check_params(loss, p, tol=1e-6)
        assert report.passed, str(report)


class TestFusedStep:
    @pytest.mark.parametrize("masked", [False, True])
    def test_matches_composed_cell(self, rng, masked):
        p = lstm_params(rng, 4, 3)
        wx, wh, b = lstm_weights(p, "l")
        x = rng.normal(size=(5, 4))
        h0, c0 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        live = np.array([[True], [False], [True], [True], [False]]) if masked else None
        proj = Tensor(x) @ wx + b
        fused = lstm_step(proj, Tensor(np.concatenate([h0, c0], 1)), wh, live)
        h, c = lstm_cell(Tensor(x), Tensor(h0), Tensor(c0), (wx, wh, b))
        h, c = h.data, c.data
        if masked:
            h, c = np.where(live, h, h0), np.where(live, c, c0)
        np.testing.assert_allclose(fused.data, np.concatenate([h, c], 1), rtol=0, atol=1e-14)

    def test_masked_run_gradients(self, rng):
        p = lstm_params(rng, 3, 2)
        xs = Tensor(rng.normal(size=(3, 4, 3)), requires_grad=True)
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=bool)
        probe = rng.normal(size=(3, 4, 2)) * mask[..., None]
        params = dict(p, xs=xs)

        def loss():
            f = run_lstm(xs, mask, lstm_weights(p, "l"))
            b = run_lstm(xs, mask, lstm_weights(p, "l"), reverse=True)
            return ((f + b) * probe).sum()

        report = grad_check_params(loss, params, tol=1e-6)
        assert report.passed, str(report)


class TestWordRepresentation:
    def test_char_ablation_is_embedding_lookup(self, small_corpus):
        model = make_model(small_corpus, tiny_config(use_char=False))
        batch = model.encode(small_corpus[:3])
        out = word_representation(batch.passage_ids, None, model.params, model.config)
        assert np.array_equal(out.data, model.params["word_emb"].data[batch.passage_ids])

    def test_identical_tokens_identical_vectors(self, small_corpus):
        model = make_model(small_corpus, tiny_config())
        batch = model.encode(small_corpus[:1])
        out = word_representation(batch.passage_ids, batch.passage_chars, model.params, model.config).data[0]
        toks = [t.text for t in small_corpus[0].passage]
        dup = [i for i, t in enumerate(toks) if t in toks[:i]]
        assert dup, "fixture should contain a repeated token"
        j = dup[0]
        assert np.array_equal(out[j], out[toks.index(toks[j])])

    def test_default_width(self):
        assert ModelConfig().word_rep_dim == 400

    def test_default_width_in_practice(self, small_corpus):
        model = make_model(small_corpus[:2], ModelConfig(perspectives=2))
        batch = model.encode(small_corpus[:2])
        out = word_representation(batch.question_ids, batch.question_chars, model.params, model.config)
        assert out.shape[-1] == 400


class TestFilter:
    def test_relevancy_fixture(self):
        q = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        p = Tensor(np.array([[[0.6, 0.8], [1.0, 0.0], [0.0, -2.0]]]))
        r = relevancy(q, p, np.ones((1, 2), dtype=bool))
        np.testing.assert_allclose(r.data, [[0.8, 1.0, 0.0]], atol=1e-12)

    def test_orthogonal_single_word(self):
        r = relevancy(Tensor(np.array([[[1.0, 0.0]]])), Tensor(np.array([[[0.0, 3.0]]])), np.ones((1, 1), dtype=bool))
        assert r.data[0, 0] == 0.0

    def test_masked_question_words_ignored(self):
        q = Tensor(np.array([[[1.0, 0.0], [0.6, 0.8]]]))
        r = relevancy(q, Tensor(np.array([[[0.6, 0.8]]])), np.array([[True, False]]))
        np.testing.assert_allclose(r.data, [[0.6]], atol=1e-12)

    def test_filter_examples(self):
        np.testing.assert_array_equal(filter_passage(Tensor(np.array([[[2.0, 4.0]]])), Tensor(np.array([[0.5]]))).data, [[[1.0, 2.0]]])
        p = np.array([[[2.0, 4.0], [1.0, 1.0]]])
        np.testing.assert_array_equal(filter_passage(Tensor(p), Tensor(np.array([[1.0, 0.0]]))).data, [[[2.0, 4.0], [0.0, 0.0]]])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        q, p = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 5, 4))
        mask = np.ones((1, 3), dtype=bool)
        a = relevancy(Tensor(q), Tensor(p), mask).data
        b = relevancy(Tensor(q), Tensor(p * scale), mask).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert np.all(np.abs(a) <= 1.0)


class TestContextEncode:
    def _params(self, rng, d=4, h=3):
        p = {}
        p.update(init_lstm(rng, "context.fwd", d, h))
        p.update(init_lstm(rng, "context.bwd", d, h))
        return p

    def test_single_step_is_one_cell(self, rng):
        p = self._params(rng)
        x = rng.normal(size=(1, 1, 4))
        f, b = context_encode(Tensor(x), np.ones((1, 1), dtype=bool), p)
        zero = Tensor(np.zeros(3))
        hf, _ = lstm_cell(Tensor(x[0, 0]), zero, zero, lstm_weights(p, "context.fwd"))
        hb, _ = lstm_cell(Tensor(x[0, 0]), zero, zero, lstm_weights(p, "context.bwd"))
        np.testing.assert_allclose(f.data[0, 0], hf.data, atol=1e-14)
        np.testing.assert_allclose(b.data[0, 0], hb.data, atol=1e-14)

    def test_reversal_symmetry(self, rng):
        p = self._params(rng)
        x = rng.normal(size=(1, 5, 4))
        mask = np.ones((1, 5), dtype=bool)
        _, bwd = context_encode(Tensor(x), mask, p)
        swapped = {k.replace("bwd", "tmp").replace("fwd", "bwd").replace("tmp", "fwd"): v for k, v in p.items()}
        fwd_rev, _ = context_encode(Tensor(x[:, ::-1].copy()), mask, swapped)
        np.testing.assert_allclose(bwd.data[0], fwd_rev.data[0, ::-1], atol=1e-14)

    def test_padding_does_not_leak(self, rng):
        p = self._params(rng)
        x = rng.normal(size=(1, 3, 4))
        padded = np.concatenate([x, rng.normal(size=(1, 2, 4))], axis=1)
        f1, b1 = context_encode(Tensor(x), np.ones((1, 3), dtype=bool), p)
        f2, b2 = context_encode(Tensor(padded), np.array([[1, 1, 1, 0, 0]], dtype=bool), p)
        np.testing.assert_allclose(f2.data[:, :3], f1.data, atol=1e-14)
        np.testing.assert_allclose(b2.data[:, :3], b1.data, atol=1e-14)

    def test_gradients(self, rng):
        p = self._params(rng)
        x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
        probe = rng.normal(size=(1, 3, 6))

        def loss():
            f, b = context_encode(x, np.ones((1, 3), dtype=bool), p)
            return (T.concat([f, b], axis=-1) * probe).sum()

        report = grad_check_params(loss, dict(p, x=x), tol=1e-6)
        assert report.passed, str(report)


class TestMultiPerspective:
    def test_all_ones_is_cosine(self, rng):
        v1, v2 = rng.normal(size=6), rng.normal(size=6)
        m = multi_perspective_match(v1, v2, np.ones((1, 6)))
        expected = v1 @ v2 / np.linalg.norm(v1) / np.linalg.norm(v2)
        assert abs(m.data[0] - expected) < 1e-12

    def test_masked_dimension_fixture(self):
        m = multi_perspective_match(np.array([1.0, 5.0]), np.array([1.0, -5.0]), np.array([[1.0, 0.0]]))
        assert abs(m.data[0] - 1.0) < 1e-12

    def test_zero_perspective(self, rng):
        w = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
        m = multi_perspective_match(rng.normal(size=3), rng.normal(size=3), w)
        assert m.data[0] == 0.0 and m.data[1] != 0.0

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            multi_perspective_match(np.ones(3), np.ones(3), np.ones((2, 4)))

    def test_mp_cosine_matches_definition(self, rng):
        v1, v2, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(3, 4))
        out = mp_cosine(Tensor(v1), Tensor(v2), Tensor(w)).data
        for b in range(2):
            for n in range(3):
                for m in range(5):
                    for k in range(3):
                        a, c = w[k] * v1[b, n], w[k] * v2[b, m]
                        assert abs(out[b, n, m, k] - a @ c / np.linalg.norm(a) / np.linalg.norm(c)) < 1e-12

    def test_gradients(self, rng):
        params = {
            "v1": Tensor(rng.normal(size=(1, 2, 4)), requires_grad=True),
            "v2": Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True),
            "w": Tensor(rng.normal(size=(2, 4)), requires_grad=True),
        }
        probe = rng.normal(size=(1, 2, 3, 2))
        report = grad_check_params(lambda: (mp_cosine(params["v1"], params["v2"], params["w"]) * probe).sum(), params, tol=1e-6)
        assert report.passed, str(report)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 8))
    def test_bounded(self, seed, l):
        rng = np.random.default_rng(seed)
        scale = 10.0 ** rng.uniform(-6, 6)
        m = multi_perspective_match(rng.normal(size=5) * scale, rng.normal(size=5), rng.normal(size=(l, 5)))
        assert np.all(np.abs(m.data) <= 1.0)


def _match_setup(rng, config, m=3, n=4, h=3):
    params = {f"match.w{k}": Tensor(rng.uniform(-1, 1, size=(config.perspectives, h))) for k in range(1, 7)}
    q = (Tensor(rng.normal(size=(1, m, h))), Tensor(rng.normal(size=(1, m, h))))
    p = (Tensor(rng.normal(size=(1, n, h))), Tensor(rng.normal(size=(1, n, h))))
    return params, q, p


class TestMatchPassage:
    def test_single_question_word_blocks_agree(self, rng):
        cfg = tiny_config(perspectives=4)
        params, q, p = _match_setup(rng, cfg, m=1)
        for k in range(2, 7):
            params[f"match.w{k}"] = params["match.w1"] if k % 2 else params["match.w2"]
        params["match.w2"] = params["match.w1"]
        for k in range(3, 7):
            params[f"match.w{k}"] = params["match.w1"]
        out = match_passage(q, p, np.ones((1, 1), dtype=bool), params, cfg).data
        blocks = np.split(out, 6, axis=-1)
        np.testing.assert_allclose(blocks[0], blocks[2], atol=1e-14)
        np.testing.assert_allclose(blocks[0], blocks[4], atol=1e-14)
        np.testing.assert_allclose(blocks[1], blocks[3], atol=1e-14)
        np.testing.assert_allclose(blocks[1], blocks[5], atol=1e-14)

    def test_max_dominates_mean(self, rng):
        cfg = tiny_config(perspectives=3)
        params, q, p = _match_setup(rng, cfg, m=5)
        params["match.w5"], params["match.w6"] = params["match.w3"], params["match.w4"]
        mask = np.array([[1, 1, 1, 1, 0]], dtype=bool)
        blocks = np.split(match_passage(q, p, mask, params, cfg).data, 6, axis=-1)
        assert np.all(blocks[2] >= blocks[4] - 1e-12) and np.all(blocks[3] >= blocks[5] - 1e-12)

    def test_full_only_width(self, rng):
        cfg = ModelConfig(use_max=False, use_mean=False)
        params, q, p = _match_setup(rng, cfg, h=5)
        out = match_passage(q, p, np.ones((1, 3), dtype=bool), params, cfg)
        assert out.shape == (1, 4, 100)

    def test_full_matching_reads_endpoints(self, rng):
        cfg = tiny_config(use_max=False, use_mean=False)
        params, q, p = _match_setup(rng, cfg, m=4)
        mask = np.array([[1, 1, 1, 0]], dtype=bool)
        out = match_passage(q, p, mask, params, cfg).data
        fwd_end = mp_cosine(p[0], Tensor(q[0].data[:, 2:3]), params["match.w1"]).data[..., 0, :]
        bwd_start = mp_cosine(p[1], Tensor(q[1].data[:, 0:1]), params["match.w2"]).data[..., 0, :]
        np.testing.assert_allclose(out, np.concatenate([fwd_end, bwd_start], -1), atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_pooled_blocks_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        cfg = tiny_config(perspectives=2)
        params, q, p = _match_setup(rng, cfg, m=4)
        perm = rng.permutation(4)
        qp = (Tensor(q[0].data[:, perm]), Tensor(q[1].data[:, perm]))
        mask = np.ones((1, 4), dtype=bool)
        a = match_passage(q, p, mask, params, cfg).data
        b = match_passage(qp, p, mask, params, cfg).data
        l = cfg.perspectives
        np.testing.assert_allclose(a[..., 2 * l :], b[..., 2 * l :], atol=1e-12)
        assert np.all(np.abs(a) <= 1.0)


class TestAggregateAndPredict:
    def test_single_position(self, rng):
        cfg = tiny_config()
        params = {}
        params.update(init_lstm(rng, "agg.fwd", 6, 3))
        params.update(init_lstm(rng, "agg.bwd", 6, 3))
        x = rng.normal(size=(1, 1, 6))
        out = aggregate(Tensor(x), np.ones((1, 1), dtype=bool), params, cfg).data
        zero = Tensor(np.zeros(3))
        hf, _ = lstm_cell(Tensor(x[0, 0]), zero, zero, lstm_weights(params, "agg.fwd"))
        hb, _ = lstm_cell(Tensor(x[0, 0]), zero, zero, lstm_weights(params, "agg.bwd"))
        np.testing.assert_allclose(out[0, 0], np.concatenate([hf.data, hb.data]), atol=1e-14)

    def test_default_width(self, small_corpus):
        model = make_model(small_corpus[:2], ModelConfig(perspectives=2, word_dim=8))
        batch = model.encode(small_corpus[:2])
        m = Tensor(np.zeros((2, batch.passage_ids.shape[1], model.config.matching_width)))
        assert aggregate(m, batch.passage_mask, model.params, model.config).shape[-1] == 200

    @pytest.mark.parametrize("use_aggregation", [True, False])
    def test_gradients(self, rng, use_aggregation):
        cfg = tiny_config(use_aggregation=use_aggregation)
        model = make_model([], cfg)
        params = {k: v for k, v in model.params.items() if k.startswith("agg.")}
        x = Tensor(rng.normal(size=(1, 3, cfg.matching_width)), requires_grad=True)
        probe = rng.normal(size=(1, 3, 6))
        mask = np.ones((1, 3), dtype=bool)
        report = grad_check_params(lambda: (aggregate(x, mask, params, cfg) * probe).sum(), dict(params, x=x), tol=1e-6)
        assert report.passed, str(report)

    def _pred_params(self, rng):
        model = make_model([], tiny_config())
        return {k: v for k, v in model.params.items() if k.startswith(("begin.", "end."))}

    def test_single_position_is_certain(self, rng):
        pb, pe = predict_boundaries(Tensor(rng.normal(size=(1, 1, 6))), np.ones((1, 1), dtype=bool), self._pred_params(rng))
        assert pb.data.tolist() == [[1.0]] and pe.data.tolist() == [[1.0]]

    def test_identical_rows_uniform(self, rng):
        row = rng.normal(size=6)
        pb, pe = predict_boundaries(Tensor(np.tile(row, (1, 5, 1))), np.ones((1, 5), dtype=bool), self._pred_params(rng))
        np.testing.assert_allclose(pb.data, 0.2, atol=1e-15)
        np.testing.assert_allclose(pe.data, 0.2, atol=1e-15)

    def test_normalised_with_padding(self, rng):
        mask = np.zeros((2, 37), dtype=bool)
        mask[0], mask[1, :20] = True, True
        pb, pe = predict_boundaries(Tensor(rng.normal(size=(2, 37, 6))), mask, self._pred_params(rng))
        for p in (pb.data, pe.data):
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(p[~mask] == 0.0)


class TestForward:
    def test_inference_deterministic(self, small_corpus):
        model = make_model(small_corpus, tiny_config())
        a, b = model.forward(small_corpus[:4]), model.forward(small_corpus[:4])
        for x, y in zip(a, b):
            assert np.array_equal(x.p_begin, y.p_begin) and np.array_equal(x.p_end, y.p_end)

    def test_batch_matches_single(self, small_corpus):
        model = make_model(small_corpus, tiny_config(perspectives=3))
        batched = model.forward(small_corpus)
        for ex, d in zip(small_corpus, batched):
            (single,) = model.forward(ex)
            assert len(single) == len(ex.passage)
            np.testing.assert_allclose(d.p_begin, single.p_begin, rtol=0, atol=1e-9)
            np.testing.assert_allclose(d.p_end, single.p_end, rtol=0, atol=1e-9)

    def test_zero_dropout_training_equals_inference(self, small_corpus):
        model = make_model(small_corpus, tiny_config(dropout_rate=0.0))
        batch = model.encode(small_corpus[:5])
        a = model.forward_batch(batch, training=True, rng=np.random.default_rng(0))
        b = model.forward_batch(batch)
        assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)

    def test_dropout_changes_training_output(self, small_corpus):
        model = make_model(small_corpus, tiny_config())
        batch = model.encode(small_corpus[:5])
        a = model.forward_batch(batch, training=True, rng=np.random.default_rng(0))
        b = model.forward_batch(batch)
        assert not np.array_equal(a[0].data, b[0].data)

    def test_full_model_gradient_check(self, toy_example):
        assert len(toy_example.passage) == 4 and len(toy_example.question) == 2
        model = make_model([toy_example], tiny_config())
        batch = model.encode([toy_example])
        report = grad_check_params(lambda: model_loss(model, batch), model.trainable(), tol=1e-4)
        assert report.passed, str(report)

    def test_numeric_error_names_layer(self, small_corpus):
        model = make_model(small_corpus, tiny_config())
        model.params["begin.w2"].data[:] = np.nan
        with pytest.raises(NumericError, match="prediction layer"):
            model.forward(small_corpus[:1])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_gradients_finite(self, small_corpus, seed):
        model = make_model(small_corpus[:3], tiny_config(), seed=seed % 1000)
        batch = model.encode(small_corpus[:3])
        T.backward(model_loss(model, batch, training=True, rng=np.random.default_rng(seed)))
        for name, p in model.trainable().items():
            assert p.grad is None or np.all(np.isfinite(p.grad)), name
        assert model.params["word_emb"].grad is None
