import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcm.model import BoundaryDistributions, ModelConfig
from mpcm.tensor import InvalidInputError, NumericError, Tensor
from mpcm.text import encode_batch
from mpcm.training import (
    Checkpoint,
    CheckpointFormatError,
    OptimizerState,
    TrainConfig,
    TrainingAborted,
    adam_step,
    batch_span_loss,
    checkpoint_bytes,
    ensemble_predict,
    load_checkpoint,
    model_loss,
    parse_checkpoint,
    read_config_file,
    save_checkpoint,
    span_loss,
    split_config,
    train,
)

from conftest import make_model, tiny_config


def _d(pb, pe):
    return BoundaryDistributions(np.array(pb, float), np.array(pe, float))


class TestSpanLoss:
    def test_certain(self):
        assert span_loss(_d([0, 1, 0], [0, 0, 1]), 2, 3) == 0.0

    def test_uniform(self):
        assert abs(span_loss(_d([0.25] * 4, [0.25] * 4), 1, 4) - 2 * math.log(4)) < 1e-12

    def test_clamped(self):
        loss = span_loss(_d([0.0, 1.0], [0.5, 0.5]), 1, 2)
        assert math.isfinite(loss) and loss <= 2 * math.log(1e12)

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            span_loss(_d([1.0], [1.0]), 1, 2)

    def test_masked_gold(self):
        p = Tensor(np.array([[0.5, 0.5, 0.0]]))
        mask = np.array([[True, True, False]])
        with pytest.raises(InvalidInputError, match="masked"):
            batch_span_loss(p, p, np.array([0]), np.array([2]), mask)

    def test_batch_matches_scalar(self):
        pb = np.array([[0.2, 0.8, 0.0], [0.1, 0.3, 0.6]])
        pe = np.array([[0.5, 0.5, 0.0], [0.2, 0.2, 0.6]])
        mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
        got = batch_span_loss(Tensor(pb), Tensor(pe), np.array([1, 0]), np.array([1, 2]), mask).item()
        want = (span_loss(_d(pb[0, :2], pe[0, :2]), 2, 2) + span_loss(_d(pb[1], pe[1]), 1, 3)) / 2
        assert abs(got - want) < 1e-12


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        state = OptimizerState()
        adam_step(p, {"w": np.zeros(2)}, state)
        assert p["w"].data.tolist() == [1.0, -2.0] and state.t == 1

    def test_first_step(self):
        p = {"w": Tensor(np.array(0.0), requires_grad=True)}
        adam_step(p, {"w": np.array(1.0)}, OptimizerState())
        assert abs(p["w"].data - (-1e-4 / (1 + 1e-8))) < 1e-15

    def test_monotone(self):
        p = {"w": Tensor(np.array(0.0), requires_grad=True)}
        state = OptimizerState()
        values = []
        for _ in range(2):
            adam_step(p, {"w": np.array(1.0)}, state)
            values.append(float(p["w"].data))
        assert 0.0 > values[0] > values[1]

    def test_frozen_untouched(self):
        frozen = Tensor(np.ones(3), requires_grad=False)
        p = {"emb": frozen, "w": Tensor(np.ones(3), requires_grad=True)}
        adam_step(p, {"emb": np.ones(3), "w": np.ones(3)}, OptimizerState())
        assert frozen.data.tolist() == [1.0, 1.0, 1.0]
        assert p["w"].data[0] < 1.0

    def test_non_finite_named(self):
        p = {"ctx.w": Tensor(np.ones(2), requires_grad=True)}
        with pytest.raises(NumericError, match="ctx.w"):
            adam_step(p, {"ctx.w": np.array([1.0, np.inf])}, OptimizerState())

    def test_clipping_equivalent_to_scaled_gradient(self):
        g = np.array([30.0, 40.0])
        a = {"w": Tensor(np.zeros(2), requires_grad=True)}
        b = {"w": Tensor(np.zeros(2), requires_grad=True)}
        sa, sb = OptimizerState(), OptimizerState()
        norm = adam_step(a, {"w": g}, sa, clip_norm=5.0)
        adam_step(b, {"w": g * 0.1}, sb)
        assert norm == 50.0
        np.testing.assert_allclose(sa.m["w"], sb.m["w"], rtol=1e-15)
        np.testing.assert_allclose(a["w"].data, b["w"].data, rtol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_quadratic_decreases(self, seed):
        rng = np.random.default_rng(seed)
        target = rng.normal(size=4)
        x = Tensor(rng.normal(size=4) * 3, requires_grad=True)
        before = float(((x.data - target) ** 2).sum())
        adam_step({"x": x}, {"x": 2 * (x.data - target)}, OptimizerState(learning_rate=1e-4))
        assert float(((x.data - target) ** 2).sum()) < before


@pytest.fixture(scope="module")
def trained(small_corpus):
    cfg = tiny_config()
    hyper = TrainConfig(batch_size=4, epochs=2, seed=3, learning_rate=1e-3)
    history = train(small_corpus, cfg, hyper, dev_examples=small_corpus[:4])
    return cfg, hyper, history


class TestTrain:
    def test_epochs_zero(self, small_corpus):
        cfg = tiny_config()
        (init,) = train(small_corpus, cfg, TrainConfig(epochs=0, seed=4))
        fresh = make_model(small_corpus, cfg, seed=4)
        assert init.meta["epoch"] == 0 and init.optimizer.t == 0
        assert init.params.keys() == fresh.params.keys()

    def test_history_shape(self, trained):
        _, _, history = trained
        assert [c.meta["epoch"] for c in history] == [0, 1, 2]
        assert history[-1].optimizer.t == 2 * 3  # 12 examples / batch 4
        assert all("dev_f1" in c.meta for c in history[1:])

    def test_deterministic(self, small_corpus, trained):
        cfg, hyper, history = trained
        again = train(small_corpus, cfg, hyper, dev_examples=small_corpus[:4])
        assert [c.meta["train_loss"] for c in again[1:]] == [c.meta["train_loss"] for c in history[1:]]
        for name, arr in history[-1].params.items():
            assert np.array_equal(arr, again[-1].params[name]), name

    def test_frozen_embeddings_bit_identical(self, trained):
        _, _, history = trained
        assert np.array_equal(history[0].params["word_emb"], history[-1].params["word_emb"])
        assert not np.array_equal(history[0].params["begin.w1"], history[-1].params["begin.w1"])

    def test_files_written(self, small_corpus, tmp_path):
        train(small_corpus, tiny_config(), TrainConfig(batch_size=6, epochs=1), dev_examples=small_corpus[:2], out_dir=tmp_path)
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "latest.ckpt").exists()
        assert load_checkpoint(tmp_path / "latest.ckpt").meta["epoch"] == 1

    def test_non_finite_aborts(self, small_corpus, tmp_path):
        model = make_model(small_corpus, tiny_config())
        model.params["begin.w2"].data[:] = np.nan
        with pytest.raises(TrainingAborted) as info:
            train(small_corpus, model.config, TrainConfig(epochs=1), model=model, out_dir=tmp_path)
        assert info.value.checkpoint.meta["epoch"] == 0
        assert (tmp_path / "latest.ckpt").exists()

    def test_empty_corpus(self):
        with pytest.raises(InvalidInputError):
            train([], tiny_config(), TrainConfig(epochs=1))

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(list(range(6))))
    def test_loss_order_invariant(self, small_corpus, perm):
        model = _shared_model(small_corpus)
        exs = small_corpus[:6]
        a = model_loss(model, encode_batch(exs, model.vocab, model.char_vocab)).item()
        b = model_loss(model, encode_batch([exs[i] for i in perm], model.vocab, model.char_vocab)).item()
        assert abs(a - b) < 1e-9


_MODELS = {}


def _shared_model(corpus):
    if "m" not in _MODELS:
        _MODELS["m"] = make_model(corpus, tiny_config())
    return _MODELS["m"]


class TestCheckpoint:
    def test_byte_round_trip(self, trained, tmp_path):
        _, _, history = trained
        save_checkpoint(tmp_path / "a.ckpt", history[-1])
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", loaded)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.optimizer.t == history[-1].optimizer.t
        assert loaded.meta == history[-1].meta

    def test_loaded_model_reproduces_loss(self, trained, small_corpus):
        _, _, history = trained
        original = history[-1].to_model()
        restored = parse_checkpoint(checkpoint_bytes(history[-1])).to_model()
        batch = original.encode(small_corpus)
        assert abs(model_loss(original, batch).item() - model_loss(restored, batch).item()) < 1e-9
        assert restored.config == original.config
        assert not restored.params["word_emb"].requires_grad

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.booleans())
    def test_round_trip_property(self, seed, with_opt):
        rng = np.random.default_rng(seed)
        shapes = [tuple(rng.integers(1, 4, size=rng.integers(0, 3))) for _ in range(3)]
        params = {f"p{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
        opt = None
        if with_opt:
            opt = OptimizerState({"p0": rng.normal(size=shapes[0])}, {"p0": rng.random(shapes[0])}, t=int(rng.integers(100)))
        ckpt = Checkpoint(ModelConfig(perspectives=int(rng.integers(1, 60))), params, ["<pad>", "<unk>", "é"], ["<pad>", "<unk>"], ["p1"], opt, {"epoch": 3, "dev_f1": float(rng.random())})
        data = checkpoint_bytes(ckpt)
        back = parse_checkpoint(data)
        assert checkpoint_bytes(back) == data
        for k, v in params.items():
            assert np.array_equal(back.params[k], v)

    def test_rejects_garbage(self, tmp_path):
        with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
            parse_checkpoint(b"hello world, this is not it")

    def test_rejects_truncated(self, trained):
        data = checkpoint_bytes(trained[2][-1])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            parse_checkpoint(data[:-10])


class TestEnsemble:
    def test_identical_members(self, trained, small_corpus):
        ckpt = trained[2][-1]
        single = ckpt.to_model().forward(small_corpus[0])[0]
        avg = ensemble_predict([ckpt] * 5, small_corpus[0])
        assert np.array_equal(avg.p_begin, single.p_begin) and np.array_equal(avg.p_end, single.p_end)

    def test_sums_to_one(self, trained, small_corpus):
        d = ensemble_predict([trained[2][1], trained[2][2]], small_corpus[1])
        assert abs(d.p_begin.sum() - 1) < 1e-6 and abs(d.p_end.sum() - 1) < 1e-6

    def test_mismatched_flags(self, small_corpus):
        a = make_model(small_corpus, tiny_config())
        b = make_model(small_corpus, tiny_config(use_filter=False))
        with pytest.raises(InvalidInputError, match="use_filter"):
            ensemble_predict([a, b], small_corpus[0])

    def test_mean_of_point_masses(self):
        from mpcm.model import average_distributions

        d = average_distributions([_d([1, 0], [1, 0]), _d([0, 1], [0, 1])])
        assert d.p_begin.tolist() == [0.5, 0.5]


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nperspectives = 10\nuse-char = false\nbatch_size=8\nclip_norm = none\nsomething = x\n", encoding="utf-8")
    model, hyper, rest = split_config(read_config_file(path))
    assert model.perspectives == 10 and model.use_char is False
    assert hyper.batch_size == 8 and hyper.clip_norm is None
    assert rest == {"something": "x"}
