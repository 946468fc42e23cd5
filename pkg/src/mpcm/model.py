"""The multi-perspective context matching network.

Layers, bottom to top: word representation (frozen word vectors plus a
character LSTM), relevancy filter, shared context BiLSTM, multi-perspective
matching (full / max-pool / mean-pool, forward and backward), aggregation
BiLSTM, and two feed-forward boundary scorers normalised with a masked
softmax over passage positions.

All layer functions work on batched tensors shaped ``(B, T, ...)`` with a
boolean ``(B, T)`` mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor
from .text import Batch, EmbeddingMatrix, Example, Vocabulary, encode_batch

STRATEGIES = ("full", "max", "mean")


@dataclass
class ModelConfig:
    word_dim: int = 300
    char_emb_dim: int = 20
    char_hidden: int = 100
    lstm_hidden: int = 100
    perspectives: int = 50
    dropout_rate: float = 0.2
    prediction_hidden: int = 100
    use_char: bool = True
    use_filter: bool = True
    use_full: bool = True
    use_max: bool = True
    use_mean: bool = True
    use_aggregation: bool = True
    # plain cosine in place of the learned perspectives (one fixed all-ones row)
    vanilla_cosine: bool = False

    def __post_init__(self):
        if self.vanilla_cosine:
            self.perspectives = 1
        if self.perspectives < 1:
            raise ValueError("perspectives must be >= 1")
        if not (self.use_full or self.use_max or self.use_mean):
            raise ValueError("at least one matching strategy must be enabled")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def strategies(self) -> tuple:
        return tuple(s for s in STRATEGIES if getattr(self, f"use_{s}"))

    @property
    def word_rep_dim(self) -> int:
        return self.word_dim + (self.char_hidden if self.use_char else 0)

    @property
    def matching_width(self) -> int:
        return 2 * self.perspectives * len(self.strategies)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        """Build from a mapping whose values may be strings (config files)."""
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            kwargs[f.name] = coerce(values[f.name], type(getattr(cls(), f.name)))
        return cls(**kwargs)


def coerce(value, kind):
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value)


@dataclass
class BoundaryDistributions:
    """Begin/end probabilities over the positions of one passage."""

    p_begin: np.ndarray
    p_end: np.ndarray

    def __post_init__(self):
        self.p_begin = np.asarray(self.p_begin, dtype=float)
        self.p_end = np.asarray(self.p_end, dtype=float)
        if self.p_begin.shape != self.p_end.shape or self.p_begin.ndim != 1:
            raise ValueError("begin/end distributions must be equal-length vectors")

    def __len__(self) -> int:
        return len(self.p_begin)


def average_distributions(dists: Sequence[BoundaryDistributions]) -> BoundaryDistributions:
    """Position-wise mean of several models' distributions for one passage."""
    if not dists:
        raise ValueError("nothing to average")
    if len({len(d) for d in dists}) != 1:
        raise ValueError("distributions cover different passage lengths")
    # offsets from the first member keep the mean exact when members agree
    first = dists[0]
    return BoundaryDistributions(
        first.p_begin + np.mean([d.p_begin - first.p_begin for d in dists], axis=0),
        first.p_end + np.mean([d.p_end - first.p_end for d in dists], axis=0),
    )


# -----------------------------------------------------------------------------
# Parameters
# -----------------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_lstm(rng, prefix: str, d_in: int, hidden: int) -> dict:
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget gate
    wx = np.concatenate([glorot(rng, d_in, hidden) for _ in range(4)], axis=1)
    wh = np.concatenate([glorot(rng, hidden, hidden) for _ in range(4)], axis=1)
    return {
        f"{prefix}.wx": Tensor(wx, requires_grad=True),
        f"{prefix}.wh": Tensor(wh, requires_grad=True),
        f"{prefix}.b": Tensor(bias, requires_grad=True),
    }


def init_params(config: ModelConfig, embeddings: EmbeddingMatrix, n_chars: int, seed: int = 0) -> dict:
    """Fresh parameters; the word-embedding table is frozen."""
    if embeddings.dim != config.word_dim:
        raise ValueError(f"embedding dim {embeddings.dim} != config.word_dim {config.word_dim}")
    rng = np.random.default_rng(seed)
    h, l = config.lstm_hidden, config.perspectives
    params = {"word_emb": Tensor(np.array(embeddings.matrix, dtype=float), requires_grad=False)}
    if config.use_char:
        char_emb = rng.uniform(-0.05, 0.05, size=(n_chars, config.char_emb_dim))
        char_emb[0] = 0.0
        params["char_emb"] = Tensor(char_emb, requires_grad=True)
        params.update(init_lstm(rng, "char_lstm", config.char_emb_dim, config.char_hidden))
    d = config.word_rep_dim
    params.update(init_lstm(rng, "context.fwd", d, h))
    params.update(init_lstm(rng, "context.bwd", d, h))
    for k in perspective_indices(config):
        if config.vanilla_cosine:
            params[f"match.w{k}"] = Tensor(np.ones((1, h)), requires_grad=False)
        else:
            params[f"match.w{k}"] = Tensor(rng.uniform(-0.1, 0.1, size=(l, h)), requires_grad=True)
    width = config.matching_width
    if config.use_aggregation:
        params.update(init_lstm(rng, "agg.fwd", width, h))
        params.update(init_lstm(rng, "agg.bwd", width, h))
    else:
        params["agg.proj.w"] = Tensor(glorot(rng, width, 2 * h), requires_grad=True)
        params["agg.proj.b"] = Tensor(np.zeros(2 * h), requires_grad=True)
    ph = config.prediction_hidden
    for side in ("begin", "end"):
        params[f"{side}.w1"] = Tensor(glorot(rng, 2 * h, ph), requires_grad=True)
        params[f"{side}.b1"] = Tensor(np.zeros(ph), requires_grad=True)
        params[f"{side}.w2"] = Tensor(glorot(rng, ph, 1), requires_grad=True)
        params[f"{side}.b2"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def perspective_indices(config: ModelConfig) -> list:
    """Matrix numbers 1..6 used by the enabled strategies (fwd, bwd pairs)."""
    out = []
    for i, s in enumerate(STRATEGIES):
        if getattr(config, f"use_{s}"):
            out += [2 * i + 1, 2 * i + 2]
    return out


def lstm_weights(params: dict, prefix: str) -> tuple:
    return params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]


# -----------------------------------------------------------------------------
# Recurrent pieces
# -----------------------------------------------------------------------------


def _check_finite(t: Tensor, where: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {where}")
    return t


def lstm_cell(x, h_prev, c_prev, weights, step: Optional[int] = None, x_proj=None):
    """One LSTM step (input/forget/output gates, no peepholes).

    Inputs are single vectors or (B, ·) rows.  ``x_proj`` may carry a
    precomputed ``x @ wx + b`` to skip that product.
    """
    wx, wh, b = weights
    hidden = wh.shape[0]
    x, h_prev, c_prev = T.as_tensor(x), T.as_tensor(h_prev), T.as_tensor(c_prev)
    if h_prev.ndim == 1:
        row = lambda v: T.reshape(v, (1,) + v.shape)
        h, c = lstm_cell(row(x), row(h_prev), row(c_prev), weights, step, None if x_proj is None else row(x_proj))
        return T.reshape(h, (hidden,)), T.reshape(c, (hidden,))
    gates = (x_proj if x_proj is not None else T.matmul(x, wx) + b) + T.matmul(h_prev, wh)
    i = T.sigmoid(gates[..., :hidden])
    f = T.sigmoid(gates[..., hidden : 2 * hidden])
    g = T.tanh(gates[..., 2 * hidden : 3 * hidden])
    o = T.sigmoid(gates[..., 3 * hidden :])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    if not (np.isfinite(h.data).all() and np.isfinite(c.data).all()):
        raise NumericError(f"non-finite LSTM state at step {step}")
    return h, c


def _sig(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def lstm_step(x_proj: Tensor, state: Tensor, wh: Tensor, live: Optional[np.ndarray] = None) -> Tensor:
    """Fused LSTM step on a packed state ``[h, c]`` of shape (B, 2h).

    Same equations as :func:`lstm_cell`; rows where ``live`` is false carry
    the previous state through unchanged.
    """
    hidden = wh.shape[0]
    s = state.data
    h_prev, c_prev = s[:, :hidden], s[:, hidden:]
    a = x_proj.data + h_prev @ wh.data
    i = _sig(a[:, :hidden])
    f = _sig(a[:, hidden : 2 * hidden])
    g = np.tanh(a[:, 2 * hidden : 3 * hidden])
    o = _sig(a[:, 3 * hidden :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    if live is not None:
        h = np.where(live, h, h_prev)
        c = np.where(live, c, c_prev)
    out = np.concatenate([h, c], axis=1)

    def _backward(grad):
        gh_out, gc_out = grad[:, :hidden], grad[:, hidden:]
        if live is not None:
            gh, gc = gh_out * live, gc_out * live
        else:
            gh, gc = gh_out, gc_out
        gc = gc + gh * o * (1.0 - tc * tc)
        da = np.concatenate(
            [gc * g * i * (1.0 - i), gc * c_prev * f * (1.0 - f), gc * i * (1.0 - g * g), gh * tc * o * (1.0 - o)],
            axis=1,
        )
        g_h = da @ wh.data.T
        g_c = gc * f
        if live is not None:
            g_h = g_h + gh_out * ~live
            g_c = g_c + gc_out * ~live
        g_state = np.concatenate([g_h, g_c], axis=1)
        g_wh = h_prev.T @ da if wh.requires_grad else None
        return da, g_state, g_wh

    if not np.isfinite(out).all():
        raise NumericError("non-finite LSTM state")
    return Tensor._from_op(out, (x_proj, state, wh), _backward)


def run_lstm(xs: Tensor, mask: np.ndarray, weights, reverse: bool = False) -> Tensor:
    """Unroll over ``xs`` (B, T, d) from a zero state; returns h as (B, T, hidden).

    The state is carried unchanged through masked steps, so a right-to-left
    pass starts fresh at each sequence's last real token.
    """
    wx, wh, b = weights
    bsz, steps = xs.shape[0], xs.shape[1]
    hidden = wh.shape[0]
    proj = T.matmul(xs, wx) + b
    state = Tensor(np.zeros((bsz, 2 * hidden)))
    states = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        live = mask[:, t : t + 1]
        try:
            state = lstm_step(proj[:, t], state, wh, None if live.all() else live)
        except NumericError:
            raise NumericError(f"non-finite LSTM state at step {t}") from None
        states[t] = state
    return T.stack(states, axis=1)[:, :, :hidden]


def bilstm(xs: Tensor, mask: np.ndarray, params: dict, prefix: str) -> tuple:
    fwd = run_lstm(xs, mask, lstm_weights(params, f"{prefix}.fwd"))
    bwd = run_lstm(xs, mask, lstm_weights(params, f"{prefix}.bwd"), reverse=True)
    return fwd, bwd


# -----------------------------------------------------------------------------
# Layers
# -----------------------------------------------------------------------------


def char_encode(char_ids: np.ndarray, params: dict) -> Tensor:
    """Final hidden state of the character LSTM for each token.

    ``char_ids`` is (..., C); identical character sequences are encoded once.
    All-padding rows (no characters) map to the zero vector.
    """
    lead = char_ids.shape[:-1]
    flat = char_ids.reshape(-1, char_ids.shape[-1])
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    emb = params["char_emb"][uniq]
    final = run_lstm(emb, uniq != 0, lstm_weights(params, "char_lstm"))[:, -1]
    out = final[inverse]
    return out.reshape(lead + (final.shape[-1],))


def word_representation(word_ids: np.ndarray, char_ids: Optional[np.ndarray], params: dict, config: ModelConfig) -> Tensor:
    """(B, T) word indices (+ (B, T, C) characters) -> (B, T, d)."""
    words = Tensor(params["word_emb"].data[word_ids])
    if not config.use_char:
        return words
    return T.concat([words, char_encode(char_ids, params)], axis=-1)


def relevancy(question_reps: Tensor, passage_reps: Tensor, question_mask: np.ndarray) -> Tensor:
    """r_j = max over real question words i of cos(q_i, p_j); shape (B, N)."""
    cos = T.cosine_matrix(passage_reps, question_reps)
    return T.pool_max(cos, question_mask[:, None, :], axis=-1)


def filter_passage(passage_reps: Tensor, r: Tensor) -> Tensor:
    return passage_reps * T.reshape(r, r.shape + (1,))


def context_encode(reps: Tensor, mask: np.ndarray, params: dict) -> tuple:
    """Shared BiLSTM over question or passage: (h_fwd, h_bwd), each (B, T, h)."""
    return bilstm(reps, mask, params, "context")


def mp_cosine(v1: Tensor, v2: Tensor, w: Tensor) -> Tensor:
    """Perspective-weighted cosines for every pair of rows.

    ``v1`` (B, N, h), ``v2`` (B, M, h), ``w`` (l, h) -> (B, N, M, l) with
    entry k equal to cos(w_k * v1[n], w_k * v2[m]).
    """
    bsz, n, hidden = v1.shape
    m = v2.shape[1]
    l = w.shape[0]
    sq = w * w
    weighted2 = T.reshape(v2, (bsz, m, 1, hidden)) * sq
    num = T.matmul(v1, T.transpose(T.reshape(weighted2, (bsz, m * l, hidden)), (0, 2, 1)))
    num = T.reshape(num, (bsz, n, m, l))
    inv1 = T.rsqrt_safe(T.matmul(v1 * v1, T.transpose(sq)))
    inv2 = T.rsqrt_safe(T.matmul(v2 * v2, T.transpose(sq)))
    cos = num * T.reshape(inv1, (bsz, n, 1, l)) * T.reshape(inv2, (bsz, 1, m, l))
    return T.clip(cos, -1.0, 1.0)


def multi_perspective_match(v1, v2, w) -> Tensor:
    """Match two h-vectors under the l perspectives in ``w``; returns (l,)."""
    v1, v2, w = T.as_tensor(v1), T.as_tensor(v2), T.as_tensor(w)
    if v1.shape != v2.shape or v1.ndim != 1 or w.ndim != 2 or w.shape[1] != v1.shape[0]:
        raise T.DimensionError(f"incompatible shapes {v1.shape}, {v2.shape}, {w.shape}")
    h = v1.shape[0]
    out = mp_cosine(T.reshape(v1, (1, 1, h)), T.reshape(v2, (1, 1, h)), w)
    return T.reshape(out, (w.shape[0],))


def _last_positions(mask: np.ndarray) -> np.ndarray:
    return mask.sum(axis=1) - 1


def match_passage(question_states: tuple, passage_states: tuple, question_mask: np.ndarray, params: dict, config: ModelConfig) -> Tensor:
    """Matching vectors (B, N, width) in the order
    [full_fwd, full_bwd, max_fwd, max_bwd, mean_fwd, mean_bwd] (enabled only).

    Full matching compares against the forward state at the last real
    question word and the backward state at the first.
    """
    qf, qb = question_states
    pf, pb = passage_states
    bsz, _, hidden = qf.shape
    n = pf.shape[1]
    l = config.perspectives
    blocks = []
    if config.use_full:
        rows = np.arange(bsz)
        q_end = T.reshape(qf[rows, _last_positions(question_mask)], (bsz, 1, hidden))
        q_start = T.reshape(qb[:, 0], (bsz, 1, hidden))
        blocks.append(T.reshape(mp_cosine(pf, q_end, params["match.w1"]), (bsz, n, l)))
        blocks.append(T.reshape(mp_cosine(pb, q_start, params["match.w2"]), (bsz, n, l)))
    qmask = question_mask[:, None, :, None]
    if config.use_max:
        blocks.append(T.pool_max(mp_cosine(pf, qf, params["match.w3"]), qmask, axis=2))
        blocks.append(T.pool_max(mp_cosine(pb, qb, params["match.w4"]), qmask, axis=2))
    if config.use_mean:
        blocks.append(T.pool_mean(mp_cosine(pf, qf, params["match.w5"]), qmask, axis=2))
        blocks.append(T.pool_mean(mp_cosine(pb, qb, params["match.w6"]), qmask, axis=2))
    return T.concat(blocks, axis=-1)


def aggregate(matching: Tensor, mask: np.ndarray, params: dict, config: ModelConfig) -> Tensor:
    """(B, N, width) -> (B, N, 2h)."""
    if config.use_aggregation:
        fwd, bwd = bilstm(matching, mask, params, "agg")
        return T.concat([fwd, bwd], axis=-1)
    return T.matmul(matching, params["agg.proj.w"]) + params["agg.proj.b"]


def boundary_scores(aggregated: Tensor, params: dict, side: str) -> Tensor:
    hidden = T.tanh(T.matmul(aggregated, params[f"{side}.w1"]) + params[f"{side}.b1"])
    score = T.matmul(hidden, params[f"{side}.w2"]) + params[f"{side}.b2"]
    return T.reshape(score, aggregated.shape[:-1])


def predict_boundaries(aggregated: Tensor, mask: np.ndarray, params: dict) -> tuple:
    """Masked softmax over positions of the begin and end scorers: (B, N) each."""
    p_begin = T.masked_softmax(boundary_scores(aggregated, params, "begin"), mask, axis=-1)
    p_end = T.masked_softmax(boundary_scores(aggregated, params, "end"), mask, axis=-1)
    return p_begin, p_end


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------


class MPCM:
    """Configuration, vocabularies and parameters bundled for forward passes."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, char_vocab: Vocabulary, params: dict):
        self.config = config
        self.vocab = vocab
        self.char_vocab = char_vocab
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, embeddings: EmbeddingMatrix, char_vocab: Vocabulary, seed: int = 0) -> "MPCM":
        return cls(config, embeddings.vocab, char_vocab, init_params(config, embeddings, len(char_vocab), seed))

    def trainable(self) -> dict:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def encode(self, examples: Sequence[Example]) -> Batch:
        return encode_batch(examples, self.vocab, self.char_vocab)

    def forward_batch(self, batch: Batch, training: bool = False, rng: Optional[np.random.Generator] = None) -> tuple:
        """Returns ``(p_begin, p_end, matching)`` tensors for a padded batch."""
        cfg, params = self.config, self.params
        rate = cfg.dropout_rate if training else 0.0

        def drop(x):
            return T.dropout(x, rate, rng, training=training)

        layer = "word representation"
        try:
            q = drop(word_representation(batch.question_ids, batch.question_chars, params, cfg))
            p = drop(word_representation(batch.passage_ids, batch.passage_chars, params, cfg))
            layer = "filter"
            if cfg.use_filter:
                p = filter_passage(p, relevancy(q, p, batch.question_mask))
            layer = "context representation"
            qf, qb = context_encode(q, batch.question_mask, params)
            pf, pb = context_encode(p, batch.passage_mask, params)
            qf, qb, pf, pb = drop(qf), drop(qb), drop(pf), drop(pb)
            layer = "matching"
            matching = drop(match_passage((qf, qb), (pf, pb), batch.question_mask, params, cfg))
            layer = "aggregation"
            agg = drop(aggregate(matching, batch.passage_mask, params, cfg))
            layer = "prediction"
            p_begin, p_end = predict_boundaries(agg, batch.passage_mask, params)
            _check_finite(p_begin, layer)
            _check_finite(p_end, layer)
        except NumericError as exc:
            raise NumericError(f"{layer} layer: {exc}") from exc
        return p_begin, p_end, matching

    def forward(self, inputs, training: bool = False, rng: Optional[np.random.Generator] = None) -> list:
        """BoundaryDistributions for an Example, a list of them, or a Batch."""
        if isinstance(inputs, Example):
            inputs = [inputs]
        batch = inputs if isinstance(inputs, Batch) else self.encode(inputs)
        p_begin, p_end, _ = self.forward_batch(batch, training=training, rng=rng)
        out = []
        for i, ex in enumerate(batch.examples):
            n = len(ex.passage)
            out.append(BoundaryDistributions(p_begin.data[i, :n].copy(), p_end.data[i, :n].copy()))
        return out

    def predict(self, examples: Sequence[Example], batch_size: int = 32) -> list:
        """Inference-mode distributions, one per example, in input order."""
        out = []
        for lo in range(0, len(examples), batch_size):
            out.extend(self.forward(list(examples[lo : lo + batch_size])))
        return out
