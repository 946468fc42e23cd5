"""Cross-entropy training with ADAM, checkpoint files and ensembles.

Checkpoint file layout (all integers little-endian)::

    8 bytes   magic b"MPCMCKPT"
    uint32    format version
    uint64    header length in bytes
    ...       UTF-8 header: sorted ``key=value`` lines, values JSON-encoded
              (config.*, meta.*, optimizer.*, vocab.words, vocab.chars)
    uint32    number of arrays
    per array:
      uint16  name length, then the UTF-8 name
      uint8   ndim, then ndim x uint64 extents
      ...     float64 ('<f8') data in C order

Model parameters are stored under their own names; ADAM moments under
``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .evaluation import evaluate
from .model import MPCM, BoundaryDistributions, ModelConfig, average_distributions, coerce
from .tensor import InvalidInputError, NumericError, Tensor
from .text import (
    Batch,
    EmbeddingMatrix,
    Example,
    Vocabulary,
    build_vocabularies,
    make_batches,
    random_embeddings,
    truncate_example,
)

log = logging.getLogger(__name__)

MAGIC = b"MPCMCKPT"
FORMAT_VERSION = 1
PROB_FLOOR = 1e-12


# -----------------------------------------------------------------------------
# Loss
# -----------------------------------------------------------------------------


def batch_span_loss(p_begin: Tensor, p_end: Tensor, begin: np.ndarray, end: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over rows of ``-log p_begin[b] - log p_end[e]`` (0-based gold)."""
    begin, end = np.asarray(begin), np.asarray(end)
    rows = np.arange(len(begin))
    n = mask.shape[1]
    if np.any(begin < 0) or np.any(end < 0) or np.any(begin >= n) or np.any(end >= n):
        raise InvalidInputError("gold span missing or outside the passage")
    if not (mask[rows, begin].all() and mask[rows, end].all()):
        raise InvalidInputError("gold index falls on a masked position")
    pb = T.clamp_min(p_begin[rows, begin], PROB_FLOOR)
    pe = T.clamp_min(p_end[rows, end], PROB_FLOOR)
    return -(T.log(pb) + T.log(pe)).mean()


def span_loss(dists: BoundaryDistributions, a_b: int, a_e: int) -> float:
    """Cross-entropy of a 1-based gold span under one example's distributions."""
    n = len(dists)
    if not (1 <= a_b <= n and 1 <= a_e <= n):
        raise InvalidInputError(f"gold span ({a_b}, {a_e}) outside passage of length {n}")
    pb = max(float(dists.p_begin[a_b - 1]), PROB_FLOOR)
    pe = max(float(dists.p_end[a_e - 1]), PROB_FLOOR)
    return -math.log(pb) - math.log(pe)


def model_loss(model: MPCM, batch: Batch, training: bool = False, rng=None) -> Tensor:
    p_begin, p_end, _ = model.forward_batch(batch, training=training, rng=rng)
    return batch_span_loss(p_begin, p_end, batch.begin, batch.end, batch.passage_mask)


# -----------------------------------------------------------------------------
# ADAM
# -----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def adam_step(params: dict, grads: dict, state: OptimizerState, clip_norm: Optional[float] = None) -> float:
    """One bias-corrected ADAM update, in place.  Returns the pre-clip norm.

    Parameters with ``requires_grad=False`` (frozen embeddings) are skipped,
    as are trainable ones absent from ``grads`` (treated as zero gradient).
    """
    live = {k: g for k, g in grads.items() if k in params and params[k].requires_grad}
    for name, g in live.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    norm = global_norm(live)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = live.get(name)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        v *= b2
        if g is not None:
            g = g * scale if scale != 1.0 else g
            m += (1.0 - b1) * g
            v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    vocab: list
    chars: list
    frozen: list = field(default_factory=list)
    optimizer: Optional[OptimizerState] = None
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: MPCM, optimizer: Optional[OptimizerState] = None, **meta) -> "Checkpoint":
        opt = None
        if optimizer is not None:
            opt = OptimizerState(
                {k: a.copy() for k, a in optimizer.m.items()},
                {k: a.copy() for k, a in optimizer.v.items()},
                optimizer.t,
                optimizer.learning_rate,
                optimizer.beta1,
                optimizer.beta2,
                optimizer.eps,
            )
        return cls(
            config=ModelConfig(**model.config.to_dict()),
            # frozen arrays never change, so they are shared rather than copied
            params={k: p.data if not p.requires_grad else p.data.copy() for k, p in model.params.items()},
            vocab=list(model.vocab.itos),
            chars=list(model.char_vocab.itos),
            frozen=sorted(k for k, p in model.params.items() if not p.requires_grad),
            optimizer=opt,
            meta=dict(meta),
        )

    def to_model(self) -> MPCM:
        params = {k: Tensor(a.copy(), requires_grad=k not in self.frozen, name=k) for k, a in self.params.items()}
        return MPCM(ModelConfig(**self.config.to_dict()), _vocab(self.vocab), _vocab(self.chars), params)


def _vocab(itos: list) -> Vocabulary:
    v = Vocabulary()
    for tok in itos[2:]:
        v.add(tok)
    if v.itos != list(itos):
        raise ValueError("vocabulary does not start with the padding and unknown entries")
    return v


def _header(ckpt: Checkpoint) -> dict:
    h = {f"config.{k}": v for k, v in ckpt.config.to_dict().items()}
    h.update({f"meta.{k}": v for k, v in ckpt.meta.items()})
    h["vocab.words"] = ckpt.vocab
    h["vocab.chars"] = ckpt.chars
    h["params.frozen"] = sorted(ckpt.frozen)
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        h.update({"optimizer.t": o.t, "optimizer.learning_rate": o.learning_rate, "optimizer.beta1": o.beta1, "optimizer.beta2": o.beta2, "optimizer.eps": o.eps})
    return h


def _write_array(out: list, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.append(arr.tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = "\n".join(f"{k}={json.dumps(v, ensure_ascii=False, sort_keys=True)}" for k, v in sorted(_header(ckpt).items()))
    hb = header.encode("utf-8")
    arrays = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        arrays += [(f"adam.m/{k}", a) for k, a in ckpt.optimizer.m.items()]
        arrays += [(f"adam.v/{k}", a) for k, a in ckpt.optimizer.v.items()]
    out = [MAGIC, struct.pack("<IQ", ckpt.version, len(hb)), hb, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        _write_array(out, name, arr)
    return b"".join(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


class CheckpointFormatError(ValueError):
    pass


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"{source}: truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", take(12))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format version {version}")
    header = {}
    for line in bytes(take(hlen)).decode("utf-8").split("\n"):
        if line:
            key, _, value = line.partition("=")
            header[key] = json.loads(value)
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointFormatError(f"{source}: trailing bytes after the last array")

    config = ModelConfig(**{k[7:]: v for k, v in header.items() if k.startswith("config.")})
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    params = {k: a for k, a in arrays.items() if not k.startswith("adam.")}
    optimizer = None
    if "optimizer.t" in header:
        optimizer = OptimizerState(
            m={k[7:]: a for k, a in arrays.items() if k.startswith("adam.m/")},
            v={k[7:]: a for k, a in arrays.items() if k.startswith("adam.v/")},
            t=header["optimizer.t"],
            learning_rate=header["optimizer.learning_rate"],
            beta1=header["optimizer.beta1"],
            beta2=header["optimizer.beta2"],
            eps=header["optimizer.eps"],
        )
    return Checkpoint(config, params, header["vocab.words"], header["vocab.chars"], header.get("params.frozen", []), optimizer, meta, version)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    clip_norm: Optional[float] = 5.0
    learning_rate: float = 1e-4
    max_passage_len: Optional[int] = 400
    eval_batch_size: int = 64

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            v = values[f.name]
            if isinstance(v, str) and v.strip().lower() in ("none", "off", ""):
                kwargs[f.name] = None
            elif f.name in ("clip_norm", "learning_rate"):
                kwargs[f.name] = float(v)
            else:
                kwargs[f.name] = coerce(v, int)
        return cls(**kwargs)


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def split_config(values: dict) -> tuple:
    """Separate a flat mapping into (ModelConfig, TrainConfig, leftovers)."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model = ModelConfig.from_dict({k: v for k, v in values.items() if k in model_keys})
    train = TrainConfig.from_dict({k: v for k, v in values.items() if k in train_keys})
    rest = {k: v for k, v in values.items() if k not in model_keys | train_keys}
    return model, train, rest


class TrainingAborted(NumericError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def dropout_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def _prepare(examples, max_len):
    out = []
    for ex in examples:
        if not ex.has_span:
            continue
        if max_len is not None:
            ex = truncate_example(ex, max_len)
            if ex is None:
                continue
        out.append(ex)
    return out


def build_model(
    config: ModelConfig,
    corpora: Sequence[Sequence[Example]],
    embeddings: Optional[EmbeddingMatrix] = None,
    seed: int = 0,
) -> MPCM:
    """Model with vocabularies drawn from ``corpora``.

    Without ``embeddings`` every word vector is a seeded random row.
    """
    words, chars = build_vocabularies(*corpora)
    if embeddings is None:
        embeddings = random_embeddings(words, dim=config.word_dim, seed=seed)
    if embeddings.dim != config.word_dim:
        raise InvalidInputError(f"embedding dimension {embeddings.dim} != word_dim {config.word_dim}")
    return MPCM.create(config, embeddings, chars, seed=seed)


def train(
    train_examples: Sequence[Example],
    config: Optional[ModelConfig] = None,
    hyper: Optional[TrainConfig] = None,
    dev_examples: Optional[Sequence[Example]] = None,
    embeddings: Optional[EmbeddingMatrix] = None,
    out_dir=None,
    model: Optional[MPCM] = None,
    on_step: Optional[Callable] = None,
    on_epoch: Optional[Callable] = None,
) -> list:
    """Train and return the checkpoint history (initialization first).

    Each later entry is the state after one epoch; its ``meta`` carries
    ``epoch``, ``train_loss``, ``dev_em``/``dev_f1`` when a dev set is given,
    ``best_dev_f1`` and ``seed``.  With ``out_dir`` the best-by-dev-F1 and the
    latest checkpoints are written as ``best.ckpt`` and ``latest.ckpt``.
    ``on_epoch(checkpoint)`` runs after each epoch; returning True ends training.
    """
    hyper = hyper or TrainConfig()
    config = config or ModelConfig()
    data = _prepare(train_examples, hyper.max_passage_len)
    if not data:
        raise InvalidInputError("training corpus has no usable labelled examples")
    dev = list(dev_examples) if dev_examples else []
    if model is None:
        model = build_model(config, [data, dev], embeddings, seed=hyper.seed)
    state = OptimizerState(learning_rate=hyper.learning_rate)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history = [Checkpoint.from_model(model, state, epoch=0, seed=hyper.seed, best_dev_f1=None)]
    best_f1 = None
    params = model.trainable()
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        started = time.perf_counter()
        batches = make_batches(data, hyper.batch_size, shuffle_seed=hyper.seed * 1_000_003 + epoch, vocab=model.vocab, char_vocab=model.char_vocab)
        losses = []
        for batch in batches:
            try:
                loss = model_loss(model, batch, training=True, rng=dropout_rng(hyper.seed, step))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError("loss is not finite")
                T.backward(loss)
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                adam_step(model.params, grads, state, clip_norm=hyper.clip_norm)
            except NumericError as exc:
                if out is not None:
                    save_checkpoint(out / "latest.ckpt", history[-1])
                raise TrainingAborted(f"epoch {epoch}, step {step}: {exc}", history[-1]) from exc
            for p in params.values():
                p.grad = None
            losses.append(value)
            step += 1
            if on_step is not None:
                on_step(step, value)
        meta = {"epoch": epoch, "seed": hyper.seed, "train_loss": float(np.mean(losses)), "steps": step}
        if dev:
            report, _ = evaluate(model, dev, batch_size=hyper.eval_batch_size)
            meta.update(dev_em=report.em, dev_f1=report.f1)
            improved = best_f1 is None or report.f1 > best_f1
            if improved:
                best_f1 = report.f1
        else:
            improved = True
        meta["best_dev_f1"] = best_f1
        ckpt = Checkpoint.from_model(model, state, **meta)
        history.append(ckpt)
        log.info(
            "epoch %d  loss %.4f%s  (%.1fs)",
            epoch,
            meta["train_loss"],
            f"  dev EM {meta['dev_em']:.2f} F1 {meta['dev_f1']:.2f}" if dev else "",
            time.perf_counter() - started,
        )
        if out is not None:
            save_checkpoint(out / "latest.ckpt", ckpt)
            if improved:
                save_checkpoint(out / "best.ckpt", ckpt)
        if on_epoch is not None and on_epoch(ckpt):
            break
    return history


def best_checkpoint(history: Sequence[Checkpoint]) -> Checkpoint:
    """Highest dev F1 (earliest on ties); the last entry when no dev scores."""
    scored = [c for c in history if c.meta.get("dev_f1") is not None]
    if not scored:
        return history[-1]
    return max(scored, key=lambda c: (c.meta["dev_f1"], -c.meta["epoch"]))


# -----------------------------------------------------------------------------
# Ensembles
# -----------------------------------------------------------------------------

_ABLATION_KEYS = ("use_char", "use_filter", "use_full", "use_max", "use_mean", "use_aggregation", "vanilla_cosine")


def _as_model(item) -> MPCM:
    if isinstance(item, MPCM):
        return item
    if isinstance(item, Checkpoint):
        return item.to_model()
    return load_checkpoint(item).to_model()


def load_ensemble(items) -> list:
    models = [_as_model(x) for x in items]
    if not models:
        raise InvalidInputError("an ensemble needs at least one model")
    ref = models[0].config
    for m in models[1:]:
        diff = [k for k in _ABLATION_KEYS if getattr(m.config, k) != getattr(ref, k)]
        if diff:
            raise InvalidInputError(f"ensemble members disagree on {', '.join(diff)}")
    return models


def ensemble_predict(checkpoints, example: Example) -> BoundaryDistributions:
    """Average of the members' begin/end distributions for one example."""
    models = load_ensemble(checkpoints)
    return average_distributions([m.forward(example)[0] for m in models])
