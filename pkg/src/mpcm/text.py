"""SQuAD ingestion, tokenization with character offsets, vocabularies,
pre-trained embeddings and padded batches.

Tokenizer rules (deterministic, offsets exact):

1. split on whitespace;
2. peel punctuation/symbol characters off both ends of each chunk, one
   token per character;
3. split the remaining core on internal hyphens, keeping each hyphen as its
   own token.
"""

from __future__ import annotations

import json
import logging
import os
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
HYPHENS = "-\u2010\u2011\u2012\u2013\u2014"


class SquadFormatError(ValueError):
    """Malformed SQuAD document; the message names the offending JSON path."""


class EmbeddingFormatError(ValueError):
    """Malformed embedding file; the message names the line number."""


@dataclass(frozen=True)
class Token:
    text: str
    char_start: int
    char_end: int


@dataclass
class Example:
    """One (question, passage, answer) instance.

    ``answer_begin``/``answer_end`` are 1-based inclusive token indices into
    ``passage`` (``None`` when no gold span could be aligned).
    """

    id: str
    question: list
    passage: list
    context: str
    question_text: str = ""
    answer_begin: Optional[int] = None
    answer_end: Optional[int] = None
    gold_texts: list = field(default_factory=list)

    def __post_init__(self):
        if self.answer_begin is not None:
            n = len(self.passage)
            if not 1 <= self.answer_begin <= self.answer_end <= n:
                raise ValueError(
                    f"example {self.id}: span ({self.answer_begin}, {self.answer_end}) outside 1..{n}"
                )

    @property
    def has_span(self) -> bool:
        return self.answer_begin is not None

    def span_text(self, begin: int, end: int) -> str:
        """Original passage characters covered by 1-based tokens begin..end."""
        return self.context[self.passage[begin - 1].char_start : self.passage[end - 1].char_end]


# -----------------------------------------------------------------------------
# Tokenization and alignment
# -----------------------------------------------------------------------------


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def _split_chunk(text: str, start: int, end: int, out: list) -> None:
    trailing = []
    while start < end and _is_punct(text[start]):
        out.append(Token(text[start], start, start + 1))
        start += 1
    while end > start and _is_punct(text[end - 1]):
        trailing.append(Token(text[end - 1], end - 1, end))
        end -= 1
    piece = start
    for i in range(start, end):
        if text[i] in HYPHENS:
            if i > piece:
                out.append(Token(text[piece:i], piece, i))
            out.append(Token(text[i], i, i + 1))
            piece = i + 1
    if end > piece:
        out.append(Token(text[piece:end], piece, end))
    out.extend(reversed(trailing))


def tokenize(text: str) -> list:
    tokens: list = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        _split_chunk(text, i, j, tokens)
        i = j
    return tokens


def align_answer_span(passage_tokens: Sequence[Token], answer_start: int, answer_text: str, context: Optional[str] = None):
    """Map a character-indexed answer onto a 1-based inclusive token span.

    Returns ``None`` when the answer cannot be aligned: offsets outside the
    passage, no overlapping token, or a boundary strictly inside a token
    where the covering tokens do not reproduce the answer after trimming.
    When ``context`` is given, the characters at the stated offset must also
    match the answer text.
    """
    stripped = answer_text.strip()
    if not stripped or not passage_tokens:
        return None
    start = answer_start + (len(answer_text) - len(answer_text.lstrip()))
    end = start + len(stripped)
    limit = passage_tokens[-1].char_end if context is None else len(context)
    if start < 0 or start >= limit or end > limit:
        return None
    if context is not None and " ".join(context[start:end].split()) != " ".join(stripped.split()):
        return None
    covering = [k for k, t in enumerate(passage_tokens) if t.char_end > start and t.char_start < end]
    if not covering:
        return None
    b, e = covering[0], covering[-1]
    if passage_tokens[b].char_start != start or passage_tokens[e].char_end != end:
        if context is None:
            return None
        span = context[passage_tokens[b].char_start : passage_tokens[e].char_end]
        if span.strip() != stripped:
            return None
    return b + 1, e + 1


# -----------------------------------------------------------------------------
# SQuAD loading
# -----------------------------------------------------------------------------


def _require(obj, key, path):
    if not isinstance(obj, dict):
        raise SquadFormatError(f"{path}: expected an object")
    if key not in obj:
        raise SquadFormatError(f"{path}: missing required key {key!r}")
    return obj[key]


def _require_list(obj, key, path):
    value = _require(obj, key, path)
    if not isinstance(value, list):
        raise SquadFormatError(f"{path}.{key}: expected a list")
    return value


def parse_squad(doc: dict, keep_unaligned: bool = False) -> tuple:
    """Build examples from a parsed SQuAD v1.1 document.

    Returns ``(examples, dropped)``.  Unlabelled questions (empty answer
    list) are always kept; questions whose answers cannot be aligned are
    dropped unless ``keep_unaligned`` is set.
    """
    examples, dropped = [], 0
    for a, article in enumerate(_require_list(doc, "data", "$")):
        apath = f"data[{a}]"
        for p, para in enumerate(_require_list(article, "paragraphs", apath)):
            ppath = f"{apath}.paragraphs[{p}]"
            context = _require(para, "context", ppath)
            if not isinstance(context, str):
                raise SquadFormatError(f"{ppath}.context: expected a string")
            passage = tokenize(context)
            for q, qa in enumerate(_require_list(para, "qas", ppath)):
                qpath = f"{ppath}.qas[{q}]"
                qid = str(_require(qa, "id", qpath))
                question_text = _require(qa, "question", qpath)
                answers = qa.get("answers", [])
                if not isinstance(answers, list):
                    raise SquadFormatError(f"{qpath}.answers: expected a list")
                golds, span = [], None
                for k, ans in enumerate(answers):
                    text = _require(ans, "text", f"{qpath}.answers[{k}]")
                    start = _require(ans, "answer_start", f"{qpath}.answers[{k}]")
                    golds.append(text)
                    if span is None:
                        span = align_answer_span(passage, int(start), text, context)
                if answers and span is None and not keep_unaligned:
                    dropped += 1
                    continue
                examples.append(
                    Example(
                        id=qid,
                        question=tokenize(question_text),
                        passage=passage,
                        context=context,
                        question_text=question_text,
                        answer_begin=None if span is None else span[0],
                        answer_end=None if span is None else span[1],
                        gold_texts=golds,
                    )
                )
    return examples, dropped


def read_squad(path, keep_unaligned: bool = False) -> tuple:
    """Load a SQuAD file, returning ``(examples, dropped_count)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SquadFormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return parse_squad(doc, keep_unaligned=keep_unaligned)
    except SquadFormatError as exc:
        raise SquadFormatError(f"{path}: {exc}") from None


def load_squad(path, keep_unaligned: bool = False) -> list:
    examples, dropped = read_squad(path, keep_unaligned=keep_unaligned)
    if dropped:
        logger.warning("%s: dropped %d question(s) with unalignable answers", path, dropped)
    return examples


def truncate_example(ex: Example, max_len: int) -> Optional[Example]:
    """Cut the passage to ``max_len`` tokens; ``None`` if the gold span is lost."""
    if len(ex.passage) <= max_len:
        return ex
    if ex.has_span and ex.answer_end > max_len:
        return None
    return Example(
        ex.id, ex.question, ex.passage[:max_len], ex.context, ex.question_text,
        ex.answer_begin, ex.answer_end, ex.gold_texts,
    )


# -----------------------------------------------------------------------------
# Vocabularies and embeddings
# -----------------------------------------------------------------------------


class Vocabulary:
    """Bijective token/index map; index 0 is padding, 1 is unknown."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token) -> bool:
        return token in self.stoi

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, 1)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def pad_index(self) -> int:
        return 0

    @property
    def unk_index(self) -> int:
        return 1


def build_vocabularies(*corpora: Iterable[Example]) -> tuple:
    """Word vocabulary (lowercased) and character vocabulary (case kept)."""
    words, chars = [], []
    seen_w, seen_c = set(), set()
    for corpus in corpora:
        for ex in corpus:
            for tok in list(ex.question) + list(ex.passage):
                w = tok.text.lower()
                if w not in seen_w:
                    seen_w.add(w)
                    words.append(w)
                for ch in tok.text:
                    if ch not in seen_c:
                        seen_c.add(ch)
                        chars.append(ch)
    return Vocabulary(words), Vocabulary(chars)


@dataclass
class EmbeddingMatrix:
    """Word vectors aligned with a vocabulary; frozen during training."""

    vocab: Vocabulary
    matrix: np.ndarray
    oov_count: int = 0
    trainable: bool = False

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.vocab):
            raise ValueError(f"embedding rows {self.matrix.shape[0]} != vocabulary size {len(self.vocab)}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _parse_floats(parts, lineno):
    try:
        return [float(x) for x in parts]
    except ValueError:
        raise EmbeddingFormatError(f"line {lineno}: non-numeric vector entry") from None


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_embeddings(path, vocab: Vocabulary, dim: int = 300, seed: int = 0, scale: float = 0.05) -> EmbeddingMatrix:
    """Read ``token f1 ... f_dim`` lines into rows for ``vocab``.

    Lookup is case-insensitive; an exactly lowercase entry wins over a
    cased one.  Rows not found are drawn uniformly from [-scale, scale]
    with a seeded generator.  The padding row is all zeros.
    """
    matrix = np.zeros((len(vocab), dim))
    found = np.zeros(len(vocab), dtype=bool)
    exact = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) - 1 != dim:
                head = parts[1 : len(parts) - dim] if len(parts) - 1 > dim else []
                if head and not all(_is_float(h) for h in head):
                    logger.warning("%s:%d: token contains a space; skipped", path, lineno)
                    continue
                raise EmbeddingFormatError(f"line {lineno}: expected {dim} values, found {len(parts) - 1}")
            token = parts[0]
            key = token.lower()
            idx = vocab.stoi.get(key)
            if idx is None or idx == vocab.pad_index or exact[idx]:
                continue
            if found[idx] and token != key:
                continue
            matrix[idx] = _parse_floats(parts[1:], lineno)
            found[idx] = True
            exact[idx] = token == key
    rng = np.random.default_rng(seed)
    oov = [i for i in range(len(vocab)) if not found[i] and i != vocab.pad_index]
    matrix[oov] = rng.uniform(-scale, scale, size=(len(oov), dim))
    return EmbeddingMatrix(vocab, matrix, oov_count=len(oov))


def random_embeddings(vocab: Vocabulary, dim: int = 300, seed: int = 0, scale: float = 0.05) -> EmbeddingMatrix:
    """Embedding matrix with every non-padding row drawn uniformly."""
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-scale, scale, size=(len(vocab), dim))
    matrix[vocab.pad_index] = 0.0
    return EmbeddingMatrix(vocab, matrix, oov_count=len(vocab) - 1)


def write_embeddings(path, vectors: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in vectors.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


# -----------------------------------------------------------------------------
# Batching
# -----------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded index arrays for B examples.

    ``question_chars``/``passage_chars`` are ``(B, T, C)`` character indices;
    gold begin/end are 0-based positions (-1 when unlabelled).
    """

    examples: list
    question_ids: np.ndarray
    passage_ids: np.ndarray
    question_chars: np.ndarray
    passage_chars: np.ndarray
    question_mask: np.ndarray
    passage_mask: np.ndarray
    begin: np.ndarray
    end: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def ids(self) -> list:
        return [ex.id for ex in self.examples]


def _char_array(seqs, char_vocab, t_max):
    c_max = max([len(tok.text) for seq in seqs for tok in seq] + [1])
    out = np.zeros((len(seqs), t_max, c_max), dtype=np.int64)
    for b, seq in enumerate(seqs):
        for t, tok in enumerate(seq):
            out[b, t, : len(tok.text)] = [char_vocab[ch] for ch in tok.text]
    return out


def encode_batch(examples: Sequence[Example], vocab: Vocabulary, char_vocab: Vocabulary) -> Batch:
    if not examples:
        raise ValueError("cannot encode an empty batch")
    b = len(examples)
    m_max = max(max(len(ex.question) for ex in examples), 1)
    n_max = max(max(len(ex.passage) for ex in examples), 1)
    q_ids = np.zeros((b, m_max), dtype=np.int64)
    p_ids = np.zeros((b, n_max), dtype=np.int64)
    q_mask = np.zeros((b, m_max), dtype=bool)
    p_mask = np.zeros((b, n_max), dtype=bool)
    begin = np.full(b, -1, dtype=np.int64)
    end = np.full(b, -1, dtype=np.int64)
    for i, ex in enumerate(examples):
        q_ids[i, : len(ex.question)] = [vocab[t.text.lower()] for t in ex.question]
        p_ids[i, : len(ex.passage)] = [vocab[t.text.lower()] for t in ex.passage]
        q_mask[i, : len(ex.question)] = True
        p_mask[i, : len(ex.passage)] = True
        if ex.has_span:
            begin[i], end[i] = ex.answer_begin - 1, ex.answer_end - 1
    return Batch(
        list(examples),
        q_ids,
        p_ids,
        _char_array([ex.question for ex in examples], char_vocab, m_max),
        _char_array([ex.passage for ex in examples], char_vocab, n_max),
        q_mask,
        p_mask,
        begin,
        end,
    )


def make_batches(
    examples: Sequence[Example],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    *,
    vocab: Vocabulary,
    char_vocab: Vocabulary,
    bucket_batches: int = 20,
) -> list:
    """Group examples into padded batches bucketed by passage length.

    Without a seed, examples are sorted by passage length (stable) and cut
    into consecutive batches.  With a seed, examples are shuffled, sorted by
    length within pools of ``bucket_batches`` batches, cut, and the batch
    order is shuffled; the result depends only on the seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(len(examples)))
    if shuffle_seed is None:
        order.sort(key=lambda i: len(examples[i].passage))
        chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    else:
        rng = np.random.default_rng(shuffle_seed)
        order = [int(i) for i in rng.permutation(len(examples))]
        pool = batch_size * bucket_batches
        chunks = []
        for lo in range(0, len(order), pool):
            part = sorted(order[lo : lo + pool], key=lambda i: len(examples[i].passage))
            chunks.extend(part[i : i + batch_size] for i in range(0, len(part), batch_size))
        chunks = [chunks[int(i)] for i in rng.permutation(len(chunks))]
    return [encode_batch([examples[i] for i in chunk], vocab, char_vocab) for chunk in chunks]


def example_from_text(qid: str, question: str, context: str, answer_start: Optional[int] = None, answer_text: Optional[str] = None) -> Example:
    """Convenience constructor used by demos and tests."""
    passage = tokenize(context)
    span = None
    if answer_text is not None:
        span = align_answer_span(passage, answer_start, answer_text, context)
    return Example(
        id=qid,
        question=tokenize(question),
        passage=passage,
        context=context,
        question_text=question,
        answer_begin=None if span is None else span[0],
        answer_end=None if span is None else span[1],
        gold_texts=[] if answer_text is None else [answer_text],
    )


def dump_squad(path, examples: Sequence[Example]) -> None:
    """Write examples back out as a SQuAD v1.1 file (one paragraph each)."""
    paragraphs = []
    for ex in examples:
        answers = []
        if ex.has_span:
            start = ex.passage[ex.answer_begin - 1].char_start
            answers.append({"text": ex.span_text(ex.answer_begin, ex.answer_end), "answer_start": start})
        paragraphs.append({"context": ex.context, "qas": [{"id": ex.id, "question": ex.question_text, "answers": answers}]})
    doc = {"version": "1.1", "data": [{"title": "corpus", "paragraphs": paragraphs}]}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False)
