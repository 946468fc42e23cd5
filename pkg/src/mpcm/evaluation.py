"""Constrained span decoding, SQuAD-style EM/F1 and breakdown reports."""

from __future__ import annotations

import json
import re
import string
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import MPCM, BoundaryDistributions, average_distributions
from .tensor import InvalidInputError
from .text import Example, tokenize

LENGTH_BUCKETS = [str(i) for i in range(1, 10)] + ["10+"]
TWO_WORD_TYPES = ("what year", "in what", "in which", "how did", "how many")
ONE_WORD_TYPES = ("what", "who", "when", "where", "which", "why", "how", "whom", "whose")
QUESTION_TYPES = TWO_WORD_TYPES + ONE_WORD_TYPES + ("other",)


@dataclass
class SpanPrediction:
    question_id: str
    begin: int
    end: int
    answer: str
    probability: float


def decode_span(dists: BoundaryDistributions, max_span_len: Optional[int] = None) -> tuple:
    """Best 1-based span ``(b, e, p_begin[b] * p_end[e])`` with ``b <= e``.

    Linear time: for each end position keep the earliest best begin inside
    the allowed window.  Ties go to the smallest begin, then smallest end.
    """
    pb, pe = np.asarray(dists.p_begin), np.asarray(dists.p_end)
    n = len(pb)
    if n == 0:
        raise InvalidInputError("cannot decode an empty passage")
    if max_span_len is not None and max_span_len < 1:
        raise InvalidInputError("max_span_len must be >= 1")
    window: deque = deque()
    best = (-1.0, 0, 0)
    for e in range(n):
        while window and pb[window[-1]] < pb[e]:
            window.pop()
        window.append(e)
        if max_span_len is not None and window[0] <= e - max_span_len:
            window.popleft()
        b = window[0]
        score = pb[b] * pe[e]
        if score > best[0] or (score == best[0] and b < best[1]):
            best = (score, b, e)
    score, b, e = best
    return b + 1, e + 1, float(score)


def brute_force_span(dists: BoundaryDistributions, max_span_len: Optional[int] = None) -> tuple:
    """Quadratic reference decoder with the same tie-breaking."""
    pb, pe = np.asarray(dists.p_begin), np.asarray(dists.p_end)
    best = None
    for b in range(len(pb)):
        for e in range(b, len(pe)):
            if max_span_len is not None and e - b >= max_span_len:
                break
            key = (-(pb[b] * pe[e]), b, e)
            if best is None or key < best:
                best = key
    return best[1] + 1, best[2] + 1, float(-best[0])


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _check_golds(golds):
    if isinstance(golds, str):
        golds = [golds]
    if not golds:
        raise InvalidInputError("at least one gold answer is required")
    return golds


def exact_match(pred: str, golds) -> int:
    golds = _check_golds(golds)
    norm = normalize_answer(pred)
    return int(any(norm == normalize_answer(g) for g in golds))


def _token_f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    same = sum((Counter(p) & Counter(g)).values())
    if same == 0:
        return 0.0
    precision, recall = same / len(p), same / len(g)
    return 2 * precision * recall / (precision + recall)


def f1_score(pred: str, golds) -> float:
    golds = _check_golds(golds)
    return max(_token_f1(pred, g) for g in golds)


# -----------------------------------------------------------------------------
# Breakdowns and reports
# -----------------------------------------------------------------------------


def question_type(question: str) -> str:
    words = [t.text.lower() for t in tokenize(question)]
    two = " ".join(words[:2])
    if two in TWO_WORD_TYPES:
        return two
    if words and words[0] in ONE_WORD_TYPES:
        return words[0]
    return "other"


def length_bucket(answer: str) -> str:
    n = max(len(tokenize(answer)), 1)
    return str(n) if n < 10 else "10+"


@dataclass
class BucketStats:
    count: int = 0
    em_sum: float = 0.0
    f1_sum: float = 0.0

    def add(self, em: float, f1: float) -> None:
        self.count += 1
        self.em_sum += em
        self.f1_sum += f1

    @property
    def em(self) -> float:
        return 100.0 * self.em_sum / self.count if self.count else 0.0

    @property
    def f1(self) -> float:
        return 100.0 * self.f1_sum / self.count if self.count else 0.0

    def to_dict(self) -> dict:
        return {"count": self.count, "em": self.em, "f1": self.f1}


@dataclass
class EvalReport:
    overall: BucketStats = field(default_factory=BucketStats)
    by_length: dict = field(default_factory=lambda: {k: BucketStats() for k in LENGTH_BUCKETS})
    by_question_type: dict = field(default_factory=lambda: {k: BucketStats() for k in QUESTION_TYPES})
    skipped: int = 0

    @property
    def em(self) -> float:
        return self.overall.em

    @property
    def f1(self) -> float:
        return self.overall.f1

    @property
    def total(self) -> int:
        return self.overall.count

    def add(self, example: Example, prediction: str) -> None:
        em = exact_match(prediction, example.gold_texts)
        f1 = f1_score(prediction, example.gold_texts)
        self.overall.add(em, f1)
        self.by_length[length_bucket(example.gold_texts[0])].add(em, f1)
        self.by_question_type[question_type(example.question_text)].add(em, f1)

    def to_dict(self) -> dict:
        return {
            "exact_match": self.em,
            "f1": self.f1,
            "total": self.total,
            "skipped": self.skipped,
            "by_answer_length": [{"bucket": k, **v.to_dict()} for k, v in self.by_length.items()],
            "by_question_type": [{"bucket": k, **v.to_dict()} for k, v in self.by_question_type.items()],
        }

    def format_table(self) -> str:
        lines = [f"EM {self.em:6.2f}   F1 {self.f1:6.2f}   ({self.total} questions, {self.skipped} skipped)", ""]
        for title, buckets in (("answer length", self.by_length), ("question type", self.by_question_type)):
            lines.append(f"{title:<14} {'count':>6} {'EM':>7} {'F1':>7}")
            for name, b in buckets.items():
                if b.count:
                    lines.append(f"{name:<14} {b.count:>6} {b.em:>7.2f} {b.f1:>7.2f}")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"


def predict_distributions(predictor, examples: Sequence[Example], batch_size: int = 64) -> list:
    """Distributions from one model or the average over a list of models."""
    if isinstance(predictor, MPCM):
        return predictor.predict(examples, batch_size=batch_size)
    models = list(predictor)
    if not models:
        raise InvalidInputError("no models given")
    per_model = [m.predict(examples, batch_size=batch_size) for m in models]
    return [average_distributions(list(ds)) for ds in zip(*per_model)]


def predict_spans(predictor, examples: Sequence[Example], max_span_len: Optional[int] = None, batch_size: int = 64) -> tuple:
    dists = predict_distributions(predictor, examples, batch_size=batch_size)
    spans = []
    for ex, d in zip(examples, dists):
        b, e, prob = decode_span(d, max_span_len)
        spans.append(SpanPrediction(ex.id, b, e, ex.span_text(b, e), prob))
    return spans, dists


def write_predictions(path, spans: Sequence[SpanPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({s.question_id: s.answer for s in spans}, fh, ensure_ascii=False, indent=1)


def write_probabilities(path, examples: Sequence[Example], dists: Sequence[BoundaryDistributions]) -> None:
    """Per-position begin/end probabilities, for plotting."""
    payload = {
        ex.id: {
            "tokens": [t.text for t in ex.passage],
            "p_begin": d.p_begin.tolist(),
            "p_end": d.p_end.tolist(),
        }
        for ex, d in zip(examples, dists)
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False)


def score_predictions(examples: Sequence[Example], answers: dict) -> EvalReport:
    report = EvalReport()
    for ex in examples:
        if not ex.gold_texts:
            report.skipped += 1
            continue
        report.add(ex, answers.get(ex.id, ""))
    return report


def evaluate(
    predictor,
    examples: Sequence[Example],
    out_path=None,
    max_span_len: Optional[int] = None,
    batch_size: int = 64,
    probs_path=None,
) -> tuple:
    """Decode and score every example; returns ``(EvalReport, {id: answer})``.

    ``predictor`` is an :class:`MPCM` or a list of them (probability-averaged
    ensemble).  Examples without gold answers are skipped and counted.
    """
    spans, dists = predict_spans(predictor, examples, max_span_len=max_span_len, batch_size=batch_size)
    answers = {s.question_id: s.answer for s in spans}
    report = score_predictions(examples, answers)
    if out_path is not None:
        write_predictions(out_path, spans)
    if probs_path is not None:
        write_probabilities(probs_path, examples, dists)
    return report, answers
