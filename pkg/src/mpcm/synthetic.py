"""Synthetic SQuAD-style corpora for smoke tests, demos and scaled checks.

Passages are short factual stories ("Korvan built the stone tower in
Belmar in 1845 .") with distractor sentences that reuse the same people,
verbs and places, so answering requires matching the question's context
rather than spotting a word type.  Questions come in several types (who,
what, when, in which, how many) so the evaluation breakdowns have content.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .text import EmbeddingMatrix, Example, Vocabulary, align_answer_span, tokenize

_ONSETS = ["b", "k", "t", "m", "r", "l", "d", "v", "s", "n", "g", "p", "z", "h"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "n", "r", "l", "s", "th", "m"]

VERBS = ["built", "visited", "painted", "discovered", "sold", "repaired", "designed", "guarded", "described", "bought"]
ADJECTIVES = ["old", "red", "stone", "small", "golden", "northern", "quiet", "broken", "famous", "hidden"]
NOUNS = ["tower", "bridge", "library", "garden", "ship", "temple", "market", "mill", "harbor", "castle"]
COUNTABLES = ["horses", "books", "lamps", "coins", "maps", "boats"]


def _name(rng: np.random.Generator) -> str:
    syll = int(rng.integers(2, 4))
    word = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syll)) + rng.choice(_CODAS)
    return word.capitalize()


class _World:
    def __init__(self, rng: np.random.Generator, n_people: int = 60, n_places: int = 30):
        self.people = sorted({_name(rng) for _ in range(n_people)})
        self.places = sorted({_name(rng) for _ in range(n_places)} - set(self.people))


def _fact(rng, world):
    two_part = rng.random() < 0.3
    person = str(rng.choice(world.people))
    if two_part:
        person += " " + str(rng.choice(world.people))
    return {
        "person": person,
        "verb": str(rng.choice(VERBS)),
        "thing": f"the {rng.choice(ADJECTIVES)} {rng.choice(NOUNS)}",
        "place": str(rng.choice(world.places)),
        "year": str(int(rng.integers(1500, 2000))),
        "count": str(int(rng.integers(2, 99))),
        "countable": str(rng.choice(COUNTABLES)),
    }


def _sentence(fact, style: int) -> tuple:
    """Return (text, {slot: char offset within the sentence})."""
    parts = []
    offsets = {}

    def put(slot, text):
        pos = sum(len(p) + 1 for p in parts)
        if slot:
            offsets[slot] = pos
        parts.append(text)

    if style == 0:
        put("person", fact["person"]), put(None, fact["verb"]), put("thing", fact["thing"])
        put(None, "in"), put("place", fact["place"]), put(None, "in"), put("year", fact["year"])
    elif style == 1:
        put(None, "In"), put("year", fact["year"]), put(None, ","), put("person", fact["person"])
        put(None, fact["verb"]), put("thing", fact["thing"]), put(None, "near"), put("place", fact["place"])
    else:
        put("person", fact["person"]), put(None, "who"), put(None, fact["verb"]), put("thing", fact["thing"])
        put(None, "also kept"), put("count", fact["count"]), put(None, fact["countable"]), put(None, "in"), put("place", fact["place"])
    put(None, ".")
    return " ".join(parts), offsets


def _question(rng, fact, style: int):
    """(question text, answer slot) for a fact rendered with ``style``."""
    choices = [
        (f"Who {fact['verb']} {fact['thing']} ?", "person"),
        (f"What did {fact['person']} {fact['verb'].rstrip('ed')} ?", "thing"),
        (f"What was {fact['verb']} by {fact['person']} ?", "thing"),
        (f"In which town was {fact['thing']} {fact['verb']} by {fact['person']} ?", "place"),
    ]
    if style in (0, 1):
        choices += [
            (f"When did {fact['person']} visit {fact['place']} ?", "year") if fact["verb"] == "visited" else
            (f"In what year was {fact['thing']} {fact['verb']} ?", "year"),
            (f"What year did {fact['person']} arrive in {fact['place']} ?", "year"),
        ]
    else:
        choices.append((f"How many {fact['countable']} did {fact['person']} keep ?", "count"))
    return choices[int(rng.integers(len(choices)))]


def generate_corpus(
    n: int,
    seed: int = 0,
    sentences: tuple = (3, 5),
    max_passage_tokens: Optional[int] = None,
    id_prefix: str = "syn",
) -> list:
    """``n`` labelled examples; deterministic in ``seed``.

    With ``max_passage_tokens`` set, sentences are dropped from a story until
    it fits (the answer sentence is always kept).
    """
    rng = np.random.default_rng(seed)
    world = _World(np.random.default_rng(1_000_003))
    out = []
    while len(out) < n:
        k = int(rng.integers(sentences[0], sentences[1] + 1))
        target = _fact(rng, world)
        facts = [target]
        for _ in range(k - 1):
            d = _fact(rng, world)
            # distractors share some slots with the target
            for slot in ("person", "verb", "place", "thing"):
                if rng.random() < 0.35:
                    d[slot] = target[slot]
            # keep the answer unique: no distractor may repeat a pair a question keys on
            if d["verb"] == target["verb"] and (d["person"] == target["person"] or d["thing"] == target["thing"]):
                d["verb"] = str(rng.choice([v for v in VERBS if v != target["verb"]]))
            if d["person"] == target["person"] and d["place"] == target["place"]:
                d["place"] = str(rng.choice([p for p in world.places if p != target["place"]]))
            facts.append(d)
        order = [int(i) for i in rng.permutation(len(facts))]
        styles = [int(rng.integers(3)) for _ in facts]
        question, slot = _question(rng, target, styles[0])
        rendered = [_sentence(facts[i], styles[i]) for i in order]
        if max_passage_tokens is not None:
            keep = [j for j, i in enumerate(order)]
            while sum(len(tokenize(rendered[j][0])) for j in keep) > max_passage_tokens and len(keep) > 1:
                drop = [j for j in keep if order[j] != 0]
                keep.remove(drop[-1])
            order = [order[j] for j in keep]
            rendered = [rendered[j] for j in keep]
        context, answer_start, pos = [], None, 0
        for i, (text, offsets) in zip(order, rendered):
            if i == 0:
                answer_start = pos + offsets[slot]
            context.append(text)
            pos += len(text) + 1
        context = " ".join(context)
        answer = target[slot]
        passage = tokenize(context)
        span = align_answer_span(passage, answer_start, answer, context)
        if span is None or (max_passage_tokens is not None and len(passage) > max_passage_tokens):
            continue
        out.append(
            Example(
                id=f"{id_prefix}-{seed}-{len(out)}",
                question=tokenize(question),
                passage=passage,
                context=context,
                question_text=question,
                answer_begin=span[0],
                answer_end=span[1],
                gold_texts=[answer],
            )
        )
    return out


def synthetic_embeddings(vocab: Vocabulary, dim: int = 300, seed: int = 0) -> EmbeddingMatrix:
    """Unit-scale Gaussian word vectors standing in for pre-trained ones."""
    rng = np.random.default_rng(seed)
    matrix = rng.normal(scale=1.0 / np.sqrt(dim), size=(len(vocab), dim))
    matrix[vocab.pad_index] = 0.0
    return EmbeddingMatrix(vocab, matrix, oov_count=0)
