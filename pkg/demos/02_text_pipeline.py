"""
From a SQuAD file to padded batches
===================================

Write a few synthetic questions to disk in SQuAD v1.1 layout, load them
back, and look at tokens, answer spans and batch arrays.
"""

import tempfile
from pathlib import Path

from mpcm.synthetic import generate_corpus
from mpcm.text import build_vocabularies, dump_squad, load_squad, make_batches, tokenize

# tokens keep exact character offsets into the original text
for tok in tokenize("Welsh-medium schools, colleges (and more)."):
    print(f"{tok.text!r:12} [{tok.char_start}, {tok.char_end})")

workdir = Path(tempfile.mkdtemp())
path = workdir / "toy.json"
dump_squad(path, generate_corpus(6, seed=3))

examples = load_squad(path)
ex = examples[0]
print("\nquestion:", ex.question_text)
print("passage :", ex.context)
print(f"gold span (1-based tokens): {ex.answer_begin}..{ex.answer_end} ->", repr(ex.span_text(ex.answer_begin, ex.answer_end)))

# word vocabulary is lowercased, the character vocabulary keeps case
words, chars = build_vocabularies(examples)
print(f"\n{len(words)} words, {len(chars)} characters")

(batch, *_) = make_batches(examples, batch_size=4, vocab=words, char_vocab=chars)
print("passage ids:", batch.passage_ids.shape, " characters:", batch.passage_chars.shape)
print("passage lengths:", batch.passage_mask.sum(axis=1))
print("gold begin/end (0-based):", batch.begin, batch.end)
