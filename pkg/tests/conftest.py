import numpy as np
import pytest

from mpcm.model import MPCM, ModelConfig
from mpcm.synthetic import generate_corpus, synthetic_embeddings
from mpcm.text import build_vocabularies, example_from_text


def tiny_config(**overrides) -> ModelConfig:
    values = dict(word_dim=5, char_emb_dim=3, char_hidden=3, lstm_hidden=3, perspectives=2, prediction_hidden=3)
    values.update(overrides)
    return ModelConfig(**values)


def make_model(examples, config: ModelConfig, seed: int = 0) -> MPCM:
    words, chars = build_vocabularies(examples)
    return MPCM.create(config, synthetic_embeddings(words, config.word_dim, seed=seed), chars, seed=seed)


@pytest.fixture
def toy_example():
    # 4-token passage, 2-token question
    context = "Korvan built the tower"
    return example_from_text("toy", "Who built", context, 0, "Korvan")


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(12, seed=5, max_passage_tokens=30)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
