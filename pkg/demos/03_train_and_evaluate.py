"""
Training a small model end to end
=================================

Train a reduced-size network on a synthetic corpus, score it with EM/F1
and the breakdown tables, then save, reload and ensemble checkpoints.
A couple of minutes on one core.
"""

import logging
import tempfile
from pathlib import Path

from mpcm.evaluation import evaluate
from mpcm.model import ModelConfig
from mpcm.synthetic import generate_corpus, synthetic_embeddings
from mpcm.text import build_vocabularies
from mpcm.training import TrainConfig, best_checkpoint, ensemble_predict, load_checkpoint, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

train_ex = generate_corpus(400, seed=10, id_prefix="tr")
dev_ex = generate_corpus(100, seed=11, id_prefix="dev")
words, _ = build_vocabularies(train_ex, dev_ex)
embeddings = synthetic_embeddings(words, dim=100, seed=0)

# smaller than the defaults so the demo is quick
config = ModelConfig(word_dim=100, char_hidden=50, lstm_hidden=50, perspectives=10, prediction_hidden=50)
out = Path(tempfile.mkdtemp())

runs = []
for seed in (0, 1):
    history = train(train_ex, config, TrainConfig(epochs=4, seed=seed, learning_rate=1e-3), dev_examples=dev_ex, embeddings=embeddings, out_dir=out / f"seed{seed}")
    runs.append(best_checkpoint(history))

report, answers = evaluate(runs[0].to_model(), dev_ex, out_path=out / "preds.json")
print(report.format_table())

# a checkpoint file reloads to the same model
reloaded = load_checkpoint(out / "seed0" / "best.ckpt").to_model()
print("reloaded EM:", evaluate(reloaded, dev_ex)[0].em)

# averaging the two runs' distributions
ensemble_report, _ = evaluate([r.to_model() for r in runs], dev_ex)
print(f"single F1 {report.f1:.1f}, two-model ensemble F1 {ensemble_report.f1:.1f}")

d = ensemble_predict(runs, dev_ex[0])
print("ensemble p_begin sums to", round(float(d.p_begin.sum()), 6))
