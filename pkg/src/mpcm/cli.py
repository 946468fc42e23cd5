"""Command-line entry point: ``mpcm {train,evaluate,predict,ablate,gradcheck}``.

Every ModelConfig and TrainConfig field is available both as a key in the
``--config`` file and as a ``--flag`` (underscores become dashes); flags win.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .evaluation import evaluate, predict_spans, write_predictions
from .model import ModelConfig
from .synthetic import synthetic_embeddings
from .tensor import grad_check, grad_check_params
from .text import build_vocabularies, example_from_text, load_embeddings, load_squad
from .training import (
    TrainConfig,
    best_checkpoint,
    build_model,
    load_ensemble,
    model_loss,
    read_config_file,
    split_config,
    train,
)

log = logging.getLogger("mpcm")

ABLATION_FLAGS = ("use_char", "use_filter", "use_full", "use_max", "use_mean", "use_aggregation")


class UsageError(Exception):
    pass


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model and training settings (override --config)")
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            if f.name == "seed":
                continue
            group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None, metavar="VALUE")
    parser.add_argument("--config", type=Path, help="flat key = value settings file")
    parser.add_argument("--seed", type=int, default=None, help="seed for initialisation, shuffling and dropout")


def _settings(args) -> tuple:
    values = {}
    if args.config is not None:
        _need_file(args.config)
        values.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            values[key[4:]] = value
    if args.seed is not None:
        values["seed"] = args.seed
    model_cfg, train_cfg, rest = split_config(values)
    if rest:
        raise UsageError(f"unknown setting(s): {', '.join(sorted(rest))}")
    return model_cfg, train_cfg


def _need_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    return path


def _load_data(path, keep_unaligned: bool = True) -> list:
    return load_squad(_need_file(path), keep_unaligned=keep_unaligned)


def _embeddings(path, train_ex, dev_ex, config: ModelConfig, seed: int):
    if path is None:
        return None
    words, _ = build_vocabularies(train_ex, dev_ex)
    return load_embeddings(_need_file(path), words, dim=config.word_dim, seed=seed)


def _train_one(args, config: ModelConfig, hyper: TrainConfig, train_ex, dev_ex, out_dir=None):
    emb = _embeddings(args.embeddings, train_ex, dev_ex, config, hyper.seed)
    return train(train_ex, config, hyper, dev_examples=dev_ex, embeddings=emb, out_dir=out_dir)


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------


def cmd_train(args) -> int:
    config, hyper = _settings(args)
    train_ex = _load_data(args.train, keep_unaligned=False)
    dev_ex = _load_data(args.dev) if args.dev else []
    history = _train_one(args, config, hyper, train_ex, dev_ex, out_dir=args.out)
    best = best_checkpoint(history)
    print(f"trained {len(history) - 1} epoch(s); best epoch {best.meta['epoch']}", end="")
    if best.meta.get("dev_f1") is not None:
        print(f" with dev EM {best.meta['dev_em']:.2f} F1 {best.meta['dev_f1']:.2f}", end="")
    print(f"; checkpoints in {args.out}")
    return 0


def _models(paths):
    for p in paths:
        _need_file(p)
    return load_ensemble(paths)


def cmd_evaluate(args) -> int:
    models = _models(args.checkpoint)
    examples = _load_data(args.data)
    predictor = models[0] if len(models) == 1 else models
    report, _ = evaluate(predictor, examples, out_path=args.out, max_span_len=args.max_span_len, probs_path=args.dump_probs)
    print(report.format_table(), end="")
    if args.report is not None:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    return 0


def cmd_predict(args) -> int:
    models = _models(args.checkpoint)
    examples = _load_data(args.data)
    predictor = models[0] if len(models) == 1 else models
    spans, _ = predict_spans(predictor, examples, max_span_len=args.max_span_len)
    write_predictions(args.out, spans)
    print(f"wrote {len(spans)} prediction(s) to {args.out}")
    return 0


def parse_grid(axes_text: Sequence[str]) -> list:
    """``["perspectives=1,10,50", "use_char=true,false"]`` -> list of setting dicts.

    ``perspectives=vanilla`` selects the plain-cosine baseline, and the
    pseudo-key ``ablate=none,char,filter,...`` switches off one component per
    row.  Several axes combine as a cartesian product.
    """
    axes = []
    for axis in axes_text:
        if "=" not in axis:
            raise UsageError(f"grid axis must look like key=v1,v2: {axis!r}")
        key, values = axis.split("=", 1)
        key = key.strip().replace("-", "_")
        options = []
        for v in (x.strip() for x in values.split(",") if x.strip()):
            if key == "perspectives" and v == "vanilla":
                options.append({"vanilla_cosine": "true"})
            elif key == "ablate":
                if v == "none":
                    options.append({})
                elif f"use_{v}" in ABLATION_FLAGS:
                    options.append({f"use_{v}": "false"})
                else:
                    raise UsageError(f"unknown component {v!r}; choose from none, {', '.join(f[4:] for f in ABLATION_FLAGS)}")
            else:
                options.append({key: v})
        if not options:
            raise UsageError(f"grid axis {key!r} has no values")
        axes.append(options)
    return [dict(kv for part in combo for kv in part.items()) for combo in itertools.product(*axes)]


def _label(setting: dict) -> str:
    if not setting:
        return "full model"
    parts = []
    for k, v in setting.items():
        if k == "vanilla_cosine":
            parts.append("vanilla cosine")
        elif k in ABLATION_FLAGS and v == "false":
            parts.append(f"w/o {k[4:]}")
        else:
            parts.append(f"{k}={v}")
    return ", ".join(parts)


def cmd_ablate(args) -> int:
    base_cfg, hyper = _settings(args)
    train_ex = _load_data(args.train, keep_unaligned=False)
    dev_ex = _load_data(args.dev)
    grid = parse_grid(args.grid)
    rows = []
    for setting in grid:
        merged = {**base_cfg.to_dict(), **setting}
        config = ModelConfig.from_dict({k: str(v) for k, v in merged.items()})
        started = time.perf_counter()
        history = _train_one(args, config, hyper, train_ex, dev_ex)
        best = best_checkpoint(history)
        report, _ = evaluate(best.to_model(), dev_ex, max_span_len=args.max_span_len)
        rows.append({"setting": _label(setting), "em": report.em, "f1": report.f1, "epoch": best.meta["epoch"], "seconds": time.perf_counter() - started})
        log.info("%s: EM %.2f F1 %.2f", rows[-1]["setting"], report.em, report.f1)
    print(format_table(rows), end="")
    if args.out is not None:
        Path(args.out).write_text(json.dumps(rows, indent=1), encoding="utf-8")
    return 0


def format_table(rows: list) -> str:
    width = max([len("setting")] + [len(r["setting"]) for r in rows])
    lines = [f"{'setting':<{width}}  {'EM':>6}  {'F1':>6}", "-" * (width + 16)]
    lines += [f"{r['setting']:<{width}}  {r['em']:6.2f}  {r['f1']:6.2f}" for r in rows]
    return "\n".join(lines) + "\n"


def _primitive_checks(rng, tol):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    probe = rng.normal(size=(3, 4))
    return {
        "matmul": grad_check(lambda x: (T.matmul(x, b) ** 2).sum(), a, tol=tol),
        "tanh/sigmoid": grad_check(lambda x: (T.tanh(x) * T.sigmoid(x)).sum(), a, tol=tol),
        "cosine": grad_check(lambda x: T.cosine_similarity(x, T.Tensor(probe), axis=-1).sum(), a, tol=tol),
        "masked softmax": grad_check(lambda x: (T.masked_softmax(x, mask) * probe).sum(), a, tol=tol),
        "max pooling": grad_check(lambda x: (T.pool_max(x, mask, axis=-1) * probe[:, 0]).sum(), a, tol=tol),
        "mean pooling": grad_check(lambda x: (T.pool_mean(x, mask, axis=-1) * probe[:, 0]).sum(), a, tol=tol),
    }


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    reports = _primitive_checks(rng, args.tol)
    ex = example_from_text("g", "Who built", "Korvan built the tower", 0, "Korvan")
    config = ModelConfig(word_dim=5, char_emb_dim=3, char_hidden=3, lstm_hidden=3, perspectives=2, prediction_hidden=3)
    words, _ = build_vocabularies([ex])
    # unit-scale vectors keep the loss surface smooth enough for central differences
    model = build_model(config, [[ex]], synthetic_embeddings(words, config.word_dim, seed=seed), seed=seed)
    batch = model.encode([ex])
    reports["full model"] = grad_check_params(lambda: model_loss(model, batch), model.trainable(), tol=args.tol)
    ok = True
    for name, report in reports.items():
        print(f"{name:<16} {report}")
        ok &= report.passed
    return 0 if ok else 1


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpcm", description="Span-prediction reading comprehension model.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True, type=Path, help="SQuAD-format training file")
    p.add_argument("--dev", type=Path, help="SQuAD-format dev file, scored after every epoch")
    p.add_argument("--embeddings", type=Path, help="GloVe-style text vectors")
    p.add_argument("--out", required=True, type=Path, help="directory for best.ckpt and latest.ckpt")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "score checkpoints on a labelled file"), ("predict", cmd_predict, "write predictions only")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--checkpoint", required=True, nargs="+", type=Path, help="one checkpoint, or several to ensemble")
        p.add_argument("--out", type=Path, required=name == "predict", help="predictions JSON")
        p.add_argument("--max-span-len", type=int, default=None)
        if name == "evaluate":
            p.add_argument("--report", type=Path, help="machine-readable report JSON")
            p.add_argument("--dump-probs", type=Path, help="per-position begin/end probabilities JSON")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train and score a grid of settings")
    p.add_argument("--train", required=True, type=Path)
    p.add_argument("--dev", required=True, type=Path)
    p.add_argument("--embeddings", type=Path)
    p.add_argument("--grid", required=True, action="append", help="key=v1,v2 (repeatable); perspectives=vanilla and ablate=none,char,... are understood")
    p.add_argument("--out", type=Path, help="table as JSON")
    p.add_argument("--max-span-len", type=int, default=None)
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of primitives and the full model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"mpcm {args.command}: error: {exc}", file=sys.stderr)
        return 1


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
