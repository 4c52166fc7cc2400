"""Command-line entry point: ``vidcontrast <command> --config ... --checkpoint ... --out ...``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import TrainConfig, config_hash, load_config
from .data import dump_corpus, generate_dataset, load_corpus
from .encoder import EncoderPair
from .errors import ConfigError, DataError, NonFiniteError
from .evaluation import (
    cooccurrence_probability,
    extract_features,
    few_shot_subset,
    linear_probe,
    nn_quality,
    recall_at_k,
    stratified_split,
)
from .report import build_report, write_json
from .trainer import pair_from_checkpoint, run_pretraining

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

log = logging.getLogger("vidcontrast")


class _Context:
    """Config, corpus and encoder resolved from the common command-line options."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.train_cfg, self.eval_cfg = load_config(args.config)
        self.ckpt = load_checkpoint(args.checkpoint) if getattr(args, "checkpoint", None) else None
        if self.ckpt is not None and args.config is None:
            self.train_cfg = self.ckpt.config
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def model_config(self) -> TrainConfig:
        return self.ckpt.config if self.ckpt is not None else self.train_cfg

    def videos(self):
        corpus = getattr(self.args, "corpus", None)
        if corpus:
            return load_corpus(Path(corpus) / "manifest.csv")
        c = self.model_config
        return generate_dataset(c.seed, c.n_videos, c.n_classes, c.video_spec())

    def encoder(self, untrained: bool = False):
        if self.ckpt is None or untrained:
            c = self.model_config
            return EncoderPair(c.encoder_config(), np.random.default_rng([c.seed, 0])).query
        return pair_from_checkpoint(self.ckpt).query

    def split_features(self, encoder):
        train, test = stratified_split(self.videos(), self.eval_cfg.test_fraction)
        spec = self.model_config.video_spec()
        return extract_features(encoder, train, "train", spec), extract_features(encoder, test, "test", spec)

    def emit(self, name: str, payload: dict) -> None:
        payload = {"config_hash": config_hash(self.model_config, self.eval_cfg),
                   "checkpoint": str(self.args.checkpoint) if getattr(self.args, "checkpoint", None) else None,
                   **payload}
        path = write_json(self.out / f"{name}.json", payload)
        print(path.read_text(encoding="utf-8"), end="")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> None:
    train_cfg, _ = load_config(args.config)
    result = run_pretraining(train_cfg, args.out, resume=args.resume)
    last = result.epochs[-1] if result.epochs else None
    print(f"steps {result.state.step}, checkpoints {len(result.checkpoints)}"
          + (f", final epoch loss {last['loss_total']:.4f}" if last else ""))


def cmd_generate(args) -> None:
    ctx = _Context(args)
    manifest = dump_corpus(ctx.videos(), ctx.out)
    print(manifest)


def cmd_extract(args) -> None:
    ctx = _Context(args)
    train, test = ctx.split_features(ctx.encoder())
    path = ctx.out / "features.npz"
    np.savez(path, train_features=train.features, train_class_ids=train.class_ids, train_video_ids=train.video_ids,
             test_features=test.features, test_class_ids=test.class_ids, test_video_ids=test.video_ids)
    ctx.emit("extract", {"features_file": path.name, "n_train": len(train), "n_test": len(test),
                         "feature_dim": int(train.features.shape[1])})


def cmd_probe(args) -> None:
    ctx = _Context(args)
    ec = ctx.eval_cfg
    top1 = linear_probe(*ctx.split_features(ctx.encoder()), ec.probe_epochs, ec.probe_lr)
    untrained = linear_probe(*ctx.split_features(ctx.encoder(untrained=True)), ec.probe_epochs, ec.probe_lr)
    ctx.emit("probe", {"top1": top1, "untrained_top1": untrained,
                       "chance": 1.0 / ctx.model_config.n_classes})


def cmd_retrieve(args) -> None:
    ctx = _Context(args)
    train, test = ctx.split_features(ctx.encoder())
    result = recall_at_k(test, train, ctx.eval_cfg.recall_ks)
    ctx.emit("retrieval", {"recall": result.as_dict(), "n_query": len(test), "n_gallery": len(train)})


def cmd_fewshot(args) -> None:
    ctx = _Context(args)
    ec = ctx.eval_cfg
    train, test = ctx.split_features(ctx.encoder())
    per_seed: dict[str, dict[str, float]] = {}
    means: dict[str, float] = {}
    for fraction in ec.fewshot_fractions:
        accs = {str(s): linear_probe(few_shot_subset(train, fraction, s), test, ec.probe_epochs, ec.probe_lr)
                for s in ec.fewshot_seeds}
        per_seed[repr(fraction)] = accs
        means[repr(fraction)] = float(np.mean(list(accs.values())))
    ctx.emit("fewshot", {"top1": per_seed, "mean_top1": means})


def cmd_nnquality(args) -> None:
    ctx = _Context(args)
    k = ctx.eval_cfg.nn_quality_k
    value = nn_quality(ctx.encoder(), ctx.videos(), ctx.model_config.video_spec(), k)
    ctx.emit("nnquality", {"k": k, "top5_same_class": value})


def cmd_cooccur(args) -> None:
    ctx = _Context(args)
    k = args.classes if args.classes is not None else ctx.eval_cfg.classes_for_cooccur
    q = args.queue if args.queue is not None else ctx.eval_cfg.queue_size_for_cooccur
    ctx.emit("cooccur", {"n_classes": k, "queue_size": q, "probability": cooccurrence_probability(k, q)})


def cmd_report(args) -> None:
    ctx = _Context(args)
    summary = build_report(args.run, args.evals, ctx.out, config_hash(ctx.model_config, ctx.eval_cfg),
                           version=args.version)
    print(f"wrote {ctx.out / 'summary.json'} ({len(summary)} sections)")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidcontrast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, checkpoint=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file (defaults when omitted)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file; untrained encoder when omitted")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "run self-supervised pretraining", checkpoint=False)
    p.add_argument("--resume", help="checkpoint to continue from")
    add("generate", cmd_generate, "dump the synthetic corpus to disk")
    for name, func, text in [
        ("extract", cmd_extract, "extract frozen backbone features"),
        ("probe", cmd_probe, "linear probe accuracy on frozen features"),
        ("retrieve", cmd_retrieve, "test-to-train retrieval recall@k"),
        ("fewshot", cmd_fewshot, "linear probe on class-stratified training subsets"),
        ("nnquality", cmd_nnquality, "top-k same-class fraction in the NN-head space"),
    ]:
        add(name, func, text).add_argument("--corpus", help="directory written by 'generate'")
    p = add("cooccur", cmd_cooccur, "chance a same-class sample sits among the queue's negatives")
    p.add_argument("--classes", type=int, help="number of balanced classes K")
    p.add_argument("--queue", type=int, help="queue size q")
    p = add("report", cmd_report, "JSON summary and curve CSVs from a run and eval outputs")
    p.add_argument("--run", help="pretraining output directory (metrics.csv, epochs.csv)")
    p.add_argument("--evals", help="directory holding <command>.json eval outputs")
    p.add_argument("--version", help="override the git-describe version string")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NonFiniteError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
