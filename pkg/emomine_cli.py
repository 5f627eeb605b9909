#!/usr/bin/env python3
"""
Command-line front end for emomine
Binds corpus mining, featurization, training, evaluation and the gradient
check together around one YAML config file
"""

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

from corpus import MANIFEST_NAME, build_corpus, read_manifest, read_wav_file
from emomine_config import PipelineConfig, load_config
from emomine_errors import ConfigError, EmomineError
from features import feature_path_for, stft_bands, write_feature_cache
from neural import GRADCHECK_TOLERANCE, TENSOR_ORDER, gradient_check
from sentiment import SentimentLexicon
from transfer_eval import (
    FINETUNE_LABELS,
    BinaryCorpora,
    EmotionModel,
    LabelSpace,
    evaluate,
    finetune,
    load_examples,
    pretrain,
    replace_head,
    run_binary_task,
    split_examples,
    train_from_scratch,
    write_run_report,
)

logger = logging.getLogger("emomine")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
MODELS_DIR = "models"
REPORTS_DIR = "reports"


def configure_logging(level: Optional[str]):
    """Single stderr handler; stdout is reserved for results"""
    level = (level or os.getenv("EMOMINE_LOG_LEVEL") or "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format=LOG_FORMAT, force=True)


def _config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config PATH")
    return load_config(args.config, args.overrides)


def _out(config: PipelineConfig, *parts: str) -> Path:
    return Path(config.out_dir).joinpath(*parts)


def _manifest_path(config: PipelineConfig, flag: Optional[str]) -> Path:
    path = Path(flag) if flag else _out(config, MANIFEST_NAME)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    return path


def _labels(value: str) -> LabelSpace:
    try:
        return LabelSpace(tuple(name.strip() for name in value.split(",")))
    except ValueError as e:
        raise ConfigError(f"--labels: {e}") from e


def cmd_build_corpus(args) -> int:
    config = _config(args)
    lexicon_path = Path(config.lexicon)
    if not lexicon_path.is_file():
        raise ConfigError(f"lexicon file not found: {lexicon_path}")
    if not config.inputs:
        raise ConfigError("config lists no inputs")
    for pair in config.inputs:
        for path in (pair.srt, pair.wav):
            if not Path(path).is_file():
                raise ConfigError(f"input file not found: {path}")

    lexicon = SentimentLexicon.from_file(lexicon_path)
    manifest = build_corpus(config.movie_pairs(), lexicon, config.cue_filter, config.labeling,
                            config.out_dir, alpha=config.sentiment_alpha, workers=config.workers)
    for label, count in manifest.counts().items():
        print(f"{label}: {count}")
    print(f"manifest: {_out(config, MANIFEST_NAME)}")
    return 0


def _featurize_one(wav: Path, config: PipelineConfig) -> Tuple[str, Optional[str]]:
    feat = feature_path_for(wav)
    try:
        if feat.exists() and feat.stat().st_mtime >= wav.stat().st_mtime:
            return "cached", None
        write_feature_cache(feat, stft_bands(read_wav_file(wav), config.stft))
        return "computed", None
    except (OSError, EmomineError) as e:
        return "failed", f"{wav}: {e}"


def cmd_featurize(args) -> int:
    config = _config(args)
    manifest = read_manifest(_manifest_path(config, args.manifest))
    wavs = [manifest.audio_file(row) for row in manifest.rows]

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(lambda w: _featurize_one(w, config), wavs))

    computed = sum(1 for status, _ in results if status == "computed")
    cached = sum(1 for status, _ in results if status == "cached")
    offenders = [problem for _, problem in results if problem]
    print(f"{computed} computed, {cached} cached")
    if offenders:
        print(f"{len(offenders)} WAV files could not be featurized:", file=sys.stderr)
        for problem in offenders:
            print(f"  {problem}", file=sys.stderr)
        return 3
    return 0


def _report(config: PipelineConfig, task: str, runs, metrics, timings) -> Path:
    return write_run_report(_out(config, REPORTS_DIR), task, config.train.rng_seed, config.echo(),
                            runs, metrics, timings)


def cmd_pretrain(args) -> int:
    config = _config(args)
    examples = load_examples(_manifest_path(config, args.manifest))
    started = time.perf_counter()
    model, run = pretrain(examples, config.train, config.split)
    elapsed = time.perf_counter() - started

    _, val = split_examples(examples, config.split)
    output = Path(args.output) if args.output else _out(config, MODELS_DIR, "pretrained.emog")
    model.save(output)
    report = _report(config, "pretrain", {"pretrain": run}, {"validation": evaluate(model, val)},
                     {"pretrain": elapsed})
    print(f"model: {output}")
    print(f"best_epoch: {run.best_epoch}")
    print(f"report: {report}")
    return 0


def cmd_finetune(args) -> int:
    config = _config(args)
    if not args.pretrained and not args.from_scratch:
        raise ConfigError("finetune needs --pretrained PATH or --from-scratch")
    if args.pretrained and args.from_scratch:
        raise ConfigError("--pretrained and --from-scratch are mutually exclusive")
    labels = _labels(args.labels)
    examples = load_examples(_manifest_path(config, args.target_manifest))

    started = time.perf_counter()
    if args.from_scratch:
        task = "scratch"
        model, run = train_from_scratch(examples, labels, config.train, config.split)
    else:
        pretrained_path = Path(args.pretrained)
        if not pretrained_path.is_file():
            raise ConfigError(f"pretrained model not found: {pretrained_path}")
        task = "finetune"
        pretrained = EmotionModel.load(pretrained_path)
        model, run = finetune(replace_head(pretrained, labels, config.train.rng_seed), examples,
                              config.train, config.split)
    elapsed = time.perf_counter() - started

    _, val = split_examples(examples, config.split)
    output = Path(args.output) if args.output else _out(config, MODELS_DIR, f"{task}.emog")
    model.save(output)
    report = _report(config, task, {task: run}, {"validation": evaluate(model, val)}, {task: elapsed})
    print(f"model: {output}")
    print(f"best_epoch: {run.best_epoch}")
    print(f"report: {report}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    model_path = Path(args.model)
    if not model_path.is_file():
        raise ConfigError(f"model not found: {model_path}")
    model = EmotionModel.load(model_path)
    examples = load_examples(_manifest_path(config, args.manifest))
    metrics = evaluate(model, examples)
    _report(config, "eval", {}, {"test": metrics}, {})
    print(f"accuracy: {metrics.accuracy:.4f}")
    print(f"macro_f1: {metrics.macro_f1:.4f}")
    return 0


def cmd_binary(args) -> int:
    config = _config(args)
    corpora = BinaryCorpora(
        mined=load_examples(_manifest_path(config, args.mined_manifest)),
        target_train=load_examples(_manifest_path(config, args.target_manifest)),
        target_test=load_examples(_manifest_path(config, args.test_manifest)),
    )
    started = time.perf_counter()
    result = run_binary_task(args.positive_class, args.negative_class, corpora, config.train, config.split)
    elapsed = time.perf_counter() - started

    report = _report(config, result.task, result.runs, result.arms, {"both_arms": elapsed})
    for arm, metrics in result.arms.items():
        print(f"{arm} accuracy: {metrics.accuracy:.4f}")
        print(f"{arm} macro_f1: {metrics.macro_f1:.4f}")
    print(f"report: {report}")
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradient_check(args.seed, corrupt_tensor=args.corrupt_tensor)
    for name in TENSOR_ORDER:
        print(f"{name}: {errors[name]:.3e}")
    failed = [name for name in TENSOR_ORDER if not errors[name] < GRADCHECK_TOLERANCE]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "build-corpus": cmd_build_corpus,
    "featurize": cmd_featurize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "binary": cmd_binary,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", metavar="PATH",
                        help="YAML pipeline config (required by every command except gradcheck)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key, e.g. train.learning_rate=0.01 (repeatable)")
    common.add_argument("--log-level", metavar="LEVEL",
                        help="DEBUG, INFO, WARNING or ERROR (default: $EMOMINE_LOG_LEVEL or WARNING)")

    parser = argparse.ArgumentParser(
        prog="emomine",
        description="Mine weakly labeled emotional speech from subtitled movies and train a Bi-GRU on it",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  emomine build-corpus --config data/example_config.yaml
  emomine featurize --config data/example_config.yaml
  emomine pretrain --config data/example_config.yaml --set train.max_epochs=30
  emomine finetune --config cfg.yaml --pretrained out/models/pretrained.emog --target-manifest target/manifest.csv
  emomine eval --config cfg.yaml --model out/models/finetune.emog --manifest test/manifest.csv
  emomine binary --config cfg.yaml --positive-class happy --negative-class fear \\
      --target-manifest target/manifest.csv --test-manifest test/manifest.csv
  emomine gradcheck --seed 3

Exit codes: 0 ok, 1 gradient check failed, 2 config error, 3 data error, 4 non-finite loss
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub.add_parser("build-corpus", parents=[common], help="Mine labeled segments from the configured movies")

    p = sub.add_parser("featurize", parents=[common], help="Write a .feat spectrogram next to every manifest WAV")
    p.add_argument("--manifest", metavar="PATH", help="Manifest to featurize (default: <out_dir>/manifest.csv)")

    p = sub.add_parser("pretrain", parents=[common], help="Train the 3-class model on the mined corpus")
    p.add_argument("--manifest", metavar="PATH", help="Mined manifest (default: <out_dir>/manifest.csv)")
    p.add_argument("--output", metavar="PATH", help="Model file (default: <out_dir>/models/pretrained.emog)")

    p = sub.add_parser("finetune", parents=[common], help="Fine-tune a pretrained model, or train from scratch")
    p.add_argument("--pretrained", metavar="PATH", help="Pretrained .emog model whose head is replaced")
    p.add_argument("--from-scratch", action="store_true", help="Train a fresh model instead of fine-tuning")
    p.add_argument("--target-manifest", required=True, metavar="PATH", help="Featurized target-domain manifest")
    p.add_argument("--labels", default=",".join(FINETUNE_LABELS.names), metavar="A,B,...",
                   help="Target label space in class-index order (default: %(default)s)")
    p.add_argument("--output", metavar="PATH", help="Model file (default: <out_dir>/models/<finetune|scratch>.emog)")

    p = sub.add_parser("eval", parents=[common], help="Accuracy and macro F1 of a model on a manifest")
    p.add_argument("--model", required=True, metavar="PATH", help="Trained .emog model")
    p.add_argument("--manifest", required=True, metavar="PATH", help="Featurized test manifest")

    p = sub.add_parser("binary", parents=[common], help="Two-class task with and without mined samples")
    p.add_argument("--positive-class", default="happy", help="Emotion the mined positives map to (default: happy)")
    p.add_argument("--negative-class", required=True, help="Emotion the mined negatives map to, e.g. fear")
    p.add_argument("--target-manifest", required=True, metavar="PATH", help="Featurized target training manifest")
    p.add_argument("--test-manifest", required=True, metavar="PATH", help="Featurized target test manifest")
    p.add_argument("--mined-manifest", metavar="PATH", help="Mined manifest (default: <out_dir>/manifest.csv)")

    p = sub.add_parser("gradcheck", parents=[common], help="Compare analytic and finite-difference gradients")
    p.add_argument("--seed", type=int, default=0, help="Seed of the random instance (default: 0)")
    p.add_argument("--corrupt-tensor", choices=TENSOR_ORDER, metavar="NAME",
                   help="Test hook: perturb the analytic gradient of this tensor so the check fails")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        from dotenv import load_dotenv
        load_dotenv()
    except ImportError:
        pass

    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    logger.debug("[CLI] %s", args.command)
    try:
        return COMMANDS[args.command](args)
    except EmomineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
