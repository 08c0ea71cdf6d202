"""
The `aat` command line.

```
aat gen    --out_dir data/            generate a synthetic dataset
aat vocab  --corpus captions.txt      build a vocabulary from a caption corpus
aat train  --data_dir data/ ...       train a decoder
aat eval   --checkpoint model.npz ... evaluate and dump halting traces
aat check  --trace trace.jsonl        re-validate a halting trace dump
aat ablate --sweep steps              run an ablation sweep
```

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or configuration error.
"""

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import IO, Iterator, List, Optional

from . import __version__
from .attention import AttentionConfig, AttentionKind
from .data.dataset import generate_dataset, load_dataset, write_dataset
from .data.synth import SynthConfig
from .data.vocab import DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT, build_vocab
from .decoder import HALTING_BIAS, AatDecoder, AttentionMode, ModelConfig
from .errors import AatError, ConfigError
from .experiments import SWEEPS, ExperimentSettings, sweep
from .halting import DEFAULT_EPSILON, HaltingRecord, check_record
from .training import (
    TrainConfig,
    check_training_data,
    check_vocab,
    evaluate,
    load_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

SEED_ENV = "AAT_SEED"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def resolve_seed(seed: Optional[int]) -> int:
    """
    The `--seed` flag when given, else the `AAT_SEED` environment variable, else 0.
    """
    if seed is not None:
        return seed
    value = os.environ.get(SEED_ENV)
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None


@contextlib.contextmanager
def _output(path: Optional[str]) -> Iterator[IO[str]]:
    if path is None or path == "-":
        yield sys.stdout
        return
    with open(path, "w", encoding="utf-8") as handle:
        yield handle


def _write_json_line(handle: IO[str], record: dict) -> None:
    handle.write(json.dumps(record, sort_keys=True) + "\n")
    handle.flush()


def cmd_gen(args: argparse.Namespace) -> int:
    if args.n_train < 1:
        raise ConfigError("--n_train must be >= 1")
    if args.n_val < 0:
        raise ConfigError("--n_val must be >= 0")
    config = SynthConfig.for_vocab_size(
        args.vocab_size,
        k=args.k,
        feature_dim=args.d_a,
        max_len=args.max_len,
        world_seed=args.world_seed,
    ).validate()
    dataset = generate_dataset(config, resolve_seed(args.seed), args.n_train, args.n_val)
    try:
        out_dir = write_dataset(args.out_dir, dataset, force=args.force)
    except OSError as error:
        raise ConfigError(f"cannot write {args.out_dir}: {error}") from error
    print(f"wrote {args.n_train} train and {args.n_val} val examples to {out_dir}")
    return EXIT_OK


def cmd_vocab(args: argparse.Namespace) -> int:
    corpus = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    vocab, captions = build_vocab(corpus, args.min_count, args.max_len)
    vocab.save(args.out)
    if args.captions_out:
        Path(args.captions_out).write_text(
            "".join(" ".join(c) + "\n" for c in captions), encoding="utf-8"
        )
    print(f"{len(vocab)} tokens ({len(vocab) - 4} words) written to {args.out}")
    return EXIT_OK


def model_config_from_args(args: argparse.Namespace, vocab_size: int, feature_dim: int) -> ModelConfig:
    mode = AttentionMode(args.mode)
    m_r = args.M_r if args.M_r is not None else (1 if mode is not AttentionMode.RECURRENT else 4)
    return ModelConfig(
        vocab_size=vocab_size,
        d=args.d,
        feature_dim=feature_dim,
        attention=AttentionConfig(kind=AttentionKind(args.attn_kind), heads=args.heads),
        mode=mode,
        m_r=m_r,
        m_min=args.M_min,
        m_max=args.M_max,
        epsilon=args.epsilon,
        ponder_lambda=args.ponder_lambda,
        layer_norm=not args.no_layer_norm,
        halting_bias=args.halting_bias,
    ).validate()


def cmd_train(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    dataset = load_dataset(args.data_dir)
    config = model_config_from_args(args, len(dataset.vocab), dataset.feature_dim)
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=seed,
        workers=args.workers,
        progress=args.progress,
    ).validate()
    check_training_data(config, dataset)
    decoder = AatDecoder(config, seed=seed)
    with _output(args.log) as log:
        result = train(
            decoder,
            dataset,
            train_config,
            checkpoint=args.out_checkpoint,
            on_record=lambda record: _write_json_line(log, record),
        )
    logger.info("best epoch %d, loss %.4f", result.best_epoch, result.best_loss)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    decoder, vocab = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data_dir, [args.split])
    check_vocab(decoder, vocab, dataset)
    result = evaluate(decoder, dataset[args.split], args.max_len, args.workers)
    if args.trace_out:
        with _output(args.trace_out) as handle:
            for trace in result.traces:
                for record in trace:
                    _write_json_line(handle, record.to_dict())
    print(result.report.to_json())
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    violations = 0
    count = 0
    with open(args.trace, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = HaltingRecord.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as error:
                raise ConfigError(f"{args.trace}:{line_number}: not a trace record ({error})") from None
            count += 1
            for problem in check_record(record, args.M_min, args.M_max):
                violations += 1
                print(f"{args.trace}:{line_number}: {problem}")
    print(f"checked {count} records, {violations} violations")
    return EXIT_FAILURE if violations else EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    settings = ExperimentSettings(
        synth=SynthConfig.for_vocab_size(args.vocab_size),
        data_seed=resolve_seed(args.data_seed),
        n_train=args.n_train,
        n_val=args.n_val,
        d=args.d,
        train=TrainConfig(epochs=args.epochs),
        workers=args.workers,
    ).validate()
    with _output(args.out) as out:
        sweep(args.sweep, args.seeds, settings, lambda r: _write_json_line(out, r))
    return EXIT_OK


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=[m.value for m in AttentionMode], default="adaptive")
    parser.add_argument("--M_r", type=int, default=None, help="attention steps in recurrent mode")
    parser.add_argument("--M_min", type=int, default=0)
    parser.add_argument("--M_max", type=int, default=4)
    parser.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    parser.add_argument("--lambda", dest="ponder_lambda", type=float, default=1e-4)
    parser.add_argument("--heads", type=int, default=1)
    parser.add_argument(
        "--attn_kind", choices=[k.value for k in AttentionKind], default="additive"
    )
    parser.add_argument("--d", type=int, default=64)
    parser.add_argument(
        "--no_layer_norm", action="store_true", help="skip the per-step layer normalization"
    )
    parser.add_argument(
        "--halting_bias", type=float, default=HALTING_BIAS, help="initial bias of the halting unit"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aat", description="Adaptive attention time decoding on a synthetic captioning task."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--k", type=int, default=8)
    gen.add_argument("--d_a", type=int, default=32)
    gen.add_argument("--vocab_size", type=int, default=40)
    gen.add_argument("--max_len", type=int, default=12)
    gen.add_argument("--n_train", type=int, default=5000)
    gen.add_argument("--n_val", type=int, default=500)
    gen.add_argument("--world_seed", type=int, default=0)
    gen.add_argument("--out_dir", required=True)
    gen.add_argument("--force", action="store_true", help="replace a non-empty out_dir")
    gen.set_defaults(handler=cmd_gen)

    vocab = commands.add_parser("vocab", help="build a vocabulary from a caption corpus")
    vocab.add_argument("--corpus", required=True, help="one caption per line")
    vocab.add_argument("--min_count", type=int, default=DEFAULT_MIN_COUNT)
    vocab.add_argument("--max_len", type=int, default=DEFAULT_MAX_LEN)
    vocab.add_argument("--out", required=True)
    vocab.add_argument("--captions_out", default=None, help="write the truncated captions here")
    vocab.set_defaults(handler=cmd_vocab)

    train_cmd = commands.add_parser("train", help="train a decoder")
    train_cmd.add_argument("--data_dir", required=True)
    _add_model_flags(train_cmd)
    train_cmd.add_argument("--epochs", type=int, default=10)
    train_cmd.add_argument("--batch_size", type=int, default=10)
    train_cmd.add_argument("--lr", type=float, default=2e-3)
    train_cmd.add_argument("--seed", type=int, default=None)
    train_cmd.add_argument("--workers", type=int, default=1)
    train_cmd.add_argument("--progress", action="store_true")
    train_cmd.add_argument("--log", default=None, help="training log (JSON lines); stdout by default")
    train_cmd.add_argument("--out_checkpoint", required=True)
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--data_dir", required=True)
    eval_cmd.add_argument("--split", default="val")
    eval_cmd.add_argument("--max_len", type=int, default=16)
    eval_cmd.add_argument("--workers", type=int, default=1)
    eval_cmd.add_argument("--trace_out", default=None, help="halting trace dump (JSON lines)")
    eval_cmd.set_defaults(handler=cmd_eval)

    check = commands.add_parser("check", help="re-validate a halting trace dump")
    check.add_argument("--trace", required=True)
    check.add_argument("--M_min", type=int, default=None)
    check.add_argument("--M_max", type=int, default=None)
    check.set_defaults(handler=cmd_check)

    ablate = commands.add_parser("ablate", help="run an ablation sweep")
    ablate.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ablate.add_argument("--data_seed", type=int, default=None)
    ablate.add_argument("--vocab_size", type=int, default=40)
    ablate.add_argument("--n_train", type=int, default=400)
    ablate.add_argument("--n_val", type=int, default=60)
    ablate.add_argument("--d", type=int, default=32)
    ablate.add_argument("--epochs", type=int, default=6)
    ablate.add_argument("--workers", type=int, default=1, help="trials run in this many processes")
    ablate.add_argument("--out", default=None, help="results (JSON lines); stdout by default")
    ablate.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except ConfigError as error:
        print(f"aat {args.command}: error: {error}", file=sys.stderr)
        return EXIT_USAGE
    except (AatError, OSError) as error:
        print(f"aat {args.command}: {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_FAILURE
