'''Command-line entry point.

    sargtr gen --per-class 50 --out train.jsonl
    sargtr train --data train.jsonl --checkpoint model.ckpt --metrics metrics.jsonl
    sargtr eval --data test.jsonl --checkpoint model.ckpt
    sargtr ablate --data train.jsonl --test-data test.jsonl --seeds 0,1
    sargtr encode --data train.jsonl --record 3
    sargtr gradcheck --k 2,5

Exit codes: 0 success, 1 failed check, 2 runtime or input error, 64 usage error.
'''
import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from .asc_graph import read_jsonl, write_jsonl
from .config import RunConfig, load_run_config
from .exceptions import CheckpointException, SarGtrException, UnknownConfigKeyException, ValidationException
from .recognizer import Recognizer
from .synth_data import builtin_templates, generate, load_templates, random_record
from .training import check_model_gradients, run_ablation, split_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    '''argparse that exits with EX_USAGE instead of 2.'''

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.getenv("SARGTR_CONFIG"),
                        help="key = value run config (default: $SARGTR_CONFIG)")
    common.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                        metavar="KEY=VALUE", help="override one config key; repeatable")
    common.add_argument("--log-level", default=os.getenv("SARGTR_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = ArgumentParser(prog="sargtr", description="Scatterer graph transformer pipeline.")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    gen = commands.add_parser("gen", parents=[common], help="generate a synthetic JSONL dataset")
    gen.add_argument("--templates", help="JSON list of class templates (default: built-in line/rectangle/cross)")
    gen.add_argument("--per-class", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--no-rotate", action="store_true", help="keep the template orientation")
    gen.add_argument("--jitter", type=float, help="position jitter override for every template, meters")

    encode = commands.add_parser("encode", parents=[common], help="print GNE and EPE of one record")
    encode.add_argument("--data")
    encode.add_argument("--record", type=int, default=0)
    encode.add_argument("--gne-n", type=int)
    encode.add_argument("--drop-degenerate", action="store_true")

    train = commands.add_parser("train", parents=[common], help="train and write a checkpoint")
    train.add_argument("--data")
    train.add_argument("--val-data")
    train.add_argument("--checkpoint")
    train.add_argument("--metrics", help="per-epoch metrics JSONL")
    _add_train_flags(train)

    evaluate = commands.add_parser("eval", parents=[common], help="score a checkpoint on labeled data")
    evaluate.add_argument("--data")
    evaluate.add_argument("--checkpoint")

    ablate = commands.add_parser("ablate", parents=[common], help="train every single-module ablation")
    ablate.add_argument("--data")
    ablate.add_argument("--test-data", help="held-out records (default: a seeded 20%% split of --data)")
    ablate.add_argument("--seeds", type=_int_list, default=[0])
    _add_train_flags(ablate, ablation=False)

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--k", type=_int_list, default=[5], help="scatterer counts, comma separated")
    gradcheck.add_argument("--entries", type=int, default=4,
                           help="perturb this many seeded-random entries per tensor (default 4); 0 checks every entry")
    gradcheck.add_argument("--tol", type=float, default=1e-4)
    gradcheck.add_argument("--h", type=float, default=1e-5)
    return parser


def _add_train_flags(parser: argparse.ArgumentParser, ablation: bool = True):
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", dest="learning_rate", type=float)
    parser.add_argument("--batch-size", type=int)
    if ablation:
        parser.add_argument("--seed", type=int)
        for flag in ("dvm", "edge-enhance", "gne", "epe"):
            parser.add_argument(f"--disable-{flag}", action="store_true", default=None)


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = dict(args.overrides)
    for key in ("epochs", "learning_rate", "batch_size", "seed", "disable_dvm", "disable_edge_enhance",
                "disable_gne", "disable_epe", "gne_n", "data", "val_data", "test_data", "checkpoint",
                "metrics", "templates", "out"):
        value = getattr(args, key, None)
        if value is None:
            continue
        # --data means the split this subcommand reads
        if key == "data":
            key = "train_data" if args.command in ("train", "ablate", "gen") else "test_data"
        overrides[key] = value
    if args.command in ("gen", "gradcheck"):
        overrides.pop("seed", None)
    return load_run_config(args.config, overrides)


def _require(run: RunConfig, key: str, flag: str) -> str:
    path = run.paths.get(key)
    if not path:
        raise UsageError(f"{flag} is required (or set {key} in the config file)")
    return path


def _emit(value):
    print(json.dumps(value, sort_keys=True))


def cmd_gen(args, run: RunConfig) -> int:
    templates = load_templates(run.paths["templates"]) if run.paths["templates"] else builtin_templates()
    if args.jitter is not None:
        templates = [dataclasses.replace(t, position_jitter=args.jitter) for t in templates]
    records = generate(templates, args.per_class, seed=args.seed, rotate=not args.no_rotate)
    count = write_jsonl(records, args.out)
    print(count)
    return EXIT_OK


def cmd_encode(args, run: RunConfig) -> int:
    records = read_jsonl(_require(run, "test_data", "--data"))
    if not 0 <= args.record < len(records):
        raise ValidationException(f"Record index {args.record} out of range for {len(records)} records.")
    output = Recognizer(run.model, checkpoint="").encode(records[args.record], drop_degenerate=args.drop_degenerate)
    output["record"] = args.record
    _emit(output)
    return EXIT_OK


def cmd_train(args, run: RunConfig) -> int:
    records = read_jsonl(_require(run, "train_data", "--data"))
    checkpoint = _require(run, "checkpoint", "--checkpoint")
    validation = read_jsonl(run.paths["val_data"]) if run.paths["val_data"] else None

    recognizer = Recognizer(run.model, checkpoint="")
    metrics_path = run.paths["metrics"]
    metrics_file = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        def on_epoch(metrics):
            if metrics_file is not None:
                metrics_file.write(json.dumps(dict(metrics), sort_keys=True) + "\n")
                metrics_file.flush()

        history = recognizer.fit(records, run.train, validation, on_epoch)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    recognizer.save(checkpoint)
    _emit({"epochs": len(history), "final_loss": history[-1]["loss"], "train_acc": history[-1]["train_acc"],
           "val_acc": history[-1]["val_acc"], "parameters": recognizer.parameter_count()})
    return EXIT_OK


def _check_against_checkpoint(run: RunConfig, recognizer: Recognizer):
    stored = recognizer.model_config.to_dict()
    for key, value in run.explicit_model_keys().items():
        if key == "codebook":
            if tuple(value) != tuple(stored["codebook"]["values"]):
                raise CheckpointException(f"codebook {value} differs from the checkpoint's {stored['codebook']['values']}.")
        elif key == "codebook_strict":
            if value != stored["codebook"]["strict"]:
                raise CheckpointException(f"codebook_strict={value} differs from the checkpoint.")
        elif stored[key] != value:
            raise CheckpointException(f"{key}={value!r} differs from the checkpoint's {stored[key]!r}.")


def cmd_eval(args, run: RunConfig) -> int:
    records = read_jsonl(_require(run, "test_data", "--data"))
    recognizer = Recognizer.load(_require(run, "checkpoint", "--checkpoint"))
    _check_against_checkpoint(run, recognizer)
    result = recognizer.evaluate(records)
    _emit({"pcc": result.pcc, "confusion": result.confusion.tolist(), "total": result.total})
    return EXIT_OK


def cmd_ablate(args, run: RunConfig) -> int:
    records = read_jsonl(_require(run, "train_data", "--data"))
    if run.paths["test_data"]:
        train_set, test_set = records, read_jsonl(run.paths["test_data"])
    else:
        train_set, test_set = split_dataset(records, seed=run.train.seed)
    table = run_ablation(train_set, test_set, run.model, run.train, seeds=args.seeds)
    logger.info("Ablation results:\n%s", table.to_string(index=False))
    _emit(table.to_dict(orient="records"))
    return EXIT_OK


def cmd_gradcheck(args, run: RunConfig) -> int:
    rng = np.random.default_rng(args.seed)
    records = [random_record(k, rng, run.model.class_count) for k in args.k]
    report = check_model_gradients(records, run.model, seed=args.seed, h=args.h, tol=args.tol,
                                   entries=args.entries or None)
    _emit({"passed": report.passed, "max_relative_error": report.max_relative_error, "tolerance": report.tolerance,
           "step": report.step, "k": args.k,
           "params": [{"name": c.name, "relative_error": c.relative_error, "checked_entries": c.checked_entries,
                       "passed": c.passed} for c in report.params]})
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


COMMANDS = {
    "gen": cmd_gen,
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run = _resolve(args)
        return COMMANDS[args.command](args, run)
    except (UsageError, UnknownConfigKeyException) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except (SarGtrException, OSError) as e:
        logger.error("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
