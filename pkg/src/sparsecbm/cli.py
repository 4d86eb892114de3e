"""Command-line entry points.

Subcommands: gen-data, train, prune, eval, intervene, explain. Every
command is a deterministic function of its inputs, flags, and seed; reruns
produce byte-identical artifacts. Exit codes: 0 ok, 1 usage error, 2 data
error, 3 numeric failure.

Flags may come from a flat key=value config file (--config); explicit flags
win over the file, and the SPARSECBM_SEED environment variable supplies the
seed when neither sets it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_split
from .explain import build_trace, mask_overlap, render_report
from .intervention import InterventionConfig, evaluate_intervention, oracle_intervene
from .model import (
    MaskSet,
    ModelConfig,
    forward_pathway_batch,
    init_params,
    load_checkpoint,
    pooled_embedding,
    save_checkpoint,
)
from .pruning import PruneConfig, prune_to_sparsity
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


# Option tables: dest -> (type, default, help). Booleans are store_true
# flags. The tables double as the config-file schema: unknown keys in a
# --config file are rejected.
_COMMON = {"config": (str, None, "flat key=value config file"),
           "seed": (int, None, "rng seed (default: $SPARSECBM_SEED or 0)")}

_OPTIONS = {
    "gen-data": {
        "out": (str, None, "output dataset directory"),
        "n_train": (int, 1000, "training examples"),
        "n_dev": (int, 200, "dev examples"),
        "n_test": (int, 200, "test examples"),
        "concepts": (int, 4, "number of concepts K"),
        "concept_classes": (int, 3, "classes per concept V"),
        "task_classes": (int, 5, "task classes C"),
        "max_len": (int, 64, "token truncation length"),
        "shift": (bool, False, "draw half of the test phrases from the held-out pool"),
    },
    "train": {
        "data": (str, None, "dataset directory from gen-data"),
        "out": (str, None, "checkpoint path"),
        "strategy": (str, "joint", "vanilla|independent|sequential|joint"),
        "gamma": (float, 5.0, "concept loss weight"),
        "lr": (float, 1e-3, "Adam learning rate"),
        "epochs": (int, 20, "training epochs"),
        "batch_size": (int, 8, "mini-batch size"),
        "task_term": (str, "single", "single|per_concept task CE placement"),
        "emb_dim": (int, 32, "embedding width"),
        "hidden_dims": (str, "64,64", "comma-separated encoder hidden sizes"),
        "enc_out": (int, 64, "encoder output width"),
        "log": (str, None, "write per-epoch telemetry JSONL here"),
    },
    "prune": {
        "ckpt": (str, None, "input checkpoint"),
        "data": (str, None, "dataset directory"),
        "out": (str, None, "output checkpoint"),
        "sparsity": (float, None, "target sparsity (default 1 - 1/K)"),
        "steps": (int, 4, "pruning steps"),
        "block_size": (int, 64, "Fisher block size"),
        "zeta": (float, 1e-4, "Fisher dampening"),
        "fisher_samples": (int, 128, "examples per Fisher estimate"),
        "group_size": (int, 1, "prune-group size |Q|"),
        "compensation": (str, "none", "none|per_concept_delta"),
        "finetune_epochs": (int, 1, "fine-tune epochs per step"),
        "gamma": (float, 5.0, "concept loss weight for fine-tuning"),
        "lr": (float, 1e-3, "fine-tune learning rate"),
        "batch_size": (int, 8, "fine-tune batch size"),
        "report": (str, None, "write the prune report JSON here"),
    },
    "eval": {
        "ckpt": (str, None, "checkpoint"),
        "data": (str, None, "dataset directory"),
        "split": (str, "test", "train|dev|test"),
        "out": (str, None, "write the metric report JSON here"),
    },
    "intervene": {
        "ckpt": (str, None, "checkpoint"),
        "data": (str, None, "dataset directory"),
        "split": (str, "test", "train|dev|test"),
        "r_grid": (str, "0.005,0.01,0.05", "comma-separated r values"),
        "mode": (str, "sparsity", "sparsity|oracle"),
        "rounds": (int, 1, "max drop/grow rounds per mispredicted concept"),
        "out": (str, None, "write the NI/SI table JSON here"),
        "log": (str, None, "write intervention events JSONL here"),
        "interactive": (bool, False, "prompt for per-concept corrections on stdin"),
        "example_id": (int, None, "example index for --interactive"),
    },
    "explain": {
        "ckpt": (str, None, "checkpoint"),
        "data": (str, None, "dataset directory"),
        "input": (str, None, "explain this raw text"),
        "example_id": (int, None, "explain this example of --split"),
        "split": (str, "test", "train|dev|test"),
        "out": (str, None, "report output directory"),
    },
}

_REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "prune": ("ckpt", "data", "out"),
    "eval": ("ckpt", "data"),
    "intervene": ("ckpt", "data"),
    "explain": ("ckpt", "data", "out"),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="sparsecbm", description=__doc__)
    subs = parser.add_subparsers(dest="command", metavar="command")
    for command, options in _OPTIONS.items():
        sub = subs.add_parser(command, help=None, add_help=True)
        for dest, (typ, _default, help_text) in {**options, **_COMMON}.items():
            flag = "--" + dest.replace("_", "-")
            if typ is bool:
                sub.add_argument(flag, dest=dest, action="store_true",
                                 default=argparse.SUPPRESS, help=help_text)
            else:
                sub.add_argument(flag, dest=dest, type=typ,
                                 default=argparse.SUPPRESS, help=help_text)
    return parser


def _read_config_file(path, allowed) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, _, value = line.partition("=")
                key = key.strip().replace("-", "_")
                if key not in allowed:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                typ = allowed[key][0]
                values[key] = (value.strip().lower() in ("1", "true", "yes")) if typ is bool else typ(value.strip())
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    return values


def _merge_options(command: str, args: argparse.Namespace) -> dict:
    table = {**_OPTIONS[command], **_COMMON}
    merged = {dest: spec[1] for dest, spec in table.items()}
    flag_values = dict(vars(args))
    flag_values.pop("command", None)
    config_path = flag_values.pop("config", None)
    if config_path:
        merged.update(_read_config_file(config_path, table))
    merged.update(flag_values)
    if merged.get("seed") is None:
        env_seed = os.environ.get("SPARSECBM_SEED")
        merged["seed"] = int(env_seed) if env_seed else 0
    for dest in _REQUIRED[command]:
        if merged.get(dest) is None:
            raise _UsageError(f"--{dest.replace('_', '-')} is required")
    return merged


class _UsageError(Exception):
    pass


def _write_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")


def _load_bundle(opts, need_split=None):
    params, masks, config, schema = load_checkpoint(opts["ckpt"])
    vocab, data_schema, splits = data_mod.load_dataset_dir(opts["data"])
    if data_schema.to_dict() != schema.to_dict():
        raise DataError("checkpoint schema does not match the dataset directory")
    if need_split is not None and need_split not in splits:
        raise DataError(f"dataset directory has no {need_split!r} split")
    return params, masks, config, schema, vocab, splits


def _cmd_gen_data(opts) -> int:
    for key in ("n_train", "n_dev", "n_test"):
        if opts[key] < 1:
            raise _UsageError(f"--{key.replace('_', '-')} must be >= 1")
    written = data_mod.generate_dataset_dir(
        opts["out"],
        seed=opts["seed"],
        n_train=opts["n_train"],
        n_dev=opts["n_dev"],
        n_test=opts["n_test"],
        n_concepts=opts["concepts"],
        n_concept_classes=opts["concept_classes"],
        n_task_classes=opts["task_classes"],
        shift=opts["shift"],
        max_len=opts["max_len"],
    )
    print(f"wrote {len(written)} files under {opts['out']}")
    return EXIT_OK


def _cmd_train(opts) -> int:
    vocab, schema, splits = data_mod.load_dataset_dir(opts["data"])
    if "train" not in splits:
        raise DataError(f"{opts['data']} has no train split")
    hidden = tuple(int(x) for x in str(opts["hidden_dims"]).split(",") if x)
    model_config = ModelConfig(
        emb_dim=opts["emb_dim"],
        hidden_dims=hidden,
        enc_out=opts["enc_out"],
        n_concepts=schema.n_concepts,
        n_concept_classes=schema.n_concept_classes,
        n_task_classes=schema.task_class_count,
        vocab_size=len(vocab),
        seed=opts["seed"],
    )
    train_config = TrainConfig(
        strategy=opts["strategy"],
        gamma=opts["gamma"],
        lr=opts["lr"],
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        seed=opts["seed"],
        task_term=opts["task_term"],
    )
    params = init_params(model_config)
    masks = MaskSet.all_ones(schema.n_concepts, params.n_prunable)
    result = train(splits["train"], train_config, params, masks,
                   dev=splits.get("dev"), log_path=opts["log"])
    save_checkpoint(result.params, masks, model_config, schema, opts["out"])
    last = result.telemetry[-1] if result.telemetry else {}
    print(f"saved {opts['out']} (final train loss {last.get('train_loss', float('nan')):.4f})")
    return EXIT_OK


def _cmd_prune(opts) -> int:
    params, masks, config, schema, vocab, splits = _load_bundle(opts, need_split="train")
    prune_config = PruneConfig(
        target_sparsity=opts["sparsity"],
        steps=opts["steps"],
        finetune_epochs_per_step=opts["finetune_epochs"],
        block_size=opts["block_size"],
        dampening=opts["zeta"],
        fisher_samples=opts["fisher_samples"],
        group_size=opts["group_size"],
        compensation=opts["compensation"],
        gamma=opts["gamma"],
        lr=opts["lr"],
        batch_size=opts["batch_size"],
        seed=opts["seed"],
    )
    params, masks, report = prune_to_sparsity(splits["train"], params, masks, prune_config,
                                              dev=splits.get("dev"))
    save_checkpoint(params, masks, config, schema, opts["out"])
    if opts["report"]:
        _write_json(report.to_dict(), opts["report"])
    sparsities = ", ".join(f"{s:.3f}" for s in masks.sparsity())
    print(f"saved {opts['out']} (per-concept sparsity {sparsities})")
    return EXIT_OK


def _cmd_eval(opts) -> int:
    params, masks, config, schema, vocab, splits = _load_bundle(opts, need_split=opts["split"])
    report = evaluate_split(splits[opts["split"]], params, masks)
    print(report.format_text())
    if opts["out"]:
        _write_json(report.to_dict(), opts["out"])
    return EXIT_OK


def _interactive_corrections(example, schema, params, masks) -> int:
    """Prompt for per-concept corrections on stdin and apply them."""
    cache = forward_pathway_batch(pooled_embedding(example, params)[None, :], params, masks)
    preds = cache.concept_logits[0].argmax(axis=1)
    corrections = {}
    print("enter a class name to correct a concept; blank keeps the prediction")
    for k, name in enumerate(schema.concept_names):
        predicted = schema.concept_class_names[int(preds[k])]
        sys.stdout.write(f"{name} [{predicted}] -> ")
        sys.stdout.flush()
        line = sys.stdin.readline()
        if not line:
            break
        answer = line.strip()
        if not answer:
            continue
        if answer not in schema.concept_class_names:
            raise _UsageError(f"unknown class {answer!r}")
        corrections[k] = schema.concept_class_names.index(answer)
    pre_task = int(cache.task_logits[0].argmax())
    task_pred, _, _ = oracle_intervene(cache.activations[0], corrections, params)
    print(f"task prediction: {pre_task} -> {task_pred}")
    return EXIT_OK


def _cmd_intervene(opts) -> int:
    params, masks, config, schema, vocab, splits = _load_bundle(opts, need_split=opts["split"])
    split = splits[opts["split"]]
    if opts["interactive"]:
        if opts["example_id"] is None:
            raise _UsageError("--interactive requires --example-id")
        if not 0 <= opts["example_id"] < len(split):
            raise _UsageError("--example-id out of range")
        return _interactive_corrections(split.examples[opts["example_id"]], schema, params, masks)
    try:
        r_grid = [float(x) for x in str(opts["r_grid"]).split(",") if x]
    except ValueError as exc:
        raise _UsageError(f"bad --r-grid: {exc}") from exc
    iv_config = InterventionConfig(r=r_grid[0] if r_grid else 0.0,
                                   mode=opts["mode"], rounds=opts["rounds"])
    results = evaluate_intervention(split, params, masks, r_grid, iv_config)
    ni = results["ni"]
    header = f"{'r':>8}  {'NI task':>8}  {'NI conc':>8}  {'SI task':>8}  {'SI conc':>8}  {'replay task':>11}  {'replay conc':>11}  {'modified':>8}"
    print(header)
    for run in results["runs"]:
        s, rp = run["si_stream"], run["si_replay"]
        print(
            f"{run['r']:>8.4f}  {100 * ni['task_accuracy']:>8.1f}  {100 * ni['concept_accuracy']:>8.1f}  "
            f"{100 * s['task_accuracy']:>8.1f}  {100 * s['concept_accuracy']:>8.1f}  "
            f"{100 * rp['task_accuracy']:>11.1f}  {100 * rp['concept_accuracy']:>11.1f}  "
            f"{100 * run['modified_fraction']:>7.2f}%"
        )
    if opts["log"]:
        with open(opts["log"], "w", encoding="utf-8") as fh:
            for run in results["runs"]:
                for ev in run["event_log"]:
                    fh.write(json.dumps({"r": run["r"], **ev}, sort_keys=True) + "\n")
    if opts["out"]:
        slim = {
            "ni": ni,
            "runs": [{k: v for k, v in run.items() if k != "event_log"} for run in results["runs"]],
        }
        _write_json(slim, opts["out"])
    return EXIT_OK


def _cmd_explain(opts) -> int:
    params, masks, config, schema, vocab, splits = _load_bundle(opts)
    if opts["input"] is None and opts["example_id"] is None:
        raise _UsageError("need --input or --example-id")
    if opts["input"] is not None:
        example = data_mod.Example(
            token_ids=data_mod.tokenize(opts["input"], vocab, schema.max_len),
            concept_labels=np.zeros(schema.n_concepts, dtype=np.int64),
            task_label=0,
            text=opts["input"],
        )
    else:
        if opts["split"] not in splits:
            raise DataError(f"dataset directory has no {opts['split']!r} split")
        split = splits[opts["split"]]
        if not 0 <= opts["example_id"] < len(split):
            raise _UsageError("--example-id out of range")
        example = split.examples[opts["example_id"]]
    stats = mask_overlap(masks, params.theta.block_map, schema.concept_names)
    trace = build_trace(example, params, masks, schema, vocab, mask_stats=stats)
    paths = render_report(trace, stats, opts["out"])
    ranking = np.argsort(-trace.contributions[:, trace.task_pred], kind="stable")
    print(f"predicted task class: {trace.task_pred}")
    for k in ranking:
        name = schema.concept_names[k]
        pred = schema.concept_class_names[int(trace.concept_preds[k])]
        contrib = trace.contributions[k, trace.task_pred]
        print(f"  {name:<16} {pred:<10} contribution {contrib:+.4f}")
    print(f"wrote {len(paths)} report files under {opts['out']}")
    return EXIT_OK


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "prune": _cmd_prune,
    "eval": _cmd_eval,
    "intervene": _cmd_intervene,
    "explain": _cmd_explain,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        opts = _merge_options(args.command, args)
        return _HANDLERS[args.command](opts)
    except (_UsageError, ConfigError) as exc:
        sys.stderr.write(f"sparsecbm {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except DataError as exc:
        sys.stderr.write(f"sparsecbm {args.command}: data error: {exc}\n")
        return EXIT_DATA
    except NumericError as exc:
        sys.stderr.write(f"sparsecbm {args.command}: numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
