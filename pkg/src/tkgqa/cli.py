"""Command-line entry point: generate, pretrain, train, eval, analyze, ablate.

Flag names mirror the configuration dataclass fields (underscores become
dashes) and take precedence over config-file values, which in turn beat
the built-in defaults.  Every subcommand resolves one output directory,
refuses to write into a non-empty one unless ``--force`` is given, and
leaves a ``run_manifest.json`` recording the resolved settings, the seed
and the sha256 of every input and output file.  ``TKGQA_OUT_ROOT`` sets
the default output root when ``--out`` is omitted.

Exit status: 0 on success, 2 for usage problems (bad flags, unknown
config keys, missing files), 1 for runtime failures.  Failures print one
line to stderr of the form ``error: E_SOMECODE: message``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import TrainingConfig, load_config
from .encoders import pretrain_tcomplex, save_store
from .errors import (
    CheckpointError,
    ConfigError,
    ContractViolation,
    EvaluationError,
    GenerationError,
    ParseError,
    TkgqaError,
    TrainingDiverged,
)
from .evaluation import (
    build_metrics_report,
    gold_records,
    predictions_from_model,
    prediction_overlap,
    question_time_probe,
    answer_type_confusion,
    read_predictions,
    write_predictions,
)
from .generator import WorldSpec, generate_to_directory
from .kg import answer_recall, dataset_paths, load_dataset
from .model import TimeWeightedRGCN, prepare_questions
from .storage import read_json, sha256_file, write_json
from .training import run_ablation, train

logger = logging.getLogger("tkgqa.cli")

_FLAG_TYPES = {"int": int, "float": float, "str": str}


class _Parser(argparse.ArgumentParser):
    # argparse would exit 2 with its own message; route it through the
    # uniform error format instead.
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: E_USAGE: {message}\n")
        raise SystemExit(2)


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls) -> None:
    """One optional flag per dataclass field, defaulting to None (= unset)."""
    for f in dataclasses.fields(cls):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        else:
            parser.add_argument(flag, type=_FLAG_TYPES.get(f.type, str), default=None, metavar=f.type.upper())


def _collected(args: argparse.Namespace, cls) -> dict:
    values = {}
    for f in dataclasses.fields(cls):
        value = getattr(args, f.name, None)
        if value is not None:
            values[f.name] = value
    return values


def _resolve_out(args: argparse.Namespace, subcommand: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = os.environ.get("TKGQA_OUT_ROOT")
        if not root:
            raise ConfigError("an output directory is required: pass --out or set TKGQA_OUT_ROOT")
        out = Path(root) / subcommand
    if out.exists() and any(out.iterdir()) and not args.force:
        raise TkgqaError(f"output directory {out} is not empty (pass --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hash_files(paths) -> dict[str, str]:
    return {str(p): sha256_file(p) for p in paths if Path(p).is_file()}


def _write_run_manifest(out: Path, subcommand: str, settings: dict, seed, inputs, outputs) -> None:
    write_json(
        out / "run_manifest.json",
        {
            "subcommand": subcommand,
            "settings": settings,
            "seed": seed,
            "inputs": _hash_files(inputs),
            "outputs": {name: sha256_file(out / name) for name in outputs if (out / name).is_file()},
        },
    )


def _load_training_config(args: argparse.Namespace) -> TrainingConfig:
    return load_config(args.config, overrides=_collected(args, TrainingConfig))


def _dataset_input_paths(data_dir) -> list[Path]:
    paths = dataset_paths(data_dir)
    return [paths["train"], paths["valid"], paths["test"]]


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_generate(args: argparse.Namespace) -> int:
    spec = WorldSpec(**_collected(args, WorldSpec))
    out = _resolve_out(args, "generate")
    dataset = generate_to_directory(spec, out)
    outputs = ["facts.tsv", "train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"]
    _write_run_manifest(out, "generate", dataclasses.asdict(spec), spec.seed, [], outputs)
    counts = dataset.manifest["category_counts"]
    total = sum(sum(c.values()) for c in counts.values())
    print(f"generated {dataset.manifest['n_world_facts']} facts and {total} questions in {out}")
    return 0


def _cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_training_config(args)
    out = _resolve_out(args, "pretrain")
    kg, _ = load_dataset(args.data)
    store = pretrain_tcomplex(
        kg,
        cfg.dim,
        cfg.tcomplex_epochs,
        cfg.seed,
        learning_rate=cfg.tcomplex_learning_rate,
        batch_size=cfg.tcomplex_batch_size,
    )
    save_store(store, out / "embeddings.ckpt", kg)
    inputs = _dataset_input_paths(args.data) + ([args.config] if args.config else [])
    _write_run_manifest(
        out, "pretrain", cfg.to_dict(), cfg.seed, inputs, ["embeddings.ckpt", "embeddings.ckpt.vocab.json"]
    )
    print(f"pretrained {store.entity_table.data.shape[0]} entity and {store.time_table.data.shape[0]} time embeddings in {out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    overrides = _collected(args, TrainingConfig)
    if args.embeddings:
        overrides["embedding_init"] = "file"
        overrides["embedding_file"] = str(args.embeddings)
    cfg = load_config(args.config, overrides=overrides)
    out = _resolve_out(args, "train")
    kg, splits = load_dataset(args.data)
    result = train(cfg, kg, splits)
    result.model.save(out / "model.ckpt")
    (out / "epoch_log.tsv").write_text(result.epoch_log_text(), encoding="utf-8")
    inputs = _dataset_input_paths(args.data)
    if args.config:
        inputs.append(args.config)
    if args.embeddings:
        inputs.append(args.embeddings)
    _write_run_manifest(
        out, "train", cfg.to_dict(), cfg.seed, inputs,
        ["model.ckpt", "model.ckpt.vocab.json", "epoch_log.tsv"],
    )
    print(
        f"trained for {len(result.history) - 1} epochs in {result.wall_seconds:.1f}s; "
        f"best epoch {result.best_epoch} (valid hits@1 {result.best_valid_hits1:.4f}); wrote {out / 'model.ckpt'}"
    )
    return 0


def _load_model_and_split(args: argparse.Namespace):
    kg, splits = load_dataset(args.data)
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}")
    model = TimeWeightedRGCN.load(args.model, kg)
    prepared = prepare_questions(splits[args.split], kg, model.token_vocab)
    return kg, splits, model, prepared


def _cmd_eval(args: argparse.Namespace) -> int:
    out = _resolve_out(args, "eval")
    kg, splits, model, prepared = _load_model_and_split(args)
    k = args.top_k if args.top_k is not None else model.cfg.top_k
    predictions = predictions_from_model(model, prepared, k=k, workers=args.workers)
    write_predictions(predictions, out / "predictions.jsonl")
    gold = gold_records(splits[args.split], kg.entities)
    report = build_metrics_report(
        args.split, predictions, gold, answer_recall(splits[args.split])
    )
    write_json(out / "metrics.json", report.to_dict())
    (out / "metrics.txt").write_text(report.format_table(), encoding="utf-8")
    inputs = _dataset_input_paths(args.data) + [args.model, str(args.model) + ".vocab.json"]
    settings = {"split": args.split, "top_k": k, "workers": args.workers}
    _write_run_manifest(out, "eval", settings, model.cfg.seed, inputs, ["predictions.jsonl", "metrics.json", "metrics.txt"])
    print(report.format_table(), end="")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    out = _resolve_out(args, "analyze")
    kg, splits, model, prepared = _load_model_and_split(args)
    k = args.top_k if args.top_k is not None else model.cfg.top_k
    predictions = predictions_from_model(model, prepared, k=k, workers=args.workers)
    gold = gold_records(splits[args.split], kg.entities)

    # The generator records each explicit question's asked year; prefer that
    # over regex extraction when the dataset manifest carries it.
    gold_years = None
    manifest_path = dataset_paths(args.data)["manifest"]
    if manifest_path.is_file():
        recorded = read_json(manifest_path).get("gold_question_years")
        if recorded:
            gold_years = {qid: int(year) for qid, year in recorded.items()}

    analysis = {
        "split": args.split,
        "probe": question_time_probe(model, prepared, gold_years=gold_years),
        "confusion": answer_type_confusion(predictions, gold),
    }
    lines = [f"split: {args.split} ({len(prepared)} questions)"]
    probe = analysis["probe"]
    if probe["n_probed"]:
        lines.append(
            f"question-time probe ({probe['n_probed']} questions): median |delta| {probe['median_abs_delta']}, "
            f"exact {probe['pct_exact']:.4f}, within 5 {probe['pct_within_5']:.4f}, within 20 {probe['pct_within_20']:.4f}"
        )
    else:
        lines.append("question-time probe: no questions with an extractable year")
    confusion = analysis["confusion"]
    lines.append(
        f"answer-type confusion: entity-as-time {confusion['entity_as_time']}, time-as-entity {confusion['time_as_entity']}"
    )
    inputs = _dataset_input_paths(args.data) + [args.model, str(args.model) + ".vocab.json"]
    if args.compare:
        other = read_predictions(args.compare)
        analysis["overlap"] = prediction_overlap(predictions, other, gold)
        lines.append(f"hit@1 overlap vs {args.compare}: {analysis['overlap']['overall']}")
        inputs.append(args.compare)
    write_json(out / "analysis.json", analysis)
    (out / "analysis.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    settings = {"split": args.split, "top_k": k, "workers": args.workers, "compare": args.compare}
    _write_run_manifest(out, "analyze", settings, model.cfg.seed, inputs, ["analysis.json", "analysis.txt"])
    print("\n".join(lines))
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_training_config(args)
    out = _resolve_out(args, "ablate")
    kg, splits = load_dataset(args.data)
    report, result_on, result_off = run_ablation(cfg, kg, splits)
    write_json(out / "ablation.json", report.to_dict())
    (out / "ablation.txt").write_text(report.format_table(), encoding="utf-8")
    (out / "epoch_log_with_gating.tsv").write_text(result_on.epoch_log_text(), encoding="utf-8")
    (out / "epoch_log_without_gating.tsv").write_text(result_off.epoch_log_text(), encoding="utf-8")
    inputs = _dataset_input_paths(args.data) + ([args.config] if args.config else [])
    _write_run_manifest(
        out, "ablate", cfg.to_dict(), cfg.seed, inputs,
        ["ablation.json", "ablation.txt", "epoch_log_with_gating.tsv", "epoch_log_without_gating.tsv"],
    )
    print(report.format_table(), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tkgqa", description="Temporal KG question answering experiments.")
    parser.add_argument("--quiet", action="store_true", help="suppress progress logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser, needs_data: bool = True) -> None:
        if needs_data:
            p.add_argument("--data", required=True, help="dataset directory from `generate`")
        p.add_argument("--out", default=None, help="output directory (default: $TKGQA_OUT_ROOT/<subcommand>)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")

    p = sub.add_parser("generate", parser_class=_Parser, help="emit a synthetic dataset directory")
    common(p, needs_data=False)
    _add_dataclass_flags(p, WorldSpec)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("pretrain", parser_class=_Parser, help="pretrain entity/time embeddings on the background graph")
    common(p)
    p.add_argument("--config", default=None, help="key = value config file")
    _add_dataclass_flags(p, TrainingConfig)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", parser_class=_Parser, help="train a model and write its checkpoint")
    common(p)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--embeddings", default=None, help="embedding checkpoint from `pretrain`")
    _add_dataclass_flags(p, TrainingConfig)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parser_class=_Parser, help="score a checkpoint on one split")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint from `train`")
    p.add_argument("--split", default="test", help="train, valid or test")
    p.add_argument("--top-k", type=int, default=None, help="ranked candidates per question")
    p.add_argument("--workers", type=int, default=1, help="forward-pass thread count")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", parser_class=_Parser, help="probe, confusion and overlap reports")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint from `train`")
    p.add_argument("--split", default="test", help="train, valid or test")
    p.add_argument("--top-k", type=int, default=None, help="ranked candidates per question")
    p.add_argument("--workers", type=int, default=1, help="forward-pass thread count")
    p.add_argument("--compare", default=None, help="second prediction file for overlap analysis")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("ablate", parser_class=_Parser, help="paired gating-on/gating-off comparison")
    common(p)
    p.add_argument("--config", default=None, help="key = value config file")
    _add_dataclass_flags(p, TrainingConfig)
    p.set_defaults(func=_cmd_ablate)

    return parser


_ERROR_CODES = [
    (ConfigError, "E_CONFIG", 2),
    (FileNotFoundError, "E_NOFILE", 2),
    (ParseError, "E_PARSE", 1),
    (CheckpointError, "E_CHECKPOINT", 1),
    (GenerationError, "E_GENERATION", 1),
    (TrainingDiverged, "E_DIVERGED", 1),
    (EvaluationError, "E_EVAL", 1),
    (ContractViolation, "E_CONTRACT", 1),
    (TkgqaError, "E_RUNTIME", 1),
    (OSError, "E_IO", 1),
]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except tuple(exc for exc, _, _ in _ERROR_CODES) as err:
        for exc_type, code, status in _ERROR_CODES:
            if isinstance(err, exc_type):
                sys.stderr.write(f"error: {code}: {err}\n")
                return status
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
