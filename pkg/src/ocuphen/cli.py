"""Command-line pipeline from synthetic notes to the final result table.

Subcommands cover the full workflow: ``synth`` (corpus plus planted ground
truth), ``extract`` (concept spans plus source statistics), ``annotate-gen``
and ``annotate-parse`` (annotation workbooks), ``split`` (patient-grouped
stratified folds), ``pretrain`` (masked-token encoder pretraining),
``train`` (one task model on one fold), ``evaluate`` (aggregate metrics and
paired tests), ``experiment`` (the full factorial comparison), and
``report`` (table rendering).

Reproducibility contract: every run writes ``manifest.json`` under ``--out``
recording the command, its parameters, the derived per-stage seeds, the
config file used, library versions, and a sha256 digest of every artifact
written.  Identical inputs therefore reproduce identical digests.

A single ``--seed`` drives all randomness.  Per-stage streams are derived
with the same hash the experiment loop uses internally:
``sha256("{seed}:{stage}")`` truncated to its first four big-endian bytes
(see :func:`ocuphen.classifier.derive_seed`).  Stage names are ``synth``,
``split``, ``encoder-init``, ``pretrain``, ``train``, and ``experiment``.

The built-in config (see ``DEFAULT_CONFIG``) is desk-scale so every command
finishes in seconds to minutes on a laptop; any field can be overridden via
``--config file.json`` using the same section/key structure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import platform
import sys
from copy import deepcopy
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .baseline import MajorityModel, fit_majority
from .classifier import (
    HeadConfig,
    ModeSpec,
    TrainConfig,
    derive_seed,
    init_task_model,
    predict,
    run_experiment,
    train_task,
)
from .corpus import PatientRecord, load_corpus, save_corpus
from .encoder import (
    EncoderState,
    MlmConfig,
    build_vocab,
    corpus_sequences,
    init_encoder,
    load_checkpoint,
    mlm_pretrain,
    save_checkpoint,
)
from .evaluation import REPORT_FORMATS, macro_f1, mean_ci, paired_t, render_report
from .extraction import default_patterns, extract_encounter, extraction_stats
from .instances import (
    LabeledInstance,
    ground_truth_rows,
    instances_from_ground_truth,
    instances_from_workbook,
    note_texts,
    task_instances,
)
from .ontology import Ontology, default_ontology
from .stratify import build_group_labels, stratify
from .synth import GroundTruthSpan, SynthConfig, SynthGroundTruth, generate_corpus
from .windowing import tokenize
from .workbook import blank_rows, emit_workbook, parse_workbook


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration

#: Desk-scale defaults: small encoder, short schedules, modest corpora.  The
#: section/key structure is fixed; a --config file may override any subset of
#: leaf values (unknown keys are rejected).
DEFAULT_CONFIG: dict = {
    "synth": {
        "n_patients": 40,
        "encounters_per_patient": [1, 3],
        "sentences_per_encounter": [1, 3],
        "codes_per_encounter": [0, 3],
        "decoy_rate": 0.1,
        "negation_rate": 0.1,
        "label_missing_rate": 0.1,
    },
    "vocab": {"min_count": 1, "max_size": None},
    "encoder": {"dim": 32, "max_len": 64, "scale": 0.02},
    "mlm": {
        "mask_prob": 0.15,
        "max_masks_per_seq": 20,
        "max_steps": 60,
        "warmup_steps": 10,
        "initial_lr": 5e-3,
        "weight_decay": 0.01,
        "effective_batch": 16,
        "micro_batch": 8,
        "eval_every": 10,
        "early_stop_tolerance": 0.01,
        "early_stop_patience": 3,
        "max_seq_len": 64,
        "eval_fraction": 0.05,
    },
    "train": {
        "learning_rate": 5e-3,
        "batch_size": 8,
        "min_steps": 10,
        "max_steps": 40,
        "eval_every": 5,
        "early_stop_patience": 3,
        "early_stop_tolerance": 0.01,
        "warmup_steps": 10,
        "decay_every": 50,
        "decay_factor": 0.9,
        "weight_decay": 0.1,
        "grad_clip_max_norm": 1.0,
    },
    "head": {"hidden_dim": None, "dropout": 0.1},
    "experiment": {"k": 5, "n_patients": 120},
}

#: Continued-pretraining dataset sizes; ``None`` means the whole corpus, and
#: fixed sizes are capped at the corpus size so small corpora remain usable.
PRETRAIN_PRESETS: dict[str, int | None] = {
    "zero": None,
    "small": 1024,
    "medium": 16384,
    "large": None,
}

#: Mode (column) names for the factorial experiment.
MODE_FROZEN = "Frozen"
MODE_UNFROZEN = "Unfrozen"
MODE_FROZEN_PRETRAINED = "Frozen + Pretraining"
MODE_UNFROZEN_PRETRAINED = "Unfrozen + Pretraining"

RESULTS_SCHEMA = "task-scores-v1"


def _merge_config(base: Mapping, override: Mapping, path: str = "config") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise CliError(f"unknown {path} key {key!r}")
        if isinstance(base[key], Mapping):
            if not isinstance(value, Mapping):
                raise CliError(f"{path}.{key} must be an object")
            out[key] = _merge_config(base[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def _load_config(path: str | None) -> dict:
    if path is None:
        return deepcopy(DEFAULT_CONFIG)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError("config must be a JSON object of sections")
    return _merge_config(DEFAULT_CONFIG, data)


def _stage_seed(seed: int, stage: str) -> int:
    return derive_seed(seed, stage)


# ---------------------------------------------------------------------------
# Artifact plumbing

def _ensure_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _versions() -> dict[str, str]:
    from importlib.metadata import PackageNotFoundError, version

    try:
        package = version("ocuphen")
    except PackageNotFoundError:  # running from a source tree
        package = "unknown"
    return {
        "ocuphen": package,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _write_manifest(
    out: Path,
    command: str,
    parameters: Mapping,
    seeds: Mapping[str, int],
    config_path: str | None,
) -> None:
    """Record the run: inputs, derived seeds, versions, and output digests."""
    outputs = {
        file.relative_to(out).as_posix(): _sha256(file)
        for file in sorted(out.rglob("*"))
        if file.is_file() and file.name != "manifest.json"
    }
    manifest = {
        "command": command,
        "parameters": dict(parameters),
        "seeds": dict(seeds),
        "config": config_path,
        "versions": _versions(),
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_jsonl(path: Path, records: Iterable[Mapping]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def _read_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{line_no}: not valid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise CliError(f"{path}:{line_no}: expected a JSON object")
            yield line_no, record


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _load_instances(path: str) -> list[LabeledInstance]:
    out = []
    for line_no, record in _read_jsonl(path):
        try:
            out.append(LabeledInstance(**record))
        except TypeError as exc:
            raise CliError(f"{path}:{line_no}: bad instance record: {exc}") from exc
    if not out:
        raise CliError(f"no instances found in {path}")
    return out


def _load_truth(path: str) -> SynthGroundTruth:
    entries = []
    for line_no, record in _read_jsonl(path):
        try:
            entries.append(GroundTruthSpan(**record))
        except TypeError as exc:
            raise CliError(f"{path}:{line_no}: bad ground-truth record: {exc}") from exc
    if not entries:
        raise CliError(f"no ground-truth spans found in {path}")
    return SynthGroundTruth(entries)


def _read_folds(path: str) -> tuple[int, dict[str, int]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# folds:"):
        raise CliError(f"{path}: first line must be '# folds: <count>'")
    try:
        n_folds = int(lines[0].split(":", 1)[1])
    except ValueError as exc:
        raise CliError(f"{path}: bad fold count in header") from exc
    assignment: dict[str, int] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CliError(f"{path}:{line_no}: expected 'patient<TAB>fold'")
        patient, fold_text = parts
        try:
            fold = int(fold_text)
        except ValueError as exc:
            raise CliError(f"{path}:{line_no}: fold must be an integer") from exc
        if not 0 <= fold < n_folds:
            raise CliError(f"{path}:{line_no}: fold {fold} out of range")
        if patient in assignment:
            raise CliError(f"{path}:{line_no}: duplicate patient {patient!r}")
        assignment[patient] = fold
    if not assignment:
        raise CliError(f"{path}: no fold assignments")
    return n_folds, assignment


def _synth_config(section: Mapping, seed: int) -> SynthConfig:
    return SynthConfig(
        n_patients=section["n_patients"],
        encounters_per_patient=tuple(section["encounters_per_patient"]),
        sentences_per_encounter=tuple(section["sentences_per_encounter"]),
        codes_per_encounter=tuple(section["codes_per_encounter"]),
        decoy_rate=section["decoy_rate"],
        negation_rate=section["negation_rate"],
        label_missing_rate=section["label_missing_rate"],
        seed=seed,
    )


def _build_vocab_from_texts(texts: Sequence[str], vocab_cfg: Mapping):
    tokenized = [[token.surface for token in tokenize(text)] for text in texts]
    return build_vocab(
        tokenized, min_count=vocab_cfg["min_count"], max_size=vocab_cfg["max_size"]
    )


def _task_classes(ontology: Ontology) -> dict[str, tuple[str, ...]]:
    return {task.id: task.classes for task in ontology.task_list}


# ---------------------------------------------------------------------------
# subcommand: synth

def cmd_synth(args: argparse.Namespace) -> None:
    config = _load_config(args.config)
    section = dict(config["synth"])
    if args.patients is not None:
        section["n_patients"] = args.patients
    seed = _stage_seed(args.seed, "synth")
    patients, truth = generate_corpus(_synth_config(section, seed))
    out = _ensure_out(args.out)
    save_corpus(patients, str(out / "corpus.jsonl"))
    n_spans = _write_jsonl(
        out / "ground_truth.jsonl", (asdict(entry) for entry in truth.entries)
    )
    _write_manifest(
        out,
        "synth",
        {"patients": section["n_patients"], "seed": args.seed},
        {"synth": seed},
        args.config,
    )
    n_docs = sum(len(p.encounters) for p in patients)
    print(
        f"wrote {len(patients)} patients, {n_docs} encounters, "
        f"{n_spans} planted spans to {out}"
    )


# ---------------------------------------------------------------------------
# subcommand: extract

def _stats_table(stats: Mapping[str, Mapping[str, int]], ontology: Ontology, fmt: str) -> str:
    header = ("Concept", "ICD-10", "∩", "Text")
    rows = []
    totals = [0, 0, 0]
    for concept_id, cells in stats.items():
        concept = ontology.concepts.get(concept_id)
        name = concept.name if concept is not None else concept_id
        values = [cells["icd_only"], cells["both"], cells["text_only"]]
        totals = [t + v for t, v in zip(totals, values)]
        rows.append((name, *[str(v) for v in values]))
    rows.append(("Total", *[str(t) for t in totals]))
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buffer.getvalue()
    widths = [max(len(r[i]) for r in (header, *rows)) for i in range(4)]
    lines = []
    for row in (header, *rows):
        left = row[0].ljust(widths[0])
        cells = "  ".join(cell.rjust(w) for cell, w in zip(row[1:], widths[1:]))
        lines.append(f"{left}  {cells}".rstrip())
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines) + "\n"


def cmd_extract(args: argparse.Namespace) -> None:
    patients = load_corpus(args.corpus)
    patterns = default_patterns()
    out = _ensure_out(args.out)
    records = []
    for patient in patients:
        for doc in patient.encounters:
            for span in extract_encounter(doc, patterns):
                records.append(
                    {
                        "doc_id": span.doc_id,
                        "patient_id": patient.patient_id,
                        "start": span.start,
                        "end": span.end,
                        "concept": span.concept,
                        "surface": span.surface,
                        "source": span.source,
                    }
                )
    _write_jsonl(out / "spans.jsonl", records)
    if args.stats:
        table = _stats_table(
            extraction_stats(patients, patterns), default_ontology(), args.format
        )
        suffix = "csv" if args.format == "csv" else "txt"
        (out / f"extraction_stats.{suffix}").write_text(table, encoding="utf-8")
        print(table, end="")
    _write_manifest(
        out,
        "extract",
        {"corpus": args.corpus, "stats": args.stats, "format": args.format},
        {},
        None,
    )
    n_docs = sum(len(p.encounters) for p in patients)
    print(f"extracted {len(records)} spans from {n_docs} encounters to {out}")


# ---------------------------------------------------------------------------
# subcommands: annotate-gen / annotate-parse

def cmd_annotate_gen(args: argparse.Namespace) -> None:
    patients = load_corpus(args.corpus)
    ontology = default_ontology()
    patterns = default_patterns()
    truth = _load_truth(args.truth) if args.truth else None
    out = _ensure_out(args.out)
    workbook_dir = out / "workbooks"
    workbook_dir.mkdir(exist_ok=True)
    count = 0
    for patient in patients:
        for doc in patient.encounters:
            if truth is not None:
                rows = ground_truth_rows(doc, truth.spans_for(doc.doc_id), ontology)
            else:
                rows = blank_rows(doc, extract_encounter(doc, patterns), ontology)
            text = emit_workbook(doc, rows, ontology)
            (workbook_dir / f"{doc.doc_id}.workbook.txt").write_text(
                text, encoding="utf-8"
            )
            count += 1
    _write_manifest(
        out,
        "annotate-gen",
        {"corpus": args.corpus, "truth": args.truth},
        {},
        None,
    )
    mode = "pre-annotated" if truth is not None else "blank"
    print(f"wrote {count} {mode} workbooks to {workbook_dir}")


def cmd_annotate_parse(args: argparse.Namespace) -> None:
    ontology = default_ontology()
    workbook_dir = Path(args.workbooks)
    files = sorted(workbook_dir.glob("*.workbook.txt"))
    if not files:
        raise CliError(f"no *.workbook.txt files in {workbook_dir}")
    labeled: list[LabeledInstance] = []
    for file in files:
        try:
            workbook = parse_workbook(file.read_text(encoding="utf-8"), ontology)
        except ValueError as exc:
            raise CliError(f"{file.name}: {exc}") from exc
        labeled.extend(instances_from_workbook(workbook, ontology))
    out = _ensure_out(args.out)
    _write_jsonl(out / "instances.jsonl", (asdict(inst) for inst in labeled))
    _write_manifest(out, "annotate-parse", {"workbooks": args.workbooks}, {}, None)
    print(f"parsed {len(files)} workbooks into {len(labeled)} labeled instances")


# ---------------------------------------------------------------------------
# subcommand: split

def cmd_split(args: argparse.Namespace) -> None:
    instances = _load_instances(args.instances)
    matrix = build_group_labels(
        [(inst.patient_id, inst.task, inst.gold_class) for inst in instances]
    )
    seed = _stage_seed(args.seed, "split")
    plan = stratify(matrix, args.k, seed=seed)
    out = _ensure_out(args.out)
    lines = [f"# folds: {args.k}"]
    lines += [f"{patient}\t{fold}" for patient, fold in sorted(plan.assignment.items())]
    (out / "folds.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(
        out,
        "split",
        {"instances": args.instances, "k": args.k, "seed": args.seed},
        {"split": seed},
        None,
    )
    fold_sizes = [0] * args.k
    for fold in plan.assignment.values():
        fold_sizes[fold] += 1
    sizes = ", ".join(str(n) for n in fold_sizes)
    print(f"assigned {len(plan.assignment)} patients to {args.k} folds ({sizes})")


# ---------------------------------------------------------------------------
# subcommand: pretrain

def cmd_pretrain(args: argparse.Namespace) -> None:
    config = _load_config(args.config)
    mlm_kwargs = dict(config["mlm"])
    enc_cfg = config["encoder"]
    if mlm_kwargs["max_seq_len"] > enc_cfg["max_len"]:
        raise CliError("mlm.max_seq_len cannot exceed encoder.max_len")
    patients = load_corpus(args.corpus)
    texts = list(note_texts(patients).values())
    vocab = _build_vocab_from_texts(texts, config["vocab"])
    init_seed = _stage_seed(args.seed, "encoder-init")
    state = init_encoder(
        vocab,
        dim=enc_cfg["dim"],
        max_len=enc_cfg["max_len"],
        seed=init_seed,
        scale=enc_cfg["scale"],
    )
    seeds = {"encoder-init": init_seed}
    history: tuple = ()
    if args.preset != "zero":
        sequences = corpus_sequences(texts, vocab, max_len=mlm_kwargs["max_seq_len"])
        subset = PRETRAIN_PRESETS[args.preset]
        if subset is not None:
            subset = min(subset, len(sequences))
        mlm_cfg = MlmConfig(**mlm_kwargs, subset_size=subset)
        pretrain_seed = _stage_seed(args.seed, "pretrain")
        seeds["pretrain"] = pretrain_seed
        state, history = mlm_pretrain(state, sequences, mlm_cfg, seed=pretrain_seed)
    out = _ensure_out(args.out)
    save_checkpoint(state, out / "encoder.ckpt")
    _write_json(
        out / "pretrain_history.json",
        [{"step": point.step, "loss": point.loss} for point in history],
    )
    _write_manifest(
        out,
        "pretrain",
        {"corpus": args.corpus, "preset": args.preset, "seed": args.seed},
        seeds,
        args.config,
    )
    trained = f"{len(history)} evaluations" if history else "no training (zero preset)"
    print(
        f"saved encoder (vocab {vocab.size}, dim {enc_cfg['dim']}) "
        f"to {out / 'encoder.ckpt'}; {trained}"
    )


# ---------------------------------------------------------------------------
# subcommand: train

def _majority_payload(model: MajorityModel, task: str) -> dict:
    counts = model.tasks[task]
    return {
        "kind": "majority",
        "task": task,
        "classes": list(counts.classes),
        "joint": [
            [concept, span, dict(counter)]
            for (concept, span), counter in sorted(counts.joint.items())
        ],
        "by_concept": {
            concept: dict(counter)
            for concept, counter in sorted(counts.by_concept.items())
        },
        "by_span": {
            span: dict(counter) for span, counter in sorted(counts.by_span.items())
        },
        "overall": dict(counts.overall),
    }


def cmd_train(args: argparse.Namespace) -> None:
    config = _load_config(args.config)
    ontology = default_ontology()
    task_classes = _task_classes(ontology)
    if args.task not in task_classes:
        known = ", ".join(task_classes)
        raise CliError(f"unknown task {args.task!r}; expected one of: {known}")
    classes = task_classes[args.task]
    labeled = [i for i in _load_instances(args.instances) if i.task == args.task]
    if not labeled:
        raise CliError(f"no instances for task {args.task!r} in {args.instances}")
    n_folds, fold_of = _read_folds(args.folds)
    if not 0 <= args.fold < n_folds:
        raise CliError(f"--fold must be in [0, {n_folds})")
    missing = sorted({i.patient_id for i in labeled} - fold_of.keys())
    if missing:
        raise CliError(f"patients missing from fold file: {', '.join(missing)}")
    dev_fold = (args.fold + 1) % n_folds
    train_set = [i for i in labeled if fold_of[i.patient_id] not in (args.fold, dev_fold)]
    dev_set = [i for i in labeled if fold_of[i.patient_id] == dev_fold]
    test_set = [i for i in labeled if fold_of[i.patient_id] == args.fold]
    for name, subset in (("train", train_set), ("dev", dev_set), ("test", test_set)):
        if not subset:
            raise CliError(f"fold {args.fold} leaves the {name} subset empty")
    out = _ensure_out(args.out)
    golds = [i.gold_class for i in test_set]
    result_record: dict = {
        "task": args.task,
        "model": args.model,
        "fold": args.fold,
        "n_folds": n_folds,
        "n_train": len(train_set),
        "n_dev": len(dev_set),
        "n_test": len(test_set),
    }
    seeds: dict[str, int] = {}

    if args.model == "majority":
        majority = fit_majority(
            [(i.concept, i.span_text, i.task, i.gold_class) for i in train_set],
            task_classes={args.task: classes},
        )
        preds = [majority.predict(i.concept, i.span_text, i.task) for i in test_set]
        result_record.update(
            {"test_f1": macro_f1(golds, preds, classes), "best_step": None, "history": []}
        )
        _write_json(out / "model.json", _majority_payload(majority, args.task))
    else:
        if not args.encoder:
            raise CliError("--encoder is required for neural models")
        if not args.corpus:
            raise CliError(
                "--corpus is required for neural models (token windows come "
                "from the note text)"
            )
        state = load_checkpoint(args.encoder)
        texts = note_texts(load_corpus(args.corpus))
        convert = lambda subset: task_instances(  # noqa: E731
            subset, texts, state.vocab, max_len=state.max_len
        )
        train_conv, dev_conv, test_conv = map(convert, (train_set, dev_set, test_set))
        seed = derive_seed(args.seed, "train", args.task, str(args.fold), args.model)
        init_seed = derive_seed(
            args.seed, "train", args.task, str(args.fold), args.model, "init"
        )
        seeds = {"train": seed, "init": init_seed}
        train_cfg = TrainConfig(
            **config["train"],
            frozen_encoder=(args.model == "frozen"),
            seed=seed,
        )
        head = HeadConfig(
            hidden_dim=config["head"]["hidden_dim"], dropout=config["head"]["dropout"]
        )
        model = init_task_model(
            state,
            args.task,
            classes,
            list(ontology.concepts),
            head,
            seed=init_seed,
        )
        outcome = train_task(
            model,
            [(i.example, i.gold_class) for i in train_conv],
            [(i.example, i.gold_class) for i in dev_conv],
            train_cfg,
        )
        preds = [predict(outcome.model, i.example) for i in test_conv]
        result_record.update(
            {
                "test_f1": macro_f1(golds, preds, classes),
                "best_step": outcome.best_step,
                "history": [
                    {"step": e.step, "dev_loss": e.dev_loss, "dev_f1": e.dev_f1}
                    for e in outcome.history
                ],
            }
        )
        payload = {
            "kind": "neural",
            "task": args.task,
            "classes": list(classes),
            "concepts": list(ontology.concepts),
            "frozen": args.model == "frozen",
            "head_config": {"hidden_dim": head.hidden_dim, "dropout": head.dropout},
            "head": {name: array.tolist() for name, array in outcome.model.head.items()},
            "encoder_checkpoint": _sha256(Path(args.encoder)),
        }
        _write_json(out / "model.json", payload)
        if args.model == "unfrozen":
            save_checkpoint(outcome.model.encoder, out / "encoder.ckpt")

    _write_json(out / "train_result.json", result_record)
    _write_manifest(
        out,
        "train",
        {
            "instances": args.instances,
            "folds": args.folds,
            "fold": args.fold,
            "task": args.task,
            "model": args.model,
            "encoder": args.encoder,
            "corpus": args.corpus,
            "seed": args.seed,
        },
        seeds,
        args.config,
    )
    print(
        f"{args.task} [{args.model}] fold {args.fold}: "
        f"test macro-F1 {result_record['test_f1']:.3f} "
        f"({len(train_set)} train / {len(dev_set)} dev / {len(test_set)} test)"
    )


# ---------------------------------------------------------------------------
# subcommand: evaluate

def _collect_results(results_dir: str) -> dict[str, dict[str, dict[int, float]]]:
    files = sorted(Path(results_dir).rglob("train_result.json"))
    if not files:
        raise CliError(f"no train_result.json files under {results_dir}")
    scores: dict[str, dict[str, dict[int, float]]] = {}
    for file in files:
        record = json.loads(file.read_text(encoding="utf-8"))
        try:
            task, model = record["task"], record["model"]
            fold, f1 = int(record["fold"]), float(record["test_f1"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{file}: bad result record: {exc}") from exc
        by_fold = scores.setdefault(task, {}).setdefault(model, {})
        if fold in by_fold:
            raise CliError(f"{file}: duplicate result for {task}/{model} fold {fold}")
        by_fold[fold] = f1
    return scores


def _mean_ci_or_mean(values: Sequence[float]) -> dict:
    if len(values) >= 2:
        mean, lo, hi = mean_ci(values)
        return {"mean": mean, "ci": [lo, hi]}
    return {"mean": values[0], "ci": None}


def cmd_evaluate(args: argparse.Namespace) -> None:
    scores = _collect_results(args.results)
    models = sorted({model for by_model in scores.values() for model in by_model})
    tasks_payload = {
        task: {
            model: {
                "folds": {str(f): by_fold[f] for f in sorted(by_fold)},
                **_mean_ci_or_mean([by_fold[f] for f in sorted(by_fold)]),
            }
            for model, by_fold in by_model.items()
        }
        for task, by_model in scores.items()
    }
    pooled = {
        model: {
            (task, fold): f1
            for task, by_model in scores.items()
            for m, by_fold in by_model.items()
            if m == model
            for fold, f1 in by_fold.items()
        }
        for model in models
    }
    average_payload = {
        model: _mean_ci_or_mean([cells[key] for key in sorted(cells)])
        for model, cells in pooled.items()
        if cells
    }
    paired_payload = []
    for i, model_a in enumerate(models):
        for model_b in models[i + 1 :]:
            shared = sorted(pooled[model_a].keys() & pooled[model_b].keys())
            if len(shared) < 2:
                continue
            test = paired_t(
                [pooled[model_a][key] for key in shared],
                [pooled[model_b][key] for key in shared],
            )
            paired_payload.append(
                {
                    "a": model_a,
                    "b": model_b,
                    "n": len(shared),
                    "t": test.t,
                    "dof": test.dof,
                    "p": test.p,
                }
            )
    payload = {
        "schema": "metrics-v1",
        "tasks": tasks_payload,
        "average": average_payload,
        "paired_tests": paired_payload,
    }
    out = _ensure_out(args.out)
    _write_json(out / "metrics.json", payload)

    lines = ["Mean test macro-F1 across folds", ""]
    for task in sorted(tasks_payload):
        for model in sorted(tasks_payload[task]):
            cell = tasks_payload[task][model]
            ci = (
                f" ({cell['ci'][0]:.3f}, {cell['ci'][1]:.3f})" if cell["ci"] else ""
            )
            lines.append(f"{task:28s} {model:10s} {cell['mean']:.3f}{ci}")
    lines.append("")
    for model in sorted(average_payload):
        cell = average_payload[model]
        ci = f" ({cell['ci'][0]:.3f}, {cell['ci'][1]:.3f})" if cell["ci"] else ""
        lines.append(f"{'average':28s} {model:10s} {cell['mean']:.3f}{ci}")
    if paired_payload:
        lines.append("")
        lines.append("Paired t-tests over shared (task, fold) observations")
        for test in paired_payload:
            lines.append(
                f"{test['a']} vs {test['b']}: "
                f"t({test['dof']})={test['t']:.3f}, p={test['p']:.4f}, n={test['n']}"
            )
    text = "\n".join(lines) + "\n"
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    _write_manifest(out, "evaluate", {"results": args.results}, {}, None)
    print(text, end="")


# ---------------------------------------------------------------------------
# subcommands: experiment / report

def cmd_experiment(args: argparse.Namespace) -> None:
    config = _load_config(args.config)
    mlm_kwargs = dict(config["mlm"])
    enc_cfg = config["encoder"]
    if mlm_kwargs["max_seq_len"] > enc_cfg["max_len"]:
        raise CliError("mlm.max_seq_len cannot exceed encoder.max_len")
    ontology = default_ontology()
    out = _ensure_out(args.out)
    seeds: dict[str, int] = {}

    if args.corpus:
        if not args.truth:
            raise CliError("--truth is required when --corpus is given")
        patients = load_corpus(args.corpus)
        truth = _load_truth(args.truth)
    else:
        section = dict(config["synth"])
        section["n_patients"] = config["experiment"]["n_patients"]
        seeds["synth"] = _stage_seed(args.seed, "synth")
        patients, truth = generate_corpus(_synth_config(section, seeds["synth"]))
        save_corpus(patients, str(out / "corpus.jsonl"))
        _write_jsonl(
            out / "ground_truth.jsonl", (asdict(entry) for entry in truth.entries)
        )

    labeled = instances_from_ground_truth(patients, truth, ontology)
    if not labeled:
        raise CliError("the corpus yields no labeled task instances")
    texts = note_texts(patients)
    vocab = _build_vocab_from_texts(list(texts.values()), config["vocab"])

    seeds["encoder-init"] = _stage_seed(args.seed, "encoder-init")
    random_encoder = init_encoder(
        vocab,
        dim=enc_cfg["dim"],
        max_len=enc_cfg["max_len"],
        seed=seeds["encoder-init"],
        scale=enc_cfg["scale"],
    )
    sequences = corpus_sequences(
        list(texts.values()), vocab, max_len=mlm_kwargs["max_seq_len"]
    )
    seeds["pretrain"] = _stage_seed(args.seed, "pretrain")
    pretrained, history = mlm_pretrain(
        random_encoder, sequences, MlmConfig(**mlm_kwargs), seed=seeds["pretrain"]
    )
    save_checkpoint(pretrained, out / "encoder_pretrained.ckpt")
    _write_json(
        out / "pretrain_history.json",
        [{"step": point.step, "loss": point.loss} for point in history],
    )

    instances = task_instances(labeled, texts, vocab, max_len=enc_cfg["max_len"])
    modes = [
        ModeSpec(MODE_FROZEN, random_encoder, True),
        ModeSpec(MODE_UNFROZEN, random_encoder, False),
        ModeSpec(MODE_FROZEN_PRETRAINED, pretrained, True),
        ModeSpec(MODE_UNFROZEN_PRETRAINED, pretrained, False),
    ]
    seeds["experiment"] = _stage_seed(args.seed, "experiment")
    results = run_experiment(
        instances,
        modes,
        _task_classes(ontology),
        list(ontology.concepts),
        k=config["experiment"]["k"],
        seed=seeds["experiment"],
        train_cfg=TrainConfig(**config["train"]),
        head=HeadConfig(
            hidden_dim=config["head"]["hidden_dim"], dropout=config["head"]["dropout"]
        ),
        include_majority=True,
        skip_unsupported=True,
    )
    if not results:
        raise CliError(
            "no task had enough data for cross-validation; "
            "increase experiment.n_patients"
        )
    report = render_report(results, fmt=args.format, ontology=ontology)
    _write_json(out / "results.json", {"schema": RESULTS_SCHEMA, "scores": results})
    suffix = "csv" if args.format == "csv" else "txt"
    (out / f"report.{suffix}").write_text(report, encoding="utf-8")
    _write_manifest(
        out,
        "experiment",
        {
            "corpus": args.corpus,
            "truth": args.truth,
            "seed": args.seed,
            "format": args.format,
        },
        seeds,
        args.config,
    )
    print(report, end="" if report.endswith("\n") else "\n")
    print(f"\nevaluated {len(results)} tasks; artifacts in {out}")


def cmd_report(args: argparse.Namespace) -> None:
    with open(args.results, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.results} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or data.get("schema") != RESULTS_SCHEMA:
        raise CliError(
            f"{args.results} does not contain a {RESULTS_SCHEMA!r} score table"
        )
    report = render_report(data["scores"], fmt=args.format, ontology=default_ontology())
    out = _ensure_out(args.out)
    suffix = "csv" if args.format == "csv" else "txt"
    (out / f"report.{suffix}").write_text(report, encoding="utf-8")
    _write_manifest(
        out, "report", {"results": args.results, "format": args.format}, {}, None
    )
    print(report, end="" if report.endswith("\n") else "\n")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocuphen",
        description=(
            "Desk-scale clinical phenotyping pipeline: synthesize notes, "
            "extract concept spans, annotate, split, pretrain, train, and "
            "report."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text, description=help_text)
        cmd.set_defaults(func=func)
        cmd.add_argument("--out", required=True, help="output directory")
        return cmd

    cmd = add("synth", cmd_synth, "generate a synthetic corpus with planted ground truth")
    cmd.add_argument("--patients", type=int, help="number of patients to generate")
    cmd.add_argument("--seed", type=int, default=0)
    cmd.add_argument("--config", help="JSON config file")

    cmd = add("extract", cmd_extract, "extract concept spans from a corpus")
    cmd.add_argument("--corpus", required=True, help="corpus.jsonl from synth")
    cmd.add_argument("--stats", action="store_true", help="emit per-concept source counts")
    cmd.add_argument("--format", choices=REPORT_FORMATS, default="text")

    cmd = add("annotate-gen", cmd_annotate_gen, "write per-encounter annotation workbooks")
    cmd.add_argument("--corpus", required=True)
    cmd.add_argument(
        "--truth",
        help="ground_truth.jsonl; when given, workbooks come pre-annotated from it",
    )

    cmd = add("annotate-parse", cmd_annotate_parse, "parse filled workbooks into task instances")
    cmd.add_argument("--workbooks", required=True, help="directory of *.workbook.txt files")

    cmd = add("split", cmd_split, "stratified patient-grouped fold assignment")
    cmd.add_argument("--instances", required=True, help="instances.jsonl")
    cmd.add_argument("--k", type=int, default=5, help="number of folds")
    cmd.add_argument("--seed", type=int, default=0)

    cmd = add("pretrain", cmd_pretrain, "masked-token pretraining of the encoder")
    cmd.add_argument("--corpus", required=True)
    cmd.add_argument(
        "--preset",
        choices=tuple(PRETRAIN_PRESETS),
        default="large",
        help="pretraining dataset size (zero skips training)",
    )
    cmd.add_argument("--seed", type=int, default=0)
    cmd.add_argument("--config", help="JSON config file")

    cmd = add("train", cmd_train, "train one task model on one fold")
    cmd.add_argument("--instances", required=True)
    cmd.add_argument("--folds", required=True, help="folds.tsv from split")
    cmd.add_argument("--fold", type=int, required=True, help="test fold index")
    cmd.add_argument("--task", required=True, help="task id, e.g. Laterality-All")
    cmd.add_argument("--model", choices=("majority", "frozen", "unfrozen"), required=True)
    cmd.add_argument("--encoder", help="encoder.ckpt (neural models)")
    cmd.add_argument("--corpus", help="corpus.jsonl (neural models)")
    cmd.add_argument("--seed", type=int, default=0)
    cmd.add_argument("--config", help="JSON config file")

    cmd = add("evaluate", cmd_evaluate, "aggregate train results into metrics and paired tests")
    cmd.add_argument("--results", required=True, help="directory of train output dirs")
    cmd.add_argument("--format", choices=REPORT_FORMATS, default="text")

    cmd = add("experiment", cmd_experiment, "full factorial comparison with a result table")
    cmd.add_argument("--corpus", help="existing corpus.jsonl (default: synthesize)")
    cmd.add_argument("--truth", help="ground_truth.jsonl for --corpus")
    cmd.add_argument("--seed", type=int, default=0)
    cmd.add_argument("--config", help="JSON config file")
    cmd.add_argument("--format", choices=REPORT_FORMATS, default="text")

    cmd = add("report", cmd_report, "render a stored score table")
    cmd.add_argument("--results", required=True, help="results.json from experiment")
    cmd.add_argument("--format", choices=REPORT_FORMATS, default="text")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        raise SystemExit(1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
