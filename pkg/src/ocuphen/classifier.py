"""Span classification models over the encoder, with the full training recipe.

A task model encodes a token window, mean-pools the embeddings of the target
span, concatenates a one-hot concept indicator, and applies a linear or
one-hidden-layer head.  Training uses class-weighted cross-entropy, AdamW with
decoupled weight decay, linear warmup followed by stepped learning-rate decay,
global-norm gradient clipping, dev-set evaluation every few steps with
dual-metric early stopping, and best-dev-macro-F1 checkpoint selection.  The
encoder can be frozen (feature extractor) or fine-tuned jointly.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .baseline import fit_majority
from .encoder import (
    ENCODER_BLOCK_NAMES,
    AdamW,
    EncoderState,
    backward_from_hidden,
    encode_with_cache,
)
from .evaluation import macro_f1
from .stratify import build_group_labels, make_splits, stratify

#: Standard hyperparameter grid (learning rate is the outermost axis).
GRID_LEARNING_RATES = (1e-5, 1e-4, 1e-3)
GRID_BATCH_SIZES = (8, 32, 64)
GRID_HIDDEN_DIMS = (None, 256, 512)

MAJORITY_MODE_NAME = "Majority"


class ClassifierError(ValueError):
    """Invalid model/config/data or a non-finite training loss."""


# ---------------------------------------------------------------------------
# Configs and model


@dataclass(frozen=True)
class HeadConfig:
    """Classification head shape: optional hidden layer and input dropout."""

    hidden_dim: int | None = None
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ClassifierError("hidden_dim must be absent or positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ClassifierError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Task-model training schedule."""

    learning_rate: float = 1e-4
    batch_size: int = 32
    min_steps: int = 50
    max_steps: int = 500
    eval_every: int = 5
    early_stop_patience: int = 5
    early_stop_tolerance: float = 0.01
    warmup_steps: int = 100
    decay_every: int = 50
    decay_factor: float = 0.9
    weight_decay: float = 0.1
    grad_clip_max_norm: float = 1.0
    frozen_encoder: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ClassifierError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ClassifierError("batch_size must be at least 1")
        if not 0 <= self.min_steps <= self.max_steps:
            raise ClassifierError("need 0 <= min_steps <= max_steps")
        if self.eval_every < 1:
            raise ClassifierError("eval_every must be at least 1")
        if self.early_stop_patience < 1:
            raise ClassifierError("early_stop_patience must be at least 1")
        if self.early_stop_tolerance < 0:
            raise ClassifierError("early_stop_tolerance must be non-negative")
        if self.warmup_steps < 1:
            raise ClassifierError("warmup_steps must be at least 1")
        if self.decay_every < 1:
            raise ClassifierError("decay_every must be at least 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ClassifierError("decay_factor must lie in (0, 1]")
        if self.weight_decay < 0:
            raise ClassifierError("weight_decay must be non-negative")
        if self.grad_clip_max_norm <= 0:
            raise ClassifierError("grad_clip_max_norm must be positive")


@dataclass(frozen=True)
class SpanExample:
    """A token window with the target span marked by inclusive token indices."""

    token_ids: tuple[int, ...]
    span_lo: int
    span_hi: int
    concept: str

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise ClassifierError("example has no tokens")
        if self.span_lo > self.span_hi:
            raise ClassifierError("empty span range")
        if not 0 <= self.span_lo <= self.span_hi < len(self.token_ids):
            raise ClassifierError("span range outside the token window")


@dataclass
class TaskModel:
    """Encoder plus a per-task classification head."""

    task: str
    classes: tuple[str, ...]
    concepts: tuple[str, ...]
    encoder: EncoderState
    head: dict[str, np.ndarray]
    head_config: HeadConfig

    def __post_init__(self) -> None:
        if not self.task:
            raise ClassifierError("task id must be non-empty")
        if len(self.classes) < 2:
            raise ClassifierError("a task needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ClassifierError("task classes must be unique")
        if not self.concepts or len(set(self.concepts)) != len(self.concepts):
            raise ClassifierError("concept list must be non-empty and unique")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def input_dim(self) -> int:
        return self.encoder.dim + len(self.concepts)

    def parameters(self, frozen_encoder: bool) -> dict[str, np.ndarray]:
        """Trainable arrays; encoder blocks included only when not frozen."""
        out = {f"head.{name}": arr for name, arr in self.head.items()}
        if not frozen_encoder:
            for name in ENCODER_BLOCK_NAMES:
                out[f"encoder.{name}"] = getattr(self.encoder, name)
        return out

    def copy(self) -> "TaskModel":
        return TaskModel(
            task=self.task,
            classes=self.classes,
            concepts=self.concepts,
            encoder=self.encoder.copy(),
            head={name: arr.copy() for name, arr in self.head.items()},
            head_config=self.head_config,
        )


def init_task_model(
    encoder: EncoderState,
    task: str,
    classes: Sequence[str],
    concepts: Sequence[str],
    head_config: HeadConfig = HeadConfig(),
    seed: int = 0,
    scale: float = 0.02,
) -> TaskModel:
    rng = np.random.default_rng(seed)
    input_dim = encoder.dim + len(concepts)
    n_classes = len(classes)
    if head_config.hidden_dim is None:
        head = {
            "w": rng.normal(0.0, scale, size=(input_dim, n_classes)),
            "b": np.zeros(n_classes, dtype=np.float64),
        }
    else:
        h = head_config.hidden_dim
        head = {
            "w1": rng.normal(0.0, scale, size=(input_dim, h)),
            "b1": np.zeros(h, dtype=np.float64),
            "w2": rng.normal(0.0, scale, size=(h, n_classes)),
            "b2": np.zeros(n_classes, dtype=np.float64),
        }
    return TaskModel(
        task=task,
        classes=tuple(classes),
        concepts=tuple(concepts),
        encoder=encoder,
        head=head,
        head_config=head_config,
    )


# ---------------------------------------------------------------------------
# Forward pass


def _concept_one_hot(model: TaskModel, concept: str) -> np.ndarray:
    try:
        index = model.concepts.index(concept)
    except ValueError:
        raise ClassifierError(f"unknown concept {concept!r}") from None
    one_hot = np.zeros(len(model.concepts), dtype=np.float64)
    one_hot[index] = 1.0
    return one_hot


def _forward_example(
    model: TaskModel,
    example: SpanExample,
    drop_mask: np.ndarray | None,
) -> tuple[np.ndarray, dict]:
    cache = encode_with_cache(model.encoder, example.token_ids)
    hidden = cache["hidden"]
    span = hidden[example.span_lo : example.span_hi + 1]
    pooled = span.mean(axis=0)
    features = np.concatenate([pooled, _concept_one_hot(model, example.concept)])
    if drop_mask is not None:
        features = features * drop_mask
    head = model.head
    if model.head_config.hidden_dim is None:
        scores = features @ head["w"] + head["b"]
        detail = {"features": features, "cache": cache}
    else:
        pre = features @ head["w1"] + head["b1"]
        act = np.maximum(pre, 0.0)
        scores = act @ head["w2"] + head["b2"]
        detail = {"features": features, "pre": pre, "act": act, "cache": cache}
    return scores, detail


def forward(
    model: TaskModel,
    example: SpanExample,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Unnormalized class scores for one span example.

    In training mode with a positive dropout rate, inverted dropout is applied
    to the pooled-plus-indicator feature vector using ``rng``; evaluation mode
    is deterministic.
    """
    drop_mask = None
    if train and model.head_config.dropout > 0.0:
        if rng is None:
            raise ClassifierError("training-mode forward needs a random generator")
        drop_mask = _dropout_mask(model, rng)
    scores, _ = _forward_example(model, example, drop_mask)
    return scores


def _dropout_mask(model: TaskModel, rng: np.random.Generator) -> np.ndarray:
    p = model.head_config.dropout
    keep = (rng.random(model.input_dim) >= p).astype(np.float64)
    return keep / (1.0 - p)


def predict(model: TaskModel, example: SpanExample) -> str:
    """Highest-scoring class; ties go to the earliest class in task order."""
    scores = forward(model, example)
    return model.classes[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# Loss


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-proportion class weights, normalized to mean 1."""
    counts = np.asarray(list(counts), dtype=np.float64)
    if counts.size == 0:
        raise ClassifierError("no classes to weight")
    if (counts <= 0).any():
        raise ClassifierError(
            "every class needs at least one training example; "
            "a zero-count class makes the task untrainable as configured"
        )
    inverse = counts.sum() / counts
    return inverse / inverse.mean()


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    return shifted - math.log(np.exp(shifted).sum())


def weighted_loss(
    model: TaskModel,
    batch: Sequence[tuple[SpanExample, int]],
    weights: np.ndarray,
) -> float:
    """Class-weighted mean cross-entropy (no dropout); uniform weights give
    exactly the plain mean cross-entropy."""
    if not batch:
        raise ClassifierError("cannot score an empty batch")
    loss_sum = 0.0
    weight_sum = 0.0
    for example, label in batch:
        scores, _ = _forward_example(model, example, None)
        loss_sum += float(weights[label]) * -float(_log_softmax(scores)[label])
        weight_sum += float(weights[label])
    return loss_sum / weight_sum


def _loss_and_grads(
    model: TaskModel,
    batch: Sequence[tuple[SpanExample, int]],
    weights: np.ndarray,
    frozen_encoder: bool,
    drop_rng: np.random.Generator | None,
) -> tuple[float, dict[str, np.ndarray]]:
    params = model.parameters(frozen_encoder)
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    encoder_grads = {
        name.split(".", 1)[1]: arr
        for name, arr in grads.items()
        if name.startswith("encoder.")
    }
    loss_sum = 0.0
    weight_sum = 0.0
    dim = model.encoder.dim
    for example, label in batch:
        drop_mask = (
            _dropout_mask(model, drop_rng)
            if drop_rng is not None and model.head_config.dropout > 0.0
            else None
        )
        scores, detail = _forward_example(model, example, drop_mask)
        log_probs = _log_softmax(scores)
        w = float(weights[label])
        loss_sum += w * -float(log_probs[label])
        weight_sum += w
        d_scores = np.exp(log_probs)
        d_scores[label] -= 1.0
        d_scores *= w
        features = detail["features"]
        if model.head_config.hidden_dim is None:
            grads["head.w"] += np.outer(features, d_scores)
            grads["head.b"] += d_scores
            d_features = model.head["w"] @ d_scores
        else:
            act = detail["act"]
            grads["head.w2"] += np.outer(act, d_scores)
            grads["head.b2"] += d_scores
            d_act = model.head["w2"] @ d_scores
            d_pre = d_act * (detail["pre"] > 0.0)
            grads["head.w1"] += np.outer(features, d_pre)
            grads["head.b1"] += d_pre
            d_features = model.head["w1"] @ d_pre
        if drop_mask is not None:
            d_features = d_features * drop_mask
        if not frozen_encoder:
            d_pooled = d_features[:dim]
            cache = detail["cache"]
            d_hidden = np.zeros_like(cache["hidden"])
            span_len = example.span_hi - example.span_lo + 1
            d_hidden[example.span_lo : example.span_hi + 1] = d_pooled / span_len
            backward_from_hidden(model.encoder, cache, d_hidden, encoder_grads)
    if weight_sum == 0.0:
        raise ClassifierError("cannot score an empty batch")
    for name in grads:
        grads[name] /= weight_sum
    return loss_sum / weight_sum, grads


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so the global norm is at most ``max_norm``.

    Returns the pre-clip global norm; gradients below the cap are untouched.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def task_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then stepped decay.

    ``lr(step) = base * step / warmup`` while ``step < warmup``; afterwards
    ``base * decay_factor ** floor((step - warmup) / decay_every)``.
    """
    if step < 0:
        raise ClassifierError("step must be non-negative")
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    exponent = (step - cfg.warmup_steps) // cfg.decay_every
    return cfg.learning_rate * cfg.decay_factor**exponent


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TaskEval:
    """One dev-set evaluation during task training."""

    step: int
    dev_loss: float
    dev_f1: float


@dataclass(frozen=True)
class TrainResult:
    """Selected snapshot (max dev macro-F1, earliest tie) plus eval history."""

    model: TaskModel
    history: tuple[TaskEval, ...]
    best_step: int


def _class_index(model: TaskModel, gold: str) -> int:
    try:
        return model.classes.index(gold)
    except ValueError:
        raise ClassifierError(
            f"gold class {gold!r} is not a class of task {model.task!r}"
        ) from None


def train_task(
    model: TaskModel,
    train: Sequence[tuple[SpanExample, str]],
    dev: Sequence[tuple[SpanExample, str]],
    cfg: TrainConfig,
) -> TrainResult:
    """Train a task model; the input model is never mutated.

    Every ``eval_every`` steps the dev loss (same class weights as training)
    and dev macro-F1 are recorded.  Training stops early when NEITHER metric
    has improved by ``early_stop_tolerance`` (relative) for
    ``early_stop_patience`` consecutive evaluations, with stagnation counted
    only after ``min_steps``.  The returned model is the snapshot with the
    highest recorded dev macro-F1 (earliest on ties).
    """
    if not train:
        raise ClassifierError("training set is empty")
    if not dev:
        raise ClassifierError("dev set is empty")
    train_pairs = [(ex, _class_index(model, gold)) for ex, gold in train]
    dev_pairs = [(ex, _class_index(model, gold)) for ex, gold in dev]
    dev_golds = [gold for _, gold in dev]
    counts = [0] * model.n_classes
    for _, label in train_pairs:
        counts[label] += 1
    weights = class_weights(counts)

    work = model.copy()
    params = work.parameters(cfg.frozen_encoder)
    optimizer = AdamW(weight_decay=cfg.weight_decay)
    rng_order = random.Random(f"{cfg.seed}:order")
    drop_rng = np.random.default_rng(cfg.seed)

    order = list(range(len(train_pairs)))
    rng_order.shuffle(order)
    cursor = 0

    history: list[TaskEval] = []
    best_f1 = -1.0
    best_state: TaskModel | None = None
    best_step = 0
    track_loss = math.inf
    track_f1 = 0.0
    stagnant = 0

    for step in range(1, cfg.max_steps + 1):
        batch = []
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                rng_order.shuffle(order)
                cursor = 0
            batch.append(train_pairs[order[cursor]])
            cursor += 1
        loss, grads = _loss_and_grads(work, batch, weights, cfg.frozen_encoder, drop_rng)
        if not math.isfinite(loss):
            raise ClassifierError(f"non-finite training loss at step {step}")
        clip_gradients(grads, cfg.grad_clip_max_norm)
        optimizer.apply(params, grads, task_lr(step, cfg))

        if step % cfg.eval_every == 0:
            dev_loss = weighted_loss(work, dev_pairs, weights)
            if not math.isfinite(dev_loss):
                raise ClassifierError(f"non-finite dev loss at step {step}")
            preds = [predict(work, ex) for ex, _ in dev_pairs]
            dev_f1 = macro_f1(dev_golds, preds, work.classes)
            history.append(TaskEval(step=step, dev_loss=dev_loss, dev_f1=dev_f1))
            if dev_f1 > best_f1:
                best_f1 = dev_f1
                best_state = work.copy()
                best_step = step
            loss_improved = dev_loss < track_loss and (
                track_loss - dev_loss
            ) >= cfg.early_stop_tolerance * abs(track_loss)
            f1_improved = dev_f1 > track_f1 and (
                track_f1 == 0.0
                or (dev_f1 - track_f1) >= cfg.early_stop_tolerance * track_f1
            )
            if loss_improved:
                track_loss = dev_loss
            if f1_improved:
                track_f1 = dev_f1
            if loss_improved or f1_improved:
                stagnant = 0
            elif step > cfg.min_steps:
                stagnant += 1
                if stagnant >= cfg.early_stop_patience:
                    break
    if best_state is None:
        best_state = work.copy()
        best_step = cfg.max_steps
    return TrainResult(model=best_state, history=tuple(history), best_step=best_step)


# ---------------------------------------------------------------------------
# Hyperparameter grid


@dataclass(frozen=True)
class GridPoint:
    learning_rate: float
    batch_size: int
    hidden_dim: int | None


def grid_configs(
    n_train: int,
    learning_rates: Sequence[float] = GRID_LEARNING_RATES,
    batch_sizes: Sequence[int] = GRID_BATCH_SIZES,
    hidden_dims: Sequence[int | None] = GRID_HIDDEN_DIMS,
) -> list[GridPoint]:
    """Cartesian grid (learning rate outermost), skipping batches larger than
    the training set."""
    points = []
    for lr in learning_rates:
        for batch in batch_sizes:
            if batch > n_train:
                continue
            for hidden in hidden_dims:
                points.append(GridPoint(lr, batch, hidden))
    return points


@dataclass(frozen=True)
class GridSearchResult:
    point: GridPoint
    result: TrainResult
    evaluated: tuple[tuple[GridPoint, float], ...]


def _result_dev_f1(result: TrainResult) -> float:
    return max((point.dev_f1 for point in result.history), default=0.0)


def grid_search(
    encoder: EncoderState,
    task: str,
    classes: Sequence[str],
    concepts: Sequence[str],
    train: Sequence[tuple[SpanExample, str]],
    dev: Sequence[tuple[SpanExample, str]],
    base_cfg: TrainConfig = TrainConfig(),
    dropout: float = 0.1,
    seed: int = 0,
    points: Sequence[GridPoint] | None = None,
) -> GridSearchResult:
    """Train one model per grid point and keep the best dev macro-F1.

    Ties break toward the earlier grid point.  Raises when the training set
    supports no configuration at all.
    """
    if points is None:
        points = grid_configs(len(train))
    if not points:
        raise ClassifierError(
            "no supported configurations: every batch size exceeds the training set"
        )
    best: tuple[GridPoint, TrainResult] | None = None
    best_f1 = -1.0
    evaluated: list[tuple[GridPoint, float]] = []
    for point in points:
        cfg = replace(
            base_cfg,
            learning_rate=point.learning_rate,
            batch_size=point.batch_size,
        )
        model = init_task_model(
            encoder,
            task,
            classes,
            concepts,
            HeadConfig(hidden_dim=point.hidden_dim, dropout=dropout),
            seed=seed,
        )
        result = train_task(model, train, dev, cfg)
        dev_f1 = _result_dev_f1(result)
        evaluated.append((point, dev_f1))
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best = (point, result)
    assert best is not None
    return GridSearchResult(point=best[0], result=best[1], evaluated=tuple(evaluated))


# ---------------------------------------------------------------------------
# Cross-validated experiment


@dataclass(frozen=True)
class TaskInstance:
    """A labeled span example tied to a patient and a task."""

    patient_id: str
    task: str
    gold_class: str
    span_text: str
    example: SpanExample


@dataclass(frozen=True)
class ModeSpec:
    """One experimental arm: an encoder initialization and a freeze flag."""

    name: str
    encoder: EncoderState
    frozen: bool


def derive_seed(base: int, *parts: str) -> int:
    """Stable per-(task, fold, mode) seed from one global seed."""
    digest = hashlib.sha256(":".join([str(base), *parts]).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def run_experiment(
    instances: Sequence[TaskInstance],
    modes: Sequence[ModeSpec],
    task_classes: Mapping[str, Sequence[str]],
    concepts: Sequence[str],
    k: int = 5,
    seed: int = 0,
    train_cfg: TrainConfig = TrainConfig(),
    head: HeadConfig = HeadConfig(),
    include_majority: bool = True,
    skip_unsupported: bool = False,
) -> dict[str, dict[str, list[float]]]:
    """Patient-grouped k-fold evaluation of every mode (plus the majority
    baseline) on every task.

    Folds are stratified over patients by their (task, class) label sets and
    rotate as train/dev/test.  Result: task id -> mode name -> per-fold test
    macro-F1, with tasks in ``task_classes`` order.

    With ``skip_unsupported`` a task the data cannot support at this fold
    count (an empty train/dev/test subset, or a class absent from some
    training fold) is dropped from the results instead of failing the run.
    """
    if not instances:
        raise ClassifierError("no instances to evaluate")
    names = [mode.name for mode in modes]
    if len(set(names)) != len(names):
        raise ClassifierError("mode names must be unique")
    if MAJORITY_MODE_NAME in names:
        raise ClassifierError(f"mode name {MAJORITY_MODE_NAME!r} is reserved")
    for instance in instances:
        if instance.task not in task_classes:
            raise ClassifierError(f"instance task {instance.task!r} has no class list")
        if instance.gold_class not in task_classes[instance.task]:
            raise ClassifierError(
                f"gold class {instance.gold_class!r} is not valid for task "
                f"{instance.task!r}"
            )
    matrix = build_group_labels(
        [(i.patient_id, i.task, i.gold_class) for i in instances]
    )
    plan = stratify(matrix, k, seed=seed)
    splits = make_splits(plan)
    fold_of = plan.assignment

    results: dict[str, dict[str, list[float]]] = {}
    present_tasks = [t for t in task_classes if any(i.task == t for i in instances)]
    for task in present_tasks:
        try:
            results[task] = _evaluate_task(
                task,
                tuple(task_classes[task]),
                [i for i in instances if i.task == task],
                modes,
                concepts,
                splits,
                fold_of,
                k,
                seed,
                train_cfg,
                head,
                include_majority,
            )
        except ClassifierError:
            if not skip_unsupported:
                raise
    return results


def _evaluate_task(
    task: str,
    classes: tuple[str, ...],
    task_instances: Sequence[TaskInstance],
    modes: Sequence[ModeSpec],
    concepts: Sequence[str],
    splits: Sequence,
    fold_of: Mapping[str, int],
    k: int,
    seed: int,
    train_cfg: TrainConfig,
    head: HeadConfig,
    include_majority: bool,
) -> dict[str, list[float]]:
    names = [mode.name for mode in modes]
    mode_scores: dict[str, list[float]] = {
        name: []
        for name in ([MAJORITY_MODE_NAME] if include_majority else []) + names
    }
    for fold_index, split in enumerate(splits):
        train_set = [
            i for i in task_instances if fold_of[i.patient_id] in split.train_folds
        ]
        dev_set = [
            i for i in task_instances if fold_of[i.patient_id] == split.dev_fold
        ]
        test_set = [
            i for i in task_instances if fold_of[i.patient_id] == split.test_fold
        ]
        if not train_set or not dev_set or not test_set:
            raise ClassifierError(
                f"task {task!r} has an empty train/dev/test subset in fold "
                f"{fold_index}; not enough data for {k}-fold evaluation"
            )
        golds = [i.gold_class for i in test_set]
        if include_majority:
            majority = fit_majority(
                [
                    (i.example.concept, i.span_text, i.task, i.gold_class)
                    for i in train_set
                ],
                task_classes={task: classes},
            )
            preds = [
                majority.predict(i.example.concept, i.span_text, task)
                for i in test_set
            ]
            mode_scores[MAJORITY_MODE_NAME].append(macro_f1(golds, preds, classes))
        for mode in modes:
            cfg = replace(
                train_cfg,
                frozen_encoder=mode.frozen,
                seed=derive_seed(seed, task, str(fold_index), mode.name),
            )
            model = init_task_model(
                mode.encoder,
                task,
                classes,
                concepts,
                head,
                seed=derive_seed(seed, task, str(fold_index), mode.name, "init"),
            )
            outcome = train_task(
                model,
                [(i.example, i.gold_class) for i in train_set],
                [(i.example, i.gold_class) for i in dev_set],
                cfg,
            )
            preds = [predict(outcome.model, i.example) for i in test_set]
            mode_scores[mode.name].append(macro_f1(golds, preds, classes))
    return mode_scores
