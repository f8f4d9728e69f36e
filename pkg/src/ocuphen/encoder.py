"""Token vocabulary, a compact self-attention encoder, and masked-language-model pretraining.

The encoder is a single scaled dot-product self-attention layer with a
residual connection over learned token embeddings plus a fixed sinusoidal
position table: the smallest contextual mixer whose unfrozen fine-tuning can
beat a frozen run on context-dependent tasks, while staying small enough for
exhaustive finite-difference gradient checks.  Pretraining optimizes masked
token recovery with AdamW (decoupled weight decay), a linear warmup/decay
learning-rate schedule, gradient accumulation up to a large effective batch,
and early stopping on a held-out evaluation loss.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MASK_TOKEN = "<mask>"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN)
PAD_ID = 0
UNK_ID = 1
MASK_ID = 2

CHECKPOINT_MAGIC = "encoder-checkpoint-v1"

#: Trainable parameter blocks, in the canonical order used by the optimizer
#: and the checkpoint format.
PARAM_NAMES = (
    "embeddings",
    "attn_query",
    "attn_key",
    "attn_value",
    "attn_output",
    "out_proj",
    "out_bias",
)
_TENSOR_NAMES = PARAM_NAMES + ("positions",)


class EncoderError(ValueError):
    """Invalid vocabulary/encoder input, bad config, or non-finite loss."""


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass(frozen=True)
class Vocabulary:
    """Dense token -> id map with reserved padding, unknown, and mask ids."""

    token_to_id: Mapping[str, int]

    def __post_init__(self) -> None:
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise EncoderError("vocabulary ids must be dense and unique from 0")
        for token, want in zip(SPECIAL_TOKENS, (PAD_ID, UNK_ID, MASK_ID)):
            if self.token_to_id.get(token) != want:
                raise EncoderError(f"vocabulary must map {token!r} to id {want}")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def tokens(self) -> tuple[str, ...]:
        """All tokens ordered by id."""
        by_id = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        return tuple(token for token, _ in by_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(token) for token in tokens)


def build_vocab(
    corpus: Iterable[Sequence[str]],
    min_count: int = 1,
    max_size: int | None = None,
) -> Vocabulary:
    """Frequency-ranked vocabulary over tokenized documents, plus specials.

    Tokens are ranked by descending count, ties broken alphabetically, so the
    result is deterministic for a given corpus.  ``max_size`` caps the total
    vocabulary size including the three special tokens.
    """
    if min_count < 1:
        raise EncoderError("min_count must be at least 1")
    if max_size is not None and max_size < len(SPECIAL_TOKENS):
        raise EncoderError("max_size must leave room for the special tokens")
    counts: dict[str, int] = {}
    for document in corpus:
        for token in document:
            if token in SPECIAL_TOKENS:
                continue
            counts[token] = counts.get(token, 0) + 1
    if not counts:
        raise EncoderError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [token for token, count in ranked if count >= min_count]
    if max_size is not None:
        kept = kept[: max_size - len(SPECIAL_TOKENS)]
    mapping = {token: i for i, token in enumerate(SPECIAL_TOKENS + tuple(kept))}
    return Vocabulary(mapping)


def corpus_sequences(
    texts: Iterable[str],
    vocab: Vocabulary,
    max_len: int = 128,
) -> list[tuple[int, ...]]:
    """Tokenize texts and chunk them into id sequences of at most ``max_len``."""
    from .windowing import tokenize

    if max_len < 1:
        raise EncoderError("max_len must be at least 1")
    sequences: list[tuple[int, ...]] = []
    for text in texts:
        ids = vocab.encode(token.surface for token in tokenize(text))
        for lo in range(0, len(ids), max_len):
            chunk = ids[lo : lo + max_len]
            if chunk:
                sequences.append(chunk)
    return sequences


# ---------------------------------------------------------------------------
# Encoder state and forward pass


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table of shape [max_len, dim]."""
    if max_len < 1 or dim < 1:
        raise EncoderError("position table needs max_len >= 1 and dim >= 1")
    table = np.zeros((max_len, dim), dtype=np.float64)
    position = np.arange(max_len, dtype=np.float64)[:, None]
    index = np.arange(dim, dtype=np.float64)[None, :]
    angle = position / np.power(10_000.0, 2.0 * np.floor(index / 2.0) / dim)
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


@dataclass
class EncoderState:
    """All encoder tables: trainable parameters plus the fixed position table."""

    vocab: Vocabulary
    embeddings: np.ndarray
    attn_query: np.ndarray
    attn_key: np.ndarray
    attn_value: np.ndarray
    attn_output: np.ndarray
    out_proj: np.ndarray
    out_bias: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        v, d = self.embeddings.shape
        if v != self.vocab.size:
            raise EncoderError("embedding rows must match vocabulary size")
        if d < 1:
            raise EncoderError("embedding dimension must be positive")
        for name in ("attn_query", "attn_key", "attn_value", "attn_output"):
            if getattr(self, name).shape != (d, d):
                raise EncoderError(f"{name} must have shape [{d}, {d}]")
        if self.out_proj.shape != (d, v):
            raise EncoderError(f"out_proj must have shape [{d}, {v}]")
        if self.out_bias.shape != (v,):
            raise EncoderError(f"out_bias must have shape [{v}]")
        if self.positions.ndim != 2 or self.positions.shape[1] != d:
            raise EncoderError("positions must have shape [max_len, dim]")
        for name in _TENSOR_NAMES:
            if not np.isfinite(getattr(self, name)).all():
                raise EncoderError(f"{name} contains non-finite values")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def max_len(self) -> int:
        return self.positions.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable blocks keyed by name, in canonical order."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderState":
        arrays = {name: getattr(self, name).copy() for name in _TENSOR_NAMES}
        return EncoderState(vocab=self.vocab, **arrays)


def init_encoder(
    vocab: Vocabulary,
    dim: int = 64,
    max_len: int = 128,
    seed: int = 0,
    scale: float = 0.02,
) -> EncoderState:
    """Randomly initialized encoder with a sinusoidal position table."""
    if dim < 1:
        raise EncoderError("dim must be positive")
    rng = np.random.default_rng(seed)
    v = vocab.size

    def normal(*shape: int) -> np.ndarray:
        return rng.normal(0.0, scale, size=shape)

    return EncoderState(
        vocab=vocab,
        embeddings=normal(v, dim),
        attn_query=normal(dim, dim),
        attn_key=normal(dim, dim),
        attn_value=normal(dim, dim),
        attn_output=normal(dim, dim),
        out_proj=normal(dim, v),
        out_bias=np.zeros(v, dtype=np.float64),
        positions=sinusoidal_positions(max_len, dim),
    )


def zero_encoder(vocab: Vocabulary, dim: int, max_len: int = 128) -> EncoderState:
    """Encoder whose every table (position table included) is zero.

    With all tables zero the attention weights are uniform but attend over
    zero values, so the contextual output and the recovery logits are exactly
    zero everywhere.
    """
    v = vocab.size
    return EncoderState(
        vocab=vocab,
        embeddings=np.zeros((v, dim)),
        attn_query=np.zeros((dim, dim)),
        attn_key=np.zeros((dim, dim)),
        attn_value=np.zeros((dim, dim)),
        attn_output=np.zeros((dim, dim)),
        out_proj=np.zeros((dim, v)),
        out_bias=np.zeros(v),
        positions=np.zeros((max_len, dim)),
    )


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _log_softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_ids(state: EncoderState, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise EncoderError("token ids must be a non-empty flat sequence")
    if ids.size > state.max_len:
        raise EncoderError(
            f"sequence of {ids.size} tokens exceeds the maximum length {state.max_len}"
        )
    if ids.min() < 0 or ids.max() >= state.vocab.size:
        raise EncoderError("token id out of vocabulary range")
    return ids


def _forward(
    state: EncoderState,
    token_ids: Sequence[int],
    positions: Sequence[int] | None = None,
) -> dict[str, np.ndarray]:
    ids = _check_ids(state, token_ids)
    n = ids.size
    if positions is None:
        pos_idx = np.arange(n)
    else:
        pos_idx = np.asarray(positions, dtype=np.int64)
        if pos_idx.shape != (n,):
            raise EncoderError("positions must align one-to-one with token ids")
        if pos_idx.min() < 0 or pos_idx.max() >= state.max_len:
            raise EncoderError("position index out of range")
    x = state.embeddings[ids] + state.positions[pos_idx]
    q = x @ state.attn_query
    k = x @ state.attn_key
    v = x @ state.attn_value
    scores = (q @ k.T) / math.sqrt(state.dim)
    attn = _softmax_rows(scores)
    mixed = attn @ v
    hidden = x + mixed @ state.attn_output
    return {"ids": ids, "x": x, "q": q, "k": k, "v": v, "attn": attn, "mixed": mixed, "hidden": hidden}


def encode(
    state: EncoderState,
    token_ids: Sequence[int],
    positions: Sequence[int] | None = None,
) -> np.ndarray:
    """Contextual embeddings, one row per token: [n_tokens, dim]."""
    return _forward(state, token_ids, positions)["hidden"].copy()


def encode_with_cache(
    state: EncoderState,
    token_ids: Sequence[int],
) -> dict[str, np.ndarray]:
    """Forward pass keeping the intermediates needed for a backward pass."""
    return _forward(state, token_ids)


def backward_from_hidden(
    state: EncoderState,
    cache: dict[str, np.ndarray],
    d_hidden: np.ndarray,
    grads: Mapping[str, np.ndarray],
) -> None:
    """Accumulate d(loss)/d(block) into ``grads`` given d(loss)/d(hidden).

    ``cache`` must come from :func:`encode_with_cache` on the same state.
    Touches exactly the blocks named in ``ENCODER_BLOCK_NAMES``.
    """
    scale = 1.0 / math.sqrt(state.dim)
    d_x = d_hidden.copy()
    grads["attn_output"] += cache["mixed"].T @ d_hidden
    d_mixed = d_hidden @ state.attn_output.T
    d_attn = d_mixed @ cache["v"].T
    d_v = cache["attn"].T @ d_mixed
    attn = cache["attn"]
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    d_q = d_scores @ cache["k"] * scale
    d_k = d_scores.T @ cache["q"] * scale
    x = cache["x"]
    grads["attn_query"] += x.T @ d_q
    d_x += d_q @ state.attn_query.T
    grads["attn_key"] += x.T @ d_k
    d_x += d_k @ state.attn_key.T
    grads["attn_value"] += x.T @ d_v
    d_x += d_v @ state.attn_value.T
    np.add.at(grads["embeddings"], cache["ids"], d_x)


#: The blocks reached by :func:`backward_from_hidden` (everything upstream of
#: the token-recovery head).
ENCODER_BLOCK_NAMES = (
    "embeddings",
    "attn_query",
    "attn_key",
    "attn_value",
    "attn_output",
)


def mlm_logits(state: EncoderState, token_ids: Sequence[int]) -> np.ndarray:
    """Per-position vocabulary logits for masked-token recovery: [n, vocab]."""
    hidden = _forward(state, token_ids)["hidden"]
    return hidden @ state.out_proj + state.out_bias


# ---------------------------------------------------------------------------
# Masked-language-model objective


@dataclass(frozen=True)
class MlmConfig:
    """Masking and pretraining schedule settings."""

    mask_prob: float = 0.15
    max_masks_per_seq: int = 20
    max_steps: int = 16_500
    warmup_steps: int = 5_000
    initial_lr: float = 5e-5
    weight_decay: float = 0.01
    effective_batch: int = 1_024
    micro_batch: int = 32
    eval_every: int = 100
    early_stop_tolerance: float = 0.01
    early_stop_patience: int = 3
    max_seq_len: int = 128
    eval_fraction: float = 0.05
    subset_size: int | None = None


def validate_mlm_config(cfg: MlmConfig) -> None:
    if not 0.0 < cfg.mask_prob < 1.0:
        raise EncoderError("mask_prob must lie strictly between 0 and 1")
    if cfg.max_masks_per_seq < 1:
        raise EncoderError("max_masks_per_seq must be at least 1")
    if cfg.max_steps < 0:
        raise EncoderError("max_steps must be non-negative")
    if not 0 <= cfg.warmup_steps <= max(cfg.max_steps, 0):
        raise EncoderError("warmup_steps must lie between 0 and max_steps")
    if cfg.initial_lr <= 0:
        raise EncoderError("initial_lr must be positive")
    if cfg.weight_decay < 0:
        raise EncoderError("weight_decay must be non-negative")
    if cfg.effective_batch < 1 or cfg.micro_batch < 1:
        raise EncoderError("batch sizes must be at least 1")
    if cfg.eval_every < 1:
        raise EncoderError("eval_every must be at least 1")
    if cfg.early_stop_tolerance < 0:
        raise EncoderError("early_stop_tolerance must be non-negative")
    if cfg.early_stop_patience < 1:
        raise EncoderError("early_stop_patience must be at least 1")
    if cfg.max_seq_len < 1:
        raise EncoderError("max_seq_len must be at least 1")
    if not 0.0 <= cfg.eval_fraction < 1.0:
        raise EncoderError("eval_fraction must lie in [0, 1)")
    if cfg.subset_size is not None and cfg.subset_size < 1:
        raise EncoderError("subset_size must be at least 1 when given")


def _mask_with_rng(
    token_ids: Sequence[int],
    cfg: MlmConfig,
    rng: random.Random,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    chosen = [
        i
        for i, token_id in enumerate(token_ids)
        if token_id != PAD_ID and rng.random() < cfg.mask_prob
    ]
    if len(chosen) > cfg.max_masks_per_seq:
        chosen = sorted(rng.sample(chosen, cfg.max_masks_per_seq))
    masked = list(token_ids)
    for i in chosen:
        masked[i] = MASK_ID
    return tuple(masked), tuple(chosen)


def mask_sequence(
    token_ids: Sequence[int],
    cfg: MlmConfig,
    seed: int,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Independently mask non-padding positions, capped per sequence.

    Each non-padding position is selected with probability ``mask_prob``;
    when more than ``max_masks_per_seq`` are selected, a random subset of
    exactly the cap survives.  Returns the masked ids and the (sorted)
    selected positions.
    """
    validate_mlm_config(cfg)
    return _mask_with_rng(token_ids, cfg, random.Random(f"{seed}:mask"))


def _loss_grads_unnormalized(
    state: EncoderState,
    items: Sequence[tuple[Sequence[int], Sequence[int]]],
    want_grads: bool,
) -> tuple[float, dict[str, np.ndarray] | None, int]:
    """Sum of masked-position cross-entropies, raw gradient sums, and count.

    ``items`` pairs original token ids with the positions to mask; targets are
    the original ids at those positions.
    """
    grads = (
        {name: np.zeros_like(p) for name, p in state.parameters().items()}
        if want_grads
        else None
    )
    loss_sum = 0.0
    n_positions = 0
    for original_ids, mask_positions in items:
        if not mask_positions:
            continue
        targets = np.asarray([original_ids[i] for i in mask_positions], dtype=np.int64)
        masked = list(original_ids)
        for i in mask_positions:
            masked[i] = MASK_ID
        cache = _forward(state, masked)
        hidden = cache["hidden"]
        logits = hidden @ state.out_proj + state.out_bias
        log_probs = _log_softmax_rows(logits)
        rows = np.asarray(mask_positions, dtype=np.int64)
        loss_sum += float(-log_probs[rows, targets].sum())
        n_positions += len(mask_positions)
        if grads is None:
            continue
        d_logits = np.zeros_like(logits)
        d_logits[rows] = np.exp(log_probs[rows])
        d_logits[rows, targets] -= 1.0
        grads["out_proj"] += hidden.T @ d_logits
        grads["out_bias"] += d_logits.sum(axis=0)
        backward_from_hidden(state, cache, d_logits @ state.out_proj.T, grads)
    return loss_sum, grads, n_positions


def mlm_loss(
    state: EncoderState,
    batch: Sequence[tuple[Sequence[int], Sequence[int]]],
) -> float:
    """Mean cross-entropy over every masked position in the batch."""
    loss_sum, _, n_positions = _loss_grads_unnormalized(state, batch, want_grads=False)
    return loss_sum / n_positions if n_positions else 0.0


def mlm_loss_and_grads(
    state: EncoderState,
    batch: Sequence[tuple[Sequence[int], Sequence[int]]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Masked-recovery loss and its gradient for every trainable block."""
    loss_sum, grads, n_positions = _loss_grads_unnormalized(state, batch, want_grads=True)
    assert grads is not None
    if n_positions:
        for name in grads:
            grads[name] /= n_positions
        return loss_sum / n_positions, grads
    return 0.0, grads


def evaluate_mlm_loss(
    state: EncoderState,
    items: Sequence[tuple[Sequence[int], Sequence[int]]],
) -> float:
    """Held-out masked-recovery loss on fixed (sequence, positions) pairs."""
    return mlm_loss(state, items)


# ---------------------------------------------------------------------------
# Optimizer and schedule


@dataclass
class AdamW:
    """Adam with decoupled weight decay applied directly to the parameters.

    The decay term is not folded into the gradient: a zero-gradient step
    still shrinks a parameter by exactly ``lr * weight_decay * p``.
    """

    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _step: int = field(default=0, init=False)
    _moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, init=False
    )

    def apply(
        self,
        params: Mapping[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        lr: float,
    ) -> None:
        self._step += 1
        t = self._step
        for name, param in params.items():
            grad = grads[name]
            m_prev, v_prev = self._moments.get(
                name, (np.zeros_like(param), np.zeros_like(param))
            )
            m = self.beta1 * m_prev + (1.0 - self.beta1) * grad
            v = self.beta2 * v_prev + (1.0 - self.beta2) * grad * grad
            self._moments[name] = (m, v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            param -= lr * self.weight_decay * param


def mlm_lr(step: int, cfg: MlmConfig) -> float:
    """Piecewise-linear rate: ramp to ``initial_lr`` at warmup, then to 0.

    ``lr(t) = initial * t / warmup`` for ``t <= warmup`` and
    ``initial * (max - t) / (max - warmup)`` after, reaching 0 at ``max``.
    """
    validate_mlm_config(cfg)
    if step < 0:
        raise EncoderError("step must be non-negative")
    if cfg.max_steps == 0:
        return 0.0
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.initial_lr * step / cfg.warmup_steps
    if step >= cfg.max_steps:
        return 0.0
    return cfg.initial_lr * (cfg.max_steps - step) / (cfg.max_steps - cfg.warmup_steps)


# ---------------------------------------------------------------------------
# Pretraining loop


@dataclass(frozen=True)
class EvalPoint:
    """One held-out evaluation during pretraining."""

    step: int
    loss: float


def subset_corpus(
    corpus: Sequence[tuple[int, ...]],
    n: int,
    seed: int,
) -> list[tuple[int, ...]]:
    """Uniform seeded sample of ``n`` sequences, original order preserved."""
    if n > len(corpus):
        raise EncoderError(f"cannot sample {n} sequences from {len(corpus)}")
    if n < 0:
        raise EncoderError("subset size must be non-negative")
    indices = sorted(random.Random(f"{seed}:subset").sample(range(len(corpus)), n))
    return [tuple(corpus[i]) for i in indices]


def _split_eval(
    corpus: Sequence[tuple[int, ...]],
    cfg: MlmConfig,
    seed: int,
) -> tuple[list[int], list[int]]:
    """Seeded train/eval index split; eval empty when the fraction rounds to 0."""
    n = len(corpus)
    if cfg.eval_fraction == 0.0 or n < 2:
        return list(range(n)), []
    n_eval = min(max(1, int(round(n * cfg.eval_fraction))), n - 1)
    eval_idx = sorted(random.Random(f"{seed}:split").sample(range(n), n_eval))
    chosen = set(eval_idx)
    train_idx = [i for i in range(n) if i not in chosen]
    return train_idx, eval_idx


def mlm_pretrain(
    state: EncoderState,
    corpus: Sequence[Sequence[int]],
    cfg: MlmConfig,
    seed: int = 0,
) -> tuple[EncoderState, tuple[EvalPoint, ...]]:
    """Train masked-token recovery; returns the trained copy and eval history.

    The input state is never mutated.  Each optimizer step accumulates
    gradients over ``effective_batch`` sequences in ``micro_batch`` chunks
    (chunking never changes the result beyond float-summation order).  Every
    ``eval_every`` steps the held-out loss is recorded; training stops early
    once it has failed to improve by ``early_stop_tolerance`` for
    ``early_stop_patience`` consecutive evaluations, or at ``max_steps``.
    """
    validate_mlm_config(cfg)
    sequences = [tuple(int(t) for t in seq) for seq in corpus]
    if not sequences:
        raise EncoderError("pretraining corpus is empty")
    for seq in sequences:
        if not seq:
            raise EncoderError("pretraining corpus contains an empty sequence")
        if len(seq) > cfg.max_seq_len:
            raise EncoderError(
                f"sequence of {len(seq)} tokens exceeds max_seq_len {cfg.max_seq_len}"
            )
        if min(seq) < 0 or max(seq) >= state.vocab.size:
            raise EncoderError("token id out of vocabulary range")
    if cfg.subset_size is not None:
        sequences = subset_corpus(sequences, cfg.subset_size, seed)

    result = state.copy()
    if cfg.max_steps == 0:
        return result, ()

    train_idx, eval_idx = _split_eval(sequences, cfg, seed)
    eval_items: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    for j, i in enumerate(eval_idx):
        rng_eval = random.Random(f"{seed}:evalmask:{j}")
        _, positions = _mask_with_rng(sequences[i], cfg, rng_eval)
        if positions:
            eval_items.append((sequences[i], positions))

    rng_order = random.Random(f"{seed}:order")
    rng_mask = random.Random(f"{seed}:trainmask")
    order = list(train_idx)
    rng_order.shuffle(order)
    cursor = 0

    params = result.parameters()
    optimizer = AdamW(weight_decay=cfg.weight_decay)
    history: list[EvalPoint] = []
    best = math.inf
    stagnant = 0

    for step in range(1, cfg.max_steps + 1):
        remaining = cfg.effective_batch
        loss_sum = 0.0
        n_positions = 0
        grads = {name: np.zeros_like(p) for name, p in params.items()}
        while remaining > 0:
            take = min(cfg.micro_batch, remaining)
            micro: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
            for _ in range(take):
                if cursor == len(order):
                    rng_order.shuffle(order)
                    cursor = 0
                sequence = sequences[order[cursor]]
                cursor += 1
                _, positions = _mask_with_rng(sequence, cfg, rng_mask)
                micro.append((sequence, positions))
            part_loss, part_grads, part_n = _loss_grads_unnormalized(
                result, micro, want_grads=True
            )
            assert part_grads is not None
            loss_sum += part_loss
            n_positions += part_n
            for name in grads:
                grads[name] += part_grads[name]
            remaining -= take
        if n_positions:
            train_loss = loss_sum / n_positions
            for name in grads:
                grads[name] /= n_positions
        else:
            train_loss = 0.0
        if not math.isfinite(train_loss):
            raise EncoderError(f"non-finite training loss at step {step}")
        optimizer.apply(params, grads, mlm_lr(step, cfg))

        if eval_items and step % cfg.eval_every == 0:
            eval_loss = evaluate_mlm_loss(result, eval_items)
            if not math.isfinite(eval_loss):
                raise EncoderError(f"non-finite evaluation loss at step {step}")
            history.append(EvalPoint(step=step, loss=eval_loss))
            if best - eval_loss >= cfg.early_stop_tolerance:
                best = eval_loss
                stagnant = 0
            else:
                stagnant += 1
                if stagnant >= cfg.early_stop_patience:
                    break
    return result, tuple(history)


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_bytes(state: EncoderState) -> bytes:
    """Serialized state: one JSON header line, then raw little-endian floats."""
    header = {
        "magic": CHECKPOINT_MAGIC,
        "dim": state.dim,
        "max_len": state.max_len,
        "tokens": list(state.vocab.tokens[len(SPECIAL_TOKENS) :]),
        "tensors": [
            [name, list(getattr(state, name).shape)] for name in _TENSOR_NAMES
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(getattr(state, name), dtype="<f8").tobytes()
        for name in _TENSOR_NAMES
    )
    return head + b"\n" + body


def save_checkpoint(state: EncoderState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path: str | Path) -> EncoderState:
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise EncoderError("checkpoint has no header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EncoderError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise EncoderError("not an encoder checkpoint")
    tokens = header.get("tokens")
    tensors = header.get("tensors")
    if not isinstance(tokens, list) or not isinstance(tensors, list):
        raise EncoderError("checkpoint header is missing tokens or tensor shapes")
    if [name for name, _ in tensors] != list(_TENSOR_NAMES):
        raise EncoderError("checkpoint tensor list does not match the expected layout")
    mapping = {
        token: i for i, token in enumerate(SPECIAL_TOKENS + tuple(tokens))
    }
    vocab = Vocabulary(mapping)
    arrays: dict[str, np.ndarray] = {}
    offset = newline + 1
    for name, shape in tensors:
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise EncoderError("checkpoint truncated")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise EncoderError("checkpoint has trailing bytes")
    return EncoderState(vocab=vocab, **arrays)
