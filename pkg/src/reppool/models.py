"""Pooled encoder-decoder models and the synthetic selection task.

An encoder stack interleaves blockwise attention layers with score-and-pool
stages following a per-layer length schedule; the decoder cross-attends to the
k surviving rows only. A single pooling stage at the end of the encoder gives
the single-bottleneck flavor; a decreasing schedule pools gradually. Training
is plain teacher-forced cross-entropy: gradients reach the scorer through the
pooling weights in the same backward pass as everything else.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .attention import (
    MASK_NEG,
    AttentionConfig,
    causal_mask,
    decoder_layer,
    encoder_layer,
    init_decoder_layer,
    init_encoder_layer,
    sinusoidal_positions,
)
from .autodiff import (
    AdamState,
    Array,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    concat_cols,
    concat_rows,
    constant,
    gather_rows,
    matmul,
    mul,
    scale,
    slice_rows,
    softmax_xent,
    transpose,
)
from .scorers import ScorerSpec, WINDOW_KINDS, compute_scores, init_scorer_params
from .topk import PAD_SCORE_OFFSET, PoolConfig, successive_halving_topk

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
FIRST_CONTENT_ID = 3

CHECKPOINT_MAGIC = b"PLTP1"


@lru_cache(maxsize=16)
def _positions(n: int, d: int) -> Array:
    out = sinusoidal_positions(n, d)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PoolSchedule:
    """Encoder output length after each layer; non-increasing, ratios powers of 2."""

    lengths: tuple[int, ...]

    def __post_init__(self):
        if not self.lengths:
            raise ValueError("schedule must name at least one layer")
        for cur, nxt in zip(self.lengths, self.lengths[1:]):
            if nxt > cur:
                raise ValueError(f"schedule must be non-increasing, got {self.lengths}")
            if nxt < cur and (cur % nxt or (cur // nxt) & (cur // nxt - 1)):
                raise ValueError(f"reduction {cur}->{nxt} is not a power-of-two ratio")

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def bottleneck(self) -> int:
        return self.lengths[-1]


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int
    decoder_layers: int
    attention: AttentionConfig
    schedule: PoolSchedule
    scorer: ScorerSpec
    vocab_size: int
    max_target_len: int
    max_input_len: int
    pool_tau: float = 1.0
    pool_sort: bool = True
    pool_restore_order: bool = True

    def __post_init__(self):
        if len(self.schedule) != self.encoder_layers:
            raise ValueError(
                f"schedule has {len(self.schedule)} entries for {self.encoder_layers} layers"
            )
        if self.schedule.lengths[0] > self.max_input_len:
            raise ValueError("schedule cannot grow beyond the input length")
        if self.vocab_size <= FIRST_CONTENT_ID:
            raise ValueError("vocabulary must hold pad/bos/eos plus content tokens")


@dataclass
class ScoreTrace:
    """Scores seen by one pooling stage, with the surviving rows' origins."""

    layer: int
    length: int
    scores: Array | None
    provenance: Array | None
    pair_evals: int


@dataclass
class EncodeResult:
    memory: Tensor
    lengths: list[int]
    traces: list[ScoreTrace]


def _config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "encoder_layers": cfg.encoder_layers,
        "decoder_layers": cfg.decoder_layers,
        "attention": {
            "model_dim": cfg.attention.model_dim,
            "head_count": cfg.attention.head_count,
            "ffn_dim": cfg.attention.ffn_dim,
            "block_size": cfg.attention.block_size,
            "dropout_rate": cfg.attention.dropout_rate,
        },
        "schedule": list(cfg.schedule.lengths),
        "scorer": {
            "kind": cfg.scorer.kind,
            "coordinate": cfg.scorer.coordinate,
            "target_k": cfg.scorer.target_k,
            "hidden_width": cfg.scorer.hidden_width,
            "window": cfg.scorer.window,
            "stride": cfg.scorer.stride,
            "seed": cfg.scorer.seed,
        },
        "vocab_size": cfg.vocab_size,
        "max_target_len": cfg.max_target_len,
        "max_input_len": cfg.max_input_len,
        "pool_tau": cfg.pool_tau,
        "pool_sort": cfg.pool_sort,
        "pool_restore_order": cfg.pool_restore_order,
    }


def _config_from_dict(data: dict) -> ModelConfig:
    return ModelConfig(
        encoder_layers=data["encoder_layers"],
        decoder_layers=data["decoder_layers"],
        attention=AttentionConfig(**data["attention"]),
        schedule=PoolSchedule(tuple(data["schedule"])),
        scorer=ScorerSpec(**data["scorer"]),
        vocab_size=data["vocab_size"],
        max_target_len=data["max_target_len"],
        max_input_len=data["max_input_len"],
        pool_tau=data["pool_tau"],
        pool_sort=data["pool_sort"],
        pool_restore_order=data["pool_restore_order"],
    )


class PooledEncoderDecoder:
    """Encoder-decoder with trainable representation pooling.

    The embedding is shared between the input and the output head and defaults
    to N(0, 1/sqrt(d)) entries; pass emb_init_scale=0 for an exactly-uniform
    untrained head (zero rows stall training: the layer-norm gradient spike at
    zero variance poisons Adam's second moments). Other weights are
    Glorot-initialized from the construction seed.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, emb_init_scale: float | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.attention.model_dim
        if emb_init_scale is None:
            emb_init_scale = d**-0.5
        params: dict[str, Array] = {}
        params["embedding"] = emb_init_scale * rng.standard_normal((cfg.vocab_size, d))
        for i in range(cfg.encoder_layers):
            for name, value in init_encoder_layer(rng, cfg.attention).items():
                params[f"enc{i}.{name}"] = value
        for name, value in init_scorer_params(cfg.scorer, d, rng).items():
            params[f"scorer.{name}"] = value
        for i in range(cfg.decoder_layers):
            for name, value in init_decoder_layer(rng, cfg.attention).items():
                params[f"dec{i}.{name}"] = value
        self.params = params
        self.param_order = list(params)

    # -- parameter plumbing ------------------------------------------------

    def tracked_params(self, tape: Tape) -> dict[str, Tensor]:
        return tape.watch_all(self.params)

    def _materialize(self, p: Mapping[str, Tensor] | None) -> Mapping[str, Tensor]:
        if p is not None:
            return p
        return {name: constant(value) for name, value in self.params.items()}

    @staticmethod
    def _layer_view(p: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
        plen = len(prefix)
        return {name[plen:]: t for name, t in p.items() if name.startswith(prefix)}

    # -- encoder -----------------------------------------------------------

    def encode(self, tokens: Sequence[int], p: Mapping[str, Tensor] | None = None) -> EncodeResult:
        """Embed, add positions, run blockwise layers, pooling per the schedule."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if tokens.size > cfg.max_input_len:
            raise ValueError(
                f"{tokens.size} tokens exceed the configured capacity {cfg.max_input_len}"
            )
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        p = self._materialize(p)

        block = cfg.attention.block_size
        n = tokens.size
        n_pad = n if block == 0 else -(-n // block) * block
        valid = None
        if n_pad != n:
            tokens = np.concatenate([tokens, np.full(n_pad - n, PAD_ID, dtype=np.intp)])
            valid = np.arange(n_pad) < n

        x = scale(gather_rows(p["embedding"], tokens), cfg.attention.model_dim**0.5)
        x = add(x, constant(_positions(n_pad, cfg.attention.model_dim)))

        lengths = [n_pad]
        traces: list[ScoreTrace] = []
        scorer_params = self._layer_view(p, "scorer.")
        need_probs = cfg.scorer.kind == "power-like"
        for i in range(cfg.encoder_layers):
            x, block_probs = encoder_layer(
                self._layer_view(p, f"enc{i}."), x, cfg.attention, valid, need_probs=need_probs
            )
            cur = x.value.shape[0]
            out_len = cfg.schedule.lengths[i]
            if out_len < cur:
                x, trace = self._pool_stage(x, out_len, i, cur, block_probs, scorer_params, valid)
                traces.append(trace)
                valid = None
            lengths.append(x.value.shape[0])
        return EncodeResult(memory=x, lengths=lengths, traces=traces)

    def _pool_stage(self, x, out_len, layer, cur, block_probs, scorer_params, valid):
        cfg = self.cfg
        if cfg.scorer.kind in WINDOW_KINDS:
            from .scorers import window_pool

            ratio = cur // out_len
            mode = "mean" if cfg.scorer.kind == "mean-window" else "max"
            pooled = window_pool(x, mode, ratio, ratio)
            return pooled, ScoreTrace(layer, cur, None, None, 0)

        ctx = None
        if cfg.scorer.kind == "power-like":
            ctx = _block_diagonal(block_probs, cur)
        v = compute_scores(x, cfg.scorer, scorer_params, ctx)
        if valid is not None:
            penalty = (~valid).astype(np.float64) * (v.value.min() - PAD_SCORE_OFFSET)
            v = add(mul(v, constant(valid.astype(np.float64).reshape(-1, 1))),
                    constant(penalty.reshape(-1, 1)))
        batch = successive_halving_topk(
            x, v, PoolConfig(k=out_len, tau=cfg.pool_tau, sort=cfg.pool_sort,
                             restore_order=cfg.pool_restore_order)
        )
        trace = ScoreTrace(layer, cur, v.value[:, 0].copy(), batch.provenance, batch.pair_evals)
        return batch.pooled, trace

    # -- decoder -----------------------------------------------------------

    def decode_train(self, memory, targets: Sequence[int], p: Mapping[str, Tensor] | None = None):
        """Teacher-forced decode; returns (mean cross-entropy, logits)."""
        cfg = self.cfg
        targets = np.asarray(targets, dtype=np.intp)
        if targets.ndim != 1 or targets.size == 0:
            raise ValueError("targets must be a non-empty 1-D sequence")
        if targets.size > cfg.max_target_len:
            raise ValueError(f"{targets.size} targets exceed max_target_len {cfg.max_target_len}")
        if targets.min() < 0 or targets.max() >= cfg.vocab_size:
            raise ValueError("target id out of vocabulary range")
        p = self._materialize(p)

        dec_in = np.concatenate([[BOS_ID], targets[:-1]])
        # scaled shared embeddings, no decoder positions
        y = scale(gather_rows(p["embedding"], dec_in), cfg.attention.model_dim**0.5)
        for i in range(cfg.decoder_layers):
            y, _ = decoder_layer(
                self._layer_view(p, f"dec{i}."), y, memory, cfg.attention, need_probs=False
            )
        logits = matmul(y, transpose(p["embedding"]))
        mask = (targets != PAD_ID).astype(np.float64)
        loss = softmax_xent(logits, targets, mask)
        return loss, logits

    def greedy_decode(self, memory, max_len: int) -> list[int]:
        """Argmax decoding until EOS or max_len tokens."""
        p = self._materialize(None)
        emitted: list[int] = []
        for _ in range(max_len):
            dec_in = np.array([BOS_ID] + emitted, dtype=np.intp)
            y = scale(gather_rows(p["embedding"], dec_in), self.cfg.attention.model_dim**0.5)
            for i in range(self.cfg.decoder_layers):
                y, _ = decoder_layer(
                    self._layer_view(p, f"dec{i}."), y, memory, self.cfg.attention, need_probs=False
                )
            logits = y.value[-1] @ self.params["embedding"].T
            nxt = int(np.argmax(logits))
            emitted.append(nxt)
            if nxt == EOS_ID:
                break
        return emitted

    # -- checkpointing -----------------------------------------------------

    def save(self, path) -> None:
        """Binary checkpoint: magic, length-prefixed config JSON, raw float64 params."""
        header = json.dumps(_config_to_dict(self.cfg), sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for name in self.param_order:
                f.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PooledEncoderDecoder":
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r}")
            (header_len,) = struct.unpack("<Q", f.read(8))
            cfg = _config_from_dict(json.loads(f.read(header_len).decode()))
            model = cls(cfg, seed=0)
            for name in model.param_order:
                shape = model.params[name].shape
                raw = f.read(8 * shape[0] * shape[1])
                model.params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            if f.read(1):
                raise ValueError("trailing bytes after parameters")
        return model


def _block_diagonal(block_probs: list[Tensor], n: int) -> Tensor:
    """Assemble per-block attention probabilities into an n-by-n matrix."""
    rows = []
    offset = 0
    for probs in block_probs:
        width = probs.value.shape[1]
        pieces = []
        if offset:
            pieces.append(constant(np.zeros((probs.value.shape[0], offset))))
        pieces.append(probs)
        if offset + width < n:
            pieces.append(constant(np.zeros((probs.value.shape[0], n - offset - width))))
        rows.append(concat_cols(pieces) if len(pieces) > 1 else pieces[0])
        offset += width
    return concat_rows(rows) if len(rows) > 1 else rows[0]


def batched_teacher_loss(model: PooledEncoderDecoder, examples, p: Mapping[str, Tensor]) -> Tensor:
    """Mean teacher-forced loss over same-shape (tokens, targets, ...) examples
    built as one graph.

    Sequences are stacked row-wise: encoder blocks never span sequence
    boundaries (length must be a block multiple) and the decoder handles all
    sequences at once under block-diagonal self/cross masks. Pooling still
    runs per sequence. Equal to the per-sequence loss mean up to summation
    order; unsupported for the power-like scorer, which needs per-layer
    attention probabilities.
    """
    cfg = model.cfg
    att = cfg.attention
    if cfg.scorer.kind == "power-like":
        raise ValueError("batched path does not carry attention probabilities")
    B = len(examples)
    n = int(np.asarray(examples[0][0]).size)
    t_len = int(np.asarray(examples[0][1]).size)
    for tokens, targets, *_ in examples:
        if np.asarray(tokens).size != n or np.asarray(targets).size != t_len:
            raise ValueError("batched path needs equal-shape examples")
    if att.block_size and n % att.block_size:
        raise ValueError("sequence length must be a multiple of the block size")

    tokens_cat = np.concatenate([np.asarray(tok, dtype=np.intp) for tok, *_ in examples])
    x = scale(gather_rows(p["embedding"], tokens_cat), att.model_dim**0.5)
    x = add(x, constant(np.tile(_positions(n, att.model_dim), (B, 1))))

    scorer_params = model._layer_view(p, "scorer.")
    per_seq = None  # switches from one stacked matrix to per-sequence tensors
    cur = n
    for i in range(cfg.encoder_layers):
        layer = model._layer_view(p, f"enc{i}.")
        if per_seq is None:
            x, _ = encoder_layer(layer, x, att, need_probs=False)
        else:
            per_seq = [encoder_layer(layer, xs, att, need_probs=False)[0] for xs in per_seq]
        out_len = cfg.schedule.lengths[i]
        if out_len < cur:
            if per_seq is None:
                per_seq = [slice_rows(x, b * cur, (b + 1) * cur) for b in range(B)]
            per_seq = [model._pool_stage(xs, out_len, i, cur, [], scorer_params, None)[0]
                       for xs in per_seq]
            cur = out_len
    memories = per_seq if per_seq is not None else [
        slice_rows(x, b * cur, (b + 1) * cur) for b in range(B)
    ]
    k = cur

    dec_in_cat = np.concatenate(
        [np.concatenate([[BOS_ID], np.asarray(tg, dtype=np.intp)[:-1]]) for _, tg, *_ in examples]
    )
    targets_cat = np.concatenate([np.asarray(tg, dtype=np.intp) for _, tg, *_ in examples])
    y = scale(gather_rows(p["embedding"], dec_in_cat), att.model_dim**0.5)
    memory_cat = concat_rows(memories)
    self_mask = np.full((B * t_len, B * t_len), MASK_NEG)
    cross_mask = np.full((B * t_len, B * k), MASK_NEG)
    block = causal_mask(t_len)
    for b in range(B):
        self_mask[b * t_len : (b + 1) * t_len, b * t_len : (b + 1) * t_len] = block
        cross_mask[b * t_len : (b + 1) * t_len, b * k : (b + 1) * k] = 0.0
    for i in range(cfg.decoder_layers):
        y, _ = decoder_layer(
            model._layer_view(p, f"dec{i}."), y, memory_cat, att,
            self_mask=self_mask, cross_mask=cross_mask, need_probs=False,
        )
    logits = matmul(y, transpose(p["embedding"]))
    mask = (targets_cat != PAD_ID).astype(np.float64)
    return softmax_xent(logits, targets_cat, mask)


# ---------------------------------------------------------------------------
# synthetic needle task


@dataclass(frozen=True)
class TaskConfig:
    """Recover a few payload tokens hidden among noise, in document order."""

    seq_len: int
    payload_count: int
    payload_vocab: int
    noise_vocab: int
    seed: int = 0

    def __post_init__(self):
        if self.payload_count < 1 or self.payload_count > self.seq_len:
            raise ValueError("payload_count must be in [1, seq_len]")
        if self.payload_vocab < self.payload_count:
            raise ValueError("payload_vocab must cover payload_count distinct tokens")
        if self.noise_vocab < 1:
            raise ValueError("noise vocabulary must be non-empty")

    @property
    def vocab_size(self) -> int:
        return FIRST_CONTENT_ID + self.payload_vocab + self.noise_vocab

    @property
    def target_len(self) -> int:
        return self.payload_count + 1  # payload tokens then EOS


def make_needle_example(rng: np.random.Generator, task: TaskConfig):
    """Return (tokens, targets, payload_mask) for one sequence.

    Payload tokens are distinct within a sequence; with repeats the target
    would be ambiguous to a decoder that carries no positional embedding.
    """
    positions = np.sort(rng.choice(task.seq_len, size=task.payload_count, replace=False))
    payload = FIRST_CONTENT_ID + rng.choice(task.payload_vocab, size=task.payload_count,
                                            replace=False)
    noise_base = FIRST_CONTENT_ID + task.payload_vocab
    tokens = noise_base + rng.integers(0, task.noise_vocab, task.seq_len)
    tokens[positions] = payload
    targets = np.concatenate([payload, [EOS_ID]])
    mask = np.zeros(task.seq_len, dtype=bool)
    mask[positions] = True
    return tokens, targets, mask


def needle_model_config(
    task: TaskConfig,
    *,
    model_dim: int = 64,
    head_count: int = 4,
    ffn_dim: int = 256,
    block_size: int = 64,
    bottleneck: int = 32,
    encoder_layers: int = 2,
    decoder_layers: int = 2,
    scorer: ScorerSpec | None = None,
    pool_tau: float = 1.0,
) -> ModelConfig:
    """Desk-scale single-bottleneck model sized for a needle task."""
    lengths = [task.seq_len] * (encoder_layers - 1) + [bottleneck]
    if scorer is None:
        scorer = ScorerSpec("linear")
    return ModelConfig(
        encoder_layers=encoder_layers,
        decoder_layers=decoder_layers,
        attention=AttentionConfig(model_dim, head_count, ffn_dim, block_size),
        schedule=PoolSchedule(tuple(lengths)),
        scorer=scorer,
        vocab_size=task.vocab_size,
        max_target_len=task.target_len,
        max_input_len=task.seq_len,
        pool_tau=pool_tau,
    )


def ranking_auc(scores: Array, positive: Array) -> float:
    """Probability that a random positive outranks a random negative (midranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative rows")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    midranks = ends - (counts - 1) / 2.0
    ranks = midranks[inverse]
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class TrainReport:
    """Outcome of a toy training run."""

    steps: int
    seed: int
    losses: list[float] = field(default_factory=list)
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    auc: float = 0.5
    seq_accuracy: float = 0.0


def train_toy(
    model: PooledEncoderDecoder,
    task: TaskConfig,
    steps: int,
    *,
    lr: float = 5e-4,
    batch_size: int = 8,
    eval_every: int = 50,
    eval_size: int = 32,
    early_stop_auc: float | None = None,
    early_stop_accuracy: float = 0.0,
) -> TrainReport:
    """Adam training on generated needle batches; deterministic per task seed.

    The history logs (step, eval loss, scorer AUC, exact-sequence accuracy)
    before the first update and after every eval_every steps. Early stopping,
    when enabled, fires once AUC and accuracy both clear their thresholds.
    """
    if model.cfg.vocab_size != task.vocab_size:
        raise ValueError("model vocabulary does not match the task")
    if task.payload_count > model.cfg.schedule.bottleneck:
        raise ValueError("bottleneck smaller than the payload count")
    data_rng = np.random.default_rng(task.seed)
    eval_rng = np.random.default_rng(task.seed + 0x5EED)
    eval_set = [make_needle_example(eval_rng, task) for _ in range(eval_size)]
    states = {name: AdamState.init(value, lr) for name, value in model.params.items()}
    report = TrainReport(steps=0, seed=task.seed)

    def evaluate(step: int) -> tuple[float, float, float]:
        losses = []
        aucs = []
        hits = 0
        for tokens, targets, mask in eval_set:
            enc = model.encode(tokens)
            loss, _ = model.decode_train(enc.memory, targets)
            losses.append(float(loss.value[0, 0]))
            if enc.traces and enc.traces[0].scores is not None:
                aucs.append(ranking_auc(enc.traces[0].scores[: task.seq_len], mask))
            hits += model.greedy_decode(enc.memory, task.target_len) == list(targets)
        entry = (step, float(np.mean(losses)), float(np.mean(aucs)) if aucs else 0.5,
                 hits / len(eval_set))
        report.history.append(entry)
        return entry[1], entry[2], entry[3]

    batched = model.cfg.scorer.kind != "power-like"
    _, auc, acc = evaluate(0)
    for step in range(1, steps + 1):
        tape = Tape()
        tracked = model.tracked_params(tape)
        examples = [make_needle_example(data_rng, task) for _ in range(batch_size)]
        if batched:
            total = batched_teacher_loss(model, examples, tracked)
        else:
            total = None
            for tokens, targets, _ in examples:
                enc = model.encode(tokens, tracked)
                loss, _ = model.decode_train(enc.memory, targets, tracked)
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / batch_size)
        grads = backward(tape, total)
        for name in model.param_order:
            model.params[name], states[name] = adam_step(
                model.params[name], grads[tracked[name]], states[name]
            )
        report.losses.append(float(total.value[0, 0]))
        report.steps = step
        if step % eval_every == 0 or step == steps:
            _, auc, acc = evaluate(step)
            if early_stop_auc is not None and auc >= early_stop_auc and acc >= early_stop_accuracy:
                break
    report.auc = auc
    report.seq_accuracy = acc
    return report
