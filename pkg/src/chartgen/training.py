"""Batch assembly, the training loop, the permuted-audio ablation and the context sweep.

Three regimes share one loop:

``baseline``
    note tokens only (no time grid), chunked into non-overlapping sequences of
    ``context_tokens``;
``uncond``
    grid-encoded windows of ``segment_s`` seconds at ``delta_ms``;
``conditioned``
    the same windows plus the matching slice of audio codes.

Every sequence is fed as ``[BOS] + tokens`` and predicts ``tokens + [EOS]``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import AudioCodes
from .chart_io import Chart
from .errors import (
    BatchTooSmall,
    DivergedLoss,
    EmptyAfterFilter,
    EmptyCorpus,
    MissingCodes,
    RegimeMismatch,
    SequenceTooLong,
)
from .metrics import EvalReport, evaluate
from .model import AdamState, ChartTransformer, ModelConfig, adamw_step, clip_grad_norm, save_checkpoint
from .model.loss import position_weights, token_loss, token_loss_grad
from .time_grid import chart_end_s, filter_by_resolution, grid_encode
from .tokenizer import BOS, DEFAULT_POLICY, EOS, PAD, TokenPolicy, encode_notes

log = logging.getLogger(__name__)

REGIMES = ("baseline", "uncond", "conditioned")


@dataclass
class TrainConfig:
    regime: str = "conditioned"
    delta_ms: float = 40.0
    segment_s: float = 30.0
    context_tokens: int = 256
    lr_peak: float = 1e-3
    lr_final: float = 1e-4
    decay_epochs: float = 10.0
    weight_decay: float = 0.01
    pad_weight: float | None = None  # None: 0.1 at <= 20 ms, 0.2 otherwise
    dropout: float = 0.2
    batch_size: int = 8
    epochs: float = 10.0
    max_steps: int | None = None
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    eval_every: int | None = None  # steps; None means once per epoch
    ablate_every: int = 0
    stop_at_train_accuracy: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.pad_weight is not None and not 0.0 < self.pad_weight <= 1.0:
            raise ValueError("pad_weight must lie in (0, 1]")
        if self.lr_final > self.lr_peak:
            raise ValueError("lr_final must not exceed lr_peak")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def effective_pad_weight(self) -> float:
        if self.pad_weight is not None:
            return self.pad_weight
        return 0.1 if self.delta_ms <= 20.0 + 1e-9 else 0.2

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_value(text: str):
    low = text.strip().lower()
    if low in ("none", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text.strip()


def parse_config_text(text: str, strict: bool = True) -> tuple[dict, dict]:
    """Split ``key = value`` lines into training and model overrides.

    Blank lines and ``#`` comments are ignored. Model keys may carry a
    ``model.`` prefix; unprefixed keys go wherever the name is known. Unknown
    keys raise unless ``strict`` is off, in which case they are skipped.
    """
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(ModelConfig)}
    train, model = {}, {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        value = parse_value(value)
        if key.startswith("model."):
            key = key[len("model."):]
            if key not in model_keys:
                raise ValueError(f"config line {n}: unknown model key {key!r}")
            model[key] = value
        elif key in train_keys:
            train[key] = value
        elif key in model_keys:
            model[key] = value
        elif strict:
            raise ValueError(f"config line {n}: unknown key {key!r}")
    return train, model


def load_config(path, train: TrainConfig | None = None, model: ModelConfig | None = None):
    """``(TrainConfig, ModelConfig)`` with the file's values applied on top."""
    t_over, m_over = parse_config_text(Path(path).read_text(encoding="utf-8"))
    train = replace(train or TrainConfig(), **t_over)
    model = ModelConfig.from_dict({**(model or ModelConfig()).to_dict(), **m_over})
    return train, model


def checkpoint_meta(cfg: TrainConfig, step: int, val_loss: float) -> dict:
    return {**cfg.to_dict(), "step": step, "val_loss": val_loss}


def config_from_meta(meta: dict) -> TrainConfig:
    """Rebuild the training config stored in a checkpoint's extra header lines."""
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: parse_value(v) for k, v in meta.items() if k in known})


# ---------------------------------------------------------------------------
# corpus and batches
# ---------------------------------------------------------------------------


@dataclass
class Song:
    song_id: str
    chart: Chart
    codes: AudioCodes | None = None
    duration_s: float | None = None

    @property
    def length_s(self) -> float:
        if self.codes is not None:
            return self.codes.duration_s
        if self.duration_s is not None:
            return self.duration_s
        return chart_end_s(self.chart)


@dataclass
class TrainSequence:
    song_id: str
    tokens: np.ndarray
    codes: np.ndarray | None = None  # (frames, n_q)


@dataclass
class Batch:
    inputs: np.ndarray  # (B, T) BOS-prefixed
    targets: np.ndarray  # (B, T) EOS-suffixed
    mask: np.ndarray  # (B, T) 1 on real positions
    codes: np.ndarray | None = None  # (B, T_e, n_q)
    frame_lengths: np.ndarray | None = None
    song_ids: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def collate(seqs: Sequence[TrainSequence]) -> Batch:
    t = max(len(s.tokens) for s in seqs) + 1
    b = len(seqs)
    inputs = np.full((b, t), PAD, dtype=np.int64)
    targets = np.full((b, t), PAD, dtype=np.int64)
    mask = np.zeros((b, t))
    for i, s in enumerate(seqs):
        n = len(s.tokens)
        inputs[i, 0] = BOS
        inputs[i, 1:n + 1] = s.tokens
        targets[i, :n] = s.tokens
        targets[i, n] = EOS
        mask[i, :n + 1] = 1.0
    codes = lengths = None
    if seqs[0].codes is not None:
        lengths = np.array([len(s.codes) for s in seqs])
        codes = np.zeros((b, max(lengths.max(), 1), seqs[0].codes.shape[1]), dtype=np.int64)
        for i, s in enumerate(seqs):
            codes[i, :len(s.codes)] = s.codes
    return Batch(inputs, targets, mask, codes, lengths, [s.song_id for s in seqs])


def in_validation(song_id: str, seed: int, fraction: float) -> bool:
    digest = hashlib.sha1(f"{seed}:{song_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64 < fraction


def song_sequences(song: Song, cfg: TrainConfig, policy: TokenPolicy = DEFAULT_POLICY) -> list[TrainSequence]:
    if cfg.regime == "baseline":
        tokens = np.array(encode_notes(song.chart.notes, policy), dtype=np.int64)
        step = cfg.context_tokens
        return [TrainSequence(song.song_id, tokens[i:i + step]) for i in range(0, len(tokens), step)]

    if cfg.regime == "conditioned" and song.codes is None:
        raise MissingCodes(f"song {song.song_id} has no audio codes")
    duration = song.length_s
    n_windows = max(int(math.ceil(duration / cfg.segment_s - 1e-9)), 0)
    out = []
    for w in range(n_windows):
        t0 = w * cfg.segment_s
        t1 = min(t0 + cfg.segment_s, duration)
        seq = grid_encode(song.chart, cfg.delta_ms, (t0, t1), policy)
        codes = None
        if cfg.regime == "conditioned":
            rate = song.codes.frame_rate_hz
            codes = song.codes.codes[int(round(t0 * rate)):int(round(t1 * rate))]
        out.append(TrainSequence(song.song_id, seq.tokens.astype(np.int64), codes))
    return out


class BatchPlan:
    """Train/validation sequences plus a deterministic per-epoch batch order."""

    def __init__(self, train: list[TrainSequence], val: list[TrainSequence], cfg: TrainConfig):
        self.train = train
        self.val = val
        self.cfg = cfg

    @property
    def train_ids(self) -> set:
        return {s.song_id for s in self.train}

    @property
    def val_ids(self) -> set:
        return {s.song_id for s in self.val}

    @property
    def steps_per_epoch(self) -> int:
        return max(math.ceil(len(self.train) / self.cfg.batch_size), 1)

    def _chunks(self, seqs):
        bs = self.cfg.batch_size
        return [collate(seqs[i:i + bs]) for i in range(0, len(seqs), bs)]

    def train_batches(self, epoch: int) -> list[Batch]:
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.train))
        return self._chunks([self.train[i] for i in order])

    def val_batches(self) -> list[Batch]:
        return self._chunks(self.val)

    def eval_train_batches(self) -> list[Batch]:
        return self._chunks(self.train)


def make_batches(
    corpus: Sequence[Song],
    cfg: TrainConfig,
    split_seed: int | None = None,
    policy: TokenPolicy = DEFAULT_POLICY,
) -> BatchPlan:
    """Split songs into train and validation, then cut them into sequences.

    Discrete-time regimes first drop charts whose onsets are closer than one
    grid step. A song's validation membership depends only on its id and the
    split seed.
    """
    if not corpus:
        raise EmptyCorpus("no songs to train on")
    split_seed = cfg.seed if split_seed is None else split_seed
    songs = list(corpus)
    if cfg.regime != "baseline":
        kept = {id(c) for c in filter_by_resolution([s.chart for s in songs], cfg.delta_ms).kept}
        dropped = [s.song_id for s in songs if id(s.chart) not in kept]
        if dropped:
            log.info("dropping %d songs with onsets closer than %s ms", len(dropped), cfg.delta_ms)
        songs = [s for s in songs if id(s.chart) in kept]
    if not songs:
        raise EmptyAfterFilter(f"every song has onsets closer than {cfg.delta_ms} ms")
    train, val = [], []
    for song in songs:
        target = val if in_validation(song.song_id, split_seed, cfg.val_fraction) else train
        target.extend(song_sequences(song, cfg, policy))
    if not train:
        raise EmptyAfterFilter("no training sequences left after the validation split")
    return BatchPlan(train, val, cfg)


# ---------------------------------------------------------------------------
# schedule and loop
# ---------------------------------------------------------------------------


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear from ``lr_peak`` at epoch 0 to ``lr_final`` at ``decay_epochs``, then flat."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if cfg.decay_epochs <= 0:
        return cfg.lr_final
    frac = min(epoch / cfg.decay_epochs, 1.0)
    return cfg.lr_peak + (cfg.lr_final - cfg.lr_peak) * frac


@dataclass
class LogRow:
    step: int
    loss: float
    lr: float
    rel_diff: float | None = None

    def line(self) -> str:
        cols = [str(self.step), f"{self.loss:.6f}", f"{self.lr:.6g}"]
        if self.rel_diff is not None:
            cols.append(f"{self.rel_diff:.6f}")
        return "\t".join(cols)


@dataclass
class TrainResult:
    model: ChartTransformer  # best validation checkpoint
    final_model: ChartTransformer
    plan: BatchPlan
    log: list[LogRow]
    evals: list = field(default_factory=list)  # (step, val_loss, train_nonpad_acc or None)
    best_step: int = 0
    seconds: float = 0.0


def _dataset_loss(model, batches, pad_weight) -> float:
    num = den = 0.0
    for b in batches:
        logits = model.forward(b.inputs, b.codes, b.frame_lengths, train=False)
        _, per_pos = token_loss(logits, b.targets, pad_weight, b.mask)
        w = position_weights(b.targets, pad_weight, b.mask)
        num += float((w * per_pos).sum())
        den += float(w.sum())
    return num / den if den else float("nan")


def model_config_for(cfg: TrainConfig, model_cfg: ModelConfig | None, plan: BatchPlan) -> ModelConfig:
    """Fill in the regime-dependent fields of a model config."""
    base = model_cfg or ModelConfig()
    longest = max(len(s.tokens) for s in plan.train + plan.val) + 2
    updates = dict(conditioned=cfg.regime == "conditioned", dropout_p=cfg.dropout)
    if base.max_seq_len < longest:
        updates["max_seq_len"] = longest
    if cfg.regime == "conditioned":
        frames = max(len(s.codes) for s in plan.train + plan.val)
        updates["max_audio_len"] = max(base.max_audio_len, -(-frames // base.adapter_stride))
    return replace(base, **updates)


def train(
    corpus: Sequence[Song] | BatchPlan,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    *,
    model: ChartTransformer | None = None,
    log_path=None,
    checkpoint_path=None,
    ablation_batches: list[Batch] | None = None,
) -> TrainResult:
    """AdamW over the plan's batches; keeps the parameters with the best validation loss.

    Validation runs every ``eval_every`` steps (once per epoch by default).
    Without a validation split the latest parameters count as best. When
    ``ablate_every`` is set, the permuted-audio relative loss difference on
    ``ablation_batches`` (validation batches by default) is logged at step 0
    and every ``ablate_every`` steps.
    """
    start = time.perf_counter()
    plan = corpus if isinstance(corpus, BatchPlan) else make_batches(corpus, cfg)
    if model is None:
        model = ChartTransformer(model_config_for(cfg, model_cfg, plan))
    if (cfg.regime == "conditioned") != model.config.conditioned:
        raise RegimeMismatch(f"regime {cfg.regime!r} does not match the model")
    longest = max(len(s.tokens) for s in plan.train + plan.val) + 1
    if longest > model.config.max_seq_len:
        raise SequenceTooLong(f"sequences of {longest} exceed max_seq_len={model.config.max_seq_len}")

    pad_weight = cfg.effective_pad_weight
    spe = plan.steps_per_epoch
    total = cfg.max_steps if cfg.max_steps is not None else int(math.ceil(cfg.epochs * spe))
    eval_every = cfg.eval_every or spe
    val_batches = plan.val_batches()
    if cfg.ablate_every and ablation_batches is None:
        ablation_batches = [b for b in (val_batches or plan.eval_train_batches()) if b.size >= 2]

    rng = np.random.default_rng([cfg.seed, 7])
    state = AdamState()
    rows: list[LogRow] = []
    evals = []
    best = (math.inf, model.copy_params(), 0)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def ablation(step):
        if cfg.ablate_every and (step % cfg.ablate_every == 0):
            return float(np.mean(ablate_audio(model, ablation_batches, seed=cfg.seed, pad_weight=pad_weight)))
        return None

    try:
        rel0 = ablation(0)
        if rel0 is not None:
            rows.append(LogRow(0, float("nan"), lr_at(0.0, cfg), rel0))
        step = 0
        epoch = 0
        done = False
        while not done:
            for batch in plan.train_batches(epoch):
                if step >= total:
                    done = True
                    break
                lr = lr_at(step / spe, cfg)
                logits = model.forward(batch.inputs, batch.codes, batch.frame_lengths, train=True, rng=rng)
                loss, dlogits = token_loss_grad(logits, batch.targets, pad_weight, batch.mask)
                if not math.isfinite(loss):
                    raise DivergedLoss(f"loss became {loss} at step {step}")
                grads = model.backward(dlogits.astype(model.dtype))
                if cfg.grad_clip:
                    clip_grad_norm(grads, cfg.grad_clip)
                adamw_step(model.params, grads, state, lr, weight_decay=cfg.weight_decay)
                step += 1
                row = LogRow(step, loss, lr, ablation(step))
                rows.append(row)
                if log_fh:
                    log_fh.write(row.line() + "\n")
                if step % eval_every == 0 or step == total:
                    val_loss = _dataset_loss(model, val_batches, pad_weight) if val_batches else loss
                    train_acc = None
                    if cfg.stop_at_train_accuracy is not None:
                        rep = evaluate(model, plan.eval_train_batches())
                        train_acc = rep.accuracy_nonpad
                    evals.append((step, val_loss, train_acc))
                    log.info("step %d loss %.4f val %.4f acc %s", step, loss, val_loss, train_acc)
                    if not val_batches or val_loss < best[0]:
                        best = (val_loss, model.copy_params(), step)
                        if checkpoint_path:
                            save_checkpoint(model, checkpoint_path, checkpoint_meta(cfg, step, val_loss))
                    if train_acc is not None and train_acc >= cfg.stop_at_train_accuracy:
                        done = True
                        break
            epoch += 1
    finally:
        if log_fh:
            log_fh.close()

    best_model = ChartTransformer(model.config, best[1])
    return TrainResult(best_model, model, plan, rows, evals, best[2], time.perf_counter() - start)


# ---------------------------------------------------------------------------
# ablation and sweep
# ---------------------------------------------------------------------------


def derangement(n: int, rng) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` with no fixed point."""
    if n < 2:
        raise BatchTooSmall("a derangement needs at least two items")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def ablate_audio(model: ChartTransformer, batches, seed: int = 0, pad_weight: float = 1.0) -> list[float]:
    """``(L_perm - L_std) / L_std`` per batch, with audio shuffled across the batch.

    Both passes run in evaluation mode, so dropout cannot explain any gap.
    """
    if not model.config.conditioned:
        raise RegimeMismatch("audio ablation needs a conditioned model")
    rng = np.random.default_rng(seed)
    out = []
    for b in batches:
        if b.size < 2:
            raise BatchTooSmall(f"batch of {b.size} cannot be permuted")
        perm = derangement(b.size, rng)
        std = token_loss(model.forward(b.inputs, b.codes, b.frame_lengths), b.targets, pad_weight, b.mask)[0]
        shuffled = model.forward(b.inputs, b.codes[perm], b.frame_lengths[perm])
        perm_loss = token_loss(shuffled, b.targets, pad_weight, b.mask)[0]
        out.append((perm_loss - std) / std)
    return out


@dataclass
class SweepRow:
    context: int
    val_perplexity: float
    val_accuracy: float
    report: EvalReport | None = None


def context_sweep(
    corpus: Sequence[Song],
    contexts: Sequence[int],
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
) -> list[SweepRow]:
    """Train one baseline model per context length and score it on validation songs.

    All runs share the seed, hyperparameters and positional table size, so
    the context length is the only thing that changes.
    """
    if cfg.regime != "baseline":
        raise RegimeMismatch("the context sweep runs in the baseline regime")
    if not contexts:
        return []
    model_cfg = model_cfg or ModelConfig()
    model_cfg = replace(model_cfg, max_seq_len=max(model_cfg.max_seq_len, max(contexts) + 2))
    rows = []
    for context in contexts:
        run_cfg = replace(cfg, context_tokens=int(context))
        result = train(corpus, run_cfg, model_cfg)
        batches = result.plan.val_batches() or result.plan.eval_train_batches()
        report = evaluate(result.model, batches)
        rows.append(SweepRow(int(context), report.perplexity_full, report.accuracy_full, report))
    return rows
