"""Uniform time grid: notes <-> fixed-step token sequences.

A note at time ``t`` lands in bin ``floor((t - start) / delta + 0.5)``; bins
without a note hold PAD. Decoding puts each note back at ``start + k * delta``,
so the round trip moves an onset by at most ``delta / 2``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .chart_io import Chart, NoteEvent
from .errors import BadMagic, BinCollision, ShapeMismatch, TooFewNotes, WindowEmpty
from .tokenizer import DEFAULT_POLICY, PAD, VOCAB_SIZE, TokenPolicy, decode_token, encode_frets, is_note_token

TOKENS_MAGIC = b"A2CT"
TOKENS_VERSION = 1
_TOKENS_HEADER = struct.Struct("<4sBII")

# guards float noise on exact half-bin ties, e.g. 0.05 s on a 20 ms grid
_TIE_EPS = 1e-9


@dataclass
class GridSequence:
    resolution_ms: float
    tokens: np.ndarray
    start_s: float = 0.0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.uint8)

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_fraction(self) -> float:
        return float(np.mean(self.tokens == PAD)) if len(self.tokens) else 0.0


@dataclass
class IoiReport:
    min_ioi_s: float
    cdf: list = field(default_factory=list)  # (delta_t_s, cumulative fraction)

    def fraction_at(self, dt_s: float) -> float:
        """Empirical P(IOI <= dt_s)."""
        frac = 0.0
        for value, f in self.cdf:
            if value <= dt_s + 1e-12:
                frac = f
            else:
                break
        return frac

    def fraction_above(self, dt_s: float) -> float:
        return 1.0 - self.fraction_at(dt_s)


def n_bins(duration_s: float, delta_ms: float) -> int:
    return max(int(math.ceil(duration_s * 1000.0 / delta_ms - _TIE_EPS)), 0)


def bin_index(time_s: float, start_s: float, delta_ms: float) -> int:
    return int(math.floor((time_s - start_s) * 1000.0 / delta_ms + 0.5 + _TIE_EPS))


def chart_end_s(chart: Chart) -> float:
    if not chart.notes:
        return 0.0
    return max(n.time_s + n.sustain_s for n in chart.notes)


def grid_encode(
    chart: Chart,
    delta_ms: float,
    window: tuple[float, float] | None = None,
    policy: TokenPolicy = DEFAULT_POLICY,
) -> GridSequence:
    """Place the chart's notes on a ``delta_ms`` grid over ``window``.

    The window holds ``ceil((t1 - t0) / delta)`` bins. A note belongs to the
    window when its bin index falls inside it, so consecutive windows whose
    starts are multiples of ``delta`` partition the notes exactly. Without a
    window the grid starts at 0 and covers every note.
    """
    if delta_ms <= 0:
        raise ValueError("delta_ms must be positive")
    if window is None:
        last = max((bin_index(n.time_s, 0.0, delta_ms) for n in chart.notes), default=-1)
        t0, length = 0.0, max(n_bins(chart_end_s(chart), delta_ms), last + 1)
    else:
        t0, t1 = window
        length = n_bins(t1 - t0, delta_ms)
    if length <= 0:
        raise WindowEmpty(f"window {window} holds no bins at {delta_ms} ms")

    tokens = np.full(length, PAD, dtype=np.uint8)
    owner: dict[int, NoteEvent] = {}
    for note in chart.notes:
        k = bin_index(note.time_s, t0, delta_ms)
        if not 0 <= k < length:
            continue
        token = encode_frets(note.frets, policy)
        if token is None:
            continue
        if k in owner:
            raise BinCollision(k, [owner[k].time_s, note.time_s])
        owner[k] = note
        tokens[k] = token
    return GridSequence(delta_ms, tokens, t0)


def grid_decode(seq: GridSequence) -> list[NoteEvent]:
    """Timed notes for every note token; PAD and boundary tokens are skipped."""
    step = seq.resolution_ms / 1000.0
    return [
        NoteEvent(time_s=seq.start_s + k * step, frets=decode_token(int(tok)))
        for k, tok in enumerate(seq.tokens)
        if is_note_token(int(tok))
    ]


def onset_intervals(chart: Chart) -> np.ndarray:
    onsets = np.unique(np.asarray(chart.onsets(), dtype=np.float64))
    return np.diff(onsets)


def min_ioi(chart: Chart) -> float:
    gaps = onset_intervals(chart)
    return float(gaps.min()) if len(gaps) else math.inf


def ioi_cdf(charts: Sequence[Chart], skip_short: bool = False) -> IoiReport:
    """Empirical CDF of inter-onset intervals pooled over ``charts``."""
    pooled = []
    for chart in charts:
        gaps = onset_intervals(chart)
        if len(gaps) == 0:
            if skip_short:
                continue
            raise TooFewNotes(f"chart {chart.metadata.title!r} has fewer than 2 distinct onsets")
        pooled.append(gaps)
    if not pooled:
        raise TooFewNotes("no chart with at least 2 distinct onsets")
    gaps = np.sort(np.concatenate(pooled))
    values, counts = np.unique(gaps, return_counts=True)
    fracs = np.cumsum(counts) / len(gaps)
    fracs[-1] = 1.0
    return IoiReport(float(gaps[0]), list(zip(values.tolist(), fracs.tolist())))


class FilterResult(NamedTuple):
    kept: list
    excluded: list

    @property
    def excluded_fraction(self) -> float:
        total = len(self.kept) + len(self.excluded)
        return len(self.excluded) / total if total else 0.0


def filter_by_resolution(charts: Sequence[Chart], delta_ms: float) -> FilterResult:
    """Split charts by whether their smallest IOI is at least ``delta_ms``."""
    kept, excluded = [], []
    limit = delta_ms / 1000.0 - _TIE_EPS
    for chart in charts:
        (excluded if min_ioi(chart) < limit else kept).append(chart)
    return FilterResult(kept, excluded)


# ---------------------------------------------------------------------------
# binary token files
# ---------------------------------------------------------------------------


def tokens_to_bytes(seq: GridSequence) -> bytes:
    tokens = np.asarray(seq.tokens)
    if tokens.size and int(tokens.max()) >= VOCAB_SIZE:
        raise ShapeMismatch("token id outside the vocabulary")
    header = _TOKENS_HEADER.pack(TOKENS_MAGIC, TOKENS_VERSION, int(round(seq.resolution_ms * 1000)), len(tokens))
    return header + tokens.astype("<u1").tobytes()


def tokens_from_bytes(data: bytes) -> GridSequence:
    if len(data) < _TOKENS_HEADER.size or data[:4] != TOKENS_MAGIC:
        raise BadMagic("not a token sequence file")
    magic, version, delta_us, length = _TOKENS_HEADER.unpack_from(data)
    if version != TOKENS_VERSION:
        raise BadMagic(f"unsupported token file version {version}")
    body = data[_TOKENS_HEADER.size:]
    if len(body) != length:
        raise ShapeMismatch(f"header says {length} tokens, file holds {len(body)}")
    tokens = np.frombuffer(body, dtype="<u1").copy()
    if tokens.size and int(tokens.max()) >= VOCAB_SIZE:
        raise ShapeMismatch("token id outside the vocabulary")
    return GridSequence(delta_us / 1000.0, tokens, 0.0)


def write_tokens(seq: GridSequence, path) -> None:
    Path(path).write_bytes(tokens_to_bytes(seq))


def read_tokens(path) -> GridSequence:
    return tokens_from_bytes(Path(path).read_bytes())
