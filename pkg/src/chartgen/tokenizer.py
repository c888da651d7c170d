"""Fret-set <-> token id mapping.

Vocabulary layout (66 ids)::

    0        PAD   (empty grid step)
    1..63    note configurations; the id *is* the 6-bit fret mask
    64       BOS
    65       EOS

Bit ``i`` of the mask is fret ``i`` for the five coloured frets and bit 5 is
the open note (chart index 7).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .chart_io import OPEN, Chart
from .errors import EmptyFretSet, NotANoteToken

PAD = 0
BOS = 64
EOS = 65
VOCAB_SIZE = 66
N_NOTE_TOKENS = 63
OPEN_BIT = 5

_BIT_OF = {0: 0, 1: 1, 2: 2, 3: 3, 4: 4, OPEN: OPEN_BIT}
_FRET_OF = {bit: fret for fret, bit in _BIT_OF.items()}

OPEN_PLUS_FRET_MODES = ("keep", "drop_event", "strip_open")


@dataclass(frozen=True)
class TokenPolicy:
    """How to treat rare configurations.

    ``open_plus_fret`` decides what happens to an open note sharing a tick with
    coloured frets: keep the combined token, drop the event, or strip the open
    bit. ``rare_token_min_freq`` is the cutoff used by :func:`rare_tokens`.
    """

    open_plus_fret: str = "strip_open"
    rare_token_min_freq: float = 0.0

    def __post_init__(self):
        if self.open_plus_fret not in OPEN_PLUS_FRET_MODES:
            raise ValueError(f"open_plus_fret must be one of {OPEN_PLUS_FRET_MODES}")
        if not 0.0 <= self.rare_token_min_freq < 1.0:
            raise ValueError("rare_token_min_freq must lie in [0, 1)")


KEEP = TokenPolicy("keep")
DEFAULT_POLICY = TokenPolicy()


def is_note_token(token: int) -> bool:
    return 1 <= token <= N_NOTE_TOKENS


def frets_to_mask(frets: Iterable[int]) -> int:
    mask = 0
    for fret in frets:
        try:
            mask |= 1 << _BIT_OF[fret]
        except KeyError:
            raise ValueError(f"not a fret index: {fret!r}") from None
    return mask


def encode_frets(frets: Iterable[int], policy: TokenPolicy = DEFAULT_POLICY) -> int | None:
    """Token id for a fret set, or ``None`` when the policy drops the event."""
    frets = set(frets)
    if not frets:
        raise EmptyFretSet("cannot encode an empty fret set")
    if OPEN in frets and len(frets) > 1:
        if policy.open_plus_fret == "drop_event":
            return None
        if policy.open_plus_fret == "strip_open":
            frets.discard(OPEN)
    return frets_to_mask(frets)


def decode_token(token: int) -> frozenset:
    if not is_note_token(token):
        raise NotANoteToken(f"token {token} is not a note configuration")
    return frozenset(_FRET_OF[bit] for bit in range(6) if token >> bit & 1)


def encode_notes(notes, policy: TokenPolicy = DEFAULT_POLICY) -> list[int]:
    """Token ids for a note list in order, skipping dropped events."""
    tokens = []
    for note in notes:
        token = encode_frets(note.frets, policy)
        if token is not None:
            tokens.append(token)
    return tokens


def token_histogram(charts: Iterable[Chart], policy: TokenPolicy = KEEP) -> list[tuple[int, float]]:
    """Relative frequency of every observed note token, most frequent first.

    Ties are ordered by token id.
    """
    counts: Counter = Counter()
    for chart in charts:
        counts.update(encode_notes(chart.notes, policy))
    total = sum(counts.values())
    if total == 0:
        return []
    return sorted(((tok, n / total) for tok, n in counts.items()), key=lambda kv: (-kv[1], kv[0]))


def rare_tokens(histogram, min_freq: float) -> list[int]:
    """Tokens in ``histogram`` whose frequency falls strictly below ``min_freq``."""
    return [tok for tok, freq in histogram if freq < min_freq]


def format_frets(frets: Iterable[int]) -> str:
    return " ".join(str(f) for f in sorted(frets))


def parse_frets(text: str) -> frozenset:
    return frozenset(int(p) for p in text.split())


def tokens_to_text(tokens: Iterable[int]) -> str:
    """One integer id per line."""
    return "".join(f"{int(t)}\n" for t in tokens)


def tokens_from_text(text: str) -> list[int]:
    return [int(line) for line in text.split()]
