"""Sample a chart from audio codes one grid step at a time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioCodes
from .chart_io import Chart, ChartMetadata, TempoEvent
from .errors import MissingCodes, PolicyInvalid, RegimeMismatch
from .metrics import argmax_predictions
from .time_grid import GridSequence, grid_decode, grid_encode, n_bins
from .tokenizer import BOS, EOS, PAD

# 480 ticks per beat at 125 BPM puts every tick on a whole millisecond
OUTPUT_RESOLUTION = 480
OUTPUT_TEMPO = (TempoEvent(0, 125000),)


@dataclass(frozen=True)
class SamplingPolicy:
    """``temperature`` None means greedy; ``top_k`` None means no truncation."""

    temperature: float | None = 1.0
    top_k: int | None = 16

    def __post_init__(self):
        if self.temperature is not None and not self.temperature > 0:
            raise PolicyInvalid(f"temperature must be positive, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            raise PolicyInvalid(f"top_k must be at least 1, got {self.top_k}")

    @property
    def greedy(self) -> bool:
        return self.temperature is None

    def __str__(self) -> str:
        if self.greedy:
            return "greedy"
        parts = [f"temp:{self.temperature:g}"]
        if self.top_k is not None:
            parts.insert(0, f"topk:{self.top_k}")
        return ",".join(parts)


GREEDY = SamplingPolicy(None, None)
DEFAULT_POLICY = SamplingPolicy()


def parse_policy(text: str) -> SamplingPolicy:
    """``greedy``, ``temp:T``, ``topk:K`` or a comma-joined ``topk:K,temp:T``."""
    text = text.strip().lower()
    if text == "greedy":
        return GREEDY
    temperature, top_k = 1.0, None
    for part in text.split(","):
        key, _, value = part.partition(":")
        try:
            if key in ("temp", "temperature"):
                temperature = float(value)
            elif key in ("topk", "top_k"):
                top_k = int(value)
            else:
                raise PolicyInvalid(f"unknown sampling policy {part!r}")
        except ValueError:
            raise PolicyInvalid(f"bad value in sampling policy {part!r}") from None
    return SamplingPolicy(temperature, top_k)


def select_token(logits, policy: SamplingPolicy, rng) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if policy.greedy or policy.top_k == 1:
        return int(argmax_predictions(logits))
    z = logits / policy.temperature
    if policy.top_k is not None and policy.top_k < len(z):
        # stable sort keeps the lowest ids among equal logits
        keep = np.argsort(-z, kind="stable")[: policy.top_k]
        masked = np.full_like(z, -np.inf)
        masked[keep] = z[keep]
        z = masked
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def chunk_codes(codes: AudioCodes, segment_s: float = 30.0, delta_ms: float | None = None) -> list[AudioCodes]:
    """Consecutive non-overlapping windows of ``segment_s``; the last may be shorter.

    ``delta_ms`` is accepted for symmetry with the grid and only checked to
    divide the window evenly.
    """
    per = codes.frame_rate_hz * segment_s
    frames = int(round(per))
    if frames < 1 or abs(per - frames) > 1e-6 * max(per, 1.0):
        raise ValueError(f"{segment_s} s is not a whole number of {codes.frame_rate_hz} Hz frames")
    if delta_ms is not None and abs(segment_s * 1000.0 / delta_ms - round(segment_s * 1000.0 / delta_ms)) > 1e-6:
        raise ValueError(f"{segment_s} s is not a whole number of {delta_ms} ms steps")
    return [codes.slice_frames(i, i + frames) for i in range(0, codes.n_frames, frames)]


def sample_window(model, codes: AudioCodes, n_steps: int, policy: SamplingPolicy, rng) -> np.ndarray:
    """Up to ``n_steps`` tokens after BOS; stops early on EOS and pads the rest."""
    out = np.full(n_steps, PAD, dtype=np.uint8)
    state = model.start_decoding(codes, max_len=n_steps + 1)
    token = BOS
    for i in range(n_steps):
        logits = np.array(model.decode_step(state, token), dtype=np.float64)
        logits[BOS] = -np.inf
        token = select_token(logits, policy, rng)
        if token == EOS:
            break
        out[i] = token
    return out


def sample_chart(
    model,
    codes: AudioCodes | None,
    delta_ms: float = 40.0,
    policy: SamplingPolicy = DEFAULT_POLICY,
    seed: int = 0,
    segment_s: float = 30.0,
    metadata: ChartMetadata | None = None,
) -> Chart:
    """Generate a chart window by window; windows do not see each other's tokens.

    Window ``w`` draws from its own generator seeded by ``(seed, w)``.
    """
    if not model.config.conditioned:
        raise RegimeMismatch("chart sampling needs an audio-conditioned model")
    if codes is None:
        raise MissingCodes("no audio codes to generate from")
    notes = []
    for w, window in enumerate(chunk_codes(codes, segment_s, delta_ms)):
        steps = n_bins(window.duration_s, delta_ms)
        if steps == 0:
            continue
        rng = np.random.default_rng([seed, w])
        tokens = sample_window(model, window, steps, policy, rng)
        notes += grid_decode(GridSequence(delta_ms, tokens, w * segment_s))
    meta = metadata or ChartMetadata(title="generated", artist="", genre="", difficulty="Expert")
    return Chart(meta, OUTPUT_RESOLUTION, OUTPUT_TEMPO, notes)


def grid_tokens_of(chart: Chart, codes: AudioCodes, delta_ms: float, segment_s: float = 30.0) -> list[np.ndarray]:
    """Reference token windows of ``chart`` aligned with :func:`sample_chart`'s windows."""
    out = []
    for w, window in enumerate(chunk_codes(codes, segment_s, delta_ms)):
        t0 = w * segment_s
        if n_bins(window.duration_s, delta_ms) == 0:
            continue
        out.append(grid_encode(chart, delta_ms, (t0, t0 + window.duration_s)).tokens)
    return out
