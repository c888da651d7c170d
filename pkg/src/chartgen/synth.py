"""Synthetic paired corpora where the audio fully determines the chart.

Every onset emits a short tone burst. Each of the six fret bits owns one
frequency, and a chord sounds all of its bits at once. Bursts start on frame
boundaries and the frequencies are whole multiples of the codec frame rate,
so a frame's stand-in codes depend only on the fret set and never on phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import DEFAULT_FRAME_RATE, DEFAULT_N_BANDS, Waveform, band_centers_hz
from .chart_io import Chart, ChartMetadata, NoteEvent, TempoEvent
from .errors import InfeasibleDensity
from .tokenizer import decode_token

# 480 ticks per beat at 125 BPM: one tick is exactly one millisecond
SYNTH_RESOLUTION = 480
SYNTH_TEMPO = (TempoEvent(0, 125000),)

GENRES = ("progressive rock", "thrash metal", "pop", "alternative rock", "death metal", "electronic")

# (mask, weight): mostly single frets, some adjacent chords, a few opens
DEFAULT_MASK_WEIGHTS = (
    (1, 0.12), (2, 0.12), (4, 0.12), (8, 0.12), (16, 0.12),
    (32, 0.05),
    (3, 0.06), (6, 0.06), (12, 0.06), (24, 0.06),
    (7, 0.04), (14, 0.04), (28, 0.03),
)


@dataclass
class SynthSong:
    chart: Chart
    wave: Waveform


def tone_frequencies(
    sample_rate_hz: int = 16000,
    frame_rate_hz: float = DEFAULT_FRAME_RATE,
    n_bands: int = DEFAULT_N_BANDS,
    lo_hz: float = 220.0,
    hi_hz: float = 1760.0,
) -> np.ndarray:
    """One frequency per fret bit: log-spaced targets snapped to band centres,
    then to the nearest multiple of the frame rate."""
    centres = band_centers_hz(sample_rate_hz, n_bands)
    out = []
    for target in np.geomspace(lo_hz, hi_hz, 6):
        centre = centres[np.argmin(np.abs(np.log(centres / target)))]
        freq = max(round(centre / frame_rate_hz), 1) * frame_rate_hz
        while freq in out:
            freq += frame_rate_hz
        out.append(freq)
    return np.array(out)


def draw_onsets(n_notes: int, duration_s: float, floor_s: float, step_s: float, rng) -> np.ndarray:
    """``n_notes`` sorted lattice times in ``[0, duration_s)`` spaced at least ``floor_s`` apart.

    Uniform over all valid configurations: pick ``n`` slots from a shrunken
    lattice, then re-insert the mandatory gaps.
    """
    slots = int(math.floor(duration_s / step_s + 1e-9))
    gap = max(int(math.ceil(floor_s / step_s - 1e-9)), 1)
    free = slots - (n_notes - 1) * (gap - 1)
    if n_notes > 0 and free < n_notes:
        raise InfeasibleDensity(
            f"{n_notes} notes with {floor_s * 1000:.0f} ms spacing do not fit in {duration_s} s"
        )
    if n_notes == 0:
        return np.zeros(0)
    picks = np.sort(rng.choice(free, size=n_notes, replace=False))
    return (picks + np.arange(n_notes) * (gap - 1)) * step_s


def render(
    notes,
    duration_s: float,
    sample_rate_hz: int,
    freqs,
    noise: float,
    burst_s: float,
    rng,
) -> Waveform:
    n = int(round(duration_s * sample_rate_hz))
    x = rng.normal(0.0, noise, n) if noise > 0 else np.zeros(n)
    length = int(round(burst_s * sample_rate_hz))
    t = np.arange(length) / sample_rate_hz
    envelope = np.ones(length)
    fade = max(length // 4, 1)
    envelope[-fade:] = np.linspace(1.0, 0.0, fade)
    bits = {0: 0, 1: 1, 2: 2, 3: 3, 4: 4, 7: 5}
    for note in notes:
        start = int(round(note.time_s * sample_rate_hz))
        stop = min(start + length, n)
        if stop <= start:
            continue
        amp = 0.5 / len(note.frets)
        burst = sum(np.sin(2 * np.pi * freqs[bits[f]] * t) for f in note.frets) * amp * envelope
        x[start:stop] += burst[: stop - start]
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate_hz)


def synth_corpus(
    n_songs: int,
    duration_s: float,
    notes_per_min: float,
    delta_floor_ms: float = 40.0,
    seed: int = 0,
    sample_rate_hz: int = 16000,
    frame_rate_hz: float = DEFAULT_FRAME_RATE,
    onset_step_s: float | None = None,
    noise: float = 1e-3,
    burst_s: float = 0.04,
    mask_weights=DEFAULT_MASK_WEIGHTS,
    difficulty: str = "Expert",
) -> list[SynthSong]:
    """Paired charts and waveforms with ``round(notes_per_min * duration / 60)`` notes each.

    Onsets sit on a lattice of ``onset_step_s`` (one codec frame by default)
    with every inter-onset interval at least ``delta_floor_ms``.
    """
    rng = np.random.default_rng(seed)
    step = onset_step_s or 1.0 / frame_rate_hz
    freqs = tone_frequencies(sample_rate_hz, frame_rate_hz)
    masks = np.array([m for m, _ in mask_weights])
    probs = np.array([w for _, w in mask_weights], dtype=float)
    probs /= probs.sum()
    n_notes = int(round(notes_per_min * duration_s / 60.0))
    songs = []
    for i in range(n_songs):
        onsets = draw_onsets(n_notes, duration_s - burst_s, delta_floor_ms / 1000.0, step, rng)
        chosen = rng.choice(masks, size=len(onsets), p=probs)
        notes = [NoteEvent(float(t), decode_token(int(m))) for t, m in zip(onsets, chosen)]
        meta = ChartMetadata(
            title=f"synth-{seed}-{i:04d}",
            artist="synth",
            genre=GENRES[i % len(GENRES)],
            difficulty=difficulty,
            extra={"Length": f"{duration_s:g}"},
        )
        chart = Chart(meta, SYNTH_RESOLUTION, SYNTH_TEMPO, notes)
        songs.append(SynthSong(chart, render(notes, duration_s, sample_rate_hz, freqs, noise, burst_s, rng)))
    return songs


def synth_repetitive_charts(
    n_songs: int,
    n_notes: int,
    period: int,
    seed: int = 0,
    palette_size: int = 63,
    spacing_s: float = 0.2,
) -> list[Chart]:
    """Charts that loop a song-specific random motif of ``period`` notes.

    Within a song, note ``i`` equals note ``i - period``; a model can only
    exploit this when its context spans more than one period. Each song draws
    its motif from a random palette of ``palette_size`` tokens.
    """
    rng = np.random.default_rng(seed)
    charts = []
    for i in range(n_songs):
        palette = rng.choice(np.arange(1, 64), size=palette_size, replace=False)
        motif = rng.choice(palette, size=period)
        seq = np.resize(motif, n_notes)
        notes = [NoteEvent(k * spacing_s, decode_token(int(m))) for k, m in enumerate(seq)]
        meta = ChartMetadata(title=f"loop-{seed}-{i:04d}", artist="synth", genre="rock")
        charts.append(Chart(meta, SYNTH_RESOLUTION, SYNTH_TEMPO, notes))
    return charts
