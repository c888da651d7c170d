"""Reading and writing song directories.

A song directory holds ``NAME.chart`` files, each optionally paired with
``NAME.a2cc`` (precomputed codes) and/or ``NAME.wav``. Codes are taken from
the ``.a2cc`` file when it exists and computed from the waveform otherwise.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable

from .audio import (
    DEFAULT_CODEBOOK_SIZE,
    DEFAULT_FRAME_RATE,
    DEFAULT_N_Q,
    pseudo_codec_encode,
    read_codes,
    read_wave,
    write_codes,
    write_wave,
)
from .chart_io import Chart, parse_chart, parse_chart_sections, write_chart
from .errors import EmptyCorpus, MissingCodes
from .synth import SynthSong
from .training import Song


def chart_files(paths: Iterable) -> list[Path]:
    """Expand directories to their ``*.chart`` files, sorted by name."""
    out = []
    for p in map(Path, paths):
        out += sorted(p.glob("*.chart")) if p.is_dir() else [p]
    return out


def _read_sections(path) -> list[Chart]:
    return list(parse_chart_sections(Path(path).read_text(encoding="utf-8")).values())


def parallel_map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def load_all_tracks(paths: Iterable, workers: int = 1) -> list[Chart]:
    """Every track of every chart file under ``paths``."""
    files = chart_files(paths)
    return [c for charts in parallel_map(_read_sections, files, workers) for c in charts]


def _load_song(args) -> Song:
    path, section, need_codes, frame_rate, n_q, codebook_size, seed = args
    chart = parse_chart(path.read_text(encoding="utf-8"), section=section)
    codes, duration = None, None
    codes_path, wav_path = path.with_suffix(".a2cc"), path.with_suffix(".wav")
    if codes_path.exists():
        codes = read_codes(codes_path)
    elif wav_path.exists():
        wave = read_wave(wav_path)
        duration = wave.duration_s
        if need_codes:
            codes = pseudo_codec_encode(wave, frame_rate, n_q, codebook_size, seed)
    if need_codes and codes is None:
        raise MissingCodes(f"{path.name}: no .a2cc or .wav next to the chart")
    if duration is None and "Length" in chart.metadata.extra:
        duration = float(chart.metadata.extra["Length"])
    return Song(path.stem, chart, codes if need_codes else None, duration)


def load_corpus(
    data_dir,
    need_codes: bool,
    section: str | None = None,
    frame_rate_hz: float = DEFAULT_FRAME_RATE,
    n_q: int = DEFAULT_N_Q,
    codebook_size: int = DEFAULT_CODEBOOK_SIZE,
    codec_seed: int = 0,
    workers: int = 1,
) -> list[Song]:
    """One :class:`Song` per chart file; the song id is the file stem."""
    files = chart_files([data_dir])
    if not files:
        raise EmptyCorpus(f"no .chart files in {data_dir}")
    jobs = [(f, section, need_codes, frame_rate_hz, n_q, codebook_size, codec_seed) for f in files]
    return parallel_map(_load_song, jobs, workers)


def write_synth_songs(songs: list[SynthSong], out_dir, with_codes: bool = False, codec_seed: int = 0) -> list[Path]:
    """``NAME.chart`` + ``NAME.wav`` (+ ``NAME.a2cc``) per song; returns the chart paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, song in enumerate(songs):
        stem = out_dir / f"song_{i:04d}"
        write_chart(song.chart, stem.with_suffix(".chart"))
        write_wave(song.wave, stem.with_suffix(".wav"))
        if with_codes:
            # encode the 16-bit file, not the float signal, so the codes match `codes` on the .wav
            wave = read_wave(stem.with_suffix(".wav"))
            write_codes(pseudo_codec_encode(wave, seed=codec_seed), stem.with_suffix(".a2cc"))
        paths.append(stem.with_suffix(".chart"))
    return paths
