"""Corpus statistics: difficulty breakdown, note density, sustains, genres."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .chart_io import DIFFICULTIES, Chart
from .errors import EmptyCorpus
from .time_grid import chart_end_s


@dataclass
class DifficultyStats:
    n_charts: int
    share_pct: float
    mean_notes_per_song: float
    mean_notes_per_min: float
    sustain_pct: float
    mean_duration_min: float
    n_outliers: int = 0


@dataclass
class CorpusReport:
    difficulties: dict = field(default_factory=dict)
    genres: list = field(default_factory=list)  # (genre, percent), most frequent first
    n_charts: int = 0

    def to_dict(self) -> dict:
        return {
            "n_charts": self.n_charts,
            "difficulties": {k: asdict(v) for k, v in self.difficulties.items()},
            "genres": [{"genre": g, "percent": p} for g, p in self.genres],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'Diff.':<8}{'%':>7}{'Notes/Song':>12}{'Notes/min':>11}{'Sustain%':>10}{'Dur(min)':>10}"]
        for name, row in self.difficulties.items():
            lines.append(
                f"{name:<8}{row.share_pct:>7.1f}{row.mean_notes_per_song:>12.0f}"
                f"{row.mean_notes_per_min:>11.1f}{row.sustain_pct:>10.1f}{row.mean_duration_min:>10.2f}"
            )
        if self.genres:
            lines.append("")
            lines += [f"{g:<24}{p:>6.1f}%" for g, p in self.genres]
        return "\n".join(lines) + "\n"


def song_duration_s(chart: Chart) -> float:
    """The ``Length`` key of the song section (seconds) if present, else the last note's end."""
    raw = chart.metadata.extra.get("Length")
    if raw is not None:
        try:
            return float(str(raw).strip().strip('"'))
        except ValueError:
            pass
    return chart_end_s(chart)


def group_genre(genre: str) -> str:
    """Collapse every subgenre mentioning rock or metal onto that word."""
    g = genre.strip().lower()
    if "rock" in g:
        return "rock"
    if "metal" in g:
        return "metal"
    return g or "unknown"


def corpus_report(
    charts: Sequence[Chart],
    duration_cap_min: float = 15.0,
    top_genres: int = 15,
) -> CorpusReport:
    """Table-style summary of a chart corpus.

    Charts longer than ``duration_cap_min`` count towards the difficulty shares
    but are left out of every mean. Durations come from :func:`song_duration_s`.
    """
    if not charts:
        raise EmptyCorpus("no charts to summarise")
    by_diff: dict[str, list[Chart]] = {}
    for chart in charts:
        by_diff.setdefault(chart.metadata.difficulty, []).append(chart)

    order = [d for d in DIFFICULTIES if d in by_diff] + sorted(set(by_diff) - set(DIFFICULTIES))
    rows = {}
    for diff in order:
        group = by_diff[diff]
        durations = np.array([song_duration_s(c) / 60.0 for c in group])
        inliers = [c for c, d in zip(group, durations) if d <= duration_cap_min]
        n_notes = np.array([len(c.notes) for c in inliers], dtype=float)
        mins = np.array([song_duration_s(c) / 60.0 for c in inliers])
        rates = n_notes[mins > 0] / mins[mins > 0]
        notes = [n for c in inliers for n in c.notes]
        rows[diff] = DifficultyStats(
            n_charts=len(group),
            share_pct=100.0 * len(group) / len(charts),
            mean_notes_per_song=float(n_notes.mean()) if len(n_notes) else 0.0,
            mean_notes_per_min=float(rates.mean()) if len(rates) else 0.0,
            sustain_pct=100.0 * sum(n.sustain_s > 0 for n in notes) / len(notes) if notes else 0.0,
            mean_duration_min=float(mins.mean()) if len(mins) else 0.0,
            n_outliers=len(group) - len(inliers),
        )

    songs = {(c.metadata.title, c.metadata.artist): c.metadata.genre for c in charts}
    counts = Counter(group_genre(g) for g in songs.values())
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_genres]
    genres = [(g, 100.0 * n / total) for g, n in ranked]
    return CorpusReport(rows, genres, len(charts))


def genre_counts(genres: Sequence[str]) -> dict[str, int]:
    return dict(Counter(group_genre(g) for g in genres))


def write_columns(rows, path, header: tuple[str, str] | None = None) -> None:
    """Dump ``(x, y)`` pairs as a tab-separated two-column file."""
    lines = [f"{header[0]}\t{header[1]}"] if header else []
    lines += [f"{x}\t{y}" for x, y in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
