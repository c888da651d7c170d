"""Reading and writing text charts.

The dialect is a simplified form of the community ``.chart`` layout::

    [Song]
    {
      Name = "Title"
      Resolution = 192
    }
    [SyncTrack]
    {
      0 = B 120000
    }
    [ExpertSingle]
    {
      192 = N 0 0
      192 = N 5 0
      192 = S 2 384
    }

Note lines are ``<tick> = N <fret> <sustain_ticks>``. Fret indices 0-4 are the
coloured buttons and 7 is the open note; 5 and 6 are markers that flag the
co-located note as HOPO and tap respectively. ``S 2 <len>`` is a star power
phrase covering ticks ``[tick, tick + len)``.

Ticks only exist at this boundary: every :class:`NoteEvent` carries absolute
seconds derived through the tempo map.
"""

from __future__ import annotations

import bisect
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    MalformedLine,
    MissingSection,
    NonMonotonicTempo,
    UnknownFretIndex,
)

logger = logging.getLogger(__name__)

OPEN = 7
FRET_INDICES = (0, 1, 2, 3, 4, OPEN)
HOPO_MARKER = 5
TAP_MARKER = 6
STAR_POWER_PHRASE = 2

DIFFICULTIES = ("Expert", "Hard", "Medium", "Easy")
INSTRUMENT_SUFFIXES = {
    "Single": "guitar",
    "DoubleBass": "bass",
    "Drums": "drums",
    "Keyboard": "keys",
}
SUFFIX_FOR_INSTRUMENT = {v: k for k, v in INSTRUMENT_SUFFIXES.items()}

# sections that are understood but carry nothing we model
_IGNORED_SECTIONS = {"Events"}

_RE_HEADER = re.compile(r"^\[(.+)\]$")
_RE_KV = re.compile(r"^(\S+)\s*=\s*(.*)$")
_RE_EVENT = re.compile(r"^(\d+)\s*=\s*([A-Za-z]+)\s*(.*)$")


@dataclass(frozen=True)
class TempoEvent:
    tick: int
    bpm_milli: int


@dataclass(frozen=True)
class NoteEvent:
    """One onset: a non-empty fret set plus gameplay attributes."""

    time_s: float
    frets: frozenset
    sustain_s: float = 0.0
    hopo: bool = False
    tap: bool = False
    star_power: bool = False

    def __post_init__(self):
        if not isinstance(self.frets, frozenset):
            object.__setattr__(self, "frets", frozenset(self.frets))


@dataclass
class ChartMetadata:
    title: str = ""
    artist: str = ""
    genre: str = ""
    instrument: str = "guitar"
    difficulty: str = "Expert"
    # unrecognised [Song] keys, raw right-hand side kept verbatim
    extra: dict = field(default_factory=dict)


@dataclass
class Chart:
    metadata: ChartMetadata = field(default_factory=ChartMetadata)
    resolution: int = 192
    tempo_map: tuple = (TempoEvent(0, 120000),)
    notes: list = field(default_factory=list)

    @property
    def section_name(self) -> str:
        suffix = SUFFIX_FOR_INSTRUMENT.get(self.metadata.instrument, "Single")
        return f"{self.metadata.difficulty}{suffix}"

    def onsets(self) -> list[float]:
        return [n.time_s for n in self.notes]


# ---------------------------------------------------------------------------
# tempo map
# ---------------------------------------------------------------------------


def _validate_tempo_map(tempo_map: Sequence[TempoEvent]) -> None:
    if not tempo_map:
        raise NonMonotonicTempo("tempo map is empty")
    if tempo_map[0].tick != 0:
        raise NonMonotonicTempo(f"first tempo event at tick {tempo_map[0].tick}, expected 0")
    for prev, cur in zip(tempo_map, tempo_map[1:]):
        if cur.tick <= prev.tick:
            raise NonMonotonicTempo(f"tempo ticks not increasing: {prev.tick} -> {cur.tick}")
    for ev in tempo_map:
        if ev.bpm_milli <= 0:
            raise NonMonotonicTempo(f"non-positive tempo {ev.bpm_milli} at tick {ev.tick}")


class _TempoIndex:
    """Cumulative seconds at each tempo change, for O(log n) conversions."""

    def __init__(self, resolution: int, tempo_map: Sequence[TempoEvent]):
        _validate_tempo_map(tempo_map)
        self.resolution = resolution
        self.ticks = [ev.tick for ev in tempo_map]
        self.bpms = [ev.bpm_milli for ev in tempo_map]
        self.starts = [0.0]
        for i in range(1, len(tempo_map)):
            self.starts.append(self.starts[-1] + self._span(self.ticks[i] - self.ticks[i - 1], self.bpms[i - 1]))

    def _span(self, dtick: float, bpm_milli: int) -> float:
        return dtick / self.resolution * 60000.0 / bpm_milli

    def seconds(self, tick: float) -> float:
        i = bisect.bisect_right(self.ticks, tick) - 1
        i = max(i, 0)
        return self.starts[i] + self._span(tick - self.ticks[i], self.bpms[i])

    def tick(self, seconds: float) -> int:
        i = bisect.bisect_right(self.starts, seconds) - 1
        i = max(i, 0)
        beats = (seconds - self.starts[i]) * self.bpms[i] / 60000.0
        return self.ticks[i] + int(round(beats * self.resolution))


def ticks_to_seconds(tick: int, resolution: int, tempo_map: Sequence[TempoEvent]) -> float:
    """Absolute time of ``tick``, integrating piecewise-constant tempo."""
    return _TempoIndex(resolution, tempo_map).seconds(tick)


def seconds_to_ticks(time_s: float, resolution: int, tempo_map: Sequence[TempoEvent]) -> int:
    """Nearest tick to ``time_s``; inverse of :func:`ticks_to_seconds`."""
    return _TempoIndex(resolution, tempo_map).tick(time_s)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _split_sections(text: str) -> list[tuple[str, list[tuple[int, str]]]]:
    sections = []
    current = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip().lstrip("﻿")
        if not line:
            continue
        m = _RE_HEADER.match(line)
        if m:
            current = (m.group(1).strip(), [])
            sections.append(current)
            continue
        if line in ("{", "}"):
            continue
        if current is None:
            raise MalformedLine(line_no, line, "content outside any section")
        current[1].append((line_no, line))
    return sections


def _unquote(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] == '"':
        return value[1:-1]
    return value


def _parse_song(lines, metadata: ChartMetadata) -> int:
    resolution = None
    for line_no, line in lines:
        m = _RE_KV.match(line)
        if not m:
            raise MalformedLine(line_no, line, "expected key = value")
        key, raw = m.group(1), m.group(2).strip()
        if key == "Resolution":
            try:
                resolution = int(_unquote(raw))
            except ValueError:
                raise MalformedLine(line_no, line, "resolution must be an integer") from None
            if resolution <= 0:
                raise MalformedLine(line_no, line, "resolution must be positive")
        elif key == "Name":
            metadata.title = _unquote(raw)
        elif key == "Artist":
            metadata.artist = _unquote(raw)
        elif key == "Genre":
            metadata.genre = _unquote(raw)
        else:
            metadata.extra[key] = raw
    if resolution is None:
        raise MissingSection("[Song] has no Resolution")
    return resolution


def _parse_sync(lines) -> list[TempoEvent]:
    tempo = []
    for line_no, line in lines:
        m = _RE_EVENT.match(line)
        if not m:
            raise MalformedLine(line_no, line)
        tick, kind, rest = int(m.group(1)), m.group(2), m.group(3).split()
        if kind == "B":
            if len(rest) != 1 or not rest[0].isdigit() or int(rest[0]) <= 0:
                raise MalformedLine(line_no, line, "tempo must be a positive integer")
            if tempo and tick <= tempo[-1].tick:
                raise NonMonotonicTempo(f"line {line_no}: tick {tick} after {tempo[-1].tick}")
            tempo.append(TempoEvent(tick, int(rest[0])))
        # time signatures (TS) and anchors (A) do not affect absolute time
    if not tempo:
        raise MissingSection("[SyncTrack] has no tempo events")
    _validate_tempo_map(tempo)
    return tempo


def _parse_track(lines, resolution, tempo_map, offset_s) -> list[NoteEvent]:
    by_tick: dict[int, dict] = {}
    phrases = []
    for line_no, line in lines:
        m = _RE_EVENT.match(line)
        if not m:
            raise MalformedLine(line_no, line)
        tick, kind, rest = int(m.group(1)), m.group(2), m.group(3).split()
        if kind == "N":
            if len(rest) != 2 or not all(p.isdigit() for p in rest):
                raise MalformedLine(line_no, line, "expected N <fret> <sustain>")
            index, sustain = int(rest[0]), int(rest[1])
            slot = by_tick.setdefault(tick, {"frets": set(), "sustain": 0, "hopo": False, "tap": False})
            if index in FRET_INDICES:
                slot["frets"].add(index)
                slot["sustain"] = max(slot["sustain"], sustain)
            elif index == HOPO_MARKER:
                slot["hopo"] = True
            elif index == TAP_MARKER:
                slot["tap"] = True
            else:
                raise UnknownFretIndex(f"line {line_no}: fret index {index}")
        elif kind == "S":
            if len(rest) != 2 or not all(p.isdigit() for p in rest):
                raise MalformedLine(line_no, line, "expected S <type> <length>")
            if int(rest[0]) == STAR_POWER_PHRASE:
                phrases.append((tick, tick + int(rest[1])))
        elif kind == "E":
            continue
        else:
            raise MalformedLine(line_no, line, f"unknown event type {kind!r}")

    index = _TempoIndex(resolution, tempo_map)
    phrases.sort()
    starts = [p[0] for p in phrases]
    notes = []
    for tick in sorted(by_tick):
        slot = by_tick[tick]
        if not slot["frets"]:
            logger.warning("flag marker at tick %d without a note; ignored", tick)
            continue
        i = bisect.bisect_right(starts, tick) - 1
        # phrases may overlap, so scan back over every candidate start
        star = any(phrases[j][0] <= tick < phrases[j][1] for j in range(i, -1, -1))
        t0 = index.seconds(tick)
        t1 = index.seconds(tick + slot["sustain"])
        notes.append(
            NoteEvent(
                time_s=t0 + offset_s,
                frets=frozenset(slot["frets"]),
                sustain_s=t1 - t0,
                hopo=slot["hopo"],
                tap=slot["tap"],
                star_power=star,
            )
        )
    return notes


def _difficulty_of(section: str):
    for diff in DIFFICULTIES:
        if section.startswith(diff):
            suffix = section[len(diff):]
            if suffix in INSTRUMENT_SUFFIXES:
                return diff, INSTRUMENT_SUFFIXES[suffix]
    return None


def parse_chart_sections(text: str, offset_s: float = 0.0) -> dict[str, Chart]:
    """Parse every instrument/difficulty track in ``text``.

    ``offset_s`` is added to every onset. The ``Offset`` key of the song
    section is preserved but never applied automatically.
    """
    sections = _split_sections(text)
    names = [name for name, _ in sections]
    if "Song" not in names:
        raise MissingSection("[Song]")
    if "SyncTrack" not in names:
        raise MissingSection("[SyncTrack]")

    base = ChartMetadata()
    resolution = _parse_song(dict(sections)["Song"], base)
    tempo_map = tuple(_parse_sync(dict(sections)["SyncTrack"]))

    charts: dict[str, Chart] = {}
    for name, lines in sections:
        if name in ("Song", "SyncTrack") or name in _IGNORED_SECTIONS:
            continue
        kind = _difficulty_of(name)
        if kind is None:
            logger.warning("skipping unknown section [%s]", name)
            continue
        meta = ChartMetadata(
            title=base.title,
            artist=base.artist,
            genre=base.genre,
            instrument=kind[1],
            difficulty=kind[0],
            extra=dict(base.extra),
        )
        charts[name] = Chart(
            metadata=meta,
            resolution=resolution,
            tempo_map=tempo_map,
            notes=_parse_track(lines, resolution, tempo_map, offset_s),
        )
    if not charts:
        raise MissingSection("no instrument/difficulty section")
    return charts


def parse_chart(text: str, section: str | None = None, offset_s: float = 0.0) -> Chart:
    """Parse one track of a chart file; the first track in file order by default."""
    charts = parse_chart_sections(text, offset_s=offset_s)
    if section is None:
        return next(iter(charts.values()))
    if section not in charts:
        raise MissingSection(f"[{section}]")
    return charts[section]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _quote(value: str) -> str:
    return '"' + value.replace('"', "'") + '"'


def _format_time_events(chart: Chart, index: _TempoIndex) -> list[str]:
    events: list[tuple[int, int, str]] = []
    phrase = None
    for note in chart.notes:
        tick = index.tick(note.time_s)
        sustain = max(index.tick(note.time_s + note.sustain_s) - tick, 0)
        for fret in sorted(note.frets):
            events.append((tick, 0, f"N {fret} {sustain}"))
        if note.hopo:
            events.append((tick, 0, f"N {HOPO_MARKER} 0"))
        if note.tap:
            events.append((tick, 0, f"N {TAP_MARKER} 0"))
        if note.star_power:
            phrase = [tick, tick] if phrase is None else [phrase[0], tick]
        elif phrase is not None:
            events.append((phrase[0], 1, f"S {STAR_POWER_PHRASE} {phrase[1] - phrase[0] + 1}"))
            phrase = None
    if phrase is not None:
        events.append((phrase[0], 1, f"S {STAR_POWER_PHRASE} {phrase[1] - phrase[0] + 1}"))
    events.sort(key=lambda e: (e[0], e[1]))
    return [f"  {tick} = {body}" for tick, _, body in events]


def serialize_chart(chart: Chart) -> str:
    """Render ``chart`` as chart-file text (LF line endings)."""
    index = _TempoIndex(chart.resolution, chart.tempo_map)
    meta = chart.metadata
    out = ["[Song]", "{"]
    out.append(f"  Name = {_quote(meta.title)}")
    out.append(f"  Artist = {_quote(meta.artist)}")
    out.append(f"  Genre = {_quote(meta.genre)}")
    out.append(f"  Resolution = {chart.resolution}")
    for key, raw in meta.extra.items():
        out.append(f"  {key} = {raw}")
    out += ["}", "[SyncTrack]", "{"]
    out += [f"  {ev.tick} = B {ev.bpm_milli}" for ev in chart.tempo_map]
    out += ["}", "[Events]", "{", "}", f"[{chart.section_name}]", "{"]
    out += _format_time_events(chart, index)
    out.append("}")
    return "\n".join(out) + "\n"


def serialize_charts(charts: Iterable[Chart]) -> str:
    """Render several tracks of the same song into one file.

    Song metadata, resolution and tempo map are taken from the first chart.
    """
    charts = list(charts)
    head = serialize_chart(Chart(charts[0].metadata, charts[0].resolution, charts[0].tempo_map, []))
    head = head[: head.rindex("[")]
    body = []
    for chart in charts:
        index = _TempoIndex(chart.resolution, chart.tempo_map)
        body += [f"[{chart.section_name}]", "{"] + _format_time_events(chart, index) + ["}"]
    return head + "\n".join(body) + "\n"


def read_chart(path, section: str | None = None, offset_s: float = 0.0) -> Chart:
    return parse_chart(Path(path).read_text(encoding="utf-8"), section=section, offset_s=offset_s)


def write_chart(chart: Chart, path) -> None:
    Path(path).write_text(serialize_chart(chart), encoding="utf-8")
