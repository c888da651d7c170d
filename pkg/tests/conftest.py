import numpy as np
import pytest

from chartgen.chart_io import Chart, ChartMetadata, NoteEvent, TempoEvent


def chart_text(track_lines, resolution=192, sync_lines=("0 = B 120000",), song_lines=(), section="ExpertSingle"):
    """Minimal chart file text around the given track body lines."""
    out = ["[Song]", "{", f"  Resolution = {resolution}", *(f"  {s}" for s in song_lines), "}"]
    out += ["[SyncTrack]", "{", *(f"  {s}" for s in sync_lines), "}"]
    out += [f"[{section}]", "{", *(f"  {s}" for s in track_lines), "}"]
    return "\n".join(out) + "\n"


def make_chart(times, frets=None, sustains=None, difficulty="Expert", genre="rock", title="t", length_s=None):
    frets = frets or [{0}] * len(times)
    sustains = sustains or [0.0] * len(times)
    extra = {} if length_s is None else {"Length": f"{length_s:g}"}
    meta = ChartMetadata(title=title, artist="a", genre=genre, difficulty=difficulty, extra=extra)
    notes = [NoteEvent(float(t), frozenset(f), float(s)) for t, f, s in zip(times, frets, sustains)]
    return Chart(meta, 480, (TempoEvent(0, 125000),), notes)


def random_valid_chart(rng, n_notes, min_gap_s, step_s=0.001, max_token=63):
    """Random chart whose onsets sit on a ``step_s`` lattice at least ``min_gap_s`` apart."""
    from chartgen.tokenizer import decode_token

    gaps = min_gap_s + rng.integers(0, 200, size=n_notes) * step_s
    times = np.round(np.cumsum(gaps) - gaps[0], 6)
    tokens = rng.integers(1, max_token + 1, size=n_notes)
    return make_chart(times.tolist(), [decode_token(int(t)) for t in tokens])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
