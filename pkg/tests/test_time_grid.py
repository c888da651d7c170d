import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartgen.errors import BadMagic, BinCollision, ShapeMismatch, TooFewNotes, WindowEmpty
from chartgen.time_grid import (
    GridSequence,
    filter_by_resolution,
    grid_decode,
    grid_encode,
    ioi_cdf,
    n_bins,
    read_tokens,
    tokens_from_bytes,
    tokens_to_bytes,
    write_tokens,
)
from chartgen.tokenizer import PAD, encode_frets

from conftest import make_chart, random_valid_chart


def test_nearest_bin_examples():
    chart = make_chart([0.0, 0.05])
    assert np.flatnonzero(grid_encode(chart, 40, (0.0, 1.0)).tokens).tolist() == [0, 1]
    assert np.flatnonzero(grid_encode(chart, 20, (0.0, 1.0)).tokens).tolist() == [0, 3]


def test_empty_window_is_all_pad():
    seq = grid_encode(make_chart([]), 40, (0.0, 1.0))
    assert len(seq) == 25
    assert (seq.tokens == PAD).all()
    assert grid_decode(seq) == []


def test_zero_width_window():
    with pytest.raises(WindowEmpty):
        grid_encode(make_chart([0.0]), 40, (1.0, 1.0))


def test_collision():
    with pytest.raises(BinCollision) as err:
        grid_encode(make_chart([0.0, 0.01]), 40, (0.0, 1.0))
    assert err.value.bin_index == 0


def test_decode_places_note_on_bin():
    notes = grid_decode(GridSequence(40, [0, 1, 0]))
    assert len(notes) == 1
    assert notes[0].time_s == pytest.approx(0.04)
    assert notes[0].frets == {0}


def test_window_offset_and_partition():
    chart = make_chart([0.1, 1.02, 1.5, 2.9])
    left = grid_encode(chart, 40, (0.0, 1.0))
    right = grid_encode(chart, 40, (1.0, 3.0))
    assert (left.tokens != PAD).sum() + (right.tokens != PAD).sum() == 4
    assert [n.time_s for n in grid_decode(right)] == pytest.approx([1.04, 1.52, 2.92])  # 47.5 bins rounds up


def test_pad_fraction_identity(rng):
    chart = random_valid_chart(rng, 60, 0.04)
    seq = grid_encode(chart, 40)
    assert seq.pad_fraction == pytest.approx(1 - 60 / len(seq), abs=1e-12)


@pytest.mark.parametrize("delta", [20, 40])
def test_round_trip_random_charts(rng, delta):
    for _ in range(50):
        chart = random_valid_chart(rng, int(rng.integers(1, 80)), delta / 1000)
        decoded = grid_decode(grid_encode(chart, delta))
        assert len(decoded) == len(chart.notes)
        for a, b in zip(chart.notes, decoded):
            assert abs(a.time_s - b.time_s) <= delta / 2000 + 1e-9
            assert encode_frets(a.frets) == encode_frets(b.frets)


def test_ioi_cdf_examples():
    report = ioi_cdf([make_chart([0, 0.1, 0.25, 0.3])])
    assert report.min_ioi_s == pytest.approx(0.05)
    assert report.fraction_at(0.1) == pytest.approx(2 / 3)
    assert report.cdf[-1][1] == 1.0

    step = ioi_cdf([make_chart([0, 0.5, 1.0, 1.5])])
    assert step.fraction_at(0.49) == 0.0
    assert step.fraction_at(0.5) == 1.0


def test_ioi_cdf_pools_charts():
    a, b = make_chart([0, 0.1, 0.3]), make_chart([0, 0.05])
    pooled = sorted([0.1, 0.2, 0.05])
    report = ioi_cdf([a, b])
    for i, gap in enumerate(pooled):
        assert report.fraction_at(gap) == pytest.approx((i + 1) / 3)


def test_ioi_cdf_too_few_notes():
    with pytest.raises(TooFewNotes):
        ioi_cdf([make_chart([1.0])])
    assert ioi_cdf([make_chart([1.0]), make_chart([0, 1])], skip_short=True).min_ioi_s == 1.0


def test_filter_by_resolution():
    fast, slow = make_chart([0, 0.035]), make_chart([0, 0.045])
    result = filter_by_resolution([fast, slow], 40)
    assert result.kept == [slow] and result.excluded == [fast]


def test_filter_exclusion_fraction():
    charts = [make_chart([0, 0.1]) for _ in range(99)] + [make_chart([0, 0.03])]
    assert filter_by_resolution(charts, 40).excluded_fraction == pytest.approx(0.01, abs=0)


def test_bins_for_thirty_seconds():
    assert n_bins(30, 40) == 750
    assert n_bins(30, 20) == 1500


def test_token_file(tmp_path):
    seq = GridSequence(40, [0, 1, 63, 0])
    write_tokens(seq, tmp_path / "x.a2ct")
    back = read_tokens(tmp_path / "x.a2ct")
    assert back.resolution_ms == 40 and back.tokens.tolist() == [0, 1, 63, 0]
    with pytest.raises(BadMagic):
        tokens_from_bytes(b"XXXX" + tokens_to_bytes(seq)[4:])
    with pytest.raises(ShapeMismatch):
        tokens_from_bytes(tokens_to_bytes(seq)[:-1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 65), max_size=200), st.sampled_from([10, 20, 40, 12.5]))
def test_token_bytes_round_trip(tokens, delta):
    data = tokens_to_bytes(GridSequence(delta, tokens))
    assert tokens_to_bytes(tokens_from_bytes(data)) == data
