import json

import numpy as np
import pytest

from chartgen.audio import read_codes
from chartgen.chart_io import read_chart
from chartgen.cli import format_note_list, main
from chartgen.dataset import load_corpus
from chartgen.time_grid import read_tokens

from conftest import chart_text

SMALL_MODEL = ["--model-d-model", "16", "--model-n-layers", "1", "--model-n-heads", "2", "--model-d-ff", "32"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(out), "--n-songs", "6", "--duration-s", "6", "--seed", "3",
                 "--with-codes", "--workers", "1"]) == 0
    return out


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert main(["tokenize", "x.chart"]) == 2
    assert "--out" in capsys.readouterr().err


def test_domain_error_is_reported(tmp_path, capsys):
    bad = tmp_path / "bad.chart"
    bad.write_text(chart_text(["0 = N 9 0"]))
    assert main(["tokenize", str(bad), "--out", str(tmp_path / "t.txt")]) == 1
    assert "UnknownFretIndex" in capsys.readouterr().err
    assert main(["eval", "--data", str(tmp_path / "nowhere"), "--checkpoint", str(bad)]) == 1


def test_tokenize_detokenize_round_trip(tmp_path):
    src = tmp_path / "song.chart"
    src.write_text(chart_text(["0 = N 0 0", "0 = N 1 0", "96 = N 7 0", "200 = N 4 50", "384 = N 2 0"],
                              sync_lines=("0 = B 120000", "192 = B 90000")))
    assert main(["tokenize", str(src), "--out", str(tmp_path / "t.txt")]) == 0
    assert main(["detokenize", str(tmp_path / "t.txt"), "--out", str(tmp_path / "n.txt"),
                 "--chart-out", str(tmp_path / "back.chart")]) == 0
    expected = format_note_list(read_chart(src).notes)
    assert (tmp_path / "n.txt").read_text() == expected
    back = read_chart(tmp_path / "back.chart")
    assert [n.frets for n in back.notes] == [n.frets for n in read_chart(src).notes]


def test_grid_encode_decode(tmp_path, capsys):
    src = tmp_path / "song.chart"
    src.write_text(chart_text(["0 = N 0 0", "192 = N 1 0"]))
    assert main(["grid-encode", str(src), "--delta-ms", "40", "--start-s", "0", "--end-s", "1",
                 "--out", str(tmp_path / "g.a2ct")]) == 0
    assert "tokens=25" in capsys.readouterr().out
    seq = read_tokens(tmp_path / "g.a2ct")
    assert np.flatnonzero(seq.tokens).tolist() == [0, 13]
    assert main(["grid-decode", str(tmp_path / "g.a2ct"), "--out", str(tmp_path / "d.chart")]) == 0
    notes = read_chart(tmp_path / "d.chart").notes
    assert [n.time_s for n in notes] == pytest.approx([0.0, 0.52])


def test_stats_at_expert_density(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert main(["synth", "--out-dir", str(out), "--n-songs", "3", "--duration-s", "60", "--seed", "1"]) == 0
    capsys.readouterr()
    assert main(["stats", str(out), "--json", "--workers", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(report["difficulties"]["Expert"]["mean_notes_per_min"] - 294.8) <= 0.5


def test_ioi_cdf(synth_dir, tmp_path, capsys):
    assert main(["ioi-cdf", str(synth_dir), "--out", str(tmp_path / "cdf.tsv"), "--json", "--workers", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["min_ioi_s"] >= 0.04 - 1e-9
    assert summary["fraction_at_20ms"] == 0.0
    lines = (tmp_path / "cdf.tsv").read_text().splitlines()
    assert lines[0] == "ioi_s\tcdf" and lines[-1].endswith("\t1.0")


def test_synth_is_seeded(synth_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--out-dir", str(again), "--n-songs", "6", "--duration-s", "6", "--seed", "3",
                 "--with-codes"]) == 0
    for name in ("song_0002.chart", "song_0002.wav", "song_0002.a2cc"):
        assert (again / name).read_bytes() == (synth_dir / name).read_bytes()


def test_codes_match_synth_codes(synth_dir, tmp_path, capsys):
    assert main(["codes", str(synth_dir / "song_0001.wav"), "--out", str(tmp_path / "c.a2cc")]) == 0
    assert "frames=300" in capsys.readouterr().out
    assert (tmp_path / "c.a2cc").read_bytes() == (synth_dir / "song_0001.a2cc").read_bytes()
    assert main(["codes", str(synth_dir / "song_0001.wav"), str(synth_dir / "song_0002.wav")]) == 2


def test_load_corpus_prefers_code_files(synth_dir):
    songs = load_corpus(synth_dir, need_codes=True)
    assert [s.song_id for s in songs] == [f"song_{i:04d}" for i in range(6)]
    assert np.array_equal(songs[0].codes.codes, read_codes(synth_dir / "song_0000.a2cc").codes)
    assert songs[0].length_s == pytest.approx(6)
    assert load_corpus(synth_dir, need_codes=False)[0].codes is None


def test_train_eval_ablate_generate(synth_dir, tmp_path, capsys):
    ckpt, log = tmp_path / "m.a2ck", tmp_path / "log.tsv"
    config = tmp_path / "train.cfg"
    config.write_text("segment_s = 6\nbatch_size = 2\nmax_steps = 6\nval_fraction = 0.34\nablate_every = 3\n")
    assert main(["train", "--data", str(synth_dir), "--out", str(ckpt), "--log", str(log), "--config", str(config),
                 "--workers", "1", *SMALL_MODEL]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 7  # step-0 ablation row plus six updates
    assert len(log.read_text().splitlines()) == 6

    assert main(["eval", "--data", str(synth_dir), "--checkpoint", str(ckpt), "--split", "all", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["perplexity_full"] >= 1 and report["n_charts"] == 6

    assert main(["ablate", "--data", str(synth_dir), "--checkpoint", str(ckpt), "--split", "all",
                 "--json"]) == 0
    assert "mean_rel_diff" in json.loads(capsys.readouterr().out)

    out = tmp_path / "gen.chart"
    args = ["generate", "--audio", str(synth_dir / "song_0000.wav"), "--checkpoint", str(ckpt), "--delta-ms", "40",
            "--policy", "topk:16", "--seed", "4", "--out", str(out)]
    assert main(args) == 0
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first
    read_chart(out)
    assert main(["generate", "--checkpoint", str(ckpt), "--out", str(out)]) == 2
    assert main(["generate", "--codes", str(synth_dir / "song_0000.a2cc"), "--checkpoint", str(ckpt),
                 "--policy", "temp:0", "--out", str(out)]) == 1


def test_sweep_context(tmp_path, capsys):
    data = tmp_path / "loops"
    data.mkdir()
    from chartgen.chart_io import write_chart
    from chartgen.synth import synth_repetitive_charts

    for i, chart in enumerate(synth_repetitive_charts(5, 40, 8, seed=1)):
        write_chart(chart, data / f"loop_{i}.chart")
    assert main(["sweep-context", "--data", str(data), "--contexts", "8,16", "--max-steps", "2",
                 "--val-fraction", "0.3", "--json", *SMALL_MODEL]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["context"] for r in rows] == [8, 16]
