"""``chartgen`` command line: one subcommand per pipeline stage.

Every subcommand reads files and writes files. Randomness comes only from
``--seed``. ``--config FILE`` supplies ``key = value`` defaults; flags given on
the command line win. Failures print ``error: <ErrorName>: <message>`` and
exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import audio, chart_io, dataset, generate, metrics, stats, synth, time_grid, tokenizer, training
from .errors import ChartgenError
from .model import ModelConfig, save_checkpoint
from .model.checkpoint import model_from_bytes

log = logging.getLogger("chartgen")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser, cls, prefix: str = "", skip=()):
    """One string-valued flag per dataclass field; unset flags stay None."""
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for f in fields(cls):
        if f.name in skip:
            continue
        group.add_argument(_flag(prefix + f.name), dest=prefix + f.name, default=None, metavar=f.name.upper())


def _overrides(args, cls, prefix: str = "") -> dict:
    out = {}
    for f in fields(cls):
        value = getattr(args, prefix + f.name, None)
        if value is not None:
            out[f.name] = training.parse_value(value) if isinstance(value, str) else value
    return out


def _configs(args) -> tuple[training.TrainConfig, ModelConfig]:
    cfg, mcfg = training.TrainConfig(), ModelConfig()
    if args.config:
        t_over, m_over = training.parse_config_text(Path(args.config).read_text(encoding="utf-8"), strict=False)
        cfg = replace(cfg, **t_over)
        mcfg = ModelConfig.from_dict({**mcfg.to_dict(), **m_over})
    t_over = _overrides(args, training.TrainConfig)
    t_over["seed"] = args.seed
    cfg = replace(cfg, **t_over)
    m_over = _overrides(args, ModelConfig, "model_")
    m_over.setdefault("seed", args.seed)
    mcfg = ModelConfig.from_dict({**mcfg.to_dict(), **m_over})
    return cfg, mcfg


def _policy(name: str) -> tokenizer.TokenPolicy:
    return tokenizer.TokenPolicy(name)


def _emit(args, data: dict, text: str) -> None:
    body = json.dumps(data, indent=2, sort_keys=True) + "\n" if args.json else text
    if getattr(args, "out", None):
        Path(args.out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)


def _load_model(path):
    model, meta = model_from_bytes(Path(path).read_bytes())
    return model, training.config_from_meta(meta)


def format_note_list(notes) -> str:
    """``time_s<TAB>frets`` per note, frets space-separated in ascending order."""
    return "".join(f"{n.time_s:.6f}\t{tokenizer.format_frets(n.frets)}\n" for n in notes)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_stats(args):
    charts = dataset.load_all_tracks(args.charts, args.workers)
    report = stats.corpus_report(charts, args.duration_cap_min, args.top_genres)
    _emit(args, report.to_dict(), report.to_text())


def cmd_ioi_cdf(args):
    charts = [c for c in dataset.load_all_tracks(args.charts, args.workers)
              if args.section is None or c.section_name == args.section]
    report = time_grid.ioi_cdf(charts, skip_short=args.skip_short)
    stats.write_columns(report.cdf, args.out, header=("ioi_s", "cdf"))
    summary = {"min_ioi_s": report.min_ioi_s, "n_charts": len(charts)}
    for ms in args.at_ms:
        summary[f"fraction_at_{ms:g}ms"] = report.fraction_at(ms / 1000.0)
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        sys.stdout.write("".join(f"{k}={v}\n" for k, v in summary.items()))


def cmd_tokenize(args):
    chart = chart_io.read_chart(args.chart, section=args.section)
    policy = _policy(args.policy)
    lines = []
    for note in chart.notes:
        token = tokenizer.encode_frets(note.frets, policy)
        if token is not None:
            lines.append(f"{note.time_s:.6f}\t{token}\n")
    Path(args.out).write_text("".join(lines), encoding="utf-8")


def _read_token_lines(path):
    notes = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            time_s, token = line.split("\t")
            notes.append(chart_io.NoteEvent(float(time_s), tokenizer.decode_token(int(token))))
        except ValueError:
            raise UsageError(f"{path}:{n}: expected 'time<TAB>token'") from None
    return notes


def cmd_detokenize(args):
    notes = _read_token_lines(args.tokens)
    Path(args.out).write_text(format_note_list(notes), encoding="utf-8")
    if args.chart_out:
        chart = chart_io.Chart(chart_io.ChartMetadata(title=Path(args.tokens).stem), generate.OUTPUT_RESOLUTION,
                               generate.OUTPUT_TEMPO, notes)
        chart_io.write_chart(chart, args.chart_out)


def cmd_grid_encode(args):
    chart = chart_io.read_chart(args.chart, section=args.section)
    window = None
    if args.start_s is not None or args.end_s is not None:
        start = args.start_s or 0.0
        end = args.end_s if args.end_s is not None else time_grid.chart_end_s(chart) + args.delta_ms / 1000.0
        window = (start, end)
    seq = time_grid.grid_encode(chart, args.delta_ms, window, _policy(args.policy))
    time_grid.write_tokens(seq, args.out)
    print(f"tokens={len(seq)} pad_fraction={seq.pad_fraction:.4f}")


def cmd_grid_decode(args):
    seq = time_grid.read_tokens(args.tokens)
    notes = time_grid.grid_decode(seq)
    chart = chart_io.Chart(chart_io.ChartMetadata(title=Path(args.tokens).stem), generate.OUTPUT_RESOLUTION,
                           generate.OUTPUT_TEMPO, notes)
    chart_io.write_chart(chart, args.out)


def _encode_one(job):
    src, dst, frame_rate, n_q, codebook_size, seed = job
    codes = audio.pseudo_codec_encode(audio.read_wave(src), frame_rate, n_q, codebook_size, seed)
    audio.write_codes(codes, dst)
    return codes.n_frames


def cmd_codes(args):
    sources = [Path(p) for p in args.audio]
    if len(sources) > 1 and not args.out_dir:
        raise UsageError("--out-dir is required with several audio files")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        targets = [Path(args.out_dir) / (p.stem + ".a2cc") for p in sources]
    elif args.out:
        targets = [Path(args.out)]
    else:
        targets = [sources[0].with_suffix(".a2cc")]
    jobs = [(s, t, args.frame_rate, args.n_q, args.codebook_size, args.seed) for s, t in zip(sources, targets)]
    frames = dataset.parallel_map(_encode_one, jobs, args.workers)
    for t, n in zip(targets, frames):
        print(f"{t}\tframes={n}")


def cmd_synth(args):
    songs = synth.synth_corpus(args.n_songs, args.duration_s, args.notes_per_min, args.delta_floor_ms, args.seed)
    paths = dataset.write_synth_songs(songs, args.out_dir, with_codes=args.with_codes, codec_seed=args.codec_seed)
    print(f"wrote {len(paths)} songs to {args.out_dir}")


def _corpus_for(args, cfg, mcfg):
    return dataset.load_corpus(
        args.data, cfg.regime == "conditioned", args.section,
        n_q=mcfg.n_q, codebook_size=mcfg.codebook_size, codec_seed=args.codec_seed, workers=args.workers,
    )


def cmd_train(args):
    cfg, mcfg = _configs(args)
    corpus = _corpus_for(args, cfg, mcfg)
    result = training.train(corpus, cfg, mcfg, log_path=args.log, checkpoint_path=args.out)
    if not result.plan.val:
        save_checkpoint(result.model, args.out, training.checkpoint_meta(cfg, result.best_step, float("nan")))
    summary = {"steps": len(result.log), "best_step": result.best_step, "seconds": round(result.seconds, 2),
               "train_sequences": len(result.plan.train), "val_sequences": len(result.plan.val)}
    print(json.dumps(summary, sort_keys=True))


def _plan_for(args, model, cfg):
    corpus = dataset.load_corpus(
        args.data, cfg.regime == "conditioned", args.section,
        n_q=model.config.n_q, codebook_size=model.config.codebook_size, codec_seed=args.codec_seed,
        workers=args.workers,
    )
    return training.make_batches(corpus, cfg)


def _batches_for(plan, split):
    if split == "val":
        return plan.val_batches()
    if split == "train":
        return plan.eval_train_batches()
    return plan.eval_train_batches() + plan.val_batches()


def _checkpoint_cfg(args, stored):
    over = {}
    for key in ("delta_ms", "segment_s", "context_tokens", "batch_size", "val_fraction"):
        value = getattr(args, key, None)
        if value is not None:
            over[key] = value
    return replace(stored, seed=args.seed if args.seed is not None else stored.seed, **over)


def cmd_eval(args):
    model, stored = _load_model(args.checkpoint)
    cfg = _checkpoint_cfg(args, stored)
    plan = _plan_for(args, model, cfg)
    report = metrics.evaluate(model, _batches_for(plan, args.split))
    _emit(args, report.to_dict(), report.to_text())


def cmd_ablate(args):
    model, stored = _load_model(args.checkpoint)
    cfg = _checkpoint_cfg(args, stored)
    plan = _plan_for(args, model, cfg)
    batches = [b for b in _batches_for(plan, args.split) if b.size >= 2]
    diffs = training.ablate_audio(model, batches, seed=cfg.seed, pad_weight=cfg.effective_pad_weight)
    data = {"mean_rel_diff": float(np.mean(diffs)) if diffs else None, "rel_diff": diffs}
    text = "".join(f"{i}\t{d:.6f}\n" for i, d in enumerate(diffs)) + f"mean\t{data['mean_rel_diff']}\n"
    _emit(args, data, text)


def cmd_sweep_context(args):
    cfg, mcfg = _configs(args)
    cfg = replace(cfg, regime="baseline")
    corpus = dataset.load_corpus(args.data, False, args.section, workers=args.workers)
    contexts = [int(c) for c in args.contexts.split(",") if c.strip()]
    rows = training.context_sweep(corpus, contexts, cfg, mcfg)
    data = [{"context": r.context, "val_perplexity": r.val_perplexity, "val_accuracy": r.val_accuracy} for r in rows]
    text = "context\tval_perplexity\tval_accuracy\n" + "".join(
        f"{r.context}\t{r.val_perplexity:.6f}\t{r.val_accuracy:.6f}\n" for r in rows)
    body = json.dumps(data, indent=2) + "\n" if args.json else text
    if args.out:
        Path(args.out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)


def cmd_generate(args):
    model, stored = _load_model(args.checkpoint)
    if args.codes:
        codes = audio.read_codes(args.codes)
    elif args.audio:
        codes = audio.pseudo_codec_encode(audio.read_wave(args.audio), n_q=model.config.n_q,
                                          codebook_size=model.config.codebook_size, seed=args.codec_seed)
    else:
        raise UsageError("one of --audio or --codes is required")
    delta = args.delta_ms if args.delta_ms is not None else stored.delta_ms
    segment = args.segment_s if args.segment_s is not None else stored.segment_s
    title = Path(args.audio or args.codes).stem
    chart = generate.sample_chart(model, codes, delta, generate.parse_policy(args.policy), args.seed, segment,
                                  chart_io.ChartMetadata(title=title, artist="", genre=""))
    chart_io.write_chart(chart, args.out)
    print(f"notes={len(chart.notes)}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--config", help="key = value file with defaults for this command")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallel per-file workers")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="chartgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("stats", cmd_stats, "per-difficulty corpus statistics and genre shares")
    p.add_argument("charts", nargs="+", help="chart files or directories")
    p.add_argument("--duration-cap-min", type=float, default=15.0)
    p.add_argument("--top-genres", type=int, default=15)
    p.add_argument("--out")

    p = add("ioi-cdf", cmd_ioi_cdf, "cumulative distribution of inter-onset intervals")
    p.add_argument("charts", nargs="+")
    p.add_argument("--out", required=True, help="two-column TSV")
    p.add_argument("--section", help="only tracks with this section name, e.g. ExpertSingle")
    p.add_argument("--skip-short", action="store_true", help="ignore charts with fewer than two onsets")
    p.add_argument("--at-ms", type=float, nargs="*", default=[20.0, 40.0])

    p = add("tokenize", cmd_tokenize, "note tokens with their onset times")
    p.add_argument("chart")
    p.add_argument("--section")
    p.add_argument("--policy", choices=tokenizer.OPEN_PLUS_FRET_MODES, default="strip_open")
    p.add_argument("--out", required=True)

    p = add("detokenize", cmd_detokenize, "note list (and optionally a chart) from tokenize output")
    p.add_argument("tokens")
    p.add_argument("--out", required=True)
    p.add_argument("--chart-out")

    p = add("grid-encode", cmd_grid_encode, "chart to a binary token grid")
    p.add_argument("chart")
    p.add_argument("--section")
    p.add_argument("--delta-ms", type=float, default=40.0)
    p.add_argument("--start-s", type=float)
    p.add_argument("--end-s", type=float)
    p.add_argument("--policy", choices=tokenizer.OPEN_PLUS_FRET_MODES, default="strip_open")
    p.add_argument("--out", required=True)

    p = add("grid-decode", cmd_grid_decode, "binary token grid to a chart")
    p.add_argument("tokens")
    p.add_argument("--out", required=True)

    p = add("codes", cmd_codes, "stand-in codec: waveform to integer codes")
    p.add_argument("audio", nargs="+")
    p.add_argument("--out")
    p.add_argument("--out-dir")
    p.add_argument("--frame-rate", type=float, default=audio.DEFAULT_FRAME_RATE)
    p.add_argument("--n-q", type=int, default=audio.DEFAULT_N_Q)
    p.add_argument("--codebook-size", type=int, default=audio.DEFAULT_CODEBOOK_SIZE)

    p = add("synth", cmd_synth, "synthetic paired charts and waveforms")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-songs", type=int, default=10)
    p.add_argument("--duration-s", type=float, default=30.0)
    p.add_argument("--notes-per-min", type=float, default=294.8)
    p.add_argument("--delta-floor-ms", type=float, default=40.0)
    p.add_argument("--with-codes", action="store_true")
    p.add_argument("--codec-seed", type=int, default=0)

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument("--data", required=True, help="directory of NAME.chart (+ NAME.a2cc / NAME.wav)")
    data_args.add_argument("--section", help="track to use, e.g. ExpertSingle (first track by default)")
    data_args.add_argument("--codec-seed", type=int, default=0)

    p = sub.add_parser("train", parents=[common, data_args], help="train a model")
    p.set_defaults(func=cmd_train)
    p.add_argument("--out", required=True, help="checkpoint path (best validation loss)")
    p.add_argument("--log", help="per-step log: step, loss, lr[, rel_diff]")
    _add_config_flags(p, training.TrainConfig, skip=("seed",))
    _add_config_flags(p, ModelConfig, "model_", skip=("seed",))

    for name, fn, text in (("eval", cmd_eval, "full and non-pad perplexity/accuracy"),
                           ("ablate", cmd_ablate, "loss change when audio is shuffled across the batch")):
        p = sub.add_parser(name, parents=[common, data_args], help=text, description=text)
        p.set_defaults(func=fn)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("val", "train", "all"), default="val")
        p.add_argument("--delta-ms", type=float)
        p.add_argument("--segment-s", type=float)
        p.add_argument("--context-tokens", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--val-fraction", type=float)
        p.add_argument("--out")

    p = sub.add_parser("sweep-context", parents=[common, data_args], help="baseline accuracy per context length")
    p.set_defaults(func=cmd_sweep_context)
    p.add_argument("--contexts", default="128,256,512,1024")
    p.add_argument("--out")
    _add_config_flags(p, training.TrainConfig, skip=("seed", "regime", "context_tokens"))
    _add_config_flags(p, ModelConfig, "model_", skip=("seed",))

    p = add("generate", cmd_generate, "sample a chart from audio")
    p.add_argument("--audio")
    p.add_argument("--codes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--delta-ms", type=float)
    p.add_argument("--segment-s", type=float)
    p.add_argument("--policy", default="topk:16,temp:1.0")
    p.add_argument("--codec-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _apply_config_defaults(parser, argv):
    """Re-parse with ``--config`` values as defaults for matching flags."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    text = Path(args.config).read_text(encoding="utf-8")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    defaults = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if "=" not in line:
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest in dests:
            action = next(a for a in sub._actions if a.dest == dest)
            defaults[dest] = action.type(value) if action.type else training.parse_value(value)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_defaults(parser, argv)
        if args.workers < 1:
            parser.error("--workers must be at least 1")
    except SystemExit as exc:
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ChartgenError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
