"""Two probes of what a trained chart model actually relies on.

    python demos/what_the_model_uses.py [--songs N] [--epochs N]

Part one trains the same network with and without audio, then shuffles the
audio between charts during training to see when the model starts caring.
Part two trains baseline models with short and long context windows on
charts that loop a motif, so only the longer window can see the repeat.
Expect about eight minutes on one core with the defaults.
"""

import argparse

from chartgen.metrics import evaluate
from chartgen.model import ModelConfig
from chartgen.synth import synth_corpus, synth_repetitive_charts
from chartgen.audio import pseudo_codec_encode
from chartgen.training import Song, TrainConfig, context_sweep, train

MODEL = ModelConfig(d_model=64, n_layers=2, n_heads=2, d_ff=128)


def audio_probe(n_songs, epochs):
    corpus = [Song(f"s{i:03d}", s.chart, pseudo_codec_encode(s.wave))
              for i, s in enumerate(synth_corpus(n_songs, 10.0, 294.8, seed=2))]
    scores = {}
    for regime in ("uncond", "conditioned"):
        cfg = TrainConfig(regime=regime, segment_s=10.0, batch_size=8, epochs=epochs, decay_epochs=epochs,
                          val_fraction=0.2, ablate_every=50 if regime == "conditioned" else 0)
        result = train(corpus, cfg, MODEL)
        scores[regime] = evaluate(result.model, result.plan.val_batches()).accuracy_nonpad
        print(f"  {regime:<12} held-out accuracy on notes: {scores[regime]:.3f}")
        if regime == "conditioned":
            curve = [(r.step, r.rel_diff) for r in result.log if r.rel_diff is not None]
    print(f"  hearing the audio is worth {100 * (scores['conditioned'] - scores['uncond']):+.1f} points")
    print("  loss increase when each chart gets another song's audio:")
    for step, rel in curve[:: max(len(curve) // 8, 1)]:
        print(f"    step {step:5d}  {100 * rel:7.2f}%  {'#' * min(int(rel * 20), 60)}")


def context_probe(n_songs, epochs):
    corpus = [Song(f"loop{i:03d}", c, None) for i, c in enumerate(synth_repetitive_charts(n_songs, 512, 160, seed=3))]
    cfg = TrainConfig(regime="baseline", batch_size=8, epochs=epochs, decay_epochs=2 * epochs)
    for row in context_sweep(corpus, [128, 256], cfg, MODEL):
        print(f"  context {row.context:4d}: perplexity {row.val_perplexity:6.2f}, accuracy {row.val_accuracy:.3f}")
    print("  the motif repeats every 160 notes, so only the 256-token window can copy it")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--songs", type=int, default=200)
    ap.add_argument("--epochs", type=float, default=40)
    ap.add_argument("--skip-context", action="store_true")
    args = ap.parse_args()
    print("Does the model listen?")
    audio_probe(args.songs, args.epochs)
    if not args.skip_context:
        print("Does a longer memory help on repetitive charts?")
        context_probe(2 * args.songs, args.epochs / 2)


if __name__ == "__main__":
    main()
