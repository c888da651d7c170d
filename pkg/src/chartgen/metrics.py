"""Perplexity and accuracy on the full target sequence and on non-pad targets.

Position sets:

* full: every real target position except boundary tokens (BOS never
  appears as a target; EOS targets are skipped),
* non-pad: targets that are note tokens.

Pooled values use every position in the set. The ``*_se`` fields are the
standard error of the per-chart values, so charts count equally there.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyEvalSet
from .model.loss import log_softmax
from .tokenizer import EOS, PAD


def argmax_predictions(logits) -> np.ndarray:
    """Per-position argmax over the last axis; ties go to the lowest id."""
    # np.argmax returns the first maximum, which is the lowest id
    return np.argmax(np.asarray(logits), axis=-1)


@dataclass
class EvalReport:
    perplexity_full: float
    perplexity_full_se: float
    accuracy_full: float
    accuracy_full_se: float
    perplexity_nonpad: float | None
    perplexity_nonpad_se: float | None
    accuracy_nonpad: float | None
    accuracy_nonpad_se: float | None
    n_full: int
    n_nonpad: int
    n_charts: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "".join(f"{k}={'absent' if v is None else v}\n" for k, v in self.to_dict().items())


def _stderr(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


class MetricAccumulator:
    """Running sums of cross-entropy and hits, pooled and per chart."""

    def __init__(self):
        # per chart: [nll_full, hits_full, n_full, nll_nonpad, hits_nonpad, n_nonpad]
        self.charts: dict = {}

    def add(self, logits, targets, mask=None, groups=None) -> None:
        """Fold in ``logits`` ``(..., T, V)`` against ``targets`` ``(..., T)``.

        ``mask`` zeroes padding positions; ``groups`` gives one chart key per
        leading row (all rows share one key when omitted).
        """
        targets = np.asarray(targets)
        logits = np.asarray(logits)
        if targets.ndim == 1:
            targets, logits = targets[None], logits[None]
            if mask is not None:
                mask = np.asarray(mask)[None]
        logp = log_softmax(logits)
        nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        hit = argmax_predictions(logits) == targets
        valid = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
        full = valid & (targets != EOS)
        nonpad = full & (targets != PAD)
        if groups is None:
            groups = [None] * targets.shape[0]
        for row, key in enumerate(groups):
            acc = self.charts.setdefault(key, np.zeros(6))
            f, n = full[row], nonpad[row]
            acc += (
                nll[row][f].sum(), hit[row][f].sum(), f.sum(),
                nll[row][n].sum(), hit[row][n].sum(), n.sum(),
            )

    def report(self) -> EvalReport:
        if not self.charts:
            raise EmptyEvalSet("nothing to evaluate")
        rows = np.array(list(self.charts.values()))
        tot = rows.sum(axis=0)
        if tot[2] == 0:
            raise EmptyEvalSet("no scorable target positions")

        def pooled(offset):
            nll, hits, n = tot[offset:offset + 3]
            if n == 0:
                return None, None, None, None
            per = rows[rows[:, offset + 2] > 0]
            ppl = np.exp(per[:, offset] / per[:, offset + 2])
            acc = per[:, offset + 1] / per[:, offset + 2]
            return float(math.exp(nll / n)), _stderr(ppl), float(hits / n), _stderr(acc)

        pf, pf_se, af, af_se = pooled(0)
        pn, pn_se, an, an_se = pooled(3)
        return EvalReport(pf, pf_se, af, af_se, pn, pn_se, an, an_se, int(tot[2]), int(tot[5]), len(rows))


def evaluate(model, batches) -> EvalReport:
    """Metrics of ``model`` (dropout off) over an iterable of training batches."""
    acc = MetricAccumulator()
    for batch in batches:
        logits = model.forward(batch.inputs, batch.codes, batch.frame_lengths, train=False)
        acc.add(logits, batch.targets, batch.mask, batch.song_ids)
    return acc.report()
