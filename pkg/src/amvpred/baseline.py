"""Persistence and chance baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from amvpred.amv import AmvClass
from amvpred.errors import DataError


@dataclass
class BaselineResult:
    """Per-class recall (accuracy conditioned on the true class).

    ``accuracy`` maps class name to a fraction, NaN for classes absent from
    the pool; ``counts`` holds the number of evaluated targets per class.
    """

    lead: int
    accuracy: dict
    overall: float
    counts: dict

    @property
    def n_total(self):
        return sum(self.counts.values())


def per_class_accuracy(truth, predicted):
    """Recall per class, overall accuracy and class counts."""
    truth = np.asarray(truth)
    predicted = np.asarray(predicted)
    if truth.size == 0:
        raise DataError("empty evaluation pool")
    accuracy, counts = {}, {}
    for c in AmvClass:
        sel = truth == c
        counts[c.label] = int(sel.sum())
        accuracy[c.label] = float(np.mean(predicted[sel] == c)) if sel.any() else float("nan")
    return accuracy, float(np.mean(truth == predicted)), counts


def persistence_pairs(labels, lead, pool=None):
    """(truth, prediction) arrays for the persistence forecast.

    ``labels`` maps member to its per-year label array.  ``pool`` optionally
    restricts evaluation to (member, source_index) pairs; by default every
    source year whose target lies in the record is used.
    """
    if lead < 0:
        raise DataError("lead must be nonnegative")
    if pool is None:
        pool = [(m, t) for m, lab in labels.items() for t in range(len(lab) - lead)]
    truth = np.array([labels[m][t + lead] for m, t in pool], dtype=np.int64)
    predicted = np.array([labels[m][t] for m, t in pool], dtype=np.int64)
    return truth, predicted


def persistence_forecast(labels, lead, pool=None):
    """Score the forecast "state at year + lead equals state at year"."""
    truth, predicted = persistence_pairs(labels, lead, pool)
    if truth.size == 0:
        raise DataError(f"no (year, year + {lead}) pairs to evaluate")
    accuracy, overall, counts = per_class_accuracy(truth, predicted)
    return BaselineResult(lead=lead, accuracy=accuracy, overall=overall, counts=counts)


def chance_baseline():
    return {c.label: 1.0 / 3.0 for c in AmvClass}
