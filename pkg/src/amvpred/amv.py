"""AMV index, three-state labels and the per-lead sample pipeline.

Class codes are fixed: Negative = 0, Neutral = 1, Positive = 2.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import combinations, product

import numpy as np

from amvpred.errors import DataError, DegenerateError, RegionError
from amvpred.grid import AMV_REGION, area_weights

CESM_SIGMA = 0.3625  # degC, pooled CESM-LE value; not reproducible without that archive


class AmvClass(IntEnum):
    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2

    @property
    def label(self):
        return self.name.lower()


CLASS_LABELS = tuple(c.label for c in AmvClass)


@dataclass
class AmvSeries:
    member: str
    years: np.ndarray
    index: np.ndarray
    sigma: float | None = None

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.float64)
        if self.years.shape != self.index.shape:
            raise DataError("years and index differ in length")
        if not np.all(np.isfinite(self.index)):
            raise DataError(f"member {self.member}: non-finite AMV index")
        if self.sigma is not None and not self.sigma > 0:
            raise DegenerateError("sigma must be positive")


@dataclass(frozen=True, eq=False)
class Sample:
    """Predictors at ``year`` paired with the state at ``year + lead``.

    ``predictors`` is a (V, H, W) view into the member's stack.
    """

    member: str
    year: int
    lead: int
    label: int
    predictors: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int


def compute_anomalies(stack):
    """Subtract each cell's time mean over the member's full record.

    Invalid cells keep their raw values.  The long-term trend is kept.
    """
    if stack.years.size < 2:
        raise DataError("anomalies need at least two years")
    data = np.asarray(stack.data, dtype=np.float64)
    # centre on the first year before averaging: constant series give exact zeros
    first = data[:, :1]
    anoms = (data - first) - (data - first).mean(axis=1, keepdims=True)
    valid = np.broadcast_to(stack.mask[:, None], data.shape)
    out = np.where(valid, anoms, data).astype(stack.data.dtype, copy=False)
    return stack.replace(data=out)


def compute_amv_index(sst_anoms, region=AMV_REGION):
    """Area-weighted mean SST anomaly over the AMV box, one value per year."""
    v = sst_anoms.var_index("SST")
    mask = sst_anoms.mask[v]
    weights = np.where(mask, area_weights(sst_anoms.grid, region), 0.0)
    total = weights.sum()
    if not total > 0:
        raise RegionError("AMV box holds no valid SST cell")
    values = np.where(mask, np.asarray(sst_anoms.data[v], dtype=np.float64), 0.0)
    # per-year 1-D sums follow the same summation order as the weight total,
    # which keeps uniform fields exact
    flat_w = weights.reshape(-1)
    total = flat_w.sum()
    index = np.array([np.sum(row.reshape(-1) * flat_w) / total for row in values])
    return AmvSeries(member=sst_anoms.member, years=sst_anoms.years.copy(), index=index)


def classify(series, sigma):
    """Label each year: above +sigma Positive, below -sigma Negative, else Neutral."""
    if not sigma > 0:
        raise DegenerateError("sigma must be positive")
    index = series.index if isinstance(series, AmvSeries) else np.asarray(series, dtype=float)
    labels = np.full(index.shape, AmvClass.NEUTRAL, dtype=np.int64)
    labels[index > sigma] = AmvClass.POSITIVE
    labels[index < -sigma] = AmvClass.NEGATIVE
    return labels


def fit_sigma(series_list):
    """Population standard deviation of the index pooled over members and years."""
    if isinstance(series_list, AmvSeries):
        series_list = [series_list]
    # sorted so the result does not depend on member order
    values = np.sort(
        np.concatenate([np.asarray(getattr(s, "index", s), dtype=float) for s in series_list])
    )
    if values.size < 2:
        raise DataError("sigma needs at least two index values")
    sigma = float(np.std(values))
    if np.ptp(values) == 0 or not sigma > 0:
        raise DegenerateError("AMV index is constant; cannot set a threshold")
    return sigma


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray


def fit_standardization(x, mask):
    """Per-variable mean and population std over valid cells of ``x`` (N, V, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    means, stds = [], []
    for v in range(x.shape[1]):
        vals = x[:, v][:, mask[v]]
        if vals.size == 0:
            raise DegenerateError(f"variable {v} has no valid cells")
        means.append(vals.mean())
        stds.append(vals.std())
    stats = Standardization(np.array(means), np.array(stds))
    if np.any(stats.std <= 0):
        raise DegenerateError("a variable has zero spread over the training samples")
    return stats


def standardize_array(x, mask, stats, dtype=np.float32):
    """(value - mean) / std per variable; invalid cells set to 0."""
    if np.any(np.asarray(stats.std) <= 0):
        raise DegenerateError("standard deviation must be positive")
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(1, -1, 1, 1)
    z = (np.asarray(x, dtype=np.float64) - mean) / std
    z = np.where(np.asarray(mask, dtype=bool)[None], z, 0.0)
    return z.astype(dtype)


def standardize(stack, stats):
    """Standardize a whole :class:`FieldStack` with precomputed statistics."""
    z = standardize_array(np.moveaxis(stack.data, 1, 0), stack.mask, stats, dtype=np.float64)
    return stack.replace(data=np.moveaxis(z, 0, 1))


def build_samples(stacks, labels, lead):
    """Pair predictors at year y with the label at y + lead, per member.

    ``labels`` maps member id to the per-year label array aligned with that
    member's ``years``.
    """
    if lead < 0:
        raise DataError("lead must be nonnegative")
    samples = []
    for stack in stacks:
        lab = np.asarray(labels[stack.member])
        n_src = stack.years.size - lead
        for t in range(max(n_src, 0)):
            samples.append(
                Sample(
                    member=stack.member,
                    year=int(stack.years[t]),
                    lead=lead,
                    label=int(lab[t + lead]),
                    predictors=stack.data[:, t],
                )
            )
    if not samples:
        raise DataError(f"lead {lead} leaves no samples in records of the given length")
    return samples


def _rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed))


def balance_classes(samples, n_per_class, seed):
    """Draw min(n_per_class, smallest class) per class without replacement, then shuffle."""
    by_class = defaultdict(list)
    for i, s in enumerate(samples):
        by_class[s.label].append(i)
    missing = [c.label for c in AmvClass if not by_class[c]]
    if missing:
        raise DataError(f"no samples of class {', '.join(missing)}")
    n = min(n_per_class, *(len(by_class[c]) for c in AmvClass))
    rng = _rng(seed)
    picked = np.concatenate(
        [rng.choice(np.asarray(by_class[c]), size=n, replace=False) for c in AmvClass]
    )
    return [samples[i] for i in rng.permutation(picked)]


def _allocate(class_counts, fractions):
    """Integer (class, part) counts, each the floor or ceiling of its exact share.

    Among all such roundings (with correct class totals) the one whose part
    totals sit closest to their exact shares is chosen; a controlled
    rounding with every part total within 1 always exists.  Ties favour
    larger fractional remainders, then enumeration order.
    """
    fractions = np.asarray(fractions, dtype=float)
    exact = np.outer(class_counts, fractions)
    base = np.floor(exact).astype(int)
    frac = exact - base
    options = []
    for c, n_c in enumerate(class_counts):
        leftover = n_c - base[c].sum()
        parts = [p for p in range(len(fractions)) if frac[c, p] > 1e-12]
        options.append(list(combinations(parts, leftover)))
    exact_totals = exact.sum(axis=0)
    best, best_key = None, None
    for choice in product(*options):
        alloc = base.copy()
        for c, parts in enumerate(choice):
            alloc[c, list(parts)] += 1
        dev = np.abs(alloc.sum(axis=0) - exact_totals)
        taken = sum(frac[c, list(parts)].sum() for c, parts in enumerate(choice))
        key = (round(dev.max(), 9), round(dev.sum(), 9), -taken)
        if best_key is None or key < best_key:
            best, best_key = alloc, key
    return best


def split(samples, fractions=(0.8, 0.1, 0.1), seed=0):
    """Stratified train/validation/test split of sample indices."""
    if len(samples) < 10:
        raise DataError(f"need at least 10 samples to split, got {len(samples)}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three numbers summing to 1")
    labels = np.array([s.label for s in samples])
    classes = [c for c in AmvClass if np.any(labels == c)]
    counts = [int(np.sum(labels == c)) for c in classes]
    alloc = _allocate(counts, fractions)
    rng = _rng(seed)
    parts = [[], [], []]
    for c, row in zip(classes, alloc):
        idx = rng.permutation(np.flatnonzero(labels == c))
        bounds = np.cumsum(row)[:-1]
        for p, chunk in enumerate(np.split(idx, bounds)):
            parts[p].append(chunk)
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return DatasetSplit(train=train, validation=val, test=test, seed=seed)
