"""Lead-time sweep: one classifier per lead, repeated with different seeds.

For each lead the sample pool is built and balanced once; every repetition
then derives its own seed from (master seed, lead, repetition), re-splits
the pool (unless ``freeze_split``), trains a fresh model and scores it,
together with the persistence forecast, on that repetition's test set.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from amvpred import amv, baseline, io, nn
from amvpred.amv import CLASS_LABELS
from amvpred.errors import AmvError, ConfigError, DataError
from amvpred.grid import harmonize_masks, regrid_stack, regular_grid
from amvpred.synth import SynthConfig, generate_ensemble

log = logging.getLogger(__name__)

DEFAULT_LEADS = tuple(range(0, 25, 3))
CNN, PERSISTENCE, CHANCE = "cnn", "persistence", "chance"
MEAN_REP = -1


def derive_seed(*parts):
    """Stable 32-bit seed from integers, independent of execution order."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class SweepConfig:
    leads: tuple = DEFAULT_LEADS
    repetitions: int = 10
    n_per_class: int = 300
    seed: int = 0
    freeze_split: bool = False
    fractions: tuple = (0.8, 0.1, 0.1)
    persistence_pool: str = "test"  # or "full"
    grid_shape: tuple | None = None
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    cnn: nn.CnnConfig = field(default_factory=nn.CnnConfig)
    synth: SynthConfig | None = None
    data_dir: str | None = None
    jobs: int = 1
    checkpoint_dir: str | None = None

    def __post_init__(self):
        leads = tuple(int(x) for x in self.leads)
        if not leads or any(x < 0 for x in leads) or any(b <= a for a, b in zip(leads, leads[1:])):
            raise ConfigError("leads must be nonnegative and strictly increasing")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if self.persistence_pool not in ("test", "full"):
            raise ConfigError("persistence_pool is 'test' or 'full'")
        object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.grid_shape is not None:
            object.__setattr__(self, "grid_shape", tuple(int(d) for d in self.grid_shape))

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train"] = asdict(self.train)
        d["cnn"] = asdict(self.cnn)
        d["synth"] = self.synth.to_dict() if self.synth else None
        d.pop("jobs")
        d.pop("checkpoint_dir")
        return json.loads(json.dumps(d, default=list))


@dataclass
class PreparedData:
    """Harmonised anomaly stacks plus the labels derived from them."""

    stacks: list
    series: list
    sigma: float
    labels: dict
    mask: np.ndarray

    @property
    def min_years(self):
        return min(s.years.size for s in self.stacks)


def prepare_data(stacks, grid_shape=None, sigma=None):
    """Masks, anomalies, AMV index and labels; optional regridding of predictors.

    The index is computed on the native grid; only the predictors are
    regridded.
    """
    if not stacks:
        raise DataError("no ensemble members")
    anoms = [amv.compute_anomalies(harmonize_masks(s)) for s in stacks]
    series = [amv.compute_amv_index(a) for a in anoms]
    sigma = amv.fit_sigma(series) if sigma is None else float(sigma)
    for s in series:
        s.sigma = sigma
    labels = {s.member: amv.classify(s, sigma) for s in series}
    if len(labels) != len(stacks):
        raise DataError("ensemble member ids must be unique")
    if grid_shape is not None:
        g = anoms[0].grid
        target = regular_grid((g.lats[0], g.lats[-1]), (g.lons[0], g.lons[-1]), *grid_shape)
        anoms = [regrid_stack(a, target) for a in anoms]
    anoms = [a.replace(data=np.asarray(a.data, dtype=np.float32)) for a in anoms]
    mask = anoms[0].mask
    if any(not np.array_equal(a.mask, mask) for a in anoms):
        raise DataError("members must share one grid and mask")
    return PreparedData(anoms, series, sigma, labels, mask)


def load_data(cfg):
    if cfg.data_dir:
        stacks = io.read_stacks(cfg.data_dir)
    elif cfg.synth is not None:
        stacks = generate_ensemble(cfg.synth)
    else:
        raise ConfigError("sweep needs data_dir or a synth config")
    return prepare_data(stacks, cfg.grid_shape)


@dataclass
class LeadDataset:
    samples: list
    x: np.ndarray  # standardized, (N, V, H, W) float32
    y: np.ndarray
    split: amv.DatasetSplit
    stats: amv.Standardization

    def part(self, name):
        idx = getattr(self.split, name)
        return self.x[idx], self.y[idx]


def balanced_pool(data, lead, cfg):
    if lead >= data.min_years:
        raise DataError(f"lead {lead} needs records longer than {data.min_years} years")
    samples = amv.build_samples(data.stacks, data.labels, lead)
    return amv.balance_classes(samples, cfg.n_per_class, derive_seed(cfg.seed, lead, 0xBA1))


def lead_dataset(data, lead, repetition, cfg, pool=None):
    """Balanced, split and standardized samples for one (lead, repetition)."""
    pool = balanced_pool(data, lead, cfg) if pool is None else pool
    split_seed = (
        derive_seed(cfg.seed, lead, 0x5B1)
        if cfg.freeze_split
        else derive_seed(cfg.seed, lead, repetition)
    )
    split = amv.split(pool, cfg.fractions, split_seed)
    raw = np.stack([s.predictors for s in pool])
    stats = amv.fit_standardization(raw[split.train], data.mask)
    x = amv.standardize_array(raw, data.mask, stats)
    y = np.array([s.label for s in pool], dtype=np.int64)
    return LeadDataset(pool, x, y, split, stats)


@dataclass
class RunRecord:
    lead: int
    repetition: int
    seed: int
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    accuracy: dict = field(default_factory=dict)
    overall: float = float("nan")
    counts: dict = field(default_factory=dict)
    persistence: dict = field(default_factory=dict)
    persistence_overall: float = float("nan")
    checkpoint: str | None = None
    error: str | None = None
    train_keys: list = field(default_factory=list, repr=False)
    test_keys: list = field(default_factory=list, repr=False)

    @property
    def ok(self):
        return self.error is None

    def summary(self):
        d = asdict(self)
        d.pop("train_keys")
        d.pop("test_keys")
        return d


def run_one(data, lead, repetition, cfg, pool=None):
    """Train and score one model; failures are captured in the record."""
    seed = derive_seed(cfg.seed, lead, repetition)
    record = RunRecord(lead=lead, repetition=repetition, seed=seed)
    try:
        ds = lead_dataset(data, lead, repetition, cfg, pool)
        x_tr, y_tr = ds.part("train")
        x_va, y_va = ds.part("validation")
        x_te, y_te = ds.part("test")
        model = nn.init_model(cfg.cnn, x_tr.shape[1:], seed)
        model, history = nn.train(model, x_tr, y_tr, x_va, y_va, replace(cfg.train, seed=seed))
        pred, _ = nn.predict(model, x_te)
        record.accuracy, record.overall, record.counts = baseline.per_class_accuracy(y_te, pred)

        first = {s.member: int(s.years[0]) for s in data.stacks}
        test_samples = [ds.samples[i] for i in ds.split.test]
        pool_pairs = [(s.member, s.year - first[s.member]) for s in test_samples]
        pers = baseline.persistence_forecast(data.labels, lead, pool_pairs)
        record.persistence, record.persistence_overall = pers.accuracy, pers.overall

        record.epochs_run = len(history.epochs)
        record.best_epoch = history.best_epoch
        record.best_val_loss = history.best_val_loss
        record.train_keys = [(ds.samples[i].member, ds.samples[i].year) for i in ds.split.train]
        record.test_keys = [(s.member, s.year) for s in test_samples]
        if cfg.checkpoint_dir:
            path = Path(cfg.checkpoint_dir) / f"lead{lead:02d}_rep{repetition:02d}.ckpt"
            nn.save_checkpoint(
                model, path, epoch=history.best_epoch, lead=lead, repetition=repetition, seed=seed
            )
            record.checkpoint = str(path)
    except (AmvError, ValueError, FloatingPointError) as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        log.warning("run lead=%d rep=%d failed: %s", lead, repetition, record.error)
    return record


_SHARED = {}


def _task(args):
    lead, rep = args
    data, cfg, pools = _SHARED["data"], _SHARED["cfg"], _SHARED["pools"]
    return run_one(data, lead, rep, cfg, pools[lead])


def _class_rows(model, lead, rep, accuracy, overall, counts):
    rows = []
    for cls in CLASS_LABELS:
        if counts.get(cls, 0) > 0:
            rows.append(io.SkillRow(model, lead, cls, rep, float(accuracy[cls]), counts[cls]))
    rows.append(io.SkillRow(model, lead, "overall", rep, float(overall), sum(counts.values())))
    return rows


def _mean_rows(rows, model, lead):
    out = []
    for cls in CLASS_LABELS + ("overall",):
        sel = [r for r in rows if r.cls == cls]
        if sel:
            acc = float(np.mean([r.accuracy for r in sel]))
            out.append(io.SkillRow(model, lead, cls, MEAN_REP, acc, sum(r.n_test for r in sel)))
    return out


def build_table(records, cfg, data):
    table = io.SkillTable()
    for lead in cfg.leads:
        runs = sorted((r for r in records if r.lead == lead and r.ok), key=lambda r: r.repetition)
        cnn_rows, pers_rows = [], []
        for r in runs:
            cnn_rows += _class_rows(CNN, lead, r.repetition, r.accuracy, r.overall, r.counts)
            if cfg.persistence_pool == "test":
                pers_rows += _class_rows(
                    PERSISTENCE, lead, r.repetition, r.persistence, r.persistence_overall, r.counts
                )
        table.add(*cnn_rows, *_mean_rows(cnn_rows, CNN, lead))
        if cfg.persistence_pool == "test":
            table.add(*pers_rows, *_mean_rows(pers_rows, PERSISTENCE, lead))
        else:
            full = baseline.persistence_forecast(data.labels, lead)
            table.add(
                *_class_rows(PERSISTENCE, lead, MEAN_REP, full.accuracy, full.overall, full.counts)
            )
        for cls, acc in baseline.chance_baseline().items():
            table.add(io.SkillRow(CHANCE, lead, cls, MEAN_REP, acc, 0))
        table.add(io.SkillRow(CHANCE, lead, "overall", MEAN_REP, 1.0 / 3.0, 0))
    return table.sorted()


@dataclass
class SweepResult:
    table: io.SkillTable
    records: list
    sigma: float
    config: SweepConfig

    @property
    def failures(self):
        return [r for r in self.records if not r.ok]


def run_sweep(cfg, data=None):
    """Run every (lead, repetition) and aggregate a :class:`SkillTable`.

    Raises DataError up front if any lead cannot be served by the records.
    """
    data = load_data(cfg) if data is None else data
    for lead in cfg.leads:
        if lead >= data.min_years:
            raise DataError(f"lead {lead} exceeds the {data.min_years}-year record")
    pools = {lead: balanced_pool(data, lead, cfg) for lead in cfg.leads}
    if cfg.checkpoint_dir:
        io.ensure_dir(cfg.checkpoint_dir)
    tasks = [(lead, rep) for lead in cfg.leads for rep in range(cfg.repetitions)]
    jobs = max(1, min(cfg.jobs or os.cpu_count() or 1, len(tasks)))
    _SHARED.update(data=data, cfg=cfg, pools=pools)
    try:
        if jobs == 1:
            records = []
            for lead, rep in tasks:
                records.append(_task((lead, rep)))
                log.info("lead %d rep %d done", lead, rep)
        else:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                records = list(pool.map(_task, tasks))
    finally:
        _SHARED.clear()
    records.sort(key=lambda r: (r.lead, r.repetition))
    return SweepResult(build_table(records, cfg, data), records, data.sigma, cfg)


def ensemble_mean(table, model, lead, cls):
    """Arithmetic mean of the per-repetition accuracies."""
    rows = [r for r in table.select(model, lead, cls) if r.repetition >= 0]
    if not rows:
        raise DataError(f"no repetition rows for {model} lead {lead} class {cls}")
    return float(np.mean([r.accuracy for r in rows]))


def _lead_value(table, model, lead, cls):
    try:
        return ensemble_mean(table, model, lead, cls)
    except DataError:
        rows = table.select(model, lead, cls, MEAN_REP)
        return rows[0].accuracy if rows else None


def summary_rows(table, cls):
    models = table.models
    rows = []
    for lead in table.leads:
        rows.append([lead] + [_lead_value(table, m, lead, cls) for m in models])
    return models, rows


def report(table, out_dir, result=None):
    """Write skill.csv, summary_<class>.csv per class and manifest.json.

    Output depends only on the table (and result metadata), never on the
    clock, so regenerating it gives identical bytes.
    """
    if not len(table):
        raise DataError("empty skill table")
    out = io.ensure_dir(out_dir)
    written = [out / "skill.csv"]
    io.write_skill_csv(table, written[0])
    for cls in CLASS_LABELS + ("overall",):
        models, rows = summary_rows(table, cls)
        path = out / f"summary_{cls}.csv"
        lines = [",".join(["lead"] + models)]
        for lead, *vals in rows:
            lines.append(",".join([str(lead)] + ["" if v is None else f"{v:.6f}" for v in vals]))
        try:
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as exc:
            raise io.IoError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    manifest = {
        "models": table.models,
        "leads": table.leads,
        "n_rows": len(table),
    }
    if result is not None:
        manifest.update(
            config=result.config.to_dict(),
            sigma=result.sigma,
            runs=[_jsonable(r.summary()) for r in result.records],
            failures=[
                {"lead": r.lead, "repetition": r.repetition, "error": r.error}
                for r in result.failures
            ],
        )
        if result.config.checkpoint_dir:
            for run in manifest["runs"]:
                if run["checkpoint"]:
                    run["checkpoint"] = os.path.relpath(run["checkpoint"], out)
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise io.IoError(f"cannot write {path}: {exc}") from exc
    written.append(path)
    return written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
