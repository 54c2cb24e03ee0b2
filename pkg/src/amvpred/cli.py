"""``amvpred`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Progress goes to
stderr; results only to files under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from amvpred import amv, baseline, experiment, io, nn
from amvpred.errors import AmvError, ConfigError
from amvpred.synth import SynthConfig, generate_member

log = logging.getLogger("amvpred")


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid(text):
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return (h, w)


def _add_source(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", metavar="DIR", help="directory of stack manifests")
    src.add_argument("--synth", metavar="JSON", help="synthetic ensemble config")


def _add_training(p):
    p.add_argument("--epochs", type=int, help="maximum epochs (default 20)")
    p.add_argument("--patience", type=int, help="consecutive validation-loss rises before stopping")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--n-per-class", type=int, help="balanced samples per class (default 300)")
    p.add_argument("--grid", type=_grid, help="regrid predictors to HxW, e.g. 224x224")
    p.add_argument("--freeze-split", action="store_true", default=None)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--config", metavar="JSON", help="sweep config file; flags take precedence")


def build_parser():
    parser = argparse.ArgumentParser(prog="amvpred", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic ensemble as field stacks")
    p.add_argument("--config", metavar="JSON", help="synth config (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--members", type=int)

    p = sub.add_parser("index", help="AMV index per member and year")
    _add_source(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("label", help="AMV states per member and year")
    _add_source(p)
    p.add_argument("--sigma", type=float, help="threshold in degC (fitted if omitted)")
    p.add_argument("--out", required=True)

    for name, text in (("train", "train one model"), ("evaluate", "score a checkpoint")):
        p = sub.add_parser(name, help=text)
        _add_source(p)
        p.add_argument("--lead", type=int, required=True)
        p.add_argument("--rep", type=int, default=0, help="repetition index (selects the split)")
        p.add_argument("--out", required=True)
        _add_training(p)
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="lead-time sweep and report")
    _add_source(p)
    p.add_argument("--leads", type=_int_list, help="comma-separated leads (default 0,3,...,24)")
    p.add_argument("--reps", type=int, help="repetitions per lead (default 10)")
    p.add_argument("--persistence-pool", choices=("test", "full"))
    p.add_argument("--jobs", type=int, help="parallel worker processes (default: CPU count)")
    p.add_argument("--out", required=True)
    _add_training(p)

    p = sub.add_parser("report", help="rebuild summaries from a skill.csv")
    p.add_argument("--skill", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of backpropagation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=20, help="parameters sampled per group")
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    return parser


def _stacks(args):
    if args.data:
        return io.read_stacks(args.data)
    cfg = SynthConfig.from_json(args.synth)
    return [generate_member(cfg, m) for m in range(cfg.n_members)]


def _sweep_config(args):
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep config {args.config}: {exc}") from exc
    train = dict(base.pop("train", {}) or {})
    cnn = base.pop("cnn", None)
    base.pop("synth", None)
    base.pop("data_dir", None)
    flags = {
        "leads": getattr(args, "leads", None),
        "repetitions": getattr(args, "reps", None),
        "n_per_class": args.n_per_class,
        "seed": args.seed,
        "freeze_split": args.freeze_split,
        "persistence_pool": getattr(args, "persistence_pool", None),
        "grid_shape": args.grid,
        "jobs": getattr(args, "jobs", None),
    }
    if getattr(args, "command", None) == "sweep" and flags["jobs"] is None and "jobs" not in base:
        flags["jobs"] = os.cpu_count() or 1
    base.update({k: v for k, v in flags.items() if v is not None})
    train_flags = {
        "max_epochs": args.epochs,
        "patience": args.patience,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "momentum": args.momentum,
    }
    train.update({k: v for k, v in train_flags.items() if v is not None})
    try:
        cfg = experiment.SweepConfig(
            **base,
            train=nn.TrainConfig(**train),
            cnn=nn.CnnConfig(**cnn) if cnn else nn.CnnConfig(),
            synth=SynthConfig.from_json(args.synth) if args.synth else None,
            data_dir=args.data,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sweep settings: {exc}") from exc
    return cfg


def cmd_synth(args):
    cfg = SynthConfig.from_json(args.config) if args.config else SynthConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.members is not None:
        overrides["n_members"] = args.members
    cfg = SynthConfig.from_dict({**cfg.to_dict(), **overrides})
    out = io.ensure_dir(args.out)
    cfg.to_json(out / "synth_config.json")
    for m in range(cfg.n_members):
        path = io.write_stack(generate_member(cfg, m), out)
        log.info("wrote %s", path)
    return 0


def _series(args):
    stacks = _stacks(args)
    data = experiment.prepare_data(stacks, sigma=getattr(args, "sigma", None))
    return data


def cmd_index(args):
    data = _series(args)
    out = io.ensure_dir(args.out)
    path = out / "amv_index.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["member", "year", "index"])
        for s in data.series:
            for year, value in zip(s.years, s.index):
                writer.writerow([s.member, int(year), repr(float(value))])
    log.info("pooled sigma %.6f degC", data.sigma)
    return 0


def cmd_label(args):
    data = _series(args)
    rows = []
    for s in data.series:
        labels = data.labels[s.member]
        for year, value, lab in zip(s.years, s.index, labels):
            rows.append((s.member, year, value, amv.AmvClass(lab).label))
    out = io.ensure_dir(args.out)
    io.write_labels_csv(rows, out / "labels.csv")
    counts = np.bincount([amv.AmvClass[r[3].upper()] for r in rows], minlength=3)
    log.info("sigma %.6f degC; class counts %s", data.sigma, dict(zip(amv.CLASS_LABELS, counts)))
    return 0


def _single_run_setup(args):
    cfg = _sweep_config(args)
    data = experiment.prepare_data(_stacks(args), cfg.grid_shape)
    ds = experiment.lead_dataset(data, args.lead, args.rep, cfg)
    return cfg, data, ds


def cmd_train(args):
    cfg, data, ds = _single_run_setup(args)
    seed = experiment.derive_seed(cfg.seed, args.lead, args.rep)
    x_tr, y_tr = ds.part("train")
    x_va, y_va = ds.part("validation")
    model = nn.init_model(cfg.cnn, x_tr.shape[1:], seed)
    model, history = nn.train(model, x_tr, y_tr, x_va, y_va, replace(cfg.train, seed=seed))
    out = io.ensure_dir(args.out)
    nn.save_checkpoint(model, out / "model.ckpt", epoch=history.best_epoch, lead=args.lead,
                       repetition=args.rep, seed=seed)
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"])
        for e in history.epochs:
            writer.writerow([e.epoch] + [f"{v:.6f}" for v in
                            (e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy)])
    log.info("best epoch %d of %d, validation loss %.4f",
             history.best_epoch, len(history.epochs), history.best_val_loss)
    return 0


def cmd_evaluate(args):
    cfg, data, ds = _single_run_setup(args)
    model, header = nn.load_checkpoint(args.checkpoint)
    x_te, y_te = ds.part("test")
    pred, _ = nn.predict(model, x_te)
    acc, overall, counts = baseline.per_class_accuracy(y_te, pred)
    first = {s.member: int(s.years[0]) for s in data.stacks}
    pool = [(ds.samples[i].member, ds.samples[i].year - first[ds.samples[i].member])
            for i in ds.split.test]
    pers = baseline.persistence_forecast(data.labels, args.lead, pool)
    table = io.SkillTable()
    table.add(*experiment._class_rows(experiment.CNN, args.lead, args.rep, acc, overall, counts))
    table.add(*experiment._class_rows(experiment.PERSISTENCE, args.lead, args.rep,
                                      pers.accuracy, pers.overall, counts))
    out = io.ensure_dir(args.out)
    io.write_skill_csv(table, out / "skill.csv")
    log.info("overall test accuracy %.3f (persistence %.3f)", overall, pers.overall)
    return 0


def cmd_sweep(args):
    cfg = _sweep_config(args)
    out = io.ensure_dir(args.out)
    cfg = replace(cfg, checkpoint_dir=str(out / "checkpoints"))
    result = experiment.run_sweep(cfg)
    experiment.report(result.table, out, result)
    for r in result.failures:
        log.warning("lead %d rep %d failed: %s", r.lead, r.repetition, r.error)
    return 0


def cmd_report(args):
    table = io.read_skill_csv(args.skill)
    experiment.report(table, args.out)
    return 0


def _corrupted_grads(model, x, labels):
    loss, grads = nn.loss_and_grads(model, x, labels)
    grads["conv2.w"] = grads["conv2.w"] * 1.05
    return loss, grads


def cmd_gradcheck(args):
    grad_fn = _corrupted_grads if args.corrupt_backward else None
    errors = nn.gradcheck(seed=args.seed, n_per_group=args.n, grad_fn=grad_fn)
    for name, err in errors.items():
        print(f"{name:8s} max relative error {err:.3e}")
    worst = max(errors.values())
    ok = worst < 1e-3
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (threshold 1e-3)")
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "index": cmd_index,
    "label": cmd_label,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.verbose:
        log.setLevel(logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except (AmvError, OSError) as exc:
        print(f"amvpred {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
