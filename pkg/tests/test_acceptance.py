"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s -v``.  Criteria 5 to 7 train
real networks and take several minutes in total on one CPU core.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from amvpred import amv, baseline, experiment as ex, io, nn
from amvpred.grid import AMV_REGION, FieldStack
from amvpred.synth import SynthConfig, generate_ensemble

EXTREMES = ("negative", "positive")


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail
    return emit


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    out = np.zeros((n, f, h - kh + 1, wd - kw + 1))
    for i in range(n):
        for k in range(f):
            for r in range(h - kh + 1):
                for s in range(wd - kw + 1):
                    out[i, k, r, s] = np.sum(x[i, :, r:r + kh, s:s + kw] * w[k]) + b[k]
    return out


def test_c1_gradient_check(verdict):
    t0 = time.perf_counter()
    errors = nn.gradcheck(seed=0, n_per_group=20)
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    ok = set(errors) == set(nn.PARAM_ORDER) and worst < 1e-3 and elapsed < 10
    verdict(1, ok, f"max relative error {worst:.2e} over {len(errors)} groups in {elapsed:.2f}s")


def test_c2_conv_oracle(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n, c, f = rng.integers(1, 4, size=3)
        kh, kw = rng.integers(1, 5, size=2)
        h, w = kh + rng.integers(0, 8), kw + rng.integers(0, 8)
        x = rng.normal(size=(n, c, h, w))
        k = rng.normal(size=(f, c, kh, kw))
        b = rng.normal(size=f)
        worst = max(worst, float(np.abs(nn.conv2d_forward(x, k, b) - naive_conv(x, k, b)).max()))
    elapsed = time.perf_counter() - t0
    verdict(2, worst < 1e-6 and elapsed < 30,
            f"50 random shapes, max abs difference {worst:.1e} in {elapsed:.2f}s")


def test_c3_index_and_classes(verdict):
    cfg = SynthConfig(n_members=3, n_years=30, seed=4)
    stacks = generate_ensemble(cfg)
    sst = stacks[0]
    uniform = FieldStack(("SST",), sst.years[:2], "u", np.full((1, 2) + sst.grid.shape, 0.5),
                         sst.grid, sst.mask[0])
    index = amv.compute_amv_index(uniform, AMV_REGION).index
    exact = bool(np.all(index == 0.5))

    sigma = 0.37
    boundary = amv.classify(np.array([sigma, -sigma, np.nextafter(sigma, 1.0)]), sigma)
    boundary_ok = boundary.tolist() == [amv.AmvClass.NEUTRAL, amv.AmvClass.NEUTRAL,
                                        amv.AmvClass.POSITIVE]

    data = ex.prepare_data(stacks)
    invariant = True
    for s in data.series:
        base = amv.classify(s.index, data.sigma)
        for k in (0.1, 1.0, 10.0):
            invariant &= np.array_equal(amv.classify(k * s.index, k * data.sigma), base)
    verdict(3, exact and boundary_ok and invariant,
            f"uniform index exact={exact}, boundary neutral={boundary_ok}, "
            f"scale invariant={invariant}")


def test_c4_persistence(verdict):
    data = ex.prepare_data(generate_ensemble(SynthConfig(n_members=10, n_years=60, seed=1)))
    lead0 = baseline.persistence_forecast(data.labels, 0)
    lead0_ok = all(v == 1.0 for v in lead0.accuracy.values()) and lead0.overall == 1.0

    clean = SynthConfig(n_members=20, ar_std=0.0, spatial_noise=0.0, trend=0.0,
                        sss_noise=0.0, slp_noise=0.0, seed=9)
    data = ex.prepare_data(generate_ensemble(clean))
    lead33 = baseline.persistence_forecast(data.labels, 33)
    extremes = [lead33.accuracy[c] for c in EXTREMES]
    verdict(4, lead0_ok and max(extremes) < 1 / 3,
            f"lead-0 accuracy {lead0.accuracy}; lead-33 extremes "
            f"{extremes[0]:.3f}, {extremes[1]:.3f}")


@pytest.mark.slow
def test_c5_default_design(verdict):
    data = ex.prepare_data(generate_ensemble(SynthConfig()))
    # full design, one epoch per run: the check is structural
    cfg = ex.SweepConfig(train=nn.TrainConfig(max_epochs=1))
    result = ex.run_sweep(cfg, data)
    t = result.table
    cnn_reps = {(r.lead, r.repetition) for r in t.select("cnn", cls="overall") if r.repetition >= 0}
    expected = {(lead, rep) for lead in ex.DEFAULT_LEADS for rep in range(10)}
    baselines = all(
        t.select("persistence", lead, "overall") and len(t.select("chance", lead)) == 4
        for lead in ex.DEFAULT_LEADS
    )
    ok = (len(data.stacks) == 40 and len(data.stacks[0].years) == 86 and cnn_reps == expected
          and not result.failures and baselines)
    verdict(5, ok, f"{len(cnn_reps)} CNN (lead, repetition) rows over {len(t.leads)} leads, "
                   f"persistence and chance rows for every lead")


@pytest.mark.slow
def test_c6_learnability(verdict):
    synth = SynthConfig(amplitude=1.0, ar_std=0.05, spatial_noise=0.1, seed=11)
    data = ex.prepare_data(generate_ensemble(synth))
    results = []
    for seed in (1, 2, 3):
        cfg = ex.SweepConfig(leads=(0,), repetitions=1, seed=seed,
                             train=nn.TrainConfig(momentum=0.9))
        t0 = time.perf_counter()
        rec = ex.run_one(data, 0, 0, cfg)
        elapsed = time.perf_counter() - t0
        results.append((seed, rec.accuracy.get("negative", 0.0), rec.accuracy.get("positive", 0.0),
                        elapsed, rec.ok))
    ok = all(r[4] and r[1] >= 0.9 and r[2] >= 0.9 and r[3] < 300 for r in results)
    detail = "; ".join(f"seed {s}: negative {n:.3f} positive {p:.3f} ({e:.0f}s)"
                       for s, n, p, e, _ in results)
    verdict(6, ok, detail)


@pytest.mark.slow
def test_c7_skill_ordering(verdict):
    t0 = time.perf_counter()
    wins = []
    for trial in range(10):
        data = ex.prepare_data(generate_ensemble(SynthConfig(seed=100 + trial)))
        cfg = ex.SweepConfig(leads=(24,), repetitions=3, n_per_class=150, seed=trial,
                             train=nn.TrainConfig(momentum=0.9))
        t = ex.run_sweep(cfg, data).table
        wins.append(all(ex.ensemble_mean(t, "cnn", 24, c) >= ex.ensemble_mean(t, "persistence", 24, c)
                        for c in EXTREMES))
    elapsed = time.perf_counter() - t0
    verdict(7, sum(wins) >= 8 and elapsed < 3600,
            f"CNN >= persistence on both extremes at lead 24 in {sum(wins)}/10 trials "
            f"({elapsed:.0f}s)")


def test_c8_shapes(verdict):
    cfg = nn.CnnConfig()
    model = nn.init_model(cfg, (3, 224, 224), seed=0)
    _, cache = nn.forward(model, np.zeros((1, 3, 224, 224), dtype=np.float32), keep_cache=True)
    m1 = cache["m1_shape"][1:]
    m2 = cache["m2_shape"][1:]
    flat = cache["flat"].shape[1]
    small = cfg.stage_shapes((3, 33, 41))["flatten"]
    ok = m1 == (32, 111, 74) and m2 == (64, 54, 24) and flat == 82944 and small == 1344
    verdict(8, ok, f"224x224: {m1}, {m2}, flatten {flat}; 33x41: flatten {small}")


def test_c9_determinism_and_round_trips(verdict, tmp_path):
    stacks = generate_ensemble(SynthConfig(n_members=6, n_years=40, n_lat=16, n_lon=20, seed=2))
    data = ex.prepare_data(stacks)
    cfg = ex.SweepConfig(leads=(0, 3), repetitions=2, n_per_class=20,
                         train=nn.TrainConfig(max_epochs=3))
    a = ex.run_sweep(cfg, data).table
    b = ex.run_sweep(cfg, data).table
    same = a.rows == b.rows and all(
        np.float64(x.accuracy).tobytes() == np.float64(y.accuracy).tobytes()
        for x, y in zip(a.rows, b.rows))

    stack = stacks[0]
    io.write_stack(stack, tmp_path / "s.json")
    back = io.read_stack(tmp_path / "s.json")
    stack_ok = (back.data.tobytes() == stack.data.astype("<f4").tobytes()
                and np.array_equal(back.mask, stack.mask) and back.variables == stack.variables
                and back.grid == stack.grid and np.array_equal(back.years, stack.years))

    io.write_skill_csv(a, tmp_path / "skill.csv")
    reread = io.read_skill_csv(tmp_path / "skill.csv")
    io.write_skill_csv(reread, tmp_path / "skill2.csv")
    csv_ok = (tmp_path / "skill.csv").read_bytes() == (tmp_path / "skill2.csv").read_bytes()

    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=5)
    nn.save_checkpoint(model, tmp_path / "m.ckpt")
    loaded, _ = nn.load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = all(loaded.params[k].tobytes() == model.params[k].tobytes() for k in nn.PARAM_ORDER)
    verdict(9, same and stack_ok and csv_ok and ckpt_ok,
            f"repeat sweep identical={same}, stack={stack_ok}, skill csv={csv_ok}, "
            f"checkpoint={ckpt_ok}")
