import time

import numpy as np
import pytest

from glitchsim import accel, dspfault, sched, sim
from glitchsim.sched import AttackScheme

from _models import tiny_image, tiny_model

HOT = dspfault.FaultConfig(exposure=1.0)  # every exposed op sees the full probability


def tiny_cfg(**kw):
    return sim.SimConfig(lead_in_cycles=32, schedule=accel.ScheduleConfig(stall_cycles=20), **kw)


def test_config_invariants():
    cfg = sim.SimConfig()
    assert cfg.f_dsp == 2 * cfg.f_main and cfg.f_sram == cfg.f_main
    with pytest.raises(ValueError):
        sim.SimConfig(spacing="odd")
    with pytest.raises(ValueError):
        sim.SimConfig(engine="gpu")


def test_timeline(random_model):
    tl = sim.timeline(random_model)
    assert tl.total_cycles == 64 + 65668
    assert tl.window("Conv2") == (64 + 13448, 64 + 32648)
    assert tl.victim_load().size == tl.layer_ids().size == tl.total_cycles


def test_zero_scheme_is_transparent(random_model, rng):
    im = rng.integers(0, 256, (28, 28))
    tr = sim.run_guided(random_model, im, AttackScheme(((0, 50_000),)), sim.SimConfig(seed=2))
    assert tr.n_faults == 0 and tr.strike_cycles.size == 0
    assert np.array_equal(tr.scores, accel.infer(random_model, im)[0])
    assert tr.trigger_cycle is not None


def test_stall_window_strikes_never_fault(random_model, rng):
    cfg = sim.SimConfig(seed=1, fault=HOT)
    tl = sim.timeline(random_model, cfg)
    trig = sim.profile_trigger(random_model, cfg)
    stall = tl.window("Conv1")[1]
    scheme = AttackScheme.from_offsets(np.arange(stall, stall + 900) - trig)
    tr = sim.run_guided(random_model, rng.integers(0, 256, (28, 28)), scheme, cfg)
    assert tr.strike_cycles.size == 900 and tr.n_faults == 0


def test_conv2_scheme_faults_only_conv2(random_model, rng):
    cfg = sim.SimConfig(seed=4, fault=HOT)
    scheme = sim.guided_scheme(random_model, "Conv2", 4500, cfg)
    tr = sim.run_guided(random_model, rng.integers(0, 256, (28, 28)), scheme, cfg)
    assert tr.n_faults > 0
    assert set(tr.faults.layer_id.tolist()) == {2}
    lo, hi = sim.timeline(random_model, cfg).window("Conv2")
    assert tr.strike_cycles.min() >= lo and tr.strike_cycles.max() < hi


def test_blind_edge_cases(random_model, rng):
    im = rng.integers(0, 256, (28, 28))
    cfg = sim.SimConfig(seed=0, fault=HOT)
    T = sim.timeline(random_model, cfg).total_cycles
    assert sim.run_blind(random_model, im, 0, cfg).n_faults == 0
    full = sim.run_blind(random_model, im, T, cfg)
    assert np.array_equal(full.strike_cycles, np.arange(T))
    with pytest.raises(sched.ArgumentOverflow):
        sim.run_blind(random_model, im, T + 1, cfg)


def test_blind_strikes_land_proportionally(random_model):
    tl = sim.timeline(random_model)
    lo, hi = tl.window("Conv2")
    T, n = tl.total_cycles, 2000
    p = (hi - lo) / T
    hits = []
    for seed in range(20):
        s = sim.blind_strikes(n, T, sim.streams(seed, 0)[sim.BLIND])
        assert np.unique(s).size == n
        hits.append(np.count_nonzero((s >= lo) & (s < hi)))
    sigma = np.sqrt(n * p * (1 - p) / 20)
    assert abs(np.mean(hits) - n * p) <= 3 * sigma


def test_determinism(random_model, rng):
    im = rng.integers(0, 256, (28, 28))
    cfg = sim.SimConfig(seed=9, trace_enabled=True, fault=HOT)
    scheme = sim.guided_scheme(random_model, "Conv1", 300, cfg)
    assert sim.run_guided(random_model, im, scheme, cfg) == sim.run_guided(random_model, im, scheme, cfg)
    other = sim.run_guided(random_model, im, scheme, cfg.replace(seed=10))
    assert not np.array_equal(other.v, sim.run_guided(random_model, im, scheme, cfg).v)


@pytest.mark.parametrize("seed", range(4))
def test_fast_matches_reference_tiny(seed):
    m, im = tiny_model(seed), tiny_image(seed)
    cfg = tiny_cfg(seed=seed, trace_enabled=True, fault=dspfault.FaultConfig(exposure=1.0, rho_dup_per_slice=dspfault.random_slice_profile(8, seed)))
    tl = sim.timeline(m, cfg)
    trig = sim.profile_trigger(m, cfg)
    lo, hi = tl.window("Conv1")
    scheme = AttackScheme.from_offsets(np.arange(trig + 4, tl.total_cycles) - trig)
    fast = sim.run_guided(m, im, scheme, cfg)
    ref = sim.run_guided(m, im, scheme, cfg.replace(engine="reference"))
    assert fast.n_faults > 0
    assert fast == ref
    rng = np.random.default_rng(seed)
    strikes = np.sort(rng.choice(tl.total_cycles, 60, replace=False))
    assert sim.run_strikes(m, im, strikes, cfg) == sim.run_strikes(m, im, strikes, cfg.replace(engine="reference"))
    assert sim.run_blind(m, im, 70, cfg) == sim.run_blind(m, im, 70, cfg.replace(engine="reference"))


def test_fast_matches_reference_lenet(ref_model, mnist_test):
    images, _ = mnist_test
    cfg = sim.SimConfig(seed=3, trace_enabled=True, fault=dspfault.FaultConfig(exposure=0.5))
    scheme = sim.guided_scheme(ref_model, "Conv2", 1500, cfg)
    fast = sim.run_guided(ref_model, images[7], scheme, cfg, image_id=7)
    ref = sim.run_guided(ref_model, images[7], scheme, cfg.replace(engine="reference"), image_id=7)
    assert fast.n_faults > 0 and fast == ref


def test_trace_signatures(ref_model, mnist_test):
    images, _ = mnist_test
    cfg = sim.SimConfig(seed=0, trace_enabled=True)
    tr = sim.run_guided(ref_model, images[0], AttackScheme(((0, 1),)), cfg)
    assert len(list(tr.rows())) == tr.total_cycles
    tl = sim.timeline(ref_model, cfg)
    stall = np.ones(tr.total_cycles, dtype=bool)
    for w in tl.schedule.windows:
        lo, hi = tl.window(w.name)
        stall[lo : hi + 8] = False  # skip the filter tail after each window
    mean = lambda name: tr.count[slice(*tl.window(name))].mean()
    assert 88 <= tr.count[stall].mean() <= 92
    assert max(mean("Conv1"), mean("Conv2")) < mean("Pool1") < tr.count[stall].mean()


def test_guided_run_is_fast(ref_model, mnist_test):
    images, _ = mnist_test
    cfg = sim.SimConfig(seed=0, trace_enabled=True)
    scheme = sim.guided_scheme(ref_model, "Conv2", 4500, cfg)
    sim.run_guided(ref_model, images[0], scheme, cfg)  # JIT warm-up
    t = time.perf_counter()
    sim.run_guided(ref_model, images[1], scheme, cfg, image_id=1)
    assert time.perf_counter() - t < 0.1


def test_guided_scheme_placement(random_model):
    cfg = sim.SimConfig()
    trig = sim.profile_trigger(random_model, cfg)
    lo, hi = sim.timeline(random_model, cfg).window("Conv2")
    s = sim.guided_scheme(random_model, "Conv2", 1000, cfg, trig)
    offs = s.enabled_offsets() + trig
    assert offs.size == 1000 and offs[0] == lo and offs[-1] < hi
    gaps = np.diff(offs)
    assert gaps.max() - gaps.min() <= 1
    capped = sim.guided_scheme(random_model, "FC2", 4500, cfg, trig)
    assert len(capped.enabled_offsets()) == 300
    conv1 = sim.guided_scheme(random_model, "Conv1", 100, cfg, trig)
    assert conv1.enabled_offsets()[0] >= cfg.detector.debounce_cycles
    rnd = sim.guided_scheme(random_model, "Conv2", 500, cfg.replace(spacing="random"), trig, np.random.default_rng(0))
    assert len(rnd.enabled_offsets()) == 500


def test_sweep_rows_and_jobs(random_model, rng):
    images = rng.integers(0, 256, (6, 28, 28))
    labels = accel.infer_batch(random_model, images)
    cfg = sim.SimConfig(fault=HOT)
    rows = sim.sweep_accuracy(random_model, images, labels, "Conv2", [0, 200], cfg, seeds=(0, 1))
    assert [r[2:4] for r in rows] == [(0, 0), (0, 1), (200, 0), (200, 1)]
    assert rows[0][4] == rows[1][4] == 1.0
    assert rows == sim.sweep_accuracy(random_model, images, labels, "Conv2", [0, 200], cfg, seeds=(0, 1), jobs=2)
    summary = sim.summarize(rows)
    assert summary[0][5] == 0.0
    with pytest.raises(ValueError):
        sim.sweep_accuracy(random_model, images, labels, "Conv2", [200, 0], cfg)
    blind = sim.sweep_accuracy(random_model, images, labels, None, [100], cfg, seeds=(0,), mode="blind")
    assert blind[0][:3] == ("all", "blind", 100)
