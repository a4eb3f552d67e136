import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glitchsim import pdn, striker, tdc


def test_pdn_steady_state_and_calibration():
    cfg = pdn.PdnConfig(noise_sigma=0.0)
    state = pdn.initial_state(cfg)
    rng = np.random.default_rng(0)
    for _ in range(100):
        state = pdn.step(state, 24.0, 0.0, rng, cfg)
    assert state.v == pytest.approx(1.0 - 0.12)
    assert state.v_inst == pytest.approx(0.88)
    assert pdn.steady_drop(24.0) == pytest.approx(0.12)
    assert pdn.calibrate(24_000, 0.12) == pytest.approx(cfg.r_eff)
    with pytest.raises(ValueError):
        pdn.step(state, -1.0, 0.0, rng, cfg)
    with pytest.raises(ValueError):
        pdn.PdnConfig(tau_cycles=0.5)


def test_pdn_trace_bit_identical_to_steps():
    cfg = pdn.PdnConfig()
    rng = np.random.default_rng(5)
    att = np.where(rng.random(500) < 0.1, 8.0, 0.0)
    vic = rng.integers(0, 9, 500).astype(float)
    state, v, vi = pdn.initial_state(cfg), [], []
    step_rng = np.random.default_rng(9)
    for a, b in zip(att, vic):
        state = pdn.step(state, a, b, step_rng, cfg)
        v.append(state.v)
        vi.append(state.v_inst)
    tv, tvi = pdn.trace(att, vic, np.random.default_rng(9).standard_normal(500), cfg)
    assert np.array_equal(tv, v) and np.array_equal(tvi, vi)


def test_pdn_filter_python_fallback_agrees():
    rng = np.random.default_rng(2)
    vt, noise = 1 - rng.random(300) * 0.1, rng.normal(0, 0.002, 300)
    assert np.array_equal(pdn._filter(vt, noise, 1.0, 0.3), pdn._filter_py(vt, noise, 1.0, 0.3))


# -- tdc


def bit_loop_popcount(raw):
    n = 0
    for b in raw:
        if b:
            n += 1
    return n


def test_popcount_oracle_on_ideal_codes():
    for k in range(129):
        raw = tdc.thermometer(k)
        assert tdc.encode(raw) == bit_loop_popcount(raw) == k
        word = int("".join("1" if b else "0" for b in raw[::-1]), 2)
        assert tdc.encode(word) == k


def test_popcount_oracle_on_bubbled_vectors():
    rng = np.random.default_rng(0)
    cfg = tdc.TdcConfig(bubble_prob=0.05)
    for _ in range(2000):
        raw = tdc.sample(1.0 - rng.random() * 0.3, cfg, rng)
        assert tdc.encode(raw) == bit_loop_popcount(raw)


def test_nominal_count_and_monotone_mapping():
    cfg = tdc.TdcConfig()
    assert tdc.ideal_count(1.0, cfg) == 90
    grid = np.arange(0.6, 1.1, 0.001)
    counts = tdc.ideal_count(grid, cfg)
    assert np.all(np.diff(counts) >= 0)
    assert counts[0] == 0 and counts[-1] == 120


def test_taps():
    raw = tdc.thermometer(90)
    assert tdc.tap(raw) == 0b01111
    assert tdc.hamming_weight(tdc.tap(tdc.thermometer(80))) == 3
    with pytest.raises(tdc.IndexOutOfRange):
        tdc.tap(raw, (1, 2, 3, 4, 128))
    with pytest.raises(ValueError):
        tdc.tap(raw, (5, 4, 3, 2, 1))
    with pytest.raises(ValueError):
        tdc.TdcConfig(l_carry=64)


@settings(max_examples=25)
@given(st.lists(st.floats(0.7, 1.05), min_size=1, max_size=40), st.integers(0, 2**32))
def test_trace_matches_sample_loop(vs, seed):
    cfg = tdc.TdcConfig(bubble_prob=0.01)
    counts, words = tdc.trace(np.array(vs), cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    for v, c, w in zip(vs, counts, words):
        s = tdc.measure(v, cfg, rng)
        assert (s.count, s.taps) == (c, w)
    assert np.array_equal(tdc.tap_hw(words), [tdc.hamming_weight(w) for w in words])


# -- striker


def test_striker_load():
    cfg = striker.StrikerConfig()
    assert cfg.full_load == 8.0
    assert striker.load(0, cfg) == 0.0 and striker.load(1, cfg) == 8.0
    ramp = striker.StrikerConfig(n_cells=4000, ramp_cycles=4)
    assert [striker.load(1, ramp, r) for r in (1, 2, 4, 9)] == [1.0, 2.0, 4.0, 4.0]
    en = np.array([0, 1, 1, 1, 1, 1, 0, 1], dtype=bool)
    runs = [0, 1, 2, 3, 4, 5, 0, 1]
    assert list(striker.load_trace(en, ramp)) == [striker.load(e, ramp, r) for e, r in zip(en, runs)]
    with pytest.raises(ValueError):
        striker.StrikerConfig(n_cells=-1)
