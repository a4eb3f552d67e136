import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glitchsim import sched
from glitchsim.sched import ARMED, IDLE, TRIGGERED, AttackScheme, DetectorConfig, DetectorState


def expand(text):
    """Oracle: expand a scheme body token by token."""
    bits = []
    for tok in text.split():
        b, n = tok.split("*")
        bits += [int(b)] * int(n)
    return bits


def test_parse_render_example():
    text = "f_sram_hz=100000000\n0*800 1*2 0*98 1*2\n"
    s = sched.parse_scheme(text)
    assert sched.render_scheme(s) == text
    assert s.attack_delay == 800 and s.count == 2 and s.pulses == [(800, 2), (900, 2)]
    assert len(s) == 902
    assert s.pause_seconds() == pytest.approx(8e-6)


@pytest.mark.parametrize(
    "text",
    [
        "0*5\n",
        "f_sram_hz=10\n0*5 2*3\n",
        "f_sram_hz=10\n0*0\n",
        "f_sram_hz=10\n0*x\n",
        "f_sram_hz=0\n0*5\n",
        "hz=10\n0*5\n",
        "f_sram_hz=10\n\n",
    ],
)
def test_syntax_errors(text):
    with pytest.raises(SyntaxError):
        sched.parse_scheme(text)


def test_length_limits():
    with pytest.raises(sched.LengthOverflow):
        sched.parse_scheme("f_sram_hz=10\n0*99999999 1*2\n")
    with pytest.raises(sched.ArgumentOverflow):
        sched.make_scheme(10**8, 1, 1, 0)


def test_make_scheme():
    s = sched.make_scheme(5, 2, 3, 4)
    assert list(s.bits) == [0] * 5 + [1, 1] + [0] * 4 + [1, 1] + [0] * 4 + [1, 1]
    assert sched.make_scheme(3, 1, 0, 0).count == 0
    with pytest.raises(ValueError):
        sched.make_scheme(3, 0, 2, 1)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(1, 50)), min_size=1, max_size=30))
def test_round_trip_and_expansion(runs):
    s = AttackScheme(tuple(runs), 1000)
    body = " ".join(f"{b}*{n}" for b, n in runs)
    assert list(s.bits) == expand(body)
    text = sched.render_scheme(s)
    assert sched.render_scheme(sched.parse_scheme(text)) == text
    assert list(s.enabled_offsets()) == list(np.flatnonzero(expand(body)))
    assert AttackScheme.from_bits(s.bits, 1000) == s


def test_random_schemes_enabled_cycles_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        runs = [(int(rng.integers(0, 2)), int(rng.integers(1, 40))) for _ in range(rng.integers(1, 12))]
        f_sram = int(rng.choice([50, 100, 200]))
        s = AttackScheme(tuple(runs), f_sram)
        trig = int(rng.integers(0, 50))
        first, end = trig + int(rng.integers(0, 5)), trig + 400
        oracle = [t for t in range(first, end) if sched.controller_step(s, t - trig, 100) == 1]
        assert list(sched.enabled_cycles(s, trig, first, end, 100)) == oracle


def test_from_offsets():
    s = AttackScheme.from_offsets([3, 4, 9], length=12)
    assert list(s.bits) == [0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0]
    with pytest.raises(ValueError):
        AttackScheme.from_offsets([5], length=3)


def test_controller_step():
    s = sched.make_scheme(2, 1, 2, 1)
    assert [sched.controller_step(s, t) for t in (None, -1, 0, 1, 2, 3, 4, 5, 100)] == [0, 0, 0, 0, 1, 0, 1, 0, 0]
    # scheme clocked at half the main rate: every bit lasts two main cycles
    slow = AttackScheme(s.runs, 50_000_000)
    assert [sched.controller_step(slow, t, 100_000_000) for t in range(8)] == [0, 0, 0, 0, 1, 1, 0, 0]


def feed(words, cfg=DetectorConfig(debounce_cycles=3)):
    st_ = DetectorState()
    out = []
    for w in words:
        st_, fired = sched.detector_step(st_, w, cfg)
        out.append((st_.fsm, fired))
    return st_, out


def test_detector_example_debounce_three():
    idle, low = 0b01111, 0b00111
    st_, trace = feed([idle] * 16 + [low, idle, low, low, low])
    assert trace[15][0] == ARMED
    assert [t[0] for t in trace[16:]] == [ARMED, ARMED, ARMED, ARMED, TRIGGERED]
    assert st_.trigger_cycle == 18


def test_detector_needs_warmup():
    st_, trace = feed([0b01111] * 15 + [0b00011] * 10)
    assert all(f == IDLE for f, _ in trace)


def test_run_detector_matches_steps():
    rng = np.random.default_rng(3)
    for _ in range(200):
        hw = np.where(rng.random(80) < 0.6, 4, rng.integers(0, 6, 80))
        hw[:16] = 4
        cfg = DetectorConfig(debounce_cycles=int(rng.integers(1, 5)))
        st_ = DetectorState()
        confirm = -1
        for i, h in enumerate(hw):
            st_, fired = sched.detector_step(st_, (1 << int(h)) - 1, cfg)
            if fired and confirm < 0:
                confirm = i
        fast, idx = sched.run_detector(hw, cfg)
        assert idx == confirm and fast.trigger_cycle == st_.trigger_cycle
        assert sched.detector_reset(fast).fsm == IDLE
