import numpy as np
import pytest

from glitchsim import accel, dspfault
from glitchsim.accel import DUPLICATION, POOL, RANDOM, LayerFaults
from glitchsim.fxp import Fx

from _models import tiny_image, tiny_model


def test_default_schedule(random_model):
    s = accel.compile_schedule(random_model)
    durations = [w.duration for w in s.windows]
    assert durations == [10800, 648, 19200, 30720, 300]
    assert durations[3] > durations[2] > durations[0]
    assert all(b.start - a.end == 1000 for a, b in zip(s.windows, s.windows[1:]))
    assert s.total_cycles == 65668
    assert s.layer_at(10799) == 0 and s.layer_at(10800) == -1
    load = accel.victim_load_trace(s)
    assert load[0] == 8 and load[11000] == 0 and load[11800] == pytest.approx(0.6)
    assert load[40000] == 4
    for c in (0, 10800, 11800, 65667):
        assert load[c] == accel.victim_load(s, c)


def test_op_issue_order(random_model):
    w = accel.compile_schedule(random_model).windows[2]
    assert list(w.op_range(w.start + 3)) == list(range(24, 32))
    assert w.ops_at(w.end) == 0


def test_batched_inference_matches_single(random_model, rng):
    images = rng.integers(0, 256, (6, 28, 28))
    scores = accel.scores_batch(random_model, images, chunk=4)
    for im, s in zip(images, scores):
        raw, pred = accel.infer(random_model, im)
        assert np.array_equal(raw, s) and pred == int(np.argmax(s))


def test_identity_hook_matches_fast_path():
    m, im = tiny_model(), tiny_image()
    calls = []

    def hook(rec, correct):
        calls.append(rec)
        assert correct.raw == rec.a.raw * rec.c.raw
        return correct

    scores, pred = accel.infer_with_hook(m, im, hook)
    ref, ref_pred = accel.infer(m, im)
    assert [s.raw for s in scores] == list(ref) and pred == ref_pred
    dsp_ops = [n for n, l in zip(m.op_counts(), m.layers) if l.kind != POOL]
    assert len(calls) == sum(dsp_ops)
    assert all(r.slice_id == r.op_index % 8 for r in calls if r.layer_id == 0)


def test_hook_format_enforced():
    with pytest.raises(ValueError):
        accel.infer_with_hook(tiny_model(), tiny_image(), lambda rec, c: Fx(0))


def slice_oracle(model, image, plan):
    """Per-op reference: DspSlice objects driven by forced fault kinds."""
    sched_ = accel.compile_schedule(model)
    slices = [dspfault.DspSlice(s, model.fmt) for s in range(sched_.n_slices)]
    events = []

    class Fixed:
        def __init__(self, code):
            self.code = code

        def random(self, n):
            return np.array([0.0, 0.0, self.code])

    def hook(rec, correct):
        kind, u = plan.get((rec.layer_id, rec.op_index), (None, 0.0))
        out, ev = dspfault.execute(slices[rec.slice_id], rec, 1.0, False, Fixed(u), force=kind)
        if ev is not None:
            events.append(ev)
        return out

    scores, _ = accel.infer_with_hook(model, image, hook, sched_)
    return np.array([s.raw for s in scores]), events


@pytest.mark.parametrize("seed", range(6))
def test_forward_faulted_matches_slice_oracle(seed):
    m, im = tiny_model(seed), tiny_image(seed)
    rng = np.random.default_rng(seed)
    sched_ = accel.compile_schedule(m)
    pfmt = accel.product_format(m.fmt)
    plan, faults = {}, {}
    for lid, n_ops in enumerate(m.op_counts()):
        if m.layers[lid].kind == POOL:
            continue
        ops = np.sort(rng.choice(n_ops, size=min(n_ops, 12), replace=False))
        kinds = rng.integers(0, 2, ops.size)
        u = rng.random(ops.size)
        codes = dspfault.random_code(u, pfmt)
        for k, kind, uu in zip(ops, kinds, u):
            plan[(lid, int(k))] = (int(kind), float(uu))
        faults[lid] = LayerFaults(ops, kinds, np.where(kinds == RANDOM, codes, 0))
    expect, events = slice_oracle(m, im, plan)
    x0 = accel.image_to_raw(im).reshape(m.input_shape)
    acts, log, _ = accel.forward_faulted(m, x0, faults, sched_)
    assert np.array_equal(acts[-1].reshape(-1), expect)
    assert [(e.layer_id, e.op_index, e.kind, e.correct, e.emitted) for e in log.events()] == [
        (e.layer_id, e.op_index, e.kind, e.correct, e.emitted) for e in events
    ]


def test_forward_faulted_without_faults_is_clean(random_model, rng):
    im = rng.integers(0, 256, (28, 28))
    x0 = accel.image_to_raw(im).reshape(random_model.input_shape)
    acts, log, carry = accel.forward_faulted(random_model, x0, {}, accel.compile_schedule(random_model))
    assert len(log) == 0
    assert np.array_equal(acts[-1], accel.infer(random_model, im)[0])
    assert carry.shape == (8,)


def test_callable_faults_see_actual_input():
    m, im = tiny_model(), tiny_image()
    seen = []

    def lazy(x):
        seen.append(x.copy())
        return LayerFaults([0], [DUPLICATION], [0])

    x0 = accel.image_to_raw(im).reshape(m.input_shape)
    clean = accel.clean_pass(m, x0)
    accel.forward_faulted(m, x0, {2: lazy}, accel.compile_schedule(m))
    assert np.array_equal(seen[0], clean[0][2])


def test_layer_faults_validation():
    with pytest.raises(ValueError):
        LayerFaults([3, 1], [0, 0], [0, 0])


def test_fault_log_round_trip():
    ev = [accel.FaultEvent(5, 1, 2, 9, RANDOM, 4, -7), accel.FaultEvent(6, 2, 2, 10, DUPLICATION, 1, 4)]
    log = accel.FaultLog.from_events(ev)
    assert log.events() == ev
    assert log.counts() == {"faults": 2, "duplication": 1, "random": 1}
    assert accel.FaultLog.concat([log, accel.FaultLog.empty()]) == log
