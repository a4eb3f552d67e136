import csv
import json

import numpy as np
import pytest

from glitchsim import cli, sched, sim


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_usage_errors(tmp_path):
    assert run("--out", tmp_path, "bogus") == cli.EXIT_USAGE
    assert run("--out", tmp_path, "--set", "pdn.nope=1", "characterize-dsp", "--seed", 0) == cli.EXIT_USAGE
    assert run("--out", tmp_path, "--set", "pdn.tau_cycles=0.1", "characterize-dsp", "--seed", 0) == cli.EXIT_USAGE
    assert run("--out", tmp_path, "sweep", "--seed", 0, "--grid", "5,1") == cli.EXIT_USAGE
    assert run("--help") == cli.EXIT_OK


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\npdn.noise_sigma = 0.004\nfault.exposure=0.5\ntrain.epochs = 2\n")
    settings, pairs = cli.resolve_settings(conf, ["pdn.noise_sigma=0.001"])
    assert settings.sim.pdn.noise_sigma == 0.001
    assert settings.sim.fault.exposure == 0.5
    assert settings.train.epochs == 2
    assert settings.sim.fault.v_safe == sim.SimConfig().fault.v_safe
    assert cli.resolve_settings(None, ["trace_enabled=yes"])[0].sim.trace_enabled is True
    assert cli.resolve_settings(None, ["fault.rho_dup_per_slice=0.1,0.9"])[0].sim.fault.rho_dup_per_slice == (0.1, 0.9)
    with pytest.raises(cli.UsageError):
        cli.resolve_settings(None, ["pdn=3"])
    with pytest.raises(cli.UsageError):
        cli.parse_config_text("novalue\n")


def test_missing_dataset(tmp_path):
    code = run("--out", tmp_path, "train", "--seed", 1, "--data", tmp_path / "absent")
    assert code == cli.EXIT_INPUT


def test_train_is_reproducible(tmp_path, mnist_dir):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("--out", out, "train", "--epochs", 1, "--subset", 64, "--seed", 1, "--data", mnist_dir, "--no-eval") == 0
        outs.append(out)
    assert (outs[0] / "weights.dsqw").read_bytes() == (outs[1] / "weights.dsqw").read_bytes()
    assert (outs[0] / "train.manifest.json").read_bytes() != b""


def test_generated_seed_recorded(tmp_path):
    assert run("--out", tmp_path, "characterize-dsp", "--cells", "0,24000", "--trials", 200, "--seeds", 1) == 0
    manifest = json.loads((tmp_path / "characterize-dsp.manifest.json").read_text())
    assert isinstance(manifest["seed"], int)


def test_characterize(tmp_path):
    assert run("--out", tmp_path, "characterize-dsp", "--seed", 0, "--cells", "0,12000,24000", "--trials", 2000, "--seeds", 2) == 0
    table = rows(tmp_path / "dsp_rates.csv")
    assert list(table[0]) == ["n_cells", "dup_rate", "rand_rate", "total_rate"]
    assert float(table[0]["total_rate"]) == 0.0 and float(table[-1]["total_rate"]) >= 0.99


@pytest.fixture(scope="module")
def traced(tmp_path_factory, mnist_dir):
    out = tmp_path_factory.mktemp("trace")
    assert run("--out", out, "trace", "--seed", 0, "--data", mnist_dir) == 0
    return out, rows(out / "trace.csv"), json.loads((out / "trace.manifest.json").read_text())


def test_trace(traced, ref_model):
    _, table, manifest = traced
    tl = sim.timeline(ref_model)
    assert len(table) == tl.total_cycles
    layers = np.array([r["layer"] for r in table])
    for name, (lo, hi) in manifest["results"]["windows"].items():
        assert set(layers[lo:hi]) == {name}
        assert (lo, hi) == tl.window(name)
    counts = np.array([int(r["count"]) for r in table])
    assert 88 <= counts[:60].mean() <= 92


def test_attack(tmp_path, traced, mnist_dir):
    _, table, manifest = traced
    trigger = manifest["results"]["trigger_cycle"]
    conv2_start = next(int(r["cycle"]) for r in table if r["layer"] == "Conv2")
    scheme = sched.make_scheme(conv2_start - trigger, 1, 4500, 3)
    sfile = tmp_path / "conv2.scheme"
    sfile.write_text(sched.render_scheme(scheme))
    args = ("--out", tmp_path / "a", "--set", "fault.exposure=1.0", "attack", "--scheme", sfile, "--images", 3, "--seed", 0, "--data", mnist_dir, "--layer-hint", "Conv2")
    assert run(*args) == 0
    summary = json.loads((tmp_path / "a" / "attack.manifest.json").read_text())["results"]
    assert summary["faults"] > 0 and summary["layer_hint_fraction"] == 1.0

    quiet = tmp_path / "zero.scheme"
    quiet.write_text("f_sram_hz=100000000\n0*1000\n")
    assert run("--out", tmp_path / "z", "attack", "--scheme", quiet, "--images", 20, "--seed", 0, "--data", mnist_dir) == 0
    summary = json.loads((tmp_path / "z" / "attack.manifest.json").read_text())["results"]
    assert summary["accuracy"] == summary["baseline_accuracy"] and summary["faults"] == 0

    bad = tmp_path / "bad.scheme"
    bad.write_text("f_sram_hz=100000000\n0*10 7*3\n")
    assert run("--out", tmp_path / "b", "attack", "--scheme", bad, "--seed", 0, "--data", mnist_dir) == cli.EXIT_INPUT


def test_sweep_and_replay(tmp_path, mnist_dir):
    out = tmp_path / "s"
    args = ("--out", out, "--set", "fault.exposure=0.5", "sweep", "--seed", 3, "--grid", "0,300", "--images", 8, "--seeds", 2, "--mode", "both", "--data", mnist_dir)
    assert run(*args) == 0
    table = rows(out / "sweep.csv")
    assert [r["mode"] for r in table] == ["guided"] * 4 + ["blind"] * 4
    summary = rows(out / "sweep_summary.csv")
    base = json.loads((out / "sweep.manifest.json").read_text())["results"]["baseline_accuracy"]
    zero = [r for r in summary if r["n_strikes"] == "0"]
    assert all(float(r["mean_accuracy"]) == base for r in zero)

    again = tmp_path / "replayed"
    assert run("--out", again, "replay", out / "sweep.manifest.json") == 0
    for name in ("sweep.csv", "sweep_summary.csv", "sweep.manifest.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_replay_rejects_garbage(tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text("{not json")
    assert run("replay", bad) == cli.EXIT_INPUT
