"""Command-line harness.

Every command writes its result files plus ``<command>.manifest.json`` into
``--out``.  A manifest records the resolved arguments and configuration, so
``glitchsim replay MANIFEST`` reproduces the run byte for byte.

Configuration precedence is: built-in defaults, then ``--config FILE``
(``key = value`` lines, ``#`` comments, dotted keys such as
``pdn.noise_sigma`` or ``train.epochs``), then ``--set key=value`` flags.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__, accel, dataio, dspfault, sched, sim, trainer

log = logging.getLogger("glitchsim")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4
MNIST_ENV = "GLITCHSIM_MNIST"
DEFAULT_WEIGHTS = Path(__file__).resolve().parent / "data" / "lenet5_q3_5.dsqw"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class Settings:
    sim: sim.SimConfig = dataclasses.field(default_factory=sim.SimConfig)
    train: trainer.TrainConfig = dataclasses.field(default_factory=trainer.TrainConfig)


def _coerce(text: str, current):
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple) or current is None:
        if text.lower() in ("", "none"):
            return None
        return tuple(float(t) if "." in t else int(t) for t in text.split(","))
    return text


def _set_path(obj, parts: list, text: str):
    names = {f.name for f in dataclasses.fields(obj)}
    head = parts[0]
    if head not in names:
        raise UsageError(f"unknown config key {head!r}")
    current = getattr(obj, head)
    if len(parts) > 1:
        if not dataclasses.is_dataclass(current):
            raise UsageError(f"config key {head!r} has no sub-keys")
        value = _set_path(current, parts[1:], text)
    else:
        if dataclasses.is_dataclass(current):
            raise UsageError(f"config key {head!r} needs a sub-key")
        try:
            value = _coerce(text, current)
        except ValueError as exc:
            raise UsageError(f"bad value for {head!r}: {exc}") from exc
    try:
        return dataclasses.replace(obj, **{head: value})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


SHORTCUTS = ("pdn", "tdc", "striker", "detector", "fault", "schedule")


def apply_setting(settings: Settings, key: str, text: str) -> Settings:
    """Set one dotted key; ``pdn.x`` is shorthand for ``sim.pdn.x``."""
    parts = key.strip().split(".")
    if parts[0] in SHORTCUTS or parts[0] in {f.name for f in dataclasses.fields(sim.SimConfig)}:
        parts = ["sim"] + parts
    return _set_path(settings, parts, text.strip())


def parse_config_text(text: str) -> list:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_settings(config_path, overrides) -> tuple:
    """Settings plus the ordered list of applied ``(key, value)`` pairs."""
    pairs = []
    if config_path:
        try:
            pairs += parse_config_text(Path(config_path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    settings = Settings()
    for k, v in pairs:
        settings = apply_setting(settings, k, v)
    return settings, pairs


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# helpers


def _data_root(args) -> Path:
    return Path(args.data or os.environ.get(MNIST_ENV) or "data/mnist")


def _load_test(args, n=None):
    images, labels = dataio.load_mnist(_data_root(args), "test")
    n = images.count if n is None else min(int(n), images.count)
    return images.pixels[:n], labels.labels[:n]


def _weights(args):
    path = Path(args.weights) if args.weights else DEFAULT_WEIGHTS
    return dataio.load_weights(path)


def _out(args, name: str) -> Path:
    return Path(args.out) / name


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _manifest(args, settings: Settings, pairs, outputs: list, extra=None) -> Path:
    argv = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "config", "set")}
    payload = {
        "command": args.command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "args": argv,
        "settings": [list(p) for p in pairs],
        "config": _plain(settings),
        "outputs": sorted(Path(p).name for p in outputs),
    }
    if extra:
        payload["results"] = extra
    path = _out(args, f"{args.command}.manifest.json")
    _write_json(path, payload)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, settings: Settings, pairs) -> int:
    tcfg = dataclasses.replace(settings.train, seed=args.seed)
    for key in ("epochs", "learning_rate", "batch_size"):
        if getattr(args, key) is not None:
            tcfg = dataclasses.replace(tcfg, **{key: getattr(args, key)})
    images, labels = dataio.load_mnist(_data_root(args), "train")
    x, y = images.pixels, labels.labels
    if args.subset:
        x, y = x[: args.subset], y[: args.subset]
    model = trainer.train(x, y, tcfg)
    q = trainer.quantize_model(model)
    weights = _out(args, args.weights_name)
    dataio.save_weights(q, weights)
    results = {}
    if not args.no_eval:
        te_x, te_y = _load_test(args)
        results["float_accuracy"] = trainer.evaluate(model, te_x, te_y)
        results["quantized_accuracy"] = trainer.evaluate(q, te_x, te_y)
        print(f"test accuracy: float {results['float_accuracy']:.4f}, quantized {results['quantized_accuracy']:.4f}")
    _manifest(args, dataclasses.replace(settings, train=tcfg), pairs, [weights], results)
    print(f"wrote {weights}")
    return EXIT_OK


TRACE_COLUMNS = ("cycle", "v", "count", "taps", "layer", "enable")


def cmd_trace(args, settings: Settings, pairs) -> int:
    model = _weights(args)
    images, labels = _load_test(args, args.image_index + 1)
    cfg = settings.sim.replace(seed=args.seed, trace_enabled=True)
    idle = sched.AttackScheme(((0, 1),), cfg.f_sram)
    tr = sim.run_guided(model, images[args.image_index], idle, cfg, args.image_index)
    names = dict(enumerate(model.names))
    rows = [
        {"cycle": c, "v": v, "count": k, "taps": t, "layer": names.get(l, "stall"), "enable": e}
        for c, v, k, t, l, e in tr.rows()
    ]
    path = _out(args, "trace.csv")
    dataio.write_table(rows, TRACE_COLUMNS, csv_path=path)
    tl = sim.timeline(model, cfg)
    windows = {w.name: list(tl.window(w.name)) for w in tl.schedule.windows}
    extra = {"trigger_cycle": tr.trigger_cycle, "confirm_cycle": tr.confirm_cycle, "windows": windows, "prediction": tr.prediction}
    _manifest(args, settings, pairs, [path], extra)
    print(f"wrote {path} ({len(rows)} cycles, trigger at {tr.trigger_cycle})")
    return EXIT_OK


RATE_COLUMNS = ("n_cells", "dup_rate", "rand_rate", "total_rate")


def cmd_characterize_dsp(args, settings: Settings, pairs) -> int:
    grid = _int_list(args.cells)
    if not grid:
        raise UsageError("--cells must not be empty")
    seeds = [args.seed + i for i in range(args.seeds)]
    fcfg = dataclasses.replace(settings.sim.fault, exposure=1.0)
    table = dspfault.characterize(grid, args.trials, fcfg, settings.sim.pdn, seeds)
    rows = [dict(zip(RATE_COLUMNS, r)) for r in table]
    path = _out(args, "dsp_rates.csv")
    dataio.write_table(rows, RATE_COLUMNS, csv_path=path)
    _manifest(args, settings, pairs, [path])
    for r in table:
        print("%6d  dup %.4f  rand %.4f  total %.4f" % r)
    return EXIT_OK


PRED_COLUMNS = ("image", "label", "clean", "prediction", "faults", "duplication", "random")


def cmd_attack(args, settings: Settings, pairs) -> int:
    scheme = sched.load_scheme(args.scheme)
    model = _weights(args)
    images, labels = _load_test(args, args.images)
    cfg = settings.sim.replace(seed=args.seed)
    clean = accel.infer_batch(model, images)
    rows = []
    per_layer = {}
    for i, cp in sim._clean_slices(model, images):
        tr = sim.run_guided(model, images[i], scheme, cfg, i, cp)
        c = tr.faults.counts()
        rows.append(
            {"image": i, "label": int(labels[i]), "clean": int(clean[i]), "prediction": tr.prediction,
             "faults": c["faults"], "duplication": c["duplication"], "random": c["random"]}
        )
        for lid in tr.faults.layer_id.tolist():
            per_layer[model.names[lid]] = per_layer.get(model.names[lid], 0) + 1
    path = _out(args, "attack.csv")
    dataio.write_table(rows, PRED_COLUMNS, csv_path=path)
    n = max(len(rows), 1)
    summary = {
        "images": len(rows),
        "baseline_accuracy": float(np.mean(clean == labels)) if len(rows) else 0.0,
        "accuracy": sum(r["prediction"] == r["label"] for r in rows) / n,
        "faults": sum(r["faults"] for r in rows),
        "faults_per_layer": dict(sorted(per_layer.items())),
    }
    if args.layer_hint:
        total = summary["faults"]
        summary["layer_hint_fraction"] = per_layer.get(args.layer_hint, 0) / total if total else None
    _manifest(args, settings, pairs, [path], summary)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args, settings: Settings, pairs) -> int:
    grid = _int_list(args.grid)
    if grid != sorted(grid):
        raise UsageError("--grid must be sorted")
    model = _weights(args)
    images, labels = _load_test(args, args.images)
    seeds = [args.seed + i for i in range(args.seeds)]
    cfg = settings.sim
    modes = ["guided", "blind"] if args.mode == "both" else [args.mode]
    rows = []
    for mode in modes:
        layers = [l.strip() for l in args.layers.split(",") if l.strip()] if mode == "guided" else [None]
        for layer in layers:
            if layer is not None and layer not in model.names:
                raise UsageError(f"unknown layer {layer!r}; choose from {model.names}")
            rows += sim.sweep_accuracy(model, images, labels, layer, grid, cfg, seeds, mode, args.jobs)
    baseline = float(np.mean(accel.infer_batch(model, images) == labels))
    path = _out(args, "sweep.csv")
    dataio.write_table([dict(zip(sim.SWEEP_COLUMNS, r)) for r in rows], sim.SWEEP_COLUMNS, csv_path=path)
    summary = sim.summarize(rows, baseline)
    spath = _out(args, "sweep_summary.csv")
    dataio.write_table([dict(zip(sim.SUMMARY_COLUMNS, r)) for r in summary], sim.SUMMARY_COLUMNS, csv_path=spath)
    _manifest(args, settings, pairs, [path, spath], {"baseline_accuracy": baseline})
    for r in summary:
        print("%-6s %-6s %6d  acc %.4f +- %.4f  drop %.4f" % r)
    return EXIT_OK


def cmd_replay(args, settings: Settings, pairs) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as exc:
        raise dataio.FormatError(f"cannot read manifest: {exc}") from exc
    argv = manifest_argv(manifest, args.out or str(Path(args.manifest).parent))
    return main(argv)


def manifest_argv(manifest: dict, out: str) -> list:
    """Command line that reproduces a manifest's run into ``out``."""
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[manifest["command"]]
    argv = ["--out", out]
    for k, v in manifest["settings"]:
        argv += ["--set", f"{k}={v}"]
    argv.append(manifest["command"])
    positional = []
    for action in sub._actions:
        if action.dest not in manifest["args"] or action.dest == "help":
            continue
        value = manifest["args"][action.dest]
        if not action.option_strings:
            positional.append(str(value))
        elif isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(action.option_strings[-1])
        elif value is not None:
            argv += [action.option_strings[-1], str(value)]
    return argv + positional


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glitchsim", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, data=True, weights=True):
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (generated and recorded if omitted)")
        if data:
            sp.add_argument("--data", help=f"MNIST directory (default: ${MNIST_ENV} or data/mnist)")
        if weights:
            sp.add_argument("--weights", help="DSQW weight file (default: bundled reference model)")

    sp = sub.add_parser("train", help="train and quantize LeNet-5")
    common(sp, weights=False)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--subset", type=int, default=0, help="train on the first N images only")
    sp.add_argument("--weights-name", default="weights.dsqw")
    sp.add_argument("--no-eval", action="store_true", help="skip the test-set evaluation")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("trace", help="fault-free traced run for profiling")
    common(sp)
    sp.add_argument("--image-index", type=int, default=0)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("characterize-dsp", help="single-strike DSP fault rates per cell count")
    common(sp, data=False, weights=False)
    sp.add_argument("--cells", default=",".join(str(n) for n in range(0, 26001, 1000)))
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_characterize_dsp)

    sp = sub.add_parser("attack", help="guided attack replaying a scheme file")
    common(sp)
    sp.add_argument("--scheme", required=True)
    sp.add_argument("--images", type=int, default=100)
    sp.add_argument("--layer-hint", help="layer name whose share of faults is reported")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("sweep", help="accuracy versus strike count")
    common(sp)
    sp.add_argument("--layers", default="Conv2")
    sp.add_argument("--grid", default="0,500,1000,2000,3000,4500")
    sp.add_argument("--mode", choices=("guided", "blind", "both"), default="guided")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--images", type=int, default=1000)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings, pairs = resolve_settings(args.config, args.set)
        if hasattr(args, "seed") and args.seed is None:
            args.seed = secrets.randbits(31)
            log.warning("no --seed given; using %d (recorded in the manifest)", args.seed)
        for attr in ("images", "seeds", "trials", "jobs", "subset", "image_index"):
            if getattr(args, attr, 0) is not None and getattr(args, attr, 0) < 0:
                raise UsageError(f"--{attr.replace('_', '-')} must be non-negative")
        return args.func(args, settings, pairs)
    except (UsageError, sched.ArgumentOverflow) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SyntaxError, sched.LengthOverflow, dataio.FormatError, dataio.DatasetNotFound, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
