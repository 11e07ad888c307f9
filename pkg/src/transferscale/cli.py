"""Command-line entry point: ``transferscale <command> ... --out DIR``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``. The
manifest holds the resolved options (input paths made absolute, the output
directory left out), sha256 digests of the input bytes and of every output,
the seed and the toolkit version, and nothing time-dependent. Therefore
``transferscale replay DIR/manifest.json`` can rerun the command and check the
outputs byte for byte.

All randomness comes from ``--seed``. Each subsystem gets its own seed from
``derive_seed(seed, purpose)``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from collections import Counter
from dataclasses import fields

import numpy as np

from . import __version__
from .frontier import FrontierError, points_from_records, upper_hull
from .powerlaw import (AbsoluteUS, FitOptions, FitTarget, PowerLawError, PowerLawFit, TopQuantile, curve_csv,
                       fit_points_for_target, fit_power_law, fit_to_json, sample_size_sweep, sensitivity_csv, split_holdout)
from .records import (RecordError, RecordSelector, ScaleDomainError, ScaleKind, filter_records, parse_records,
                      scale_accuracy, serialize_records)
from .simgen import ConcentratedHighUS, GeneratorSpec, NoNoise, OneSidedBelow, Symmetric, Uniform, generate_cloud
from .statlab import task_correlation_matrix
from .toylab import (ProbeDataError, SyntheticTaskSpec, ToyModel, ToyModelSpec, TrainingDivergedError,
                     TrainOptions, build_model, head_hyperparam_sweep, layer_probe_sweep, make_task, sweep_csv,
                     train_upstream)
from .toylab.sweep import REFERENCE_EPOCHS, REFERENCE_HIDDEN, REFERENCE_INIT_SCALE, REFERENCE_LR

MANIFEST = "manifest.json"
INPUT_OPTIONS = ("records", "config", "model")  # options naming input files


class CommandError(Exception):
    """A user-facing failure: printed to stderr, exit status 1."""


def derive_seed(seed: int, purpose: str) -> int:
    """64-bit subsystem seed from sha256 of "<seed>:<purpose>"."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects the inputs read and the outputs produced by one command."""

    def __init__(self):
        self.inputs: dict = {}
        self.outputs: dict = {}

    def read(self, path: str) -> bytes:
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise CommandError(f"cannot read {path}: {exc.strerror}") from exc
        self.inputs[path] = sha256(data)
        return data

    def emit(self, name: str, content) -> None:
        self.outputs[name] = content.encode() if isinstance(content, str) else content


# --- shared helpers ----------------------------------------------------------------

def _load_records(run: Run, path: str, fmt: str | None):
    if fmt is None:
        fmt = "jsonl" if path.lower().endswith((".jsonl", ".ndjson")) else "csv"
    return parse_records(run.read(path), fmt)


def _selector(args) -> RecordSelector:
    return RecordSelector(upstream_task=args.upstream, downstream_task=args.downstream, shots=args.shots,
                          arch_family=args.arch)


def _selected_points(run: Run, args):
    recs = filter_records(_load_records(run, args.records, args.format), _selector(args))
    if not recs:
        raise CommandError("no records match the selection")
    return points_from_records(recs)


def parse_holdout(text: str):
    """"lo:hi" -> AbsoluteUS, "top:q" -> TopQuantile, "none" -> no holdout."""
    t = text.strip().lower()
    if t == "none":
        return TopQuantile(0.0)
    if t.startswith("top:"):
        return TopQuantile(float(t[4:]))
    lo, sep, hi = t.partition(":")
    if not sep:
        raise ValueError(f"holdout must be 'lo:hi', 'top:q' or 'none', got {text!r}")
    return AbsoluteUS(float(lo), float(hi))


def _holdout_arg(text: str) -> str:
    try:
        parse_holdout(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return text


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _scaled(p: float, kind: ScaleKind) -> str:
    try:
        return repr(scale_accuracy(p, kind))
    except ScaleDomainError:
        return ""


# --- commands ------------------------------------------------------------------------

def cmd_ingest(args, run: Run) -> None:
    recs = _load_records(run, args.records, args.format)
    run.emit("records.csv", serialize_records(recs, "csv"))
    groups = Counter((r.upstream_task, r.downstream_task, r.shots) for r in recs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["upstream_task", "downstream_task", "shots", "count"])
    for key in sorted(groups):
        w.writerow([*key, groups[key]])
    run.emit("summary.csv", buf.getvalue())
    print(f"{len(recs)} records")
    for (us, ds, d), n in sorted(groups.items()):
        print(f"  {us} -> {ds} @ {d} shots: {n}")


def cmd_fit(args, run: Run) -> None:
    points = _selected_points(run, args)
    target = FitTarget(args.target)
    policy = parse_holdout(args.holdout)
    fit, diag = fit_power_law(points, target, policy, FitOptions(error_metric=args.metric), args.bayes)
    fit_set, _ = split_holdout(points, policy)
    hull = upper_hull(points)

    lo, hi = min(p.us for p in points), max(p.us for p in points)
    grid = np.linspace(lo, hi, args.curve_points)
    curve = curve_csv(fit, grid)
    kind = ScaleKind.parse(args.scale)
    if kind is not ScaleKind.LINEAR:
        rows = curve.splitlines()
        out = [rows[0] + ",scaled_us,scaled_predicted_ds"]
        for line in rows[1:]:
            us, ds = (float(v) for v in line.split(","))
            out.append(f"{line},{_scaled(us, kind)},{_scaled(ds, kind)}")
        curve = "\n".join(out) + "\n"

    run.emit("fit.json", fit_to_json(fit))
    run.emit("curve.csv", curve)
    run.emit("hull.csv", hull.to_csv())
    run.emit("fit_points.csv", _points_csv(fit_points_for_target(fit_set, target)))
    run.emit("diagnostics.json", fit_to_json(fit, diag))
    print(f"k={fit.k!r} alpha={fit.alpha!r} e_ir={fit.e_ir!r} saturation={1.0 - fit.e_ir!r}")


def _points_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["us", "ds", "source_id"])
    for p in sorted(points, key=lambda p: (p.us, p.ds, p.source_id)):
        w.writerow([repr(p.us), repr(p.ds), p.source_id])
    return buf.getvalue()


def cmd_sensitivity(args, run: Run) -> None:
    points = _selected_points(run, args)
    sizes = args.sizes or [len(points)]
    rows = sample_size_sweep(points, sizes, args.trials, FitTarget(args.target), parse_holdout(args.holdout),
                             derive_seed(args.seed, "sensitivity"), FitOptions(error_metric=args.metric),
                             args.bayes)
    run.emit("sensitivity.csv", sensitivity_csv(rows))
    for r in rows:
        print(f"n={r.sample_size}: fitting {r.mean_fitting_error:.6g} prediction {r.mean_prediction_error:.6g}"
              f" ({r.n_trials} ok, {r.n_failed} failed)")


def cmd_correlate(args, run: Run) -> None:
    recs = _load_records(run, args.records, args.format)
    if args.tasks:
        tasks = [t for t in args.tasks.split(",") if t]
    else:
        tasks = [args.upstream] + sorted({r.downstream_task for r in recs if r.upstream_task == args.upstream})
    matrix = task_correlation_matrix(recs, args.shots, args.upstream, tasks)
    run.emit("correlation.csv", matrix.to_csv())
    print(f"{len(tasks)}x{len(tasks)} Spearman matrix")


_NOISE = {"none": lambda c: NoNoise(), "one_sided_below": lambda c: OneSidedBelow(float(c["scale"])),
          "symmetric": lambda c: Symmetric(float(c["sigma"]))}
_DENSITY = {"uniform": lambda c: Uniform(),
            "concentrated_high_us": lambda c: ConcentratedHighUS(float(c.get("exponent", 3.0)))}


def _load_config(run: Run, path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(run.read(path))
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise CommandError(f"{path}: config must be a JSON object")
    return cfg


def cmd_simulate(args, run: Run) -> None:
    cfg = _load_config(run, args.config)
    try:
        fit = PowerLawFit(float(cfg["k"]), float(cfg["alpha"]), float(cfg["e_ir"]),
                          float(cfg.get("bayes_error_us", 0.0)))
        noise_cfg = cfg.get("noise", {"kind": "none"})
        density_cfg = cfg.get("density", {"kind": "uniform"})
        spec = GeneratorSpec(
            true_fit=fit, n_points=int(cfg["n_points"]), us_range=tuple(cfg.get("us_range", (0.05, 0.45))),
            noise=_NOISE[noise_cfg["kind"]](noise_cfg), density=_DENSITY[density_cfg["kind"]](density_cfg),
            seed=derive_seed(args.seed, "simulate"),
            **{k: cfg[k] for k in ("upstream_task", "downstream_task", "shots", "arch_family", "id_prefix")
               if k in cfg})
    except KeyError as exc:
        raise CommandError(f"simulate config is missing or has an unknown value for {exc}") from exc
    run.emit("records.csv", serialize_records(generate_cloud(spec), "csv"))
    print(f"{spec.n_points} records")


# --- toylab ---

def _toy_setup(cfg: dict, seed: int):
    def pick(section, cls, exclude=("seed",)):
        sub = cfg.get(section, {})
        names = {f.name for f in fields(cls)} - set(exclude)
        unknown = set(sub) - names
        if unknown:
            raise CommandError(f"unknown {section} config keys: {sorted(unknown)}")
        return sub

    task_spec = SyntheticTaskSpec(**pick("task", SyntheticTaskSpec), seed=derive_seed(seed, "task"))
    model_cfg = {"hidden_dims": list(REFERENCE_HIDDEN), "activation": "relu", "init_scale": REFERENCE_INIT_SCALE}
    model_cfg.update(pick("model", ToyModelSpec, ("seed", "input_dim", "num_classes")))
    model_spec = ToyModelSpec(task_spec.input_dim, tuple(model_cfg["hidden_dims"]), task_spec.num_classes,
                              model_cfg["activation"], float(model_cfg["init_scale"]), derive_seed(seed, "model"))
    train_cfg = {"body_lr": REFERENCE_LR, "head_lr": REFERENCE_LR, "epochs": REFERENCE_EPOCHS}
    train_cfg.update(pick("train", TrainOptions))
    opts = TrainOptions(**train_cfg, seed=derive_seed(seed, "train"))
    shots = [int(d) for d in cfg.get("shots", [10])]
    ds_tasks = list(cfg.get("ds_tasks", ["aligned", "lowlevel", "shifted"]))
    l2 = float(cfg.get("l2", 4096.0))
    return make_task(task_spec, ds_tasks), model_spec, opts, shots, ds_tasks, l2


def cmd_toylab_train(args, run: Run) -> None:
    task, model_spec, opts, *_ = _toy_setup(_load_config(run, args.config), args.seed)
    model, trace = train_upstream(build_model(model_spec), task.upstream_train.x, task.upstream_train.y, opts)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.bin")
        model.save(path)
        with open(path, "rb") as fh:
            run.emit("model.bin", fh.read())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "us_accuracy"])
    for i, (loss, acc) in enumerate(zip(trace.epoch_loss, trace.epoch_us_accuracy), start=1):
        w.writerow([i, repr(loss), repr(acc)])
    run.emit("trace.csv", buf.getvalue())
    print(f"trained {trace.steps} steps, US test accuracy "
          f"{model.accuracy(task.upstream_test.x, task.upstream_test.y):.4f}")


def cmd_toylab_probe(args, run: Run) -> None:
    task, _, _, shots, ds_tasks, l2 = _toy_setup(_load_config(run, args.config), args.seed)
    data = run.read(args.model)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.bin")
        with open(path, "wb") as fh:
            fh.write(data)
        try:
            model = ToyModel.load(path)
        except (ValueError, KeyError) as exc:
            raise CommandError(f"{args.model}: not a toy model checkpoint ({exc})") from exc
    probe_seed = derive_seed(args.seed, "probe")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ds_task", "shots", "layer_index", "ds_accuracy", "converged"])
    for name in ds_tasks:
        for d in shots:
            for r in layer_probe_sweep(model, task.downstream[name], d, l2, probe_seed):
                w.writerow([name, d, r.layer_index, repr(r.ds_accuracy), int(r.converged)])
    run.emit("probe.csv", buf.getvalue())


def cmd_toylab_sweep(args, run: Run) -> None:
    task, model_spec, opts, shots, ds_tasks, l2 = _toy_setup(_load_config(run, args.config), args.seed)
    snaps = head_hyperparam_sweep(model_spec, task, opts, args.axis, args.grid, shots, ds_tasks, l2,
                                  derive_seed(args.seed, "probe"))
    run.emit("sweep.csv", sweep_csv(snaps))
    failed = [s.grid_value for s in snaps if s.failed]
    print(f"{len(snaps)} grid points, {len(failed)} failed" + (f": {failed}" if failed else ""))


# --- driver ----------------------------------------------------------------------------

HANDLERS = {
    "ingest": cmd_ingest, "fit": cmd_fit, "sensitivity": cmd_sensitivity, "correlate": cmd_correlate,
    "simulate": cmd_simulate, "toylab train": cmd_toylab_train, "toylab probe": cmd_toylab_probe,
    "toylab sweep": cmd_toylab_sweep,
}


def _add_selection(p) -> None:
    p.add_argument("records", help="experiment records (CSV or JSONL)")
    p.add_argument("--format", choices=("csv", "jsonl"), default=None, help="default: from the file extension")
    p.add_argument("--upstream", default=None, help="upstream task label")
    p.add_argument("--downstream", default=None, help="downstream task label")
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--arch", default=None, help="architecture family")


def _add_fit_options(p) -> None:
    p.add_argument("--target", choices=("hull", "all"), default="hull")
    p.add_argument("--holdout", type=_holdout_arg, default="0.45:0.50",
                   help="'lo:hi' absolute US band, 'top:q' top quantile, or 'none'")
    p.add_argument("--metric", choices=("mae", "rmse", "rss"), default="mae")
    p.add_argument("--bayes", type=float, default=0.0, help="upstream Bayes error")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transferscale", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, parent=sub):
        p = parent.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("ingest", "validate and normalize a record file")
    p.add_argument("records")
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)

    p = command("fit", "fit the saturating power law to one task pair")
    _add_selection(p)
    _add_fit_options(p)
    p.add_argument("--scale", default="linear", help="add scaled columns to curve.csv: linear, logit, neglog")
    p.add_argument("--curve-points", type=int, default=101)

    p = command("sensitivity", "refit on random subsamples of several sizes")
    _add_selection(p)
    _add_fit_options(p)
    p.add_argument("--sizes", type=_int_list, default=None, help="comma-separated sample sizes (default: all)")
    p.add_argument("--trials", type=int, default=10)

    p = command("correlate", "Spearman matrix of accuracies across tasks")
    p.add_argument("records")
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.add_argument("--upstream", required=True)
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--tasks", default=None, help="comma-separated task labels (default: upstream + all DS tasks)")

    p = command("simulate", "generate a synthetic record cloud from a JSON config")
    p.add_argument("config")

    toy = sub.add_parser("toylab", help="toy mechanism lab").add_subparsers(dest="toy_command", required=True)
    for name in ("train", "probe", "sweep"):
        p = command(name, f"toylab {name}", toy)
        p.add_argument("--config", default=None, help="JSON config (default: reference configuration)")
        if name == "probe":
            p.add_argument("--model", required=True, help="checkpoint written by 'toylab train'")
        if name == "sweep":
            p.add_argument("--axis", choices=("head_wd", "head_lr"), default="head_wd")
            p.add_argument("--grid", type=_float_list, default=[0.0, 0.01, 0.1, 0.5, 1.0, 3.0])

    p = sub.add_parser("replay", help="rerun a command from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="where to write the rerun (default: a temporary directory)")
    return parser


def _options(args) -> dict:
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "command", "toy_command")}
    for key in INPUT_OPTIONS:
        if opts.get(key) is not None:
            opts[key] = os.path.abspath(opts[key])
    return opts


def execute(name: str, options: dict, out: str) -> dict:
    """Run one command and write outputs plus manifest. Returns the manifest."""
    args = argparse.Namespace(**options, out=out)
    run = Run()
    HANDLERS[name](args, run)
    manifest = {
        "command": name,
        "options": options,
        "inputs": dict(sorted(run.inputs.items())),
        "seed": options.get("seed", 0),
        "version": __version__,
        "outputs": {k: sha256(v) for k, v in sorted(run.outputs.items())},
    }
    os.makedirs(out, exist_ok=True)
    for fname, data in run.outputs.items():
        with open(os.path.join(out, fname), "wb") as fh:
            fh.write(data)
    with open(os.path.join(out, MANIFEST), "w") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def replay(manifest_path: str, out: str | None) -> int:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for path, digest in manifest["inputs"].items():
        try:
            with open(path, "rb") as fh:
                if sha256(fh.read()) != digest:
                    raise CommandError(f"input {path} changed since the original run")
        except OSError as exc:
            raise CommandError(f"cannot read input {path}: {exc.strerror}") from exc
    with tempfile.TemporaryDirectory() as tmp:
        target = out or tmp
        fresh = execute(manifest["command"], manifest["options"], target)
        bad = [name for name in sorted(set(manifest["outputs"]) | set(fresh["outputs"]))
               if manifest["outputs"].get(name) != fresh["outputs"].get(name)]
    if bad:
        print(f"replay mismatch: {', '.join(bad)}", file=sys.stderr)
        return 1
    print(f"replay ok: {len(fresh['outputs'])} outputs byte-identical")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out)
        name = args.command if args.command != "toylab" else f"toylab {args.toy_command}"
        execute(name, _options(args), args.out)
        return 0
    except (CommandError, RecordError, PowerLawError, FrontierError, ProbeDataError, TrainingDivergedError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
