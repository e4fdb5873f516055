"""Command line entry point: generate, train, reconstruct, bench, report.

Every command resolves its settings from defaults, then an optional
``--config`` manifest, then explicit flags, and writes the resolved
settings back out as ``<command>.manifest`` in the output directory.
Re-running with ``--config <that manifest>`` reproduces the outputs
byte for byte.

Exit status: 0 success, 1 configuration error, 2 runtime failure,
3 partial results.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from streamspline import __version__, config
from streamspline._io import dumps17, fmt17

log = logging.getLogger("streamspline")

OUT_ENV = "STREAMSPLINE_OUT"
DEFAULT_OUT = "streamspline-out"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

PRESETS = {
    "desk": {"m": 96, "t_star": 60, "counts": [48, 16, 32]},
    "full": {"m": 288, "t_star": 100, "counts": [192, 64, 32]},
}

DEFAULTS = {
    "generate": {
        "preset": "desk", "n_series": 2, "R": 1, "eps": 0.1, "period": 1.0, "seed": 0,
        "phi": [0.7, 0.0, 0.4, 0.7], "innovation_std": [0.31622776601683794, 0.31622776601683794],
    },
    "train": {
        "dataset": None, "arch": "rnn", "variant": "consistent", "eta": None, "series": None,
        "epochs": 200, "patience": 20, "seed": 0, "lr": 0.002, "batch_size": 32,
        "grad_clip": 0.1, "checkpoint": None,
    },
    "reconstruct": {
        "dataset": None, "arch": "myopic", "variant": "consistent", "eta": None,
        "checkpoint": None, "split": "test", "stream_index": None,
    },
    "bench": {
        "grid": "desk", "arch": ["myopic", "rnn"], "variants": ["consistent", "smoothing"],
        "eta": 0.001, "myopic_only": False, "checkpoints": None, "train_missing": False,
        "epochs": 200, "patience": 20, "seed": 0, "workers": 1, "points_per_section": 32,
    },
    "report": {"input": None},
}


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def config_error(msg):
    return CliError(msg, EXIT_CONFIG)


# -- argument parsing ----------------------------------------------------------

def _list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}")
    return parse


def build_parser():
    p = argparse.ArgumentParser(prog="streamspline", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value manifest to start from")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="synthesize a quantized VAR(1) spline dataset")
    common(g)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--m", type=int, help="number of sequences")
    g.add_argument("--t-star", dest="t_star", type=int, help="knots per series")
    g.add_argument("--n-series", dest="n_series", type=int)
    g.add_argument("--R", "--oversampling", dest="R", type=int)
    g.add_argument("--eps", type=float, help="quantizer half-step")
    g.add_argument("--period", type=float)
    g.add_argument("--counts", type=_list(int), help="train,val,test sizes")
    g.add_argument("--phi", type=_list(float), help="row-major VAR(1) matrix")
    g.add_argument("--innovation-std", dest="innovation_std", type=_list(float))

    t = sub.add_parser("train", help="train an rnn policy on a generated dataset")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--arch", choices=["rnn", "myopic", "batch"])
    t.add_argument("--variant", choices=["consistent", "smoothing"])
    t.add_argument("--eta", type=float)
    t.add_argument("--series", type=int, help="train a univariate model on this series only")
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--grad-clip", dest="grad_clip", type=float)
    t.add_argument("--checkpoint", help="where to write the checkpoint")

    r = sub.add_parser("reconstruct", help="reconstruct dataset streams with a policy")
    common(r)
    r.add_argument("--dataset")
    r.add_argument("--arch", choices=["myopic", "rnn", "batch"])
    r.add_argument("--variant", choices=["consistent", "smoothing"])
    r.add_argument("--eta", type=float)
    r.add_argument("--checkpoint")
    r.add_argument("--split", choices=["train", "val", "test", "all"])
    r.add_argument("--stream-index", dest="stream_index", type=int,
                   help="only this stream (position within the split)")

    b = sub.add_parser("bench", help="error-rate decay sweep over (R, eps)")
    common(b)
    b.add_argument("--grid", choices=["desk", "full"])
    b.add_argument("--arch", type=_list(str), help="comma list of myopic,rnn,batch")
    b.add_argument("--variants", type=_list(str))
    b.add_argument("--eta", type=float)
    b.add_argument("--myopic-only", dest="myopic_only", action="store_const", const=True)
    b.add_argument("--checkpoints", help="directory of per-cell rnn checkpoints")
    b.add_argument("--train-missing", dest="train_missing", action="store_const", const=True,
                   help="train rnn checkpoints that are missing")
    b.add_argument("--epochs", type=int)
    b.add_argument("--patience", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--points-per-section", dest="points_per_section", type=int)

    rp = sub.add_parser("report", help="re-emit CSV and charts from a saved report")
    common(rp)
    rp.add_argument("--input", help="report.json written by bench")
    return p


def resolve(args):
    """Defaults < manifest < flags."""
    cmd = args.command
    settings = dict(DEFAULTS[cmd])
    if args.config:
        try:
            loaded = config.load(args.config)
        except OSError as exc:
            raise config_error(f"cannot read config {args.config}: {exc}")
        except config.ConfigError as exc:
            raise config_error(str(exc))
        if loaded.pop("command", cmd) != cmd:
            raise config_error(f"config {args.config} is not a {cmd} manifest")
        loaded.pop("version", None)
        for k, v in loaded.items():
            if k not in settings and not (cmd == "generate" and k in ("m", "t_star", "counts")):
                raise config_error(f"unknown setting {k!r} in {args.config}")
            settings[k] = v
    for k, v in vars(args).items():
        if k in ("command", "config", "out", "verbose") or v is None:
            continue
        settings[k] = v
    return settings


def _as_list(v):
    if v is None:
        return None
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, cmd, settings):
    path = os.path.join(out, f"{cmd}.manifest")
    body = {"command": cmd, "version": __version__}
    body.update(settings)
    config.dump(body, path)
    return path


def _positive(settings, *keys):
    for k in keys:
        v = settings.get(k)
        if v is None or not v > 0:
            raise config_error(f"{k} must be positive (got {v!r})")


# -- commands ----------------------------------------------------------------

def cmd_generate(settings, out):
    from streamspline.acquisition import AcquisitionConfig, Var1Config, make_dataset, write_jsonl

    preset = settings["preset"]
    if preset not in PRESETS:
        raise config_error(f"preset must be one of {sorted(PRESETS)} (got {preset!r})")
    for k in ("m", "t_star"):
        settings.setdefault(k, PRESETS[preset][k])
    _positive(settings, "m", "t_star", "n_series", "R", "eps", "period")
    n = int(settings["n_series"])
    phi = np.asarray(_as_list(settings["phi"]), dtype=float)
    if phi.size != n * n:
        raise config_error(f"phi has {phi.size} entries, n_series={n} needs {n * n}")
    std = np.asarray(_as_list(settings["innovation_std"]), dtype=float)
    if std.size not in (1, n):
        raise config_error(f"innovation_std needs 1 or {n} entries")
    m = int(settings["m"])
    counts = _as_list(settings.get("counts"))
    if counts is None:
        # the preset's proportions; rounding remainder goes to training
        base = PRESETS[preset]["counts"]
        val = int(round(m * base[1] / sum(base)))
        test = int(round(m * base[2] / sum(base)))
        counts = [m - val - test, val, test]
    if len(counts) != 3 or sum(counts) != m or min(counts) < 0:
        raise config_error(f"counts {counts} must be three sizes summing to m={m}")
    settings["counts"] = [int(c) for c in counts]
    try:
        var = Var1Config(phi.reshape(n, n), std, np.zeros(n))
        acq = AcquisitionConfig(n, int(settings["t_star"]), float(settings["period"]), int(settings["R"]),
                                float(settings["eps"]), int(settings["seed"]))
        ds = make_dataset(acq, var, m, settings["counts"])
    except ValueError as exc:
        raise config_error(str(exc))
    path = os.path.join(out, "dataset.jsonl")
    write_jsonl(ds, path)
    _write_manifest(out, "generate", settings)
    print(f"wrote {m} sequences ({n} series, {acq.n_samples} samples each) to {path}")
    return EXIT_OK


def _load_dataset(settings, out):
    from streamspline.acquisition import read_jsonl, select_series, standardize

    path = settings.get("dataset") or os.path.join(out, "dataset.jsonl")
    if not os.path.exists(path):
        raise config_error(f"dataset {path} does not exist (run 'streamspline generate' first)")
    settings["dataset"] = path
    try:
        ds = standardize(read_jsonl(path))
    except (ValueError, KeyError) as exc:
        raise config_error(f"cannot load dataset {path}: {exc}")
    series = settings.get("series")
    if series is not None:
        if not 0 <= series < ds.n_series:
            raise config_error(f"series must be in [0, {ds.n_series})")
        ds = select_series(ds, series)
    return ds


def _eta(settings):
    if settings["variant"] == "smoothing":
        eta = settings.get("eta")
        eta = 0.001 if eta is None else float(eta)
        if not eta > 0:
            raise config_error("eta must be positive")
        settings["eta"] = eta
        return eta
    settings["eta"] = None
    return None


def cmd_train(settings, out):
    from streamspline.rnn import checkpoint_save
    from streamspline.training import TrainingConfig, TrainingDivergence, train

    if settings["arch"] != "rnn":
        print(f"nothing to train: the {settings['arch']} policy has no parameters")
        return EXIT_OK
    eta = _eta(settings)
    _positive(settings, "lr", "batch_size", "grad_clip")
    if settings["epochs"] < 0:
        raise config_error("epochs must be >= 0")
    ds = _load_dataset(settings, out)
    cfg = TrainingConfig(learning_rate=float(settings["lr"]), grad_clip_norm=float(settings["grad_clip"]),
                         batch_size=int(settings["batch_size"]), epochs=int(settings["epochs"]),
                         patience=int(settings["patience"]), seed=int(settings["seed"]))

    def progress(epoch, tr, val, myo):
        log.info("epoch %d  train %.5f  val %.5f  (myopic %.5f)", epoch, tr, val, myo)

    try:
        res = train(settings["variant"], ds.subset("train"), ds.subset("val"), cfg, eta=eta, progress=progress)
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}; last losses {exc.history}", file=sys.stderr)
        return EXIT_RUNTIME
    suffix = "" if settings.get("series") is None else f"_series{settings['series']}"
    ckpt = settings.get("checkpoint") or os.path.join(out, f"rnn_{settings['variant']}{suffix}.json")
    settings["checkpoint"] = ckpt
    res.params.meta.update({"dataset": os.path.basename(settings["dataset"]), "seed": cfg.seed})
    checkpoint_save(res.params, ckpt)
    curve = os.path.splitext(ckpt)[0] + "_curve.csv"
    with open(curve, "w") as fh:
        fh.write("epoch,train_cost,val_cost\n")
        for i, (a, b) in enumerate(zip(res.train_curve, res.val_curve), 1):
            fh.write(f"{i},{fmt17(a)},{fmt17(b)}\n")
    _write_manifest(out, "train", settings)
    print(f"best validation cost per section {res.best_val:.6g} at epoch {res.best_epoch} "
          f"(myopic {res.myopic_val:.6g}); checkpoint {ckpt}")
    return EXIT_OK


def trajectory_record(m, traj, observations):
    from streamspline.policy import consistency_check

    rep = consistency_check(traj.spline, observations)
    return {
        "m": m,
        "spec": traj.spec,
        "costs": traj.costs,
        "total_cost": traj.total_cost,
        "spline": traj.spline.to_dict(),
        "consistency": {"ok": rep.ok, "max_violation": rep.max_violation},
    }


def cmd_reconstruct(settings, out):
    from streamspline.batch import SolverError, batch_solve
    from streamspline.policy import PolicySpec, reconstruct_stream
    from streamspline.rnn import CheckpointError, checkpoint_load

    eta = _eta(settings)
    arch = settings["arch"]
    ds = _load_dataset(settings, out)
    params = None
    if arch == "rnn":
        ckpt = settings.get("checkpoint")
        if not ckpt or not os.path.exists(ckpt):
            raise config_error(f"rnn reconstruction needs an existing --checkpoint (got {ckpt!r})")
        try:
            params = checkpoint_load(ckpt, n_series=ds.n_series, variant=settings["variant"])
        except CheckpointError as exc:
            raise config_error(str(exc))
    seqs = ds.sequences if settings["split"] == "all" else ds.subset(settings["split"])
    idx = settings.get("stream_index")
    if idx is not None:
        if not 0 <= idx < len(seqs):
            raise config_error(f"stream_index {idx} outside [0, {len(seqs)})")
        seqs = [seqs[idx]]
    path = os.path.join(out, "trajectories.jsonl")
    failed = 0
    with open(path, "w") as fh:
        for seq in seqs:
            obs = seq.observations()
            try:
                if arch == "batch":
                    traj = batch_solve(settings["variant"], obs, eta=eta)
                else:
                    traj = reconstruct_stream(PolicySpec(arch, settings["variant"], eta, params), obs)
            except SolverError as exc:
                print(f"stream {seq.m}: {exc}", file=sys.stderr)
                return EXIT_RUNTIME
            rec = trajectory_record(seq.m, traj, obs)
            if settings["variant"] == "consistent" and not rec["consistency"]["ok"]:
                failed += 1
            fh.write(dumps17(rec) + "\n")
            print(f"stream {seq.m}: cost {traj.total_cost:.6g}  "
                  f"max interval violation {rec['consistency']['max_violation']:.3g}")
    _write_manifest(out, "reconstruct", settings)
    if failed:
        print(f"{failed} consistent reconstructions failed the consistency check", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _print_fits(report):
    for (a, v, sweep), f in sorted(report.fits.items()):
        print(f"{a:7s} {v:10s} slope vs {sweep:3s}: {f.slope:+.4f} ± {f.slope_std:.4f}")
    for flag in report.flags:
        print(f"flag: {flag}", file=sys.stderr)


def cmd_bench(settings, out):
    from streamspline.acquisition import Var1Config
    from streamspline.bench import BenchPolicy, DataSetup, DecayGrid, emit_report, run_decay_experiment
    from streamspline.training import TrainingConfig

    grids = {"desk": DecayGrid.desk, "full": DecayGrid.full}
    if settings["grid"] not in grids:
        raise config_error(f"grid must be desk or full (got {settings['grid']!r})")
    grid = grids[settings["grid"]]()
    archs = ["myopic"] if settings["myopic_only"] else _as_list(settings["arch"])
    variants = _as_list(settings["variants"])
    for a in archs:
        if a not in ("myopic", "rnn", "batch"):
            raise config_error(f"unknown architecture {a!r}")
    for v in variants:
        if v not in ("consistent", "smoothing"):
            raise config_error(f"unknown variant {v!r}")
    _positive(settings, "eta", "workers", "points_per_section")
    settings["arch"] = archs
    preset = PRESETS[settings["grid"]]
    setup = DataSetup(m=preset["m"], t_star=preset["t_star"], counts=tuple(preset["counts"]),
                      seed=int(settings["seed"]), var=Var1Config.coupled())
    policies = [BenchPolicy(a, v, settings["eta"] if v == "smoothing" else None)
                for a in archs for v in variants]
    train_cfg = None
    if settings["train_missing"]:
        train_cfg = TrainingConfig(epochs=int(settings["epochs"]), patience=int(settings["patience"]),
                                   seed=int(settings["seed"]))
    ckdir = settings.get("checkpoints")
    if "rnn" in archs and ckdir is None and train_cfg is not None:
        ckdir = os.path.join(out, "checkpoints")
    report = run_decay_experiment(grid, policies, setup, ckdir, train_cfg,
                                  int(settings["points_per_section"]), int(settings["workers"]))
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(dumps17(report.to_dict(), indent=1) + "\n")
    files = emit_report(report, os.path.join(out, "decay.csv"))
    _write_manifest(out, "bench", settings)
    _print_fits(report)
    print("wrote " + ", ".join(files))
    return EXIT_OK if report.complete else EXIT_PARTIAL


def cmd_report(settings, out):
    from streamspline.bench import DecayReport, emit_report

    path = settings.get("input") or os.path.join(out, "report.json")
    if not os.path.exists(path):
        raise config_error(f"report {path} does not exist (run 'streamspline bench' first)")
    settings["input"] = path
    try:
        with open(path) as fh:
            report = DecayReport.from_dict(json.load(fh))
    except (ValueError, KeyError) as exc:
        raise config_error(f"cannot parse report {path}: {exc}")
    files = emit_report(report, os.path.join(out, "decay.csv"))
    _print_fits(report)
    print("wrote " + ", ".join(files))
    return EXIT_OK if report.complete else EXIT_PARTIAL


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here that is a configuration error
        return EXIT_CONFIG if exc.code == 2 else exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        out = _out_dir(args)
        return COMMANDS[args.command](settings, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
